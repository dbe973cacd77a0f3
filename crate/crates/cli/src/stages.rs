//! One function per stage. Each reads its inputs, calls into the core crate
//! and writes its outputs through [`Outputs`].

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use umrm_core::align::{
    bon_sweep, divergence_point, fmt_sig6, ppo_run, range_margin, BonConfig, PoolStats, PpoConfig, PpoOutcome,
    TrajectoryLog,
};
use umrm_core::checkpoint::{self, load_checkpoint, model_hash};
use umrm_core::ensemble::{EnsembleManifest, EnsembleRm};
use umrm_core::merge::{fit_merge, MergeFitConfig};
use umrm_core::prefs::{
    bt_train, eval_accuracy, generate_preferences, generate_prompts, generate_sft_corpus, sft_train, GenConfig,
    PreferenceDataset, ResponseSampler, SuccessorTable, SyntheticGold, TrainConfig,
};
use umrm_core::rng::{derive_seed, indexed_seed};
use umrm_core::{upcycle, Error as CoreError, HeadKind, RewardModel, RewardScorer, Token, UpcycleConfig};

use crate::config::*;
use crate::error::CliError;
use crate::manifest::Outputs;
use crate::report;

pub fn run_stage(stage: &Stage, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    for p in stage.inputs() {
        if !p.exists() {
            return Err(CliError::MissingInput(p.display().to_string()));
        }
    }
    match stage {
        Stage::GenData(p) => gen_data(p, seed, out),
        Stage::Sft(p) => sft(p, seed, out),
        Stage::TrainRm(p) => train_rm(p, seed, out),
        Stage::Upcycle(p) => upcycle_stage(p, seed, out),
        Stage::TrainMoe(p) => train_moe(p, seed, out),
        Stage::Merge(p) => merge(p, seed, out),
        Stage::TrainEnsemble(p) => train_ensemble(p, seed, out),
        Stage::Bon(p) => bon(p, seed, out),
        Stage::Ppo(p) => ppo(p, seed, out),
        Stage::EvalAcc(p) => eval_acc(p, out),
        Stage::Report(p) => report::report(p, out),
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> Result<RewardModel, CliError> {
    Ok(load_checkpoint(path).map_err(CoreError::from)?.model)
}

fn load_dataset(path: &Path) -> Result<PreferenceDataset, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(PreferenceDataset::read_jsonl(std::io::BufReader::new(f))?)
}

fn load_gold(path: &Path) -> Result<SyntheticGold, CliError> {
    Ok(SyntheticGold::from_json(&read_text(path)?)?)
}

/// One JSON token array per line.
pub fn token_lines_to_string(seqs: &[Vec<Token>]) -> String {
    let mut s = String::new();
    for q in seqs {
        s.push_str(&serde_json::to_string(q).expect("token arrays serialize"));
        s.push('\n');
    }
    s
}

pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<Token>>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CoreError::Jsonl { line: i + 1, source })?);
    }
    Ok(out)
}

fn save_model(out: &mut Outputs, name: &str, model: &RewardModel) -> Result<(), CliError> {
    out.write(name, &checkpoint::to_bytes(model, None))?;
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", fmt_sig6(*l)));
    }
    s
}

fn train_cfg(p: &OptimParams, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: p.steps,
        batch: p.batch,
        lr: p.lr,
        seed,
    }
}

/// A single reward model or an ensemble, chosen by file extension.
pub enum Scorer {
    Single(RewardModel),
    Ensemble(EnsembleRm),
}

impl RewardScorer for Scorer {
    fn score(&self, prompt: &[Token], response: &[Token]) -> umrm_core::Result<f64> {
        match self {
            Scorer::Single(m) => m.reward_score(prompt, response),
            Scorer::Ensemble(e) => e.ensemble_score(prompt, response),
        }
    }
}

pub fn load_scorer(path: &Path) -> Result<Scorer, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let m: EnsembleManifest = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let members = m
            .members
            .iter()
            .map(|p| load_model(&base.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scorer::Ensemble(EnsembleRm::new(members, m.mode, m.k_unc)?))
    } else {
        let m = load_model(path)?;
        if m.head_kind() != HeadKind::Reward {
            return Err(CoreError::WrongHead {
                expected: HeadKind::Reward,
                found: m.head_kind(),
            }
            .into());
        }
        Ok(Scorer::Single(m))
    }
}

// ---------------------------------------------------------------------------
// Stages

fn gen_data(p: &GenDataParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let mc = p.model.with_seed(0);
    mc.validate()?;
    let n_content = mc.n_content();
    let gold = SyntheticGold::generate(derive_seed(seed, "gold"), n_content, mc.eos_id(), &p.gold)?;

    let train_cfg = GenConfig {
        n_prompts: p.train.n_prompts,
        prompt_len: p.prompt_len,
        response_len: p.response_len,
        pairs_per_prompt: p.train.pairs_per_prompt,
        label_temperature: p.train.label_temperature,
        seed: derive_seed(seed, "train-pairs"),
    };
    train_cfg.validate(mc.max_seq)?;
    let test_cfg = GenConfig {
        n_prompts: p.test_prompts,
        pairs_per_prompt: 1,
        label_temperature: 0.0,
        seed: derive_seed(seed, "test-pairs"),
        ..train_cfg.clone()
    };

    let policy = p.policy.as_deref().map(load_model).transpose()?;
    let sampler = match &policy {
        Some(m) => {
            if m.config().vocab_size != mc.vocab_size {
                return Err(CoreError::VocabMismatch(m.config().vocab_size, mc.vocab_size).into());
            }
            ResponseSampler::Policy {
                model: m,
                temperature: p.policy_temperature,
            }
        }
        None => ResponseSampler::Uniform { n_content },
    };
    let train = generate_preferences(&gold, sampler, n_content, &train_cfg)?;
    let test = if p.test_prompts > 0 {
        generate_preferences(&gold, sampler, n_content, &test_cfg)?
    } else {
        PreferenceDataset::default()
    };
    let sft_cfg = GenConfig {
        seed: derive_seed(seed, "sft-corpus"),
        ..train_cfg.clone()
    };
    let language = p
        .sft_branching
        .map(|b| SuccessorTable::generate(derive_seed(seed, "language"), n_content, b))
        .transpose()?;
    let corpus_sampler = match &language {
        Some(t) => ResponseSampler::Language(t),
        None => ResponseSampler::Uniform { n_content },
    };
    let corpus = generate_sft_corpus(p.sft_sequences, corpus_sampler, n_content, mc.bos_id(), mc.eos_id(), &sft_cfg)?;
    let prompts = generate_prompts(p.rl_prompts, n_content, p.prompt_len, derive_seed(seed, "rl-prompts"));

    let agree = if train.is_empty() {
        0.0
    } else {
        train.pairs.iter().filter(|q| q.gold_margin > 0.0).count() as f64 / train.len() as f64
    };
    out.write("gold.json", gold.to_json()?.as_bytes())?;
    out.write("train.jsonl", train.to_jsonl()?.as_bytes())?;
    out.write("test.jsonl", test.to_jsonl()?.as_bytes())?;
    out.write("sft.jsonl", token_lines_to_string(&corpus).as_bytes())?;
    out.write("prompts.jsonl", token_lines_to_string(&prompts).as_bytes())?;
    if let Some(t) = &language {
        out.write_json("language.json", t)?;
    }
    out.write_json(
        "data_summary.json",
        &json!({
            "train_pairs": train.len(),
            "test_pairs": test.len(),
            "sft_sequences": corpus.len(),
            "rl_prompts": prompts.len(),
            "train_label_gold_agreement": agree,
        }),
    )?;
    Ok(())
}

fn sft(p: &SftParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let corpus = read_token_lines(&p.corpus)?;
    let mut policy = RewardModel::new(p.model.with_seed(derive_seed(seed, "sft-init")), HeadKind::Lm)?;
    let losses = sft_train(&mut policy, &corpus, &train_cfg(&p.train, derive_seed(seed, "sft")))?;
    save_model(out, "policy.umrm", &policy)?;
    out.write("sft_loss.csv", loss_csv(&losses).as_bytes())?;
    Ok(())
}

fn finish_rm(out: &mut Outputs, rm: &RewardModel, data: &PreferenceDataset, losses: &[f64]) -> Result<(), CliError> {
    let acc = eval_accuracy(rm, data)?;
    save_model(out, "rm.umrm", rm)?;
    out.write("train_loss.csv", loss_csv(losses).as_bytes())?;
    out.write_json(
        "train_summary.json",
        &json!({
            "train_accuracy": acc,
            "initial_loss": losses.first(),
            "final_loss": losses.last(),
            "param_count": rm.param_count(),
            "moe": rm.is_moe(),
        }),
    )?;
    Ok(())
}

fn train_rm(p: &TrainRmParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_dataset(&p.data)?;
    let mut rm = match (&p.init, &p.model) {
        (Some(path), _) => load_model(path)?,
        (None, Some(m)) => RewardModel::new(m.with_seed(derive_seed(seed, "rm-init")), HeadKind::Reward)?,
        (None, None) => return Err(CliError::Config("train-rm needs `model` or `init`".into())),
    };
    let losses = bt_train(&mut rm, &data, &train_cfg(&p.train, derive_seed(seed, "rm-train")))?;
    finish_rm(out, &rm, &data, &losses)
}

fn upcycle_stage(p: &UpcycleParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let dense = load_model(&p.input)?;
    let cfg = UpcycleConfig {
        n_experts: p.n_experts,
        top_k: p.top_k,
        noise_scale: p.noise_scale,
        seed: derive_seed(seed, "expert-noise"),
    };
    let moe = upcycle(&dense, &cfg)?;
    save_model(out, "moe.umrm", &moe)?;
    Ok(())
}

fn train_moe(p: &TrainMoeParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_dataset(&p.data)?;
    let mut rm = load_model(&p.input)?;
    if !rm.is_moe() {
        return Err(CoreError::NotMoe.into());
    }
    let losses = bt_train(&mut rm, &data, &train_cfg(&p.train, derive_seed(seed, "moe-train")))?;
    finish_rm(out, &rm, &data, &losses)
}

fn merge(p: &MergeParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let moe = load_model(&p.input)?;
    let data = load_dataset(&p.data)?;
    let cfg = MergeFitConfig {
        lambda: p.lambda,
        steps: p.fit.steps,
        batch: p.fit.batch,
        lr: p.fit.lr,
        seed: derive_seed(seed, "merge-fit"),
    };
    let fit = fit_merge(&moe, &data, &cfg)?;
    out.write(
        "merged.umrm",
        &checkpoint::to_bytes(&fit.merged.model, Some(&fit.merged.provenance)),
    )?;
    let mut csv = String::from("step,loss,constraint_error\n");
    for (i, (l, c)) in fit.losses.iter().zip(&fit.constraint_error).enumerate() {
        csv.push_str(&format!("{i},{},{}\n", fmt_sig6(*l), fmt_sig6(*c)));
    }
    out.write("merge_fit.csv", csv.as_bytes())?;
    out.write_json(
        "merge_summary.json",
        &json!({
            "provenance": fit.merged.provenance,
            "logits": fit.params.logits,
            "source_hash": model_hash(&moe),
        }),
    )?;
    Ok(())
}

fn train_ensemble(p: &TrainEnsembleParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    if p.members < 2 {
        return Err(CliError::Config("an ensemble needs at least two members".into()));
    }
    let data = load_dataset(&p.data)?;
    let init = derive_seed(seed, "ensemble-init");
    let batches = derive_seed(seed, "ensemble-train");
    let mut names = Vec::with_capacity(p.members);
    let mut accs = Vec::with_capacity(p.members);
    for i in 0..p.members {
        let mut rm = RewardModel::new(p.model.with_seed(indexed_seed(init, i as u64)), HeadKind::Reward)?;
        bt_train(&mut rm, &data, &train_cfg(&p.train, indexed_seed(batches, i as u64)))?;
        accs.push(eval_accuracy(&rm, &data)?);
        let name = format!("member{i}.umrm");
        save_model(out, &name, &rm)?;
        names.push(name);
    }
    let manifest = EnsembleManifest {
        members: names,
        mode: p.mode,
        k_unc: p.k_unc,
    };
    out.write_json("ensemble.json", &manifest)?;
    out.write_json("ensemble_summary.json", &json!({ "member_train_accuracy": accs }))?;
    Ok(())
}

/// Best-of-N results beyond the CSV: the sample pool statistics and the
/// standardized proxy-minus-gold gap of the picks at each N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonSummary {
    pub pool: PoolStats,
    pub gaps: Vec<(usize, f64)>,
    pub prompts: usize,
}

fn bon(p: &BonParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let policy = load_model(&p.policy)?;
    let scorer = load_scorer(&p.rm)?;
    let gold = load_gold(&p.gold)?;
    let prompts = read_token_lines(&p.prompts)?;
    let cfg = BonConfig {
        ns: p.ns.clone(),
        temperature: p.temperature,
        max_response_len: p.max_response_len,
        seed: derive_seed(seed, "bon"),
        nested: p.nested,
    };
    let sweep = bon_sweep(&policy, &scorer, &gold, &prompts, &cfg)?;
    out.write("bon.csv", sweep.to_csv().as_bytes())?;
    let summary = BonSummary {
        pool: sweep.pool,
        gaps: sweep.rows.iter().map(|r| (r.n, sweep.gap(r.n).expect("row exists"))).collect(),
        prompts: prompts.len(),
    };
    out.write_json("bon_summary.json", &summary)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoSummary {
    pub outcome: String,
    pub abort_step: Option<usize>,
    pub steps_logged: usize,
    pub divergence_step: Option<usize>,
    pub final_kl: Option<f64>,
    pub max_gold: Option<f64>,
}

fn ppo(p: &PpoParams, seed: u64, out: &mut Outputs) -> Result<(), CliError> {
    let mut policy = load_model(&p.policy)?;
    let scorer = load_scorer(&p.rm)?;
    let gold = load_gold(&p.gold)?;
    let prompts = read_token_lines(&p.prompts)?;
    let cfg = PpoConfig {
        steps: p.steps,
        lr: p.lr,
        seed: derive_seed(seed, "ppo"),
        beta: p.beta,
        clip_eps: p.clip_eps,
        prompts_per_step: p.prompts_per_step,
        samples_per_prompt: p.samples_per_prompt,
        kl_abort_threshold: p.kl_abort_threshold,
        temperature: p.temperature,
        max_response_len: p.max_response_len,
    };
    let run = ppo_run(&mut policy, &scorer, &gold, &prompts, &cfg)?;
    out.write("trajectory.csv", run.log.to_csv().as_bytes())?;
    save_model(out, "policy.umrm", &policy)?;
    let (outcome, abort_step) = match run.outcome {
        PpoOutcome::Completed => ("completed".to_string(), None),
        PpoOutcome::KlAbort { step, .. } => ("kl_abort".to_string(), Some(step)),
    };
    let summary = PpoSummary {
        outcome,
        abort_step,
        steps_logged: run.log.len(),
        divergence_step: detect(&run.log, &p.divergence),
        final_kl: run.log.records.last().map(|r| r.kl),
        max_gold: run.log.gold().into_iter().reduce(f64::max),
    };
    out.write_json("ppo_summary.json", &summary)?;
    Ok(())
}

pub fn detect(log: &TrajectoryLog, d: &DivergenceParams) -> Option<usize> {
    divergence_point(log, d.window, range_margin(log, d.margin_frac), d.patience)
}

fn eval_acc(p: &EvalAccParams, out: &mut Outputs) -> Result<(), CliError> {
    let scorer = load_scorer(&p.rm)?;
    let data = load_dataset(&p.data)?;
    let acc = eval_accuracy(&scorer, &data)?;
    out.write_json("accuracy.json", &json!({ "accuracy": acc, "pairs": data.len() }))?;
    Ok(())
}
