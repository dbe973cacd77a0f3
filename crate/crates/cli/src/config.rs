//! Strict JSON experiment configuration.
//!
//! A config names one stage and its parameters:
//!
//! ```json
//! { "seed": 22, "stage": { "upcycle": { "input": "rm/rm.umrm", "n_experts": 4 } } }
//! ```
//!
//! Unknown keys anywhere are rejected. Stage parameters carry no seeds of their
//! own; every random stream is derived from the root seed by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use umrm_core::ensemble::EnsembleMode;
use umrm_core::prefs::GoldConfig;
use umrm_core::TransformerConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData(GenDataParams),
    Sft(SftParams),
    TrainRm(TrainRmParams),
    Upcycle(UpcycleParams),
    TrainMoe(TrainMoeParams),
    Merge(MergeParams),
    TrainEnsemble(TrainEnsembleParams),
    Bon(BonParams),
    Ppo(PpoParams),
    EvalAcc(EvalAccParams),
    Report(ReportParams),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData(_) => "gen-data",
            Stage::Sft(_) => "sft",
            Stage::TrainRm(_) => "train-rm",
            Stage::Upcycle(_) => "upcycle",
            Stage::TrainMoe(_) => "train-moe",
            Stage::Merge(_) => "merge",
            Stage::TrainEnsemble(_) => "train-ensemble",
            Stage::Bon(_) => "bon",
            Stage::Ppo(_) => "ppo",
            Stage::EvalAcc(_) => "eval-acc",
            Stage::Report(_) => "report",
        }
    }

    /// Input files the stage reads.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Stage::GenData(p) => p.policy.iter().map(PathBuf::as_path).collect(),
            Stage::Sft(p) => vec![&p.corpus],
            Stage::TrainRm(p) => {
                let mut v: Vec<&Path> = vec![&p.data];
                v.extend(p.init.as_deref());
                v
            }
            Stage::Upcycle(p) => vec![&p.input],
            Stage::TrainMoe(p) => vec![&p.input, &p.data],
            Stage::Merge(p) => vec![&p.input, &p.data],
            Stage::TrainEnsemble(p) => vec![&p.data],
            Stage::Bon(p) => vec![&p.policy, &p.rm, &p.gold, &p.prompts],
            Stage::Ppo(p) => vec![&p.policy, &p.rm, &p.gold, &p.prompts],
            Stage::EvalAcc(p) => vec![&p.rm, &p.data],
            Stage::Report(p) => p
                .runs
                .iter()
                .flat_map(|r| [&r.accuracy, &r.bon, &r.bon_summary, &r.trajectory])
                .flatten()
                .map(PathBuf::as_path)
                .collect(),
        }
    }
}

/// Model architecture without the seed, which is derived per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        let c = TransformerConfig::default();
        Self {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq: c.max_seq,
        }
    }
}

impl ModelParams {
    pub fn with_seed(&self, seed: u64) -> TransformerConfig {
        TransformerConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimParams {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for OptimParams {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 32,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairParams {
    pub n_prompts: usize,
    pub pairs_per_prompt: usize,
    pub label_temperature: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            n_prompts: 512,
            pairs_per_prompt: 1,
            label_temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataParams {
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub gold: GoldConfig,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: (usize, usize),
    #[serde(default = "default_response_len")]
    pub response_len: (usize, usize),
    #[serde(default)]
    pub train: PairParams,
    /// Held-out pairs, labeled by argmax of the gold reward.
    #[serde(default = "default_test_prompts")]
    pub test_prompts: usize,
    #[serde(default = "default_sft_sequences")]
    pub sft_sequences: usize,
    /// Successors per content token in the SFT corpus language; uniform
    /// responses when absent.
    #[serde(default)]
    pub sft_branching: Option<usize>,
    /// Prompts reserved for Best-of-N and PPO.
    #[serde(default = "default_rl_prompts")]
    pub rl_prompts: usize,
    /// Draw pair responses from this policy checkpoint instead of uniformly.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default = "one")]
    pub policy_temperature: f64,
}

fn default_prompt_len() -> (usize, usize) {
    (2, 6)
}
fn default_response_len() -> (usize, usize) {
    (4, 12)
}
fn default_test_prompts() -> usize {
    512
}
fn default_sft_sequences() -> usize {
    2000
}
fn default_rl_prompts() -> usize {
    64
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftParams {
    #[serde(default)]
    pub model: ModelParams,
    pub corpus: PathBuf,
    #[serde(default)]
    pub train: OptimParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRmParams {
    /// Fresh model with this architecture; ignored when `init` is set.
    #[serde(default)]
    pub model: Option<ModelParams>,
    /// Continue training a reward-model checkpoint.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub data: PathBuf,
    #[serde(default)]
    pub train: OptimParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpcycleParams {
    pub input: PathBuf,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub noise_scale: f64,
}

fn default_experts() -> usize {
    4
}
fn default_top_k() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMoeParams {
    pub input: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub train: OptimParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeParams {
    pub input: PathBuf,
    pub data: PathBuf,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_merge_fit")]
    pub fit: OptimParams,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_merge_fit() -> OptimParams {
    OptimParams {
        steps: 50,
        batch: 32,
        lr: 0.05,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEnsembleParams {
    #[serde(default)]
    pub model: ModelParams,
    pub data: PathBuf,
    #[serde(default)]
    pub train: OptimParams,
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_mode")]
    pub mode: EnsembleMode,
    #[serde(default = "one")]
    pub k_unc: f64,
}

fn default_members() -> usize {
    4
}
fn default_mode() -> EnsembleMode {
    EnsembleMode::Mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonParams {
    pub policy: PathBuf,
    /// Reward-model checkpoint or ensemble manifest (`.json`).
    pub rm: PathBuf,
    pub gold: PathBuf,
    pub prompts: PathBuf,
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "default_max_response")]
    pub max_response_len: usize,
    #[serde(default = "yes")]
    pub nested: bool,
}

fn default_ns() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64, 128]
}
fn default_max_response() -> usize {
    12
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoParams {
    pub policy: PathBuf,
    pub rm: PathBuf,
    pub gold: PathBuf,
    pub prompts: PathBuf,
    #[serde(default = "default_ppo_steps")]
    pub steps: usize,
    #[serde(default = "default_ppo_lr")]
    pub lr: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
    #[serde(default = "default_prompts_per_step")]
    pub prompts_per_step: usize,
    #[serde(default = "default_samples_per_prompt")]
    pub samples_per_prompt: usize,
    #[serde(default = "default_kl_abort")]
    pub kl_abort_threshold: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "default_max_response")]
    pub max_response_len: usize,
    #[serde(default)]
    pub divergence: DivergenceParams,
}

fn default_ppo_steps() -> usize {
    300
}
fn default_ppo_lr() -> f64 {
    1e-4
}
fn default_beta() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    0.2
}
fn default_prompts_per_step() -> usize {
    8
}
fn default_samples_per_prompt() -> usize {
    4
}
fn default_kl_abort() -> f64 {
    150.0
}

/// Divergence detection; the margin is a fraction of the gold trajectory's
/// range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceParams {
    pub window: usize,
    pub margin_frac: f64,
    pub patience: usize,
}

impl Default for DivergenceParams {
    fn default() -> Self {
        Self {
            window: 10,
            margin_frac: 0.02,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAccParams {
    /// Reward-model checkpoint or ensemble manifest (`.json`).
    pub rm: PathBuf,
    pub data: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportParams {
    pub runs: Vec<RunEntry>,
    #[serde(default)]
    pub divergence: DivergenceParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub label: String,
    /// Total experts before merging; 1 for a dense model.
    pub experts: usize,
    #[serde(default)]
    pub accuracy: Option<PathBuf>,
    #[serde(default)]
    pub bon: Option<PathBuf>,
    #[serde(default)]
    pub bon_summary: Option<PathBuf>,
    #[serde(default)]
    pub trajectory: Option<PathBuf>,
}

/// Reads a config, applies `key.path=value` overrides and an optional seed
/// override, then validates it against the schema.
pub fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(s) = seed {
        value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?
            .insert("seed".into(), Value::from(s));
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Sets `a.b.c=value`. The value is parsed as JSON when possible, otherwise
/// taken as a string. Intermediate objects must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("override {key}: no key {part}")))?;
    }
    Err(CliError::Config(format!("override {spec:?} has an empty key")))
}
