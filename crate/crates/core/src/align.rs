//! Best-of-N selection, KL-shaped PPO and proxy/gold divergence detection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, RewardModel, Token};
use crate::prefs::SyntheticGold;
use crate::rng;
use crate::sampling::sample_response;
use crate::score::RewardScorer;
use crate::tensor::{Adam, AdamConfig, Graph};

/// Index of the largest score; ties go to the earliest.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `n` i.i.d. responses from one seeded stream: the first `k` samples for a
/// given seed are the same for every `n >= k`.
pub fn sample_n(
    policy: &RewardModel,
    prompt: &[Token],
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    let mut r = rng::from_seed(seed);
    (0..n)
        .map(|_| sample_response(policy, prompt, max_len, temperature, &mut r))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BonPick {
    pub index: usize,
    pub response: Vec<Token>,
    pub scores: Vec<f64>,
}

/// Selects, among `candidates`, the response with the highest score.
pub fn select_best<S: RewardScorer + ?Sized>(
    scorer: &S,
    prompt: &[Token],
    candidates: Vec<Vec<Token>>,
) -> Result<BonPick> {
    let scores = candidates
        .iter()
        .map(|c| scorer.score(prompt, c))
        .collect::<Result<Vec<_>>>()?;
    let index = argmax_first(&scores).ok_or_else(|| Error::InvalidConfig("N must be at least 1".into()))?;
    let response = candidates.into_iter().nth(index).expect("index in range");
    Ok(BonPick {
        index,
        response,
        scores,
    })
}

pub fn best_of_n<S: RewardScorer + ?Sized>(
    policy: &RewardModel,
    scorer: &S,
    prompt: &[Token],
    n: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<BonPick> {
    if n == 0 {
        return Err(Error::InvalidConfig("N must be at least 1".into()));
    }
    let candidates = sample_n(policy, prompt, n, temperature, max_len, seed)?;
    select_best(scorer, prompt, candidates)
}

/// `r - β·(log π(a|q) - log π_init(a|q))`.
pub fn shaped_reward(r: f64, logp_policy: f64, logp_init: f64, beta: f64) -> f64 {
    r - beta * (logp_policy - logp_init)
}

/// Single-sample KL estimate: summed log-ratio over the realized response.
pub fn sequence_kl(policy: &RewardModel, init: &RewardModel, prompt: &[Token], response: &[Token]) -> Result<f64> {
    let (a, b) = (policy.config().vocab_size, init.config().vocab_size);
    if a != b {
        return Err(Error::VocabMismatch(a, b));
    }
    Ok(policy.response_log_prob(prompt, response)? - init.response_log_prob(prompt, response)?)
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub proxy_reward: f64,
    pub gold_reward: f64,
    pub kl: f64,
    pub policy_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

pub const TRAJECTORY_HEADER: &str = "step,proxy_reward,gold_reward,kl,policy_loss";
pub const BON_HEADER: &str = "n,mean_proxy,mean_gold,win_rate";

/// Formats with six significant digits, `%g` style.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        return format_sci(v);
    };
    trim_zeros(&s)
}

fn format_sci(v: f64) -> String {
    let s = format!("{v:.5e}");
    let (mant, exp) = s.split_once('e').expect("scientific format");
    format!("{}e{exp}", trim_zeros(mant))
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn parse_csv_rows(text: &str, header: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let got = lines.next().unwrap_or("");
    if got.trim() != header {
        return Err(Error::InvalidConfig(format!("expected CSV header `{header}`, got `{got}`")));
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let vals: Vec<f64> = l
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("bad CSV value in `{l}`: {e}")))?;
            if vals.len() != width {
                return Err(Error::InvalidConfig(format!("expected {width} columns in `{l}`")));
            }
            Ok(vals)
        })
        .collect()
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn proxy(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.proxy_reward).collect()
    }

    pub fn gold(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gold_reward).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt_sig6(r.proxy_reward),
                fmt_sig6(r.gold_reward),
                fmt_sig6(r.kl),
                fmt_sig6(r.policy_loss)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let records = parse_csv_rows(text, TRAJECTORY_HEADER)?
            .into_iter()
            .map(|v| TrajectoryRecord {
                step: v[0] as usize,
                proxy_reward: v[1],
                gold_reward: v[2],
                kl: v[3],
                policy_loss: v[4],
            })
            .collect();
        Ok(Self { records })
    }
}

fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let lo = (t + 1).saturating_sub(window);
        let slice = &xs[lo..=t];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// Onset of reward hacking: the step of the smoothed-gold peak, provided at
/// least `patience` later steps have smoothed gold at least `margin` below the
/// peak while smoothed proxy sits above its value at the peak.
pub fn divergence_point(log: &TrajectoryLog, window: usize, margin: f64, patience: usize) -> Option<usize> {
    if log.is_empty() || window == 0 || patience == 0 {
        return None;
    }
    let gold = trailing_mean(&log.gold(), window);
    let proxy = trailing_mean(&log.proxy(), window);
    let peak = argmax_first(&gold)?;
    let hacked = (peak + 1..gold.len())
        .filter(|&t| gold[t] <= gold[peak] - margin && proxy[t] > proxy[peak])
        .count();
    (hacked >= patience).then(|| log.records[peak].step)
}

/// Default detection margin: 2% of the raw gold trajectory's range.
pub fn default_margin(log: &TrajectoryLog) -> f64 {
    range_margin(log, 0.02)
}

/// `frac` times the range of the raw gold trajectory.
pub fn range_margin(log: &TrajectoryLog, frac: f64) -> f64 {
    let g = log.gold();
    let (lo, hi) = g
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if g.is_empty() {
        0.0
    } else {
        frac * (hi - lo)
    }
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// KL coefficient of the shaped reward.
    pub beta: f64,
    pub clip_eps: f64,
    pub prompts_per_step: usize,
    pub samples_per_prompt: usize,
    pub kl_abort_threshold: f64,
    pub temperature: f64,
    pub max_response_len: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-4,
            seed: 22,
            beta: 0.05,
            clip_eps: 0.2,
            prompts_per_step: 8,
            samples_per_prompt: 4,
            kl_abort_threshold: 150.0,
            temperature: 1.0,
            max_response_len: 12,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidConfig("clip_eps must be in (0, 1)".into()));
        }
        if self.prompts_per_step == 0 || self.samples_per_prompt == 0 || self.max_response_len == 0 {
            return Err(Error::InvalidConfig("batch sizes and response length must be positive".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::InvalidConfig("lr must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PpoOutcome {
    Completed,
    /// Batch KL crossed the abort threshold at `step`.
    KlAbort { step: usize, kl: f64 },
}

#[derive(Clone, Debug)]
pub struct PpoRun {
    pub log: TrajectoryLog,
    pub outcome: PpoOutcome,
}

struct Rollout {
    prompt: usize,
    response: Vec<Token>,
    proxy: f64,
    gold: f64,
    logp: f64,
    logp_init: f64,
}

/// Batch-whitened values; a constant batch maps to zeros.
pub fn whiten(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Clipped-surrogate PPO on single-turn responses.
///
/// Each step samples a batch, shapes proxy rewards with the KL penalty
/// against the frozen initial policy, whitens them into advantages and takes
/// one clipped-surrogate step. Gold rewards are logged, never optimized.
pub fn ppo_run<S: RewardScorer + ?Sized>(
    policy: &mut RewardModel,
    scorer: &S,
    gold: &SyntheticGold,
    prompts: &[Vec<Token>],
    cfg: &PpoConfig,
) -> Result<PpoRun> {
    cfg.validate()?;
    if policy.head_kind() != HeadKind::Lm {
        return Err(Error::WrongHead {
            expected: HeadKind::Lm,
            found: policy.head_kind(),
        });
    }
    if prompts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let init = policy.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let stream = rng::derive_seed(cfg.seed, "ppo");
    let mut log = TrajectoryLog::default();
    let batch = cfg.prompts_per_step * cfg.samples_per_prompt;

    for step in 0..cfg.steps {
        let step_seed = rng::indexed_seed(stream, step as u64);
        let current: &RewardModel = policy;
        let rollouts: Vec<Result<Rollout>> = (0..batch)
            .into_par_iter()
            .map(|k| {
                let prompt = (step * cfg.prompts_per_step + k / cfg.samples_per_prompt) % prompts.len();
                let p = &prompts[prompt];
                let mut r = rng::from_seed(rng::indexed_seed(step_seed, k as u64));
                let response = sample_response(current, p, cfg.max_response_len, cfg.temperature, &mut r)?;
                Ok(Rollout {
                    proxy: scorer.score(p, &response)?,
                    gold: gold.gold_reward(p, &response),
                    logp: current.response_log_prob(p, &response)?,
                    logp_init: init.response_log_prob(p, &response)?,
                    prompt,
                    response,
                })
            })
            .collect();
        let rollouts = rollouts.into_iter().collect::<Result<Vec<_>>>()?;

        let n = batch as f64;
        let shaped: Vec<f64> = rollouts
            .iter()
            .map(|r| shaped_reward(r.proxy, r.logp, r.logp_init, cfg.beta))
            .collect();
        let adv = whiten(&shaped);
        let kl = rollouts.iter().map(|r| r.logp - r.logp_init).sum::<f64>() / n;
        let proxy_mean = rollouts.iter().map(|r| r.proxy).sum::<f64>() / n;
        let gold_mean = rollouts.iter().map(|r| r.gold).sum::<f64>() / n;

        if kl > cfg.kl_abort_threshold {
            log.records.push(TrajectoryRecord {
                step,
                proxy_reward: proxy_mean,
                gold_reward: gold_mean,
                kl,
                policy_loss: f64::NAN,
            });
            return Ok(PpoRun {
                log,
                outcome: PpoOutcome::KlAbort { step, kl },
            });
        }

        // Surrogate L = -mean(min(ρA, clip(ρ)A)). Its gradient is
        // -mean(c · ∇log π) with c = ρA on the unclipped branch and 0 on the
        // clipped one, so the graph only carries Σ c·log π.
        let mut g = Graph::new();
        let p = policy.bind(&mut g, true);
        let mut total = None;
        let mut surrogate = 0.0;
        for (r, &a) in rollouts.iter().zip(&adv) {
            let lp = policy.response_log_prob_graph(&mut g, &p, &prompts[r.prompt], &r.response)?;
            let ratio = (g.value(lp).item()? - r.logp).exp();
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let unclipped_active = ratio * a <= clipped * a;
            surrogate += (ratio * a).min(clipped * a);
            let coef = if unclipped_active { ratio * a } else { 0.0 };
            let term = g.scale(lp, -coef / n)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        let policy_loss = -surrogate / n;
        if !policy_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let loss = total.expect("batch is non-empty");
        let grads = g.backward(loss)?;
        policy.params_mut().zero_grad();
        policy.params_mut().accumulate(&p, &grads)?;
        opt.step_store(policy.params_mut())?;

        log.records.push(TrajectoryRecord {
            step,
            proxy_reward: proxy_mean,
            gold_reward: gold_mean,
            kl,
            policy_loss,
        });
    }
    Ok(PpoRun {
        log,
        outcome: PpoOutcome::Completed,
    })
}

// ---------------------------------------------------------------------------
// Best-of-N sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BonConfig {
    pub ns: Vec<usize>,
    pub temperature: f64,
    pub max_response_len: usize,
    pub seed: u64,
    /// Share sample prefixes across N (Y_2 ⊆ Y_4 ⊆ …); otherwise each N
    /// draws a fresh set.
    pub nested: bool,
}

impl Default for BonConfig {
    fn default() -> Self {
        Self {
            ns: vec![2, 4, 8, 16, 32, 64, 128],
            temperature: 1.0,
            max_response_len: 12,
            seed: 22,
            nested: true,
        }
    }
}

impl BonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns[0] < 1 || self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("N values must be >= 1 and strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub n: usize,
    pub mean_proxy: f64,
    pub mean_gold: f64,
    pub win_rate: f64,
}

/// Mean and population std of proxy and gold scores over every sample drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub proxy_mean: f64,
    pub proxy_std: f64,
    pub gold_mean: f64,
    pub gold_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonSweep {
    pub rows: Vec<BonRow>,
    pub pool: PoolStats,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl BonSweep {
    /// Proxy-minus-gold overshoot of the picks at `n`, both measured in
    /// standard deviations of their own sample pool.
    pub fn gap(&self, n: usize) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.n == n)?;
        let p = &self.pool;
        let zp = (row.mean_proxy - p.proxy_mean) / p.proxy_std.max(1e-12);
        let zg = (row.mean_gold - p.gold_mean) / p.gold_std.max(1e-12);
        Some(zp - zg)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BON_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.n,
                fmt_sig6(r.mean_proxy),
                fmt_sig6(r.mean_gold),
                fmt_sig6(r.win_rate)
            ));
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<BonRow>> {
        Ok(parse_csv_rows(text, BON_HEADER)?
            .into_iter()
            .map(|v| BonRow {
                n: v[0] as usize,
                mean_proxy: v[1],
                mean_gold: v[2],
                win_rate: v[3],
            })
            .collect())
    }
}

struct PromptSweep {
    proxy_pick: Vec<f64>,
    gold_pick: Vec<f64>,
    win: Vec<f64>,
    all_proxy: Vec<f64>,
    all_gold: Vec<f64>,
}

/// Best-of-N over every N in `cfg.ns` for each prompt. The win rate compares
/// the gold reward of the pick against the first sample (ties count half).
pub fn bon_sweep<S: RewardScorer + ?Sized>(
    policy: &RewardModel,
    scorer: &S,
    gold: &SyntheticGold,
    prompts: &[Vec<Token>],
    cfg: &BonConfig,
) -> Result<BonSweep> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = rng::derive_seed(cfg.seed, "bon");
    let max_n = *cfg.ns.last().expect("validated non-empty");
    let per_prompt: Vec<Result<PromptSweep>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let seed = rng::indexed_seed(base, i as u64);
            let score_all = |c: &[Vec<Token>]| -> Result<(Vec<f64>, Vec<f64>)> {
                let p = c.iter().map(|y| scorer.score(prompt, y)).collect::<Result<Vec<_>>>()?;
                let g = c.iter().map(|y| gold.gold_reward(prompt, y)).collect();
                Ok((p, g))
            };
            let mut out = PromptSweep {
                proxy_pick: Vec::new(),
                gold_pick: Vec::new(),
                win: Vec::new(),
                all_proxy: Vec::new(),
                all_gold: Vec::new(),
            };
            let mut push = |proxy: &[f64], golds: &[f64], reference: f64| {
                let k = argmax_first(proxy).expect("N >= 1");
                out.proxy_pick.push(proxy[k]);
                out.gold_pick.push(golds[k]);
                out.win.push(if golds[k] > reference {
                    1.0
                } else if golds[k] == reference {
                    0.5
                } else {
                    0.0
                });
            };
            if cfg.nested {
                let samples = sample_n(policy, prompt, max_n, cfg.temperature, cfg.max_response_len, seed)?;
                let (proxy, golds) = score_all(&samples)?;
                for &n in &cfg.ns {
                    push(&proxy[..n], &golds[..n], golds[0]);
                }
                out.all_proxy = proxy;
                out.all_gold = golds;
            } else {
                let mut ref_gold = None;
                let mut pool_p = Vec::new();
                let mut pool_g = Vec::new();
                for &n in &cfg.ns {
                    let s = rng::indexed_seed(seed, n as u64);
                    let samples = sample_n(policy, prompt, n, cfg.temperature, cfg.max_response_len, s)?;
                    let (proxy, golds) = score_all(&samples)?;
                    let reference = *ref_gold.get_or_insert(golds[0]);
                    push(&proxy, &golds, reference);
                    pool_p.extend(proxy);
                    pool_g.extend(golds);
                }
                out.all_proxy = pool_p;
                out.all_gold = pool_g;
            }
            Ok(out)
        })
        .collect();
    let per_prompt = per_prompt.into_iter().collect::<Result<Vec<_>>>()?;

    let np = per_prompt.len() as f64;
    let rows = cfg
        .ns
        .iter()
        .enumerate()
        .map(|(j, &n)| BonRow {
            n,
            mean_proxy: per_prompt.iter().map(|p| p.proxy_pick[j]).sum::<f64>() / np,
            mean_gold: per_prompt.iter().map(|p| p.gold_pick[j]).sum::<f64>() / np,
            win_rate: per_prompt.iter().map(|p| p.win[j]).sum::<f64>() / np,
        })
        .collect();
    let all_p: Vec<f64> = per_prompt.iter().flat_map(|p| p.all_proxy.iter().copied()).collect();
    let all_g: Vec<f64> = per_prompt.iter().flat_map(|p| p.all_gold.iter().copied()).collect();
    let (proxy_mean, proxy_std) = mean_std(&all_p);
    let (gold_mean, gold_std) = mean_std(&all_g);
    Ok(BonSweep {
        rows,
        pool: PoolStats {
            proxy_mean,
            proxy_std,
            gold_mean,
            gold_std,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(gold: &[f64], proxy: &[f64]) -> TrajectoryLog {
        TrajectoryLog {
            records: gold
                .iter()
                .zip(proxy)
                .enumerate()
                .map(|(step, (&g, &p))| TrajectoryRecord {
                    step,
                    proxy_reward: p,
                    gold_reward: g,
                    kl: 0.0,
                    policy_loss: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn argmax_ties_pick_earliest() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.5]), Some(1));
        assert_eq!(argmax_first(&[0.9, 0.9]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn shaped_reward_cases() {
        assert_eq!(shaped_reward(0.7, -3.0, -1.0, 0.0), 0.7);
        assert_eq!(shaped_reward(0.7, -2.5, -2.5, 0.3), 0.7);
        assert!((shaped_reward(1.0, -1.0, -2.0, 0.1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn hand_traced_divergence() {
        let gold = [0.0, 1.0, 2.0, 3.0, 2.9, 2.7, 2.5];
        let proxy = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(divergence_point(&log_from(&gold, &proxy), 1, 0.05, 2), Some(3));
    }

    #[test]
    fn no_divergence_cases() {
        let rising = [0.0, 0.5, 0.5, 1.0, 2.0];
        assert_eq!(divergence_point(&log_from(&rising, &rising), 1, 0.01, 1), None);
        // Both fall after the peak: optimizer failure, not hacking.
        let both = [0.0, 1.0, 2.0, 1.0, 0.0, -1.0];
        assert_eq!(divergence_point(&log_from(&both, &both), 1, 0.05, 2), None);
    }

    #[test]
    fn csv_formatting() {
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(-2.0), "-2");
        assert_eq!(fmt_sig6(123456789.0), "1.23457e8");
        assert_eq!(fmt_sig6(0.0), "0");
        let log = log_from(&[1.5, 2.25], &[0.5, 0.75]);
        let csv = log.to_csv();
        assert!(csv.starts_with("step,proxy_reward,gold_reward,kl,policy_loss\n0,0.5,1.5,0,0\n"));
        assert_eq!(TrajectoryLog::from_csv(&csv).unwrap(), log);
        assert!(TrajectoryLog::from_csv("step,proxy\n").is_err());
    }

    #[test]
    fn whitening() {
        let w = whiten(&[1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(whiten(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn bon_config_validation() {
        assert!(BonConfig::default().validate().is_ok());
        let bad = BonConfig {
            ns: vec![4, 2],
            ..BonConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
