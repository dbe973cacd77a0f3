//! Synthetic preference data with an exactly computable gold reward, plus the
//! supervised and Bradley-Terry training loops.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, RewardModel, Token};
use crate::rng::{self, Rng};
use crate::sampling::sample_response;
use crate::score::RewardScorer;
use crate::tensor::{Adam, AdamConfig, Graph, Var};

// ---------------------------------------------------------------------------
// Gold reward

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoldConfig {
    /// Fraction of content bigrams that carry a nonzero weight.
    pub density: f64,
    /// Std of the nonzero bigram weights.
    pub weight_scale: f64,
    pub length_target: usize,
    pub length_penalty_scale: f64,
}

impl Default for GoldConfig {
    fn default() -> Self {
        Self {
            density: 0.1,
            weight_scale: 1.0,
            length_target: 8,
            length_penalty_scale: 0.5,
        }
    }
}

/// Programmatic stand-in for a large gold reward model.
///
/// `gold(x, y) = Σ_bigrams w(y_i, y_{i+1}) / |y| - c · ||y| - L*| / L*`, where
/// `y` is the response up to its first EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GoldFile", into = "GoldFile")]
pub struct SyntheticGold {
    seed: u64,
    n_content: usize,
    eos: Token,
    length_target: usize,
    length_penalty_scale: f64,
    /// Dense `n_content × n_content` lookup, row = first token.
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldFile {
    seed: u64,
    n_content: usize,
    eos: Token,
    length_target: usize,
    length_penalty_scale: f64,
    /// Nonzero weights as `[first, second, weight]`, sorted.
    bigrams: Vec<(Token, Token, f64)>,
}

impl TryFrom<GoldFile> for SyntheticGold {
    type Error = String;

    fn try_from(f: GoldFile) -> std::result::Result<Self, String> {
        if f.length_target == 0 {
            return Err("length_target must be positive".into());
        }
        let mut table = vec![0.0; f.n_content * f.n_content];
        for (a, b, w) in f.bigrams {
            let (a, b) = (a as usize, b as usize);
            if a >= f.n_content || b >= f.n_content || !w.is_finite() {
                return Err(format!("bad bigram entry ({a}, {b}, {w})"));
            }
            table[a * f.n_content + b] = w;
        }
        Ok(Self {
            seed: f.seed,
            n_content: f.n_content,
            eos: f.eos,
            length_target: f.length_target,
            length_penalty_scale: f.length_penalty_scale,
            table,
        })
    }
}

impl From<SyntheticGold> for GoldFile {
    fn from(g: SyntheticGold) -> Self {
        let n = g.n_content;
        let bigrams = g
            .table
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| ((i / n) as Token, (i % n) as Token, *w))
            .collect();
        Self {
            seed: g.seed,
            n_content: n,
            eos: g.eos,
            length_target: g.length_target,
            length_penalty_scale: g.length_penalty_scale,
            bigrams,
        }
    }
}

impl SyntheticGold {
    pub fn generate(seed: u64, n_content: usize, eos: Token, cfg: &GoldConfig) -> Result<Self> {
        if cfg.length_target == 0 {
            return Err(Error::InvalidConfig("length_target must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.density) || cfg.weight_scale <= 0.0 {
            return Err(Error::InvalidConfig("density in [0,1], weight_scale > 0".into()));
        }
        let mut r = rng::stream(seed, "gold");
        let normal = Normal::new(0.0, cfg.weight_scale).expect("checked scale");
        let table = (0..n_content * n_content)
            .map(|_| {
                let keep = r.random::<f64>() < cfg.density;
                let w = normal.sample(&mut r);
                if keep {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            seed,
            n_content,
            eos,
            length_target: cfg.length_target,
            length_penalty_scale: cfg.length_penalty_scale,
            table,
        })
    }

    /// Gold with the given explicit weights.
    pub fn from_bigrams(
        n_content: usize,
        eos: Token,
        length_target: usize,
        length_penalty_scale: f64,
        bigrams: &[(Token, Token, f64)],
    ) -> Result<Self> {
        GoldFile {
            seed: 0,
            n_content,
            eos,
            length_target,
            length_penalty_scale,
            bigrams: bigrams.to_vec(),
        }
        .try_into()
        .map_err(Error::InvalidConfig)
    }

    pub fn weight(&self, a: Token, b: Token) -> f64 {
        let (a, b) = (a as usize, b as usize);
        if a < self.n_content && b < self.n_content {
            self.table[a * self.n_content + b]
        } else {
            0.0
        }
    }

    pub fn length_target(&self) -> usize {
        self.length_target
    }

    /// Response content up to (not including) the first EOS.
    pub fn content<'a>(&self, response: &'a [Token]) -> &'a [Token] {
        let end = response.iter().position(|&t| t == self.eos).unwrap_or(response.len());
        &response[..end]
    }

    pub fn gold_reward(&self, _prompt: &[Token], response: &[Token]) -> f64 {
        let y = self.content(response);
        let len = y.len();
        let bigram = if len == 0 {
            0.0
        } else {
            y.windows(2).map(|w| self.weight(w[0], w[1])).sum::<f64>() / len as f64
        };
        let target = self.length_target as f64;
        bigram - self.length_penalty_scale * (len as f64 - target).abs() / target
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl RewardScorer for SyntheticGold {
    fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        Ok(self.gold_reward(prompt, response))
    }
}

// ---------------------------------------------------------------------------
// Preference data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub gold_margin: f64,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            gold_margin: -self.gold_margin,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.pairs.iter().map(PreferencePair::swapped).collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair = serde_json::from_str(&line).map_err(|source| Error::Jsonl {
                line: i + 1,
                source,
            })?;
            pairs.push(pair);
        }
        Ok(Self { pairs })
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        Self::read_jsonl(s.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_prompts: usize,
    /// Inclusive range.
    pub prompt_len: (usize, usize),
    /// Inclusive range, used by the uniform sampler and as the policy
    /// sampler's maximum.
    pub response_len: (usize, usize),
    pub pairs_per_prompt: usize,
    /// Bradley-Terry label temperature; zero labels by argmax.
    pub label_temperature: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_prompts: 512,
            prompt_len: (2, 6),
            response_len: (4, 12),
            pairs_per_prompt: 1,
            label_temperature: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, max_seq: usize) -> Result<()> {
        let (pl, ph) = self.prompt_len;
        let (rl, rh) = self.response_len;
        if pl == 0 || pl > ph || rl == 0 || rl > rh {
            return Err(Error::InvalidConfig("length ranges must be non-empty and positive".into()));
        }
        if ph + rh + 2 > max_seq {
            return Err(Error::InvalidConfig(format!(
                "prompt {ph} + response {rh} + BOS/EOS exceeds max_seq {max_seq}"
            )));
        }
        if self.label_temperature.is_nan() || self.label_temperature < 0.0 {
            return Err(Error::InvalidConfig("label_temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sparse first-order language over content tokens: each token may only be
/// followed by a fixed, seeded set of `branching` successors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessorTable {
    successors: Vec<Vec<Token>>,
}

impl SuccessorTable {
    pub fn generate(seed: u64, n_content: usize, branching: usize) -> Result<Self> {
        if branching == 0 || branching > n_content {
            return Err(Error::InvalidConfig(format!(
                "branching must be in 1..={n_content}, got {branching}"
            )));
        }
        let mut r = rng::from_seed(seed);
        let successors = (0..n_content)
            .map(|_| {
                let mut all: Vec<Token> = (0..n_content as Token).collect();
                all.shuffle(&mut r);
                all.truncate(branching);
                all.sort_unstable();
                all
            })
            .collect();
        Ok(Self { successors })
    }

    pub fn n_content(&self) -> usize {
        self.successors.len()
    }

    pub fn successors(&self, token: Token) -> &[Token] {
        &self.successors[token as usize]
    }

    /// Whether every adjacent pair of `tokens` is an allowed transition.
    pub fn accepts(&self, tokens: &[Token]) -> bool {
        tokens.iter().all(|&t| (t as usize) < self.n_content())
            && tokens.windows(2).all(|w| self.successors(w[0]).contains(&w[1]))
    }

    /// Uniform first token and length, uniform choice among successors.
    pub fn sample(&self, r: &mut Rng, len_range: (usize, usize)) -> Vec<Token> {
        let len = r.random_range(len_range.0..=len_range.1);
        let mut out = Vec::with_capacity(len);
        out.push(r.random_range(0..self.n_content()) as Token);
        while out.len() < len {
            let next = self.successors(out[out.len() - 1]);
            out.push(next[r.random_range(0..next.len())]);
        }
        out
    }
}

/// Source of candidate responses for preference pairs and the SFT corpus.
#[derive(Clone, Copy)]
pub enum ResponseSampler<'a> {
    /// Uniform content tokens with a uniform length.
    Uniform { n_content: usize },
    Language(&'a SuccessorTable),
    Policy {
        model: &'a RewardModel,
        temperature: f64,
    },
}

fn uniform_tokens(r: &mut Rng, n_content: usize, len_range: (usize, usize)) -> Vec<Token> {
    let len = r.random_range(len_range.0..=len_range.1);
    (0..len).map(|_| r.random_range(0..n_content) as Token).collect()
}

impl ResponseSampler<'_> {
    fn draw(&self, prompt: &[Token], len_range: (usize, usize), r: &mut Rng) -> Result<Vec<Token>> {
        match *self {
            ResponseSampler::Uniform { n_content } => Ok(uniform_tokens(r, n_content, len_range)),
            ResponseSampler::Language(table) => Ok(table.sample(r, len_range)),
            ResponseSampler::Policy { model, temperature } => {
                sample_response(model, prompt, len_range.1, temperature, r)
            }
        }
    }
}

/// Random content-token prompts; prompt `i` depends only on `(seed, i)`.
pub fn generate_prompts(n: usize, n_content: usize, len_range: (usize, usize), seed: u64) -> Vec<Vec<Token>> {
    let base = rng::derive_seed(seed, "prompts");
    (0..n)
        .map(|i| {
            let mut r = rng::from_seed(rng::indexed_seed(base, i as u64));
            uniform_tokens(&mut r, n_content, len_range)
        })
        .collect()
}

const MAX_PAIR_TRIES: usize = 10;

/// Samples two responses per pair and labels them with Bradley-Terry noise
/// around the gold reward. Prompts are processed independently with derived
/// seeds, so the output does not depend on thread count.
pub fn generate_preferences(
    gold: &SyntheticGold,
    sampler: ResponseSampler<'_>,
    n_content: usize,
    cfg: &GenConfig,
) -> Result<PreferenceDataset> {
    let prompts = generate_prompts(cfg.n_prompts, n_content, cfg.prompt_len, cfg.seed);
    let base = rng::derive_seed(cfg.seed, "pairs");
    let tau = cfg.label_temperature;
    let per_prompt: Vec<Result<Vec<PreferencePair>>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut r = rng::from_seed(rng::indexed_seed(base, i as u64));
            let mut out = Vec::with_capacity(cfg.pairs_per_prompt);
            for _ in 0..cfg.pairs_per_prompt {
                let mut found = None;
                for _ in 0..MAX_PAIR_TRIES {
                    let a = sampler.draw(prompt, cfg.response_len, &mut r)?;
                    let b = sampler.draw(prompt, cfg.response_len, &mut r)?;
                    let (ga, gb) = (gold.gold_reward(prompt, &a), gold.gold_reward(prompt, &b));
                    if a == b || (tau == 0.0 && ga == gb) {
                        continue;
                    }
                    found = Some((a, b, ga, gb));
                    break;
                }
                let Some((a, b, ga, gb)) = found else { continue };
                let a_wins = if tau == 0.0 {
                    ga > gb
                } else {
                    let p = 1.0 / (1.0 + (-(ga - gb) / tau).exp());
                    r.random::<f64>() < p
                };
                let (chosen, rejected, margin) = if a_wins { (a, b, ga - gb) } else { (b, a, gb - ga) };
                out.push(PreferencePair {
                    prompt: prompt.clone(),
                    chosen,
                    rejected,
                    gold_margin: margin,
                });
            }
            Ok(out)
        })
        .collect();
    let mut pairs = Vec::new();
    for p in per_prompt {
        pairs.extend(p?);
    }
    Ok(PreferenceDataset { pairs })
}

/// SFT corpus: `BOS ‖ prompt ‖ response ‖ EOS` with responses from `sampler`.
pub fn generate_sft_corpus(
    n: usize,
    sampler: ResponseSampler<'_>,
    n_content: usize,
    bos: Token,
    eos: Token,
    cfg: &GenConfig,
) -> Result<Vec<Vec<Token>>> {
    let prompts = generate_prompts(n, n_content, cfg.prompt_len, rng::derive_seed(cfg.seed, "sft-prompts"));
    let base = rng::derive_seed(cfg.seed, "sft-responses");
    prompts
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut r = rng::from_seed(rng::indexed_seed(base, i as u64));
            let mut resp = sampler.draw(&prompt, cfg.response_len, &mut r)?;
            if resp.last() == Some(&eos) {
                resp.pop();
            }
            let mut seq = Vec::with_capacity(prompt.len() + resp.len() + 2);
            seq.push(bos);
            seq.extend(prompt);
            seq.extend(resp);
            seq.push(eos);
            Ok(seq)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 32,
            lr: 3e-4,
            seed: 0,
        }
    }
}

/// Cycles through shuffled epochs of `0..n`.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_needed();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean Bradley-Terry loss `-log σ(R(x, y_w) - R(x, y_l))` over `pairs`,
/// expressed as two-way cross-entropy on `[R_l, R_w]` with target `R_w`.
pub fn bt_loss_graph(
    g: &mut Graph,
    model: &RewardModel,
    p: &[Var],
    pairs: &[&PreferencePair],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let rw = model.reward_graph(g, p, &pair.prompt, &pair.chosen)?;
        let rl = model.reward_graph(g, p, &pair.prompt, &pair.rejected)?;
        rows.push(g.concat_cols(&[rl, rw])?);
    }
    let logits = g.concat_rows(&rows)?;
    let nll = g.cross_entropy(logits, &vec![1; pairs.len()])?;
    g.mean(nll)
}

pub fn bt_loss(model: &RewardModel, prefs: &PreferenceDataset) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let refs: Vec<&PreferencePair> = prefs.pairs.iter().collect();
    let l = bt_loss_graph(&mut g, model, &p, &refs)?;
    g.value(l).item()
}

/// Minibatch Adam on the Bradley-Terry loss. Returns the loss of each
/// minibatch, measured before its update.
pub fn bt_train(rm: &mut RewardModel, prefs: &PreferenceDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if rm.head_kind() != HeadKind::Reward {
        return Err(Error::WrongHead {
            expected: HeadKind::Reward,
            found: rm.head_kind(),
        });
    }
    if prefs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut batches = BatchSampler::new(prefs.len(), rng::stream(cfg.seed, "bt-batches"));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch(cfg.batch.max(1));
        let pairs: Vec<&PreferencePair> = idx.iter().map(|&i| &prefs.pairs[i]).collect();
        let mut g = Graph::new();
        let p = rm.bind(&mut g, true);
        let loss = bt_loss_graph(&mut g, rm, &p, &pairs).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        })?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(lv);
        let grads = g.backward(loss)?;
        rm.params_mut().zero_grad();
        rm.params_mut().accumulate(&p, &grads)?;
        opt.step_store(rm.params_mut())?;
    }
    Ok(losses)
}

/// Next-token cross-entropy training. Corpus entries are complete token
/// sequences (`BOS … EOS`). Returns the per-token loss of each minibatch
/// before its update.
pub fn sft_train(policy: &mut RewardModel, corpus: &[Vec<Token>], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if policy.head_kind() != HeadKind::Lm {
        return Err(Error::WrongHead {
            expected: HeadKind::Lm,
            found: policy.head_kind(),
        });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut batches = BatchSampler::new(corpus.len(), rng::stream(cfg.seed, "sft"));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch(cfg.batch.max(1));
        let mut g = Graph::new();
        let p = policy.bind(&mut g, true);
        let mut total = None;
        let mut n_tokens = 0usize;
        for &i in &idx {
            let lp = policy.lm_log_probs_graph(&mut g, &p, &corpus[i])?;
            n_tokens += corpus[i].len() - 1;
            let s = g.sum(lp)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let total = total.expect("batch is non-empty");
        let loss = g.scale(total, -1.0 / n_tokens as f64)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(lv);
        let grads = g.backward(loss)?;
        policy.params_mut().zero_grad();
        policy.params_mut().accumulate(&p, &grads)?;
        opt.step_store(policy.params_mut())?;
    }
    Ok(losses)
}

/// Fraction of pairs with `R(x, y_w) > R(x, y_l)`; ties count as wrong.
pub fn eval_accuracy<S: RewardScorer + ?Sized>(scorer: &S, prefs: &PreferenceDataset) -> Result<f64> {
    if prefs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct: Vec<Result<bool>> = prefs
        .pairs
        .par_iter()
        .map(|p| Ok(scorer.score(&p.prompt, &p.chosen)? > scorer.score(&p.prompt, &p.rejected)?))
        .collect();
    let mut n = 0usize;
    for c in correct {
        if c? {
            n += 1;
        }
    }
    Ok(n as f64 / prefs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::FnScorer;

    fn gold() -> SyntheticGold {
        SyntheticGold::from_bigrams(8, 10, 4, 0.5, &[(1, 2, 0.8), (2, 1, -0.3), (3, 3, 1.5)]).unwrap()
    }

    #[test]
    fn empty_gold_at_target_length_is_zero() {
        let g = SyntheticGold::from_bigrams(8, 10, 5, 0.7, &[]).unwrap();
        assert_eq!(g.gold_reward(&[1], &[0, 4, 2, 7, 1]), 0.0);
    }

    #[test]
    fn repeated_bigram_response() {
        let g = gold();
        // [3,3,3,3]: three (3,3) bigrams over length 4 = target.
        assert!((g.gold_reward(&[0], &[3, 3, 3, 3]) - 1.5 * 3.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn eos_truncates_and_length_penalty_applies() {
        let g = gold();
        let r = g.gold_reward(&[0], &[1, 2, 10]);
        assert!((r - (0.8 / 2.0 - 0.5 * 2.0 / 4.0)).abs() < 1e-15);
        assert_eq!(g.gold_reward(&[0], &[10]), -0.5);
    }

    #[test]
    fn gold_json_round_trip() {
        let g = SyntheticGold::generate(3, 16, 18, &GoldConfig::default()).unwrap();
        let back = SyntheticGold::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn argmax_labels_have_positive_margin() {
        let g = SyntheticGold::generate(1, 16, 18, &GoldConfig::default()).unwrap();
        let cfg = GenConfig {
            n_prompts: 200,
            label_temperature: 0.0,
            seed: 9,
            ..GenConfig::default()
        };
        let d = generate_preferences(&g, ResponseSampler::Uniform { n_content: 16 }, 16, &cfg).unwrap();
        assert!(d.len() >= 190);
        for p in &d.pairs {
            assert!(p.gold_margin > 0.0);
            assert_ne!(p.chosen, p.rejected);
            assert!(g.gold_reward(&p.prompt, &p.chosen) > g.gold_reward(&p.prompt, &p.rejected));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let g = SyntheticGold::generate(1, 16, 18, &GoldConfig::default()).unwrap();
        let cfg = GenConfig {
            n_prompts: 50,
            seed: 4,
            ..GenConfig::default()
        };
        let a = generate_preferences(&g, ResponseSampler::Uniform { n_content: 16 }, 16, &cfg).unwrap();
        let b = generate_preferences(&g, ResponseSampler::Uniform { n_content: 16 }, 16, &cfg).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    }

    #[test]
    fn jsonl_format() {
        let d = PreferenceDataset::new(vec![PreferencePair {
            prompt: vec![1, 2],
            chosen: vec![3],
            rejected: vec![4, 5],
            gold_margin: 0.25,
        }]);
        assert_eq!(
            d.to_jsonl().unwrap(),
            "{\"prompt\":[1,2],\"chosen\":[3],\"rejected\":[4,5],\"gold_margin\":0.25}\n"
        );
        assert!(matches!(
            PreferenceDataset::from_jsonl("{\"prompt\":[1]}\n"),
            Err(Error::Jsonl { line: 1, .. })
        ));
    }

    #[test]
    fn accuracy_tie_rule_and_oracle() {
        let g = SyntheticGold::generate(1, 16, 18, &GoldConfig::default()).unwrap();
        let cfg = GenConfig {
            n_prompts: 60,
            label_temperature: 0.0,
            ..GenConfig::default()
        };
        let d = generate_preferences(&g, ResponseSampler::Uniform { n_content: 16 }, 16, &cfg).unwrap();
        assert_eq!(eval_accuracy(&g, &d).unwrap(), 1.0);
        let constant = FnScorer(|_: &[Token], _: &[Token]| Ok(0.3));
        assert_eq!(eval_accuracy(&constant, &d).unwrap(), 0.0);
        assert!(eval_accuracy(&g, &PreferenceDataset::default()).is_err());
    }

    #[test]
    fn batch_sampler_covers_epoch() {
        let mut b = BatchSampler::new(10, rng::from_seed(1));
        let mut seen: Vec<usize> = b.next_batch(5);
        seen.extend(b.next_batch(5));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
