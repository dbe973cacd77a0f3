//! Decoder-only transformer shared by reward models and policies.
//!
//! Blocks are pre-norm: `x += attn(ln1(x))`, then `x += ffn(ln2(x))`, where
//! the feed-forward part is either a dense FFN or a mixture-of-experts layer.
//! A final layer norm feeds either a scalar reward head (read at the last
//! token) or a vocabulary logit head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{self, MoeLayer};
use crate::rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub type Token = u32;

const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 67,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 64,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("transformer counts must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab needs content tokens plus PAD/BOS/EOS".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidConfig("max_seq must be at least 2".into()));
        }
        Ok(())
    }

    /// Number of ordinary content tokens; ids `0..n_content()`.
    pub fn n_content(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn pad_id(&self) -> Token {
        (self.vocab_size - 3) as Token
    }

    pub fn bos_id(&self) -> Token {
        (self.vocab_size - 2) as Token
    }

    pub fn eos_id(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count of one dense FFN.
    pub fn ffn_param_count(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Reward,
    Lm,
}

/// Handles of one dense feed-forward network inside a model's store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseFfn {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl DenseFfn {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_in, self.b_in, self.w_out, self.b_out]
    }

    pub fn weights(&self, store: &ParamStore) -> FfnWeights {
        FfnWeights {
            w_in: store.get(self.w_in).clone(),
            b_in: store.get(self.b_in).clone(),
            w_out: store.get(self.w_out).clone(),
            b_out: store.get(self.b_out).clone(),
        }
    }

    /// `gelu(u W_in + b_in) W_out + b_out`, row-wise over `u`.
    pub fn apply(&self, g: &mut Graph, p: &[Var], u: Var) -> Result<Var> {
        ffn_graph(g, [p[self.w_in.0], p[self.b_in.0], p[self.w_out.0], p[self.b_out.0]], u)
    }
}

pub(crate) fn ffn_graph(g: &mut Graph, w: [Var; 4], u: Var) -> Result<Var> {
    let [w_in, b_in, w_out, b_out] = w;
    let h = g.matmul(u, w_in)?;
    let h = g.add_row(h, b_in)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w_out)?;
    g.add_row(o, b_out)
}

/// Owned tensors of one FFN, in the order `W_in, b_in, W_out, b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl FfnWeights {
    pub const NAMES: [&'static str; 4] = ["W_in", "b_in", "W_out", "b_out"];

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Dense(DenseFfn),
    Moe(MoeLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2: (ParamId, ParamId),
    pub ffn: FeedForward,
}

/// Expert layout of one MoE block as recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeShape {
    pub n_normal: usize,
    pub top_k: usize,
}

/// Everything needed to rebuild a model's structure from named tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLayout {
    pub config: TransformerConfig,
    pub head: HeadKind,
    pub moe: Vec<Option<MoeShape>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    config: TransformerConfig,
    head: HeadKind,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

pub(crate) fn ffn_shapes(c: &TransformerConfig) -> [Vec<usize>; 4] {
    [
        vec![c.d_model, c.d_ff],
        vec![c.d_ff],
        vec![c.d_ff, c.d_model],
        vec![c.d_model],
    ]
}

impl RewardModel {
    /// Fresh model: normal(0, 0.02) matrices, zero biases, unit norm gains and
    /// a zero reward head.
    pub fn new(config: TransformerConfig, head: HeadKind) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layout = ModelLayout {
            moe: vec![None; config.n_layers],
            config,
            head,
        };
        Self::build(&layout, |name, shape| {
            let numel = shape.iter().product();
            let is_matrix = shape.len() == 2;
            let data = if name.ends_with(".gain") {
                vec![1.0; numel]
            } else if name.starts_with("head.") && head == HeadKind::Reward {
                vec![0.0; numel]
            } else if is_matrix {
                (0..numel).map(|_| normal.sample(&mut r)).collect()
            } else {
                vec![0.0; numel]
            };
            Tensor::new(shape.to_vec(), data)
        })
    }

    /// Builds the structure described by `layout`, asking `source` for each
    /// named tensor in canonical order.
    pub fn build<F>(layout: &ModelLayout, mut source: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize]) -> Result<Tensor>,
    {
        let c = &layout.config;
        c.validate()?;
        if layout.moe.len() != c.n_layers {
            return Err(Error::InvalidConfig("layout layer count mismatch".into()));
        }
        let mut store = ParamStore::new();
        let mut take = |store: &mut ParamStore, name: String, shape: Vec<usize>| -> Result<ParamId> {
            let t = source(&name, &shape)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model build",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
            Ok(store.push(name, t))
        };
        let d = c.d_model;
        let tok_emb = take(&mut store, "tok_emb".into(), vec![c.vocab_size, d])?;
        let pos_emb = take(&mut store, "pos_emb".into(), vec![c.max_seq, d])?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for (l, moe_shape) in layout.moe.iter().enumerate() {
            let p = format!("layer{l}");
            let ln1 = (
                take(&mut store, format!("{p}.ln1.gain"), vec![d])?,
                take(&mut store, format!("{p}.ln1.bias"), vec![d])?,
            );
            let w_q = take(&mut store, format!("{p}.attn.W_q"), vec![d, d])?;
            let w_k = take(&mut store, format!("{p}.attn.W_k"), vec![d, d])?;
            let w_v = take(&mut store, format!("{p}.attn.W_v"), vec![d, d])?;
            let w_o = take(&mut store, format!("{p}.attn.W_o"), vec![d, d])?;
            let ln2 = (
                take(&mut store, format!("{p}.ln2.gain"), vec![d])?,
                take(&mut store, format!("{p}.ln2.bias"), vec![d])?,
            );
            let mut take_ffn = |store: &mut ParamStore, prefix: String| -> Result<DenseFfn> {
                let [s0, s1, s2, s3] = ffn_shapes(c);
                Ok(DenseFfn {
                    w_in: take(store, format!("{prefix}.W_in"), s0)?,
                    b_in: take(store, format!("{prefix}.b_in"), s1)?,
                    w_out: take(store, format!("{prefix}.W_out"), s2)?,
                    b_out: take(store, format!("{prefix}.b_out"), s3)?,
                })
            };
            let ffn = match moe_shape {
                None => FeedForward::Dense(take_ffn(&mut store, format!("{p}.ffn"))?),
                Some(ms) => {
                    moe::validate_shape(ms.n_normal, ms.top_k)?;
                    let shared = take_ffn(&mut store, format!("{p}.expert0"))?;
                    let experts = (1..=ms.n_normal)
                        .map(|i| take_ffn(&mut store, format!("{p}.expert{i}")))
                        .collect::<Result<Vec<_>>>()?;
                    let router = take(&mut store, format!("{p}.router"), vec![d, ms.n_normal])?;
                    FeedForward::Moe(MoeLayer {
                        shared,
                        experts,
                        router,
                        top_k: ms.top_k,
                    })
                }
            };
            blocks.push(Block {
                ln1,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2,
                ffn,
            });
        }
        let final_ln = (
            take(&mut store, "final_ln.gain".into(), vec![d])?,
            take(&mut store, "final_ln.bias".into(), vec![d])?,
        );
        let out = match layout.head {
            HeadKind::Reward => 1,
            HeadKind::Lm => c.vocab_size,
        };
        let head_w = take(&mut store, "head.W".into(), vec![d, out])?;
        let head_b = take(&mut store, "head.b".into(), vec![out])?;
        Ok(Self {
            config: c.clone(),
            head: layout.head,
            params: store,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            config: self.config.clone(),
            head: self.head,
            moe: self
                .blocks
                .iter()
                .map(|b| match &b.ffn {
                    FeedForward::Dense(_) => None,
                    FeedForward::Moe(m) => Some(MoeShape {
                        n_normal: m.experts.len(),
                        top_k: m.top_k,
                    }),
                })
                .collect(),
        }
    }

    pub fn is_moe(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.ffn, FeedForward::Moe(_)))
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn require_head(&self, expected: HeadKind) -> Result<()> {
        if self.head == expected {
            Ok(())
        } else {
            Err(Error::WrongHead {
                expected,
                found: self.head,
            })
        }
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states after the final layer norm, one row per position.
    pub fn hidden_graph(&self, g: &mut Graph, p: &[Var], tokens: &[Token]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let len = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let tok = g.gather_rows(p[self.tok_emb.0], &ids)?;
        let pos = g.gather_rows(p[self.pos_emb.0], &positions)?;
        let mut x = g.add(tok, pos)?;

        let mask = (len > 1).then(|| {
            let mut m = Tensor::zeros(&[len, len]);
            for i in 0..len {
                for j in i + 1..len {
                    m.data_mut()[i * len + j] = MASK_VALUE;
                }
            }
            g.constant(m)
        });
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for block in &self.blocks {
            let h = g.layer_norm(x, p[block.ln1.0 .0], p[block.ln1.1 .0])?;
            let q = g.matmul(h, p[block.w_q.0])?;
            let k = g.matmul(h, p[block.w_k.0])?;
            let v = g.matmul(h, p[block.w_v.0])?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = g.slice_cols(q, s, e)?;
                let kh = g.slice_cols(k, s, e)?;
                let vh = g.slice_cols(v, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let mut scores = g.scale(scores, inv_sqrt)?;
                if let Some(m) = mask {
                    scores = g.add(scores, m)?;
                }
                let attn = g.softmax_rows(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = g.matmul(cat, p[block.w_o.0])?;
            x = g.add(x, o)?;

            let u = g.layer_norm(x, p[block.ln2.0 .0], p[block.ln2.1 .0])?;
            let f = match &block.ffn {
                FeedForward::Dense(ffn) => ffn.apply(g, p, u)?,
                FeedForward::Moe(layer) => moe::mix_graph(g, p, layer, u)?,
            };
            x = g.add(x, f)?;
        }
        g.layer_norm(x, p[self.final_ln.0 .0], p[self.final_ln.1 .0])
    }

    pub fn forward_hidden(&self, tokens: &[Token]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden_graph(&mut g, &p, tokens)?;
        Ok(g.value(h).clone())
    }

    /// `BOS ‖ prompt ‖ response ‖ EOS`; a response already ending in EOS is
    /// not terminated twice.
    pub fn encode_scored(&self, prompt: &[Token], response: &[Token]) -> Vec<Token> {
        let mut seq = Vec::with_capacity(prompt.len() + response.len() + 2);
        seq.push(self.config.bos_id());
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(response);
        if response.last() != Some(&self.config.eos_id()) {
            seq.push(self.config.eos_id());
        }
        seq
    }

    /// Scalar reward as a `[1, 1]` var.
    pub fn reward_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Var> {
        self.require_head(HeadKind::Reward)?;
        let seq = self.encode_scored(prompt, response);
        let h = self.hidden_graph(g, p, &seq)?;
        let last = g.slice_rows(h, seq.len() - 1, seq.len())?;
        let r = g.matmul(last, p[self.head_w.0])?;
        g.add_row(r, p[self.head_b.0])
    }

    pub fn reward_score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let r = self.reward_graph(&mut g, &p, prompt, response)?;
        g.value(r).item()
    }

    /// Logits for every position, `[len, vocab]`.
    pub fn logits_graph(&self, g: &mut Graph, p: &[Var], tokens: &[Token]) -> Result<Var> {
        self.require_head(HeadKind::Lm)?;
        let h = self.hidden_graph(g, p, tokens)?;
        let l = g.matmul(h, p[self.head_w.0])?;
        g.add_row(l, p[self.head_b.0])
    }

    /// Log-probability of each realized next token: entry `t` is
    /// `log p(tokens[t + 1] | tokens[..=t])`, length `len - 1`.
    pub fn lm_log_probs_graph(&self, g: &mut Graph, p: &[Var], tokens: &[Token]) -> Result<Var> {
        self.require_head(HeadKind::Lm)?;
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort {
                len: tokens.len(),
                min: 2,
            });
        }
        let logits = self.logits_graph(g, p, tokens)?;
        let pred = g.slice_rows(logits, 0, tokens.len() - 1)?;
        let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        let nll = g.cross_entropy(pred, &targets)?;
        g.scale(nll, -1.0)
    }

    pub fn lm_log_probs(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let lp = self.lm_log_probs_graph(&mut g, &p, tokens)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Sum of log-probabilities of `response` given `BOS ‖ prompt`, as a
    /// one-element var.
    pub fn response_log_prob_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        prompt: &[Token],
        response: &[Token],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        let mut seq = Vec::with_capacity(prompt.len() + response.len() + 1);
        seq.push(self.config.bos_id());
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(response);
        let lp = self.lm_log_probs_graph(g, p, &seq)?;
        let start = prompt.len();
        let resp = g.slice_rows(lp, start, seq.len() - 1)?;
        g.sum(resp)
    }

    pub fn response_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let v = self.response_log_prob_graph(&mut g, &p, prompt, response)?;
        g.value(v).item()
    }

    /// Next-token logits after `tokens` (last position only).
    pub fn next_token_logits(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        self.require_head(HeadKind::Lm)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden_graph(&mut g, &p, tokens)?;
        let last = g.slice_rows(h, tokens.len() - 1, tokens.len())?;
        let l = g.matmul(last, p[self.head_w.0])?;
        let l = g.add_row(l, p[self.head_b.0])?;
        Ok(g.value(l).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> RewardModel {
        let cfg = TransformerConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            seed: 3,
        };
        RewardModel::new(cfg, head).unwrap()
    }

    #[test]
    fn single_token_shape() {
        let m = tiny(HeadKind::Reward);
        let h = m.forward_hidden(&[4]).unwrap();
        assert_eq!(h.shape(), &[1, 8]);
    }

    #[test]
    fn rejects_long_and_out_of_range_sequences() {
        let m = tiny(HeadKind::Reward);
        assert!(matches!(
            m.forward_hidden(&[0; 13]),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
        assert!(matches!(
            m.forward_hidden(&[0, 11]),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
    }

    #[test]
    fn zero_head_scores_zero() {
        let m = tiny(HeadKind::Reward);
        assert_eq!(m.reward_score(&[1, 2], &[3, 4, 5]).unwrap(), 0.0);
    }

    #[test]
    fn wrong_head_is_reported() {
        let m = tiny(HeadKind::Lm);
        assert!(matches!(
            m.reward_score(&[1], &[2]),
            Err(Error::WrongHead {
                expected: HeadKind::Reward,
                found: HeadKind::Lm
            })
        ));
        let r = tiny(HeadKind::Reward);
        assert!(r.lm_log_probs(&[1, 2]).is_err());
    }

    #[test]
    fn uniform_logits_give_minus_log_vocab() {
        let mut m = tiny(HeadKind::Lm);
        let (w, b) = m.head_ids();
        m.params_mut().get_mut(w).fill(0.0);
        m.params_mut().get_mut(b).fill(0.0);
        for v in m.lm_log_probs(&[9, 1, 2, 3]).unwrap() {
            assert!((v + 11f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let bad = TransformerConfig {
            d_model: 10,
            n_heads: 4,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TransformerConfig::default().validate().is_ok());
    }
}
