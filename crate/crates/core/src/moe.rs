//! Shared-expert mixture-of-experts layers and dense-to-MoE upcycling.
//!
//! Every MoE layer has one shared expert that sees every token and `n_normal`
//! routed experts. For a token with normalized hidden state `u`:
//!
//! ```text
//! s        = softmax(u · router)            over all normal experts
//! s_max    = max(s)
//! g_shared = 1 - s_max
//! g_i      = softmax(s_selected)_i · s_max  for the top_k - 1 selected experts
//! out      = g_shared · E_s(u) + Σ g_i · E_i(u)
//! ```
//!
//! so the gates always sum to one and an upcycled layer whose experts are
//! identical reproduces the dense FFN exactly.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseFfn, FeedForward, ModelLayout, MoeShape, RewardModel};
use crate::rng;
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// One MoE block: handles into the owning model's parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub shared: DenseFfn,
    pub experts: Vec<DenseFfn>,
    /// `[d_model, n_normal]` affinity projection; the shared expert has no column.
    pub router: ParamId,
    /// Activated experts per token, shared expert included.
    pub top_k: usize,
}

impl MoeLayer {
    pub fn n_normal(&self) -> usize {
        self.experts.len()
    }
}

pub(crate) fn validate_shape(n_normal: usize, top_k: usize) -> Result<()> {
    if n_normal < 1 {
        return Err(Error::InvalidConfig("MoE layer needs at least one normal expert".into()));
    }
    if top_k < 2 || top_k > n_normal + 1 {
        return Err(Error::InvalidConfig(format!(
            "top_k must be in 2..={} (shared + normal experts), got {top_k}",
            n_normal + 1
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpcycleConfig {
    /// Total experts per layer, shared expert included.
    pub n_experts: usize,
    /// Activated experts per token, shared expert included.
    pub top_k: usize,
    /// Std of the Gaussian perturbation added to normal-expert copies.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for UpcycleConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            top_k: 2,
            noise_scale: 0.0,
            seed: 0,
        }
    }
}

impl UpcycleConfig {
    pub fn n_normal(&self) -> usize {
        self.n_experts.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 2 {
            return Err(Error::InvalidConfig("n_experts must be at least 2".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig("noise_scale must be finite and non-negative".into()));
        }
        validate_shape(self.n_normal(), self.top_k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Softmax affinities over all normal experts.
    pub affinities: Vec<f64>,
    pub s_max: f64,
    pub g_shared: f64,
    /// Normal-expert indices (0-based among normal experts), best first.
    pub selected: Vec<usize>,
    pub g_selected: Vec<f64>,
}

impl RoutingDecision {
    pub fn total_weight(&self) -> f64 {
        self.g_shared + self.g_selected.iter().sum::<f64>()
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    crate::tensor::softmax_row(&mut v);
    v
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate weights from raw router logits for one token.
pub fn routing_from_logits(logits: &[f64], top_k: usize) -> RoutingDecision {
    let s = softmax(logits);
    let selected = top_indices(&s, top_k - 1);
    let s_max = s[selected[0]];
    let picked: Vec<f64> = selected.iter().map(|&i| s[i]).collect();
    let g_selected = softmax(&picked).into_iter().map(|w| w * s_max).collect();
    RoutingDecision {
        affinities: s,
        s_max,
        g_shared: 1.0 - s_max,
        selected,
        g_selected,
    }
}

/// Routing for one hidden vector against a `[d_model, n_normal]` router.
pub fn compute_routing(hidden: &[f64], router: &Tensor, top_k: usize) -> Result<RoutingDecision> {
    let (d, n) = match router.shape() {
        [d, n] => (*d, *n),
        s => return Err(Error::shape("compute_routing", format!("router shape {s:?}"))),
    };
    if hidden.len() != d {
        return Err(Error::shape("compute_routing", format!("hidden {} vs {d}", hidden.len())));
    }
    validate_shape(n, top_k)?;
    let mut logits = vec![0.0; n];
    for (i, h) in hidden.iter().enumerate() {
        for (j, l) in logits.iter_mut().enumerate() {
            *l += h * router.get(i, j);
        }
    }
    Ok(routing_from_logits(&logits, top_k))
}

/// Gated expert mixture without the residual term, rows of `u` are tokens.
pub fn mix_graph(g: &mut Graph, p: &[Var], layer: &MoeLayer, u: Var) -> Result<Var> {
    let len = g.value(u).rows();
    let n = layer.n_normal();
    let logits = g.matmul(u, p[layer.router.0])?;
    let s = g.softmax_rows(logits)?;

    let selected: Vec<Vec<usize>> = (0..len)
        .map(|t| top_indices(g.value(s).row(t), layer.top_k - 1))
        .collect();
    let best: Vec<Vec<usize>> = selected.iter().map(|sel| vec![sel[0]]).collect();

    let s_sel = g.gather_per_row(s, &selected)?;
    let s_max = g.gather_per_row(s, &best)?;
    let w = g.softmax_rows(s_sel)?;
    let g_sel = g.mul_col(w, s_max)?;
    let g_shared = g.affine(s_max, -1.0, 1.0)?;

    let shared = layer.shared.apply(g, p, u)?;
    let mut out = g.mul_col(shared, g_shared)?;

    let gates = g.scatter_per_row(g_sel, &selected, n)?;
    for (i, expert) in layer.experts.iter().enumerate() {
        let tokens: Vec<usize> = (0..len).filter(|t| selected[*t].contains(&i)).collect();
        if tokens.is_empty() {
            continue;
        }
        let ui = g.gather_rows(u, &tokens)?;
        let yi = expert.apply(g, p, ui)?;
        let col = g.slice_cols(gates, i, i + 1)?;
        let gi = g.gather_rows(col, &tokens)?;
        let yi = g.mul_col(yi, gi)?;
        let yi = g.scatter_rows(yi, &tokens, len)?;
        out = g.add(out, yi)?;
    }
    Ok(out)
}

/// Full MoE layer with residual: `Σ g_i E_i(u) + u`.
pub fn layer_forward_graph(g: &mut Graph, p: &[Var], layer: &MoeLayer, u: Var) -> Result<Var> {
    let mix = mix_graph(g, p, layer, u)?;
    g.add(mix, u)
}

/// Evaluates block `layer_index`'s MoE layer (with residual) on the rows of `u`.
pub fn moe_layer_forward(model: &RewardModel, layer_index: usize, u: &Tensor) -> Result<Tensor> {
    let layer = moe_layer(model, layer_index)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let uv = g.constant(u.clone());
    let out = layer_forward_graph(&mut g, &p, layer, uv)?;
    Ok(g.value(out).clone())
}

pub fn moe_layer(model: &RewardModel, layer_index: usize) -> Result<&MoeLayer> {
    let block = model.blocks().get(layer_index).ok_or(Error::IndexOutOfRange {
        what: "layer",
        index: layer_index,
        size: model.blocks().len(),
    })?;
    match &block.ffn {
        FeedForward::Moe(m) => Ok(m),
        FeedForward::Dense(_) => Err(Error::NotMoe),
    }
}

/// Replaces every dense FFN with a shared-expert MoE layer whose experts are
/// copies of it. Normal-expert copies get optional Gaussian noise; the router
/// starts at zero; every other tensor is copied unchanged.
pub fn upcycle(dense: &RewardModel, cfg: &UpcycleConfig) -> Result<RewardModel> {
    cfg.validate()?;
    if dense.is_moe() {
        return Err(Error::AlreadyMoe);
    }
    let src = dense.params();
    let n_layers = dense.config().n_layers;
    let layout = ModelLayout {
        config: dense.config().clone(),
        head: dense.head_kind(),
        moe: vec![
            Some(MoeShape {
                n_normal: cfg.n_normal(),
                top_k: cfg.top_k,
            });
            n_layers
        ],
    };
    let mut noise_rng = rng::stream(cfg.seed, "expert-noise");
    let noise = (cfg.noise_scale > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_scale).expect("checked noise scale"));

    RewardModel::build(&layout, |name, shape| {
        if name.ends_with(".router") {
            return Ok(Tensor::zeros(shape));
        }
        if let Some((layer, rest)) = name.split_once(".expert") {
            let (idx, tensor) = rest.split_once('.').expect("expert tensor names have a suffix");
            let source = format!("{layer}.ffn.{tensor}");
            let id = src.find(&source).ok_or_else(|| {
                Error::InvalidConfig(format!("dense model has no tensor {source}"))
            })?;
            let mut t = src.get(id).clone();
            if idx != "0" {
                if let Some(dist) = &noise {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v += dist.sample(&mut noise_rng));
                }
            }
            return Ok(t);
        }
        let id = src
            .find(name)
            .ok_or_else(|| Error::InvalidConfig(format!("dense model has no tensor {name}")))?;
        Ok(src.get(id).clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_stage_softmax_example() {
        let r = routing_from_logits(&[2.0, 1.0, 0.0], 3);
        assert_eq!(r.selected, vec![0, 1]);
        assert!((r.s_max - 0.665_240_955_774_821_7).abs() < 1e-12);
        assert!((r.g_shared - 0.334_759_044_225_178_3).abs() < 1e-12);
        assert!((r.total_weight() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_logits_split_evenly() {
        let r = routing_from_logits(&[0.5; 4], 3);
        assert_eq!(r.selected, vec![0, 1]);
        assert!((r.s_max - 0.25).abs() < 1e-15);
        assert!((r.g_shared - 0.75).abs() < 1e-15);
        for g in &r.g_selected {
            assert!((g - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_normal_expert() {
        for logit in [-3.0, 0.0, 7.5] {
            let r = routing_from_logits(&[logit], 2);
            assert_eq!(r.g_selected, vec![r.s_max]);
            assert_eq!(r.s_max, 1.0);
            assert_eq!(r.total_weight(), 1.0);
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(top_indices(&[0.2, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_indices(&[0.3, 0.3, 0.3], 1), vec![0]);
    }

    #[test]
    fn shape_validation() {
        assert!(validate_shape(3, 1).is_err());
        assert!(validate_shape(3, 5).is_err());
        assert!(validate_shape(3, 4).is_ok());
        assert!(validate_shape(0, 2).is_err());
    }
}
