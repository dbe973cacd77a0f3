//! Collapsing a shared-expert MoE model back into a dense model.
//!
//! Per layer, every FFN tensor becomes `λ·W_shared + Σ α_i·W_i` with
//! `α = (1 - λ)·softmax(a)`. The softmax parameterization keeps
//! `Σ α = 1 - λ` and `α ≥ 0` at every point, so the mixing logits `a` can be
//! fitted by unconstrained gradient descent. Non-FFN tensors are copied.

use serde::{Deserialize, Serialize};

use crate::checkpoint::model_hash;
use crate::error::{Error, Result};
use crate::model::{FeedForward, FfnWeights, ModelLayout, RewardModel};
use crate::prefs::{bt_loss_graph, PreferenceDataset, PreferencePair};
use crate::rng;
use crate::tensor::{softmax_row, Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

const CONSTRAINT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeProvenance {
    pub source_hash: String,
    pub lambda: f64,
    /// Final normal-expert weights, one vector per layer.
    pub alpha: Vec<Vec<f64>>,
}

impl MergeProvenance {
    /// Effective weight of the shared expert in each layer.
    pub fn shared_weights(&self) -> Vec<f64> {
        self.alpha.iter().map(|_| self.lambda).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedModel {
    pub model: RewardModel,
    pub provenance: MergeProvenance,
}

/// Shared-expert rate plus per-layer mixing logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    pub lambda: f64,
    pub logits: Vec<Vec<f64>>,
}

impl MergeParams {
    /// Zero logits: normal experts share `1 - λ` equally.
    pub fn uniform(lambda: f64, moe: &RewardModel) -> Result<Self> {
        check_lambda(lambda)?;
        let logits = moe
            .blocks()
            .iter()
            .map(|b| match &b.ffn {
                FeedForward::Moe(m) => Ok(vec![0.0; m.n_normal()]),
                FeedForward::Dense(_) => Err(Error::NotMoe),
            })
            .collect::<Result<_>>()?;
        Ok(Self { lambda, logits })
    }

    pub fn alphas(&self) -> Result<Vec<Vec<f64>>> {
        self.logits.iter().map(|a| alpha_from_logits(a, self.lambda)).collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("shared-expert rate must be in (0, 1), got {lambda}")))
    }
}

/// `α = (1 - λ)·softmax(a)`.
pub fn alpha_from_logits(logits: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if logits.is_empty() {
        return Err(Error::InvalidConfig("no normal experts to weight".into()));
    }
    let mut s = logits.to_vec();
    softmax_row(&mut s);
    Ok(s.into_iter().map(|v| v * (1.0 - lambda)).collect())
}

fn check_alpha(alpha: &[f64], lambda: f64) -> Result<()> {
    let sum: f64 = alpha.iter().sum();
    if (sum - (1.0 - lambda)).abs() > CONSTRAINT_TOL || alpha.iter().any(|&a| a < 0.0) {
        return Err(Error::MergeConstraint {
            sum,
            expected: 1.0 - lambda,
        });
    }
    Ok(())
}

fn weighted(shared: &Tensor, experts: &[&Tensor], lambda: f64, alpha: &[f64]) -> Tensor {
    let mut out = shared.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= lambda);
    for (t, a) in experts.iter().zip(alpha) {
        for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += a * v;
        }
    }
    out
}

/// Weighted average of one layer's experts into a single FFN; biases use the
/// same weights as matrices.
pub fn merge_layer(shared: &FfnWeights, experts: &[FfnWeights], lambda: f64, alpha: &[f64]) -> Result<FfnWeights> {
    check_lambda(lambda)?;
    if alpha.len() != experts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} normal experts",
            alpha.len(),
            experts.len()
        )));
    }
    check_alpha(alpha, lambda)?;
    let pick = |f: fn(&FfnWeights) -> &Tensor| -> Tensor {
        let ex: Vec<&Tensor> = experts.iter().map(f).collect();
        weighted(f(shared), &ex, lambda, alpha)
    };
    Ok(FfnWeights {
        w_in: pick(|w| &w.w_in),
        b_in: pick(|w| &w.b_in),
        w_out: pick(|w| &w.w_out),
        b_out: pick(|w| &w.b_out),
    })
}

fn dense_layout(moe: &RewardModel) -> ModelLayout {
    let mut layout = moe.layout();
    layout.moe = vec![None; layout.moe.len()];
    layout
}

fn ffn_slot(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("layer")?;
    let (l, tail) = rest.split_once(".ffn.")?;
    let slot = FfnWeights::NAMES.iter().position(|n| *n == tail)?;
    Some((l.parse().ok()?, slot))
}

/// Builds the dense model: merged FFNs, every other tensor copied verbatim.
pub fn merge_model(moe: &RewardModel, params: &MergeParams) -> Result<MergedModel> {
    check_lambda(params.lambda)?;
    if !moe.is_moe() {
        return Err(Error::NotMoe);
    }
    if params.logits.len() != moe.blocks().len() {
        return Err(Error::InvalidConfig("one logit vector per layer required".into()));
    }
    let alphas = params.alphas()?;
    let mut merged: Vec<FfnWeights> = Vec::with_capacity(alphas.len());
    for (l, (block, alpha)) in moe.blocks().iter().zip(&alphas).enumerate() {
        let FeedForward::Moe(layer) = &block.ffn else {
            return Err(Error::NotMoe);
        };
        if layer.n_normal() != alpha.len() {
            return Err(Error::ExpertCountMismatch {
                layer: l,
                found: layer.n_normal(),
                expected: alpha.len(),
            });
        }
        let store = moe.params();
        let experts: Vec<FfnWeights> = layer.experts.iter().map(|e| e.weights(store)).collect();
        merged.push(merge_layer(&layer.shared.weights(store), &experts, params.lambda, alpha)?);
    }
    let src = moe.params();
    let model = RewardModel::build(&dense_layout(moe), |name, _shape| {
        if let Some((l, slot)) = ffn_slot(name) {
            return Ok(merged[l].tensors()[slot].clone());
        }
        let id = src
            .find(name)
            .ok_or_else(|| Error::InvalidConfig(format!("MoE model has no tensor {name}")))?;
        Ok(src.get(id).clone())
    })?;
    Ok(MergedModel {
        model,
        provenance: MergeProvenance {
            source_hash: model_hash(moe),
            lambda: params.lambda,
            alpha: alphas,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeFitConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MergeFitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            steps: 50,
            batch: 32,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeFit {
    pub merged: MergedModel,
    pub params: MergeParams,
    /// Minibatch Bradley-Terry loss before each step.
    pub losses: Vec<f64>,
    /// Worst `|Σα - (1 - λ)|` over layers after each step.
    pub constraint_error: Vec<f64>,
}

/// Records, for every tensor of the dense skeleton, either the frozen source
/// tensor or the in-graph merge expression driven by `logit_vars`.
fn merged_vars(
    g: &mut Graph,
    moe: &RewardModel,
    skeleton: &RewardModel,
    moe_vars: &[Var],
    logit_vars: &[Var],
    lambda: f64,
) -> Result<Vec<Var>> {
    let mut per_layer: Vec<[Var; 4]> = Vec::with_capacity(logit_vars.len());
    for (block, &a) in moe.blocks().iter().zip(logit_vars) {
        let FeedForward::Moe(layer) = &block.ffn else {
            return Err(Error::NotMoe);
        };
        let soft = g.softmax_rows(a)?;
        let alpha = g.scale(soft, 1.0 - lambda)?;
        let alpha_i: Vec<Var> = (0..layer.n_normal())
            .map(|i| g.slice_cols(alpha, i, i + 1))
            .collect::<Result<_>>()?;
        let mut slots = [moe_vars[0]; 4];
        for (slot, out) in slots.iter_mut().enumerate() {
            let mut acc = g.scale(moe_vars[layer.shared.ids()[slot].index()], lambda)?;
            for (expert, &ai) in layer.experts.iter().zip(&alpha_i) {
                let term = g.scale_by(moe_vars[expert.ids()[slot].index()], ai)?;
                acc = g.add(acc, term)?;
            }
            *out = acc;
        }
        per_layer.push(slots);
    }
    let src = moe.params();
    skeleton
        .params()
        .names()
        .iter()
        .map(|name| match ffn_slot(name) {
            Some((l, slot)) => Ok(per_layer[l][slot]),
            None => src
                .find(name)
                .map(|id| moe_vars[id.index()])
                .ok_or_else(|| Error::InvalidConfig(format!("MoE model has no tensor {name}"))),
        })
        .collect()
}

/// Bradley-Terry loss of the merged dense model as a function of the
/// per-layer mixing logits, one `[1, n_normal]` var per layer.
pub fn merged_bt_loss_graph(
    g: &mut Graph,
    moe: &RewardModel,
    logit_vars: &[Var],
    lambda: f64,
    pairs: &[&PreferencePair],
) -> Result<Var> {
    check_lambda(lambda)?;
    let skeleton = merge_model(moe, &MergeParams::uniform(lambda, moe)?)?.model;
    let moe_vars = moe.bind(g, false);
    let p = merged_vars(g, moe, &skeleton, &moe_vars, logit_vars, lambda)?;
    bt_loss_graph(g, &skeleton, &p, pairs)
}

/// Optimizes the per-layer mixing logits on the Bradley-Terry loss of the
/// merged dense model, everything else frozen.
pub fn fit_merge(moe: &RewardModel, prefs: &PreferenceDataset, cfg: &MergeFitConfig) -> Result<MergeFit> {
    check_lambda(cfg.lambda)?;
    if prefs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = MergeParams::uniform(cfg.lambda, moe)?;
    let skeleton = merge_model(moe, &params)?.model;

    let mut logits = ParamStore::new();
    for (l, a) in params.logits.iter().enumerate() {
        logits.push(format!("layer{l}.merge_logits"), Tensor::matrix(1, a.len(), a.clone())?);
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut r = rng::stream(cfg.seed, "merge-batches");
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut constraint_error = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<&PreferencePair> = {
            use rand::seq::index::sample;
            let k = cfg.batch.clamp(1, prefs.len());
            let mut idx = sample(&mut r, prefs.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &prefs.pairs[i]).collect()
        };
        let mut g = Graph::new();
        let moe_vars = moe.bind(&mut g, false);
        let logit_vars = logits.bind(&mut g, true);
        let p = merged_vars(&mut g, moe, &skeleton, &moe_vars, &logit_vars, cfg.lambda)?;
        let loss = bt_loss_graph(&mut g, &skeleton, &p, &batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        })?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(lv);
        let grads = g.backward(loss)?;
        logits.zero_grad();
        logits.accumulate(&logit_vars, &grads)?;
        opt.step_store(&mut logits)?;

        let mut worst = 0.0f64;
        for (l, t) in logits.values().iter().enumerate() {
            params.logits[l] = t.data().to_vec();
            let alpha = alpha_from_logits(&params.logits[l], cfg.lambda)?;
            worst = worst.max((alpha.iter().sum::<f64>() - (1.0 - cfg.lambda)).abs());
        }
        constraint_error.push(worst);
    }
    let merged = merge_model(moe, &params)?;
    Ok(MergeFit {
        merged,
        params,
        losses,
        constraint_error,
    })
}
