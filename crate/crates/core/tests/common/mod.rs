#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use umrm_core::prefs::PreferencePair;
use umrm_core::rng::{self, Rng};
use umrm_core::tensor::{Graph, Tensor, Var};
use umrm_core::{HeadKind, RewardModel, Token, TransformerConfig};

pub fn rand_tensor(r: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(r)).collect()).unwrap()
}

/// `Σ x ⊙ w` for a fixed random `w`, so every output coordinate matters.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> umrm_core::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// vocab 11 (8 content tokens), d_model 8, one block.
pub fn tiny_config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq: 16,
        seed,
    }
}

pub fn small_config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        vocab_size: 19,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        max_seq: 24,
        seed,
    }
}

/// Perturbs every parameter (including the zero-initialized head) so that
/// gradients and scores are non-degenerate.
pub fn jitter(model: &mut RewardModel, seed: u64, std: f64) {
    let mut r = rng::from_seed(seed);
    let d = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += d.sample(&mut r);
        }
    }
}

pub fn random_tokens(r: &mut Rng, n_content: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| r.random_range(0..n_content) as Token).collect()
}

pub fn random_pairs(seed: u64, n: usize, n_content: usize) -> Vec<PreferencePair> {
    let mut r = rng::from_seed(seed);
    (0..n)
        .map(|_| {
            let (lp, lc, lr) = (2 + r.random_range(0..3), 2 + r.random_range(0..4), 2 + r.random_range(0..4));
            let prompt = random_tokens(&mut r, n_content, lp);
            let chosen = random_tokens(&mut r, n_content, lc);
            let mut rejected = random_tokens(&mut r, n_content, lr);
            if rejected == chosen {
                rejected.push(0);
            }
            PreferencePair {
                prompt,
                chosen,
                rejected,
                gold_margin: 1.0,
            }
        })
        .collect()
}

pub fn tiny_reward_model(seed: u64) -> RewardModel {
    let mut m = RewardModel::new(tiny_config(seed), HeadKind::Reward).unwrap();
    jitter(&mut m, seed ^ 0x5eed, 0.3);
    m
}
