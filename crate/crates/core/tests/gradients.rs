//! Reverse-mode gradients against central finite differences.

mod common;

use common::{rand_tensor, random_pairs, tiny_config, tiny_reward_model, jitter};
use umrm_core::merge::merged_bt_loss_graph;
use umrm_core::moe::layer_forward_graph;
use umrm_core::rng;
use umrm_core::tensor::{finite_diff_check, Graph, Tensor, Var};
use umrm_core::{upcycle, HeadKind, Result, RewardModel, UpcycleConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const POINTS: u64 = 10;

/// Weighted sum of `x` with weights fixed by its shape, so every output
/// coordinate contributes to the scalar under test.
fn reduce(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = rand_tensor(&mut rng::from_seed(0xfeed), &shape, 1.0);
    common::weighted_sum(g, x, &w)
}

type Program = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Program)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y)
        })),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            reduce(g, y)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y)
        })),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            reduce(g, y)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            reduce(g, y)
        })),
        ("mul_col", vec![vec![3, 4], vec![3, 1]], Box::new(|g, v| {
            let y = g.mul_col(v[0], v[1])?;
            reduce(g, y)
        })),
        ("scale_by", vec![vec![2, 3], vec![1]], Box::new(|g, v| {
            let y = g.scale_by(v[0], v[1])?;
            reduce(g, y)
        })),
        ("affine", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.affine(v[0], -1.7, 0.3)?;
            reduce(g, y)
        })),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.softmax_rows(v[0])?;
            reduce(g, y)
        })),
        ("log_softmax_rows", vec![vec![3, 5]], Box::new(|g, v| {
            let y = g.log_softmax_rows(v[0])?;
            reduce(g, y)
        })),
        ("sigmoid", vec![vec![2, 4]], Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            reduce(g, y)
        })),
        ("gelu", vec![vec![2, 4]], Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            reduce(g, y)
        })),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            reduce(g, y)
        })),
        ("gather_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            reduce(g, y)
        })),
        ("scatter_rows", vec![vec![3, 2]], Box::new(|g, v| {
            let y = g.scatter_rows(v[0], &[4, 1, 4], 5)?;
            reduce(g, y)
        })),
        ("gather_per_row", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.gather_per_row(v[0], &[vec![0, 3], vec![2, 2], vec![1, 0]])?;
            reduce(g, y)
        })),
        ("scatter_per_row", vec![vec![3, 2]], Box::new(|g, v| {
            let y = g.scatter_per_row(v[0], &[vec![0, 3], vec![2, 1], vec![1, 0]], 4)?;
            reduce(g, y)
        })),
        ("slice_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            reduce(g, y)
        })),
        ("slice_cols", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.slice_cols(v[0], 1, 4)?;
            reduce(g, y)
        })),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            reduce(g, y)
        })),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            reduce(g, y)
        })),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })),
        ("mean", vec![vec![2, 3]], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        })),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|g, v| {
            let y = g.cross_entropy(v[0], &[0, 4, 2, 2])?;
            reduce(g, y)
        })),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    for (name, shapes, program) in primitives() {
        for k in 0..POINTS {
            let mut r = rng::from_seed(rng::indexed_seed(0x9e3d, k));
            let point: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s, 1.0)).collect();
            let err = finite_diff_check(&program, &point, H).unwrap();
            assert!(err < TOL, "{name} point {k}: rel err {err:e}");
        }
    }
}

#[test]
fn linear_program_is_exact() {
    let point = [Tensor::vector(vec![0.3, -1.2, 2.0])];
    let err = finite_diff_check(
        |g, v| {
            let y = g.affine(v[0], 3.0, 1.0)?;
            g.sum(y)
        },
        &point,
        H,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err:e}");
}

#[test]
fn gelu_mlp_and_softmax_cross_entropy_head() {
    let mut r = rng::from_seed(4);
    let x = rand_tensor(&mut r, &[3, 4], 1.0);
    let point = [
        rand_tensor(&mut r, &[4, 6], 0.5),
        rand_tensor(&mut r, &[6], 0.5),
        rand_tensor(&mut r, &[6, 5], 0.5),
        rand_tensor(&mut r, &[5], 0.5),
    ];
    let err = finite_diff_check(
        |g, v| {
            let x = g.constant(x.clone());
            let h = g.matmul(x, v[0])?;
            let h = g.add_row(h, v[1])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[2])?;
            let o = g.add_row(o, v[3])?;
            let ce = g.cross_entropy(o, &[1, 4, 0])?;
            g.mean(ce)
        },
        &point,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err:e}");
}

fn model_check(model: &RewardModel, program: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let point: Vec<Tensor> = model.params().values().to_vec();
    finite_diff_check(program, &point, H).unwrap()
}

#[test]
fn reward_score_gradient_wrt_every_parameter() {
    for k in 0..3 {
        let m = tiny_reward_model(100 + k);
        let err = model_check(&m, |g, p| m.reward_graph(g, p, &[1, 4, 2], &[7, 0, 3, 3]));
        assert!(err < TOL, "model {k}: rel err {err:e}");
    }
}

#[test]
fn lm_log_prob_gradient() {
    let mut m = RewardModel::new(tiny_config(3), HeadKind::Lm).unwrap();
    jitter(&mut m, 8, 0.3);
    let err = model_check(&m, |g, p| m.response_log_prob_graph(g, p, &[2, 5], &[1, 1, 6]));
    assert!(err < TOL, "{err:e}");
}

#[test]
fn moe_layer_gradient_wrt_router_logits() {
    let dense = tiny_reward_model(21);
    let mut moe = upcycle(
        &dense,
        &UpcycleConfig {
            n_experts: 4,
            top_k: 3,
            noise_scale: 0.1,
            seed: 2,
        },
    )
    .unwrap();
    // A nonzero router makes the routing weights depend on it.
    let router = moe.params().find("layer0.router").unwrap();
    let mut r = rng::from_seed(77);
    *moe.params_mut().get_mut(router) = rand_tensor(&mut r, &[8, 3], 0.5);
    let layer = umrm_core::moe::moe_layer(&moe, 0).unwrap().clone();
    let u = rand_tensor(&mut r, &[5, 8], 1.0);
    let w = rand_tensor(&mut r, &[5, 8], 1.0);

    // Only the router varies; experts and input are frozen at their values.
    let base: Vec<Tensor> = moe.params().values().to_vec();
    let err = finite_diff_check(
        |g, v| {
            let mut p: Vec<Var> = base.iter().map(|t| g.constant(t.clone())).collect();
            p[router.index()] = v[0];
            let x = g.constant(u.clone());
            let y = layer_forward_graph(g, &p, &layer, x)?;
            common::weighted_sum(g, y, &w)
        },
        &[moe.params().get(router).clone()],
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn bt_loss_gradient_wrt_merge_logits() {
    let mut cfg = tiny_config(5);
    cfg.n_layers = 1;
    let mut dense = RewardModel::new(cfg, HeadKind::Reward).unwrap();
    jitter(&mut dense, 31, 0.3);
    let moe = upcycle(
        &dense,
        &UpcycleConfig {
            n_experts: 3,
            top_k: 2,
            noise_scale: 0.3,
            seed: 4,
        },
    )
    .unwrap();
    let pairs = random_pairs(9, 6, 8);
    let refs: Vec<_> = pairs.iter().collect();
    for k in 0..POINTS {
        let mut r = rng::from_seed(rng::indexed_seed(12, k));
        let logits = rand_tensor(&mut r, &[1, 2], 1.0);
        let err = finite_diff_check(|g, v| merged_bt_loss_graph(g, &moe, v, 0.4, &refs), &[logits], H).unwrap();
        assert!(err < TOL, "point {k}: rel err {err:e}");
    }
}
