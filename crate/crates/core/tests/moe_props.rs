mod common;

use common::{jitter, rand_tensor, random_tokens, small_config, tiny_reward_model};
use proptest::prelude::*;
use umrm_core::checkpoint;
use umrm_core::model::FeedForward;
use umrm_core::moe::{compute_routing, moe_layer, moe_layer_forward, routing_from_logits, top_indices};
use umrm_core::rng;
use umrm_core::tensor::{Graph, Tensor};
use umrm_core::{upcycle, Error, HeadKind, RewardModel, TransformerConfig, UpcycleConfig};

fn ucfg(n_experts: usize, top_k: usize, noise: f64) -> UpcycleConfig {
    UpcycleConfig {
        n_experts,
        top_k,
        noise_scale: noise,
        seed: 3,
    }
}

fn trained_looking_dense(seed: u64) -> RewardModel {
    let mut m = RewardModel::new(small_config(seed), HeadKind::Reward).unwrap();
    jitter(&mut m, seed + 1, 0.2);
    m
}

#[test]
fn upcycle_preserves_the_dense_function() {
    let dense = trained_looking_dense(1);
    let mut r = rng::from_seed(10);
    for n in [2, 4, 6] {
        let moe = upcycle(&dense, &ucfg(n, 2, 0.0)).unwrap();
        // Random routers: with identical experts the output must not depend
        // on the routing at all.
        let mut moe_routed = moe.clone();
        for l in 0..dense.config().n_layers {
            let id = moe_routed.params().find(&format!("layer{l}.router")).unwrap();
            *moe_routed.params_mut().get_mut(id) = rand_tensor(&mut r, &[16, n - 1], 1.0);
        }
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let lp = 1 + rand::Rng::random_range(&mut r, 0..5);
            let lr = 1 + rand::Rng::random_range(&mut r, 0..8);
            let prompt = random_tokens(&mut r, 16, lp);
            let resp = random_tokens(&mut r, 16, lr);
            let d = dense.reward_score(&prompt, &resp).unwrap();
            for m in [&moe, &moe_routed] {
                worst = worst.max((m.reward_score(&prompt, &resp).unwrap() - d).abs());
            }
            let seq = dense.encode_scored(&prompt, &resp);
            let hd = dense.forward_hidden(&seq).unwrap();
            worst = worst.max(moe_routed.forward_hidden(&seq).unwrap().max_abs_diff(&hd));
        }
        assert!(worst < 1e-10, "N={n}: {worst:e}");
    }
}

#[test]
fn upcycle_parameter_count() {
    let dense = trained_looking_dense(2);
    let c = dense.config().clone();
    for n in [2, 4, 6] {
        let moe = upcycle(&dense, &ucfg(n, 2, 0.0)).unwrap();
        let expected = dense.param_count() + c.n_layers * ((n - 1) * c.ffn_param_count() + c.d_model * (n - 1));
        assert_eq!(moe.param_count(), expected, "N={n}");
    }
}

#[test]
fn upcycle_rejects_moe_input_and_bad_shapes() {
    let dense = trained_looking_dense(3);
    let moe = upcycle(&dense, &ucfg(4, 2, 0.0)).unwrap();
    assert!(matches!(upcycle(&moe, &ucfg(4, 2, 0.0)), Err(Error::AlreadyMoe)));
    assert!(upcycle(&dense, &ucfg(1, 2, 0.0)).is_err());
    assert!(upcycle(&dense, &ucfg(4, 1, 0.0)).is_err());
    assert!(upcycle(&dense, &ucfg(4, 5, 0.0)).is_err());
}

#[test]
fn zero_router_gives_uniform_affinities() {
    let dense = trained_looking_dense(4);
    let moe = upcycle(&dense, &ucfg(5, 2, 0.0)).unwrap();
    let router = moe.params().get(moe.params().find("layer1.router").unwrap());
    let mut r = rng::from_seed(1);
    for _ in 0..10 {
        let h = rand_tensor(&mut r, &[16], 1.0);
        let d = compute_routing(h.data(), router, 2).unwrap();
        assert!(d.affinities.iter().all(|&s| s == 0.25));
    }
}

#[test]
fn routing_examples() {
    let d = routing_from_logits(&[2.0, 1.0, 0.0], 3);
    let s = [0.665_240_955_774_821_9, 0.244_728_471_054_797_65, 0.090_030_573_170_380_46];
    for (a, b) in d.affinities.iter().zip(s) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(d.selected, vec![0, 1]);
    assert!((d.s_max - s[0]).abs() < 1e-15);
    assert!((d.g_shared - 0.334_759_044_225_178_1).abs() < 1e-15);
    assert!((d.g_selected[0] - 0.401_543_350_161_603_66).abs() < 1e-15);
    assert!((d.g_selected[1] - 0.263_697_605_613_218_23).abs() < 1e-15);
    assert!((d.total_weight() - 1.0).abs() < 1e-15);

    let d = routing_from_logits(&[0.0; 4], 3);
    assert_eq!((d.s_max, d.g_shared), (0.25, 0.75));
    assert_eq!(d.g_selected, vec![0.125, 0.125]);

    for logit in [-40.0, 0.0, 3.0] {
        let d = routing_from_logits(&[logit], 2);
        assert_eq!(d.g_selected, vec![d.s_max]);
        assert_eq!(d.total_weight(), 1.0);
    }
}

#[test]
fn routing_normalization_over_random_states() {
    let mut r = rng::from_seed(99);
    for (n, k) in [(3, 2), (5, 3), (7, 3)] {
        let router = rand_tensor(&mut r, &[16, n - 1], 1.0);
        for _ in 0..1000 {
            let h = rand_tensor(&mut r, &[16], 2.0);
            let d = compute_routing(h.data(), &router, k).unwrap();
            assert!((d.total_weight() - 1.0).abs() <= 1e-12);
            assert_eq!(d.g_shared, 1.0 - d.s_max);
            assert!(d.g_selected.iter().chain([&d.g_shared]).all(|&w| (0.0..=1.0).contains(&w)));
            assert_eq!(d.selected.len(), k - 1);
        }
    }
}

#[test]
fn identical_experts_ignore_the_router() {
    let dense = trained_looking_dense(5);
    let mut moe = upcycle(&dense, &ucfg(4, 3, 0.0)).unwrap();
    let mut r = rng::from_seed(5);
    let id = moe.params().find("layer0.router").unwrap();
    *moe.params_mut().get_mut(id) = rand_tensor(&mut r, &[16, 3], 3.0);
    let u = rand_tensor(&mut r, &[6, 16], 1.0);

    let FeedForward::Dense(ffn) = &dense.blocks()[0].ffn else { unreachable!() };
    let mut g = Graph::new();
    let p = dense.bind(&mut g, false);
    let uv = g.constant(u.clone());
    let f = ffn.apply(&mut g, &p, uv).unwrap();
    let expected = g.add(f, uv).unwrap();
    let got = moe_layer_forward(&moe, 0, &u).unwrap();
    assert!(got.max_abs_diff(g.value(expected)) < 1e-12);
}

#[test]
fn all_active_equals_explicit_weighted_sum() {
    let dense = trained_looking_dense(6);
    let mut moe = upcycle(&dense, &ucfg(4, 4, 0.2)).unwrap();
    let mut r = rng::from_seed(6);
    let id = moe.params().find("layer1.router").unwrap();
    let router = rand_tensor(&mut r, &[16, 3], 1.0);
    *moe.params_mut().get_mut(id) = router.clone();
    let u = rand_tensor(&mut r, &[5, 16], 1.0);
    let got = moe_layer_forward(&moe, 1, &u).unwrap();

    let layer = moe_layer(&moe, 1).unwrap();
    let mut g = Graph::new();
    let p = moe.bind(&mut g, false);
    for t in 0..5 {
        let d = compute_routing(u.row(t), &router, 4).unwrap();
        let ut = g.constant(Tensor::matrix(1, 16, u.row(t).to_vec()).unwrap());
        let mut acc: Vec<f64> = u.row(t).to_vec();
        let ys = layer.shared.apply(&mut g, &p, ut).unwrap();
        for (a, y) in acc.iter_mut().zip(g.value(ys).data()) {
            *a += d.g_shared * y;
        }
        for (&i, &w) in d.selected.iter().zip(&d.g_selected) {
            let yi = layer.experts[i].apply(&mut g, &p, ut).unwrap();
            for (a, y) in acc.iter_mut().zip(g.value(yi).data()) {
                *a += w * y;
            }
        }
        for (a, b) in acc.iter().zip(got.row(t)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn moe_checkpoint_tensor_names() {
    let cfg = TransformerConfig {
        vocab_size: 19,
        d_model: 16,
        n_layers: 4,
        n_heads: 4,
        d_ff: 32,
        max_seq: 24,
        seed: 0,
    };
    let dense = RewardModel::new(cfg, HeadKind::Reward).unwrap();
    let moe = upcycle(&dense, &ucfg(4, 2, 0.0)).unwrap();
    let (header, _) = checkpoint::read_header(&checkpoint::to_bytes(&moe, None)).unwrap();
    let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    let expert_or_router = names.iter().filter(|n| n.contains(".expert") || n.ends_with(".router")).count();
    assert_eq!(expert_or_router, 4 * (4 * 4 + 1));
    // Backbone: embeddings, per-layer norms and attention, final norm, head.
    let backbone = 2 + 4 * (4 + 4) + 2 + 2;
    assert_eq!(names.len(), expert_or_router + backbone);
    assert_eq!(names.len(), moe.params().len());
}

#[test]
fn tiny_moe_scores_are_deterministic() {
    let dense = tiny_reward_model(8);
    let a = upcycle(&dense, &ucfg(3, 2, 0.01)).unwrap();
    let b = upcycle(&dense, &ucfg(3, 2, 0.01)).unwrap();
    assert_eq!(a, b);
    let s1 = a.reward_score(&[1, 2], &[3, 4, 5]).unwrap();
    let s2 = a.reward_score(&[1, 2], &[3, 4, 5]).unwrap();
    assert_eq!(s1.to_bits(), s2.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gate_weights_form_a_partition(
        logits in prop::collection::vec(-20.0f64..20.0, 1..9),
        k_frac in 0.0f64..1.0,
    ) {
        let n = logits.len();
        let top_k = 2 + ((n - 1) as f64 * k_frac) as usize;
        let d = routing_from_logits(&logits, top_k);
        prop_assert!((d.total_weight() - 1.0).abs() <= 1e-12);
        prop_assert!(d.g_selected.iter().all(|&w| (0.0..=1.0).contains(&w)));
        prop_assert!((0.0..=1.0).contains(&d.g_shared));
        prop_assert!((d.affinities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn raising_a_logit_never_lowers_its_affinity(
        logits in prop::collection::vec(-5.0f64..5.0, 2..8),
        which in 0usize..8,
        bump in 0.0f64..3.0,
    ) {
        let i = which % logits.len();
        let before = routing_from_logits(&logits, 2).affinities[i];
        let mut raised = logits.clone();
        raised[i] += bump;
        let after = routing_from_logits(&raised, 2).affinities[i];
        prop_assert!(after >= before);
    }

    #[test]
    fn top_selection_is_permutation_equivariant(
        values in prop::collection::vec(-3.0f64..3.0, 2..8),
        k in 1usize..4,
        rot in 0usize..8,
    ) {
        let n = values.len();
        let k = k.min(n);
        let rot = rot % n;
        // Rotate expert order: expert j moves to position (j + rot) % n.
        let mut permuted = vec![0.0; n];
        for (j, &v) in values.iter().enumerate() {
            permuted[(j + rot) % n] = v;
        }
        let a: Vec<f64> = top_indices(&values, k).iter().map(|&j| values[j]).collect();
        let b: Vec<f64> = top_indices(&permuted, k).iter().map(|&j| permuted[j]).collect();
        // Same selected values; only tie order may differ.
        prop_assert_eq!(a, b);
    }
}
