//! Benchmark fixtures: the desk architecture in dense, upcycled and merged
//! form, plus a batch of preference pairs.

use umrm_core::merge::{merge_model, MergeParams};
use umrm_core::prefs::{generate_preferences, GenConfig, GoldConfig, ResponseSampler};
use umrm_core::{upcycle, HeadKind, PreferenceDataset, RewardModel, SyntheticGold, TransformerConfig, UpcycleConfig};

pub fn desk_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 32,
        n_layers: 2,
        d_ff: 128,
        max_seq: 32,
        seed: 1,
        ..TransformerConfig::default()
    }
}

pub struct Models {
    pub dense: RewardModel,
    pub moe: RewardModel,
    pub merged: RewardModel,
}

pub fn models(n_experts: usize) -> Models {
    let dense = RewardModel::new(desk_config(), HeadKind::Reward).expect("valid config");
    let moe = upcycle(
        &dense,
        &UpcycleConfig {
            n_experts,
            top_k: 2,
            noise_scale: 0.01,
            seed: 2,
        },
    )
    .expect("dense input");
    let params = MergeParams::uniform(0.5, &moe).expect("moe input");
    let merged = merge_model(&moe, &params).expect("valid merge").model;
    Models { dense, moe, merged }
}

pub fn pairs(n: usize) -> PreferenceDataset {
    let cfg = desk_config();
    let gold = SyntheticGold::generate(3, cfg.n_content(), cfg.eos_id(), &GoldConfig::default()).expect("valid gold");
    let gen = GenConfig {
        n_prompts: n,
        seed: 4,
        ..GenConfig::default()
    };
    generate_preferences(&gold, ResponseSampler::Uniform { n_content: cfg.n_content() }, cfg.n_content(), &gen)
        .expect("valid generation config")
}
