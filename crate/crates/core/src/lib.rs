//! Upcycle-and-merge mixture-of-experts reward modeling.
//!
//! A dense reward model is upcycled into a mixture of experts with a shared
//! expert, trained on pairwise preferences, then merged back into a dense
//! model. The crate also carries the alignment harness used to measure reward
//! overoptimization: Best-of-N sampling and KL-regularized PPO against a
//! synthetic gold reward.

pub mod align;
pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod merge;
pub mod model;
pub mod moe;
pub mod prefs;
pub mod rng;
pub mod sampling;
pub mod score;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use ensemble::{EnsembleMode, EnsembleRm};
pub use error::{Error, Result};
pub use merge::{fit_merge, merge_model, MergeFitConfig, MergeParams, MergeProvenance, MergedModel};
pub use model::{HeadKind, ModelLayout, RewardModel, Token, TransformerConfig};
pub use moe::{upcycle, RoutingDecision, UpcycleConfig};
pub use prefs::{PreferenceDataset, PreferencePair, SyntheticGold, TrainConfig};
pub use score::RewardScorer;
pub use tensor::Tensor;
