//! Stage runner behind the `umrm` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;

use std::path::Path;
use std::time::Instant;

use umrm_core::checkpoint::sha256_hex;

pub use config::{load_config, ExperimentConfig, Stage};
pub use error::CliError;
pub use manifest::RunManifest;

/// Hash of the fully resolved config (after overrides).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// The manifest in `out` when it was produced by this exact config and its
/// outputs still hash correctly. Upstream inputs are not checked.
pub fn current_run(cfg: &ExperimentConfig, out: &Path) -> Option<RunManifest> {
    let m = RunManifest::load(out).ok()?;
    let fresh = m.config_hash == config_hash(cfg) && m.verify(out).ok()?.is_empty();
    fresh.then_some(m)
}

/// Runs one stage into `out` and writes its manifest.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut outputs = manifest::Outputs::new(out)?;
    stages::run_stage(&cfg.stage, cfg.seed, &mut outputs)?;
    outputs.finish(cfg.stage.name(), config_hash(cfg), cfg.seed, start.elapsed().as_secs_f64())
}
