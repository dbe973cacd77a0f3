use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use umrm_cli::{current_run, load_config, run, CliError, RunManifest};

#[derive(Parser)]
#[command(name = "umrm", version, about = "Upcycle-and-merge MoE reward modeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage from a JSON config.
    Run {
        /// Expected stage name; must match the config when given.
        stage: Option<String>,
        #[arg(long)]
        config: PathBuf,
        /// Root seed, replacing the config's.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// `key.path=value`, applied to the config JSON before validation.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Skip the stage when `out` already holds a verified run of the
        /// same resolved config.
        #[arg(long)]
        resume: bool,
    },
    /// Re-hash the outputs listed in a run directory's manifest.
    Verify { dir: PathBuf },
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("UMRM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("UMRM_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Run {
            stage,
            config,
            seed,
            out,
            overrides,
            resume,
        } => {
            let cfg = load_config(&config, seed, &overrides)?;
            if let Some(s) = stage {
                if s != cfg.stage.name() {
                    return Err(CliError::Config(format!(
                        "stage {s} requested but config describes {}",
                        cfg.stage.name()
                    )));
                }
            }
            if resume && current_run(&cfg, &out).is_some() {
                eprintln!("{}: up to date in {}", cfg.stage.name(), out.display());
                return Ok(());
            }
            let m = run(&cfg, &out)?;
            eprintln!(
                "{}: {} outputs in {} ({:.1}s)",
                m.stage,
                m.outputs.len(),
                out.display(),
                m.wall_clock_secs
            );
        }
        Command::Verify { dir } => {
            let m = RunManifest::load(&dir)?;
            let bad = m.verify(&dir)?;
            if !bad.is_empty() {
                return Err(CliError::Report(format!("hash mismatch: {}", bad.join(", "))));
            }
            eprintln!("{}: {} outputs verified", dir.display(), m.outputs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
