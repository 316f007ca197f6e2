//! Batch experiment CLI for gated audio-visual fusion verification.
//!
//! Subcommands: `synth` (generate a dataset to disk), `train` (one
//! variant, one seed), `score` (a checkpoint against a trial list),
//! `metrics` (EER/minDCF of a score file), `ablate` (the full fusion
//! ladder across seeds), and `gradcheck` (finite-difference verification
//! of every variant's gradients).
//!
//! Runs are non-interactive and deterministic. On failure the process
//! prints one machine-parsable JSON line to stdout, writes human detail
//! to stderr, and exits nonzero. `DCA_THREADS` caps worker parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dca_core::error::{DcaError, Result};
use dca_core::formats;
use dca_core::metrics::{
    compute_eer, compute_min_dcf, det_curve, DEFAULT_C_FA, DEFAULT_C_MISS, DEFAULT_P_TARGET,
};
use dca_core::runner;
use dca_core::trainer::Checkpoint;
use dca_core::{ExperimentConfig, FusionVariant};

#[derive(Parser)]
#[command(
    name = "dca",
    about = "Audio-visual fusion verification experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as AVF1 files, a
    /// manifest, and a trial list.
    Synth {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Suppress progress output.
        #[arg(long)]
        quiet: bool,
    },
    /// Train one fusion variant with the config's base seed and save the
    /// checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fusion variant; defaults to the config's only variant.
        #[arg(long)]
        variant: Option<FusionVariant>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score the configured trial list with a saved checkpoint.
    Score {
        /// Experiment config; defaults to the one embedded in the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Print EER and minDCF of a score file and optionally write its DET
    /// curve.
    Metrics {
        /// Score file: `<enroll> <test> <label:0|1> <score>` per line.
        scores: PathBuf,
        /// Directory for the DET CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run every configured variant across seeds and write the report.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed count.
        #[arg(long)]
        seeds: Option<usize>,
        /// Restrict the ladder to one variant.
        #[arg(long)]
        variant: Option<FusionVariant>,
        #[arg(long)]
        quiet: bool,
    },
    /// Verify every variant's gradients against central differences.
    Gradcheck {
        /// Random points per variant.
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long)]
        quiet: bool,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out, quiet } => {
            let config = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let artifacts = runner::synthesize_to_disk(&config, &out)?;
            if !quiet {
                println!(
                    "wrote {} utterances, manifest {}, trials {}",
                    artifacts.n_utterances,
                    artifacts.manifest.display(),
                    artifacts.trials.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            out,
            variant,
            quiet,
        } => {
            let config = load_config(&config)?;
            let variant = resolve_variant(&config, variant)?;
            let (path, losses) = runner::train_to_disk(&config, variant, &out)?;
            if !quiet {
                println!(
                    "trained {variant} for {} steps, final loss {:.6}, checkpoint {}",
                    losses.len(),
                    losses.last().copied().unwrap_or(f64::NAN),
                    path.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Score {
            config,
            checkpoint,
            out,
            quiet,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = match config {
                Some(path) => load_config(&path)?,
                None => ckpt.config.clone(),
            };
            let path = runner::score_to_disk(&config, &ckpt, &out)?;
            if !quiet {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { scores, out, quiet } => {
            let set = formats::read_scores(&scores)?;
            let (eer, eer_threshold) = compute_eer(&set)?;
            let (dcf, _) =
                compute_min_dcf(&set, DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA)?;
            println!("EER {:.4}%", eer * 100.0);
            println!("minDCF {dcf:.3}");
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                let det_path = out.join("det.csv");
                formats::write_det_csv(&det_path, &det_curve(&set)?)?;
                if !quiet {
                    println!("DET curve written to {}", det_path.display());
                }
            }
            if !quiet {
                println!("threshold at EER: {eer_threshold}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            out,
            seeds,
            variant,
            quiet,
        } => {
            let mut config = load_config(&config)?;
            if let Some(n) = seeds {
                config.n_seeds = n;
            }
            if let Some(v) = variant {
                config = runner::restrict_to_variant(&config, v);
            }
            config.validate()?;
            let report = runner::run_experiment(&config, &out)?;
            if !quiet {
                println!("{:<16} {:>10} {:>8}", "variant", "mean EER%", "minDCF");
                for vr in &report.variants {
                    println!(
                        "{:<16} {:>10.4} {:>8.3}",
                        vr.variant.to_string(),
                        vr.mean_eer_percent,
                        vr.mean_min_dcf
                    );
                }
                println!("report written to {}", out.join("report.json").display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { points, quiet } => {
            let results = runner::gradient_verification(points)?;
            let mut failed = false;
            for r in &results {
                let ok = r.max_rel_error < 1e-4;
                failed |= !ok;
                if !quiet || !ok {
                    println!(
                        "gradcheck {:<16} max relative error {:.3e} [{}]",
                        r.variant.to_string(),
                        r.max_rel_error,
                        if ok { "PASS" } else { "FAIL" }
                    );
                }
            }
            Ok(if failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn resolve_variant(
    config: &ExperimentConfig,
    requested: Option<FusionVariant>,
) -> Result<FusionVariant> {
    match requested {
        Some(v) => Ok(v),
        None if config.variants.len() == 1 => Ok(config.variants[0]),
        None => Err(DcaError::Config(format!(
            "config lists {} variants; pass --variant",
            config.variants.len()
        ))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let line = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            println!("{line}");
            ExitCode::FAILURE
        }
    }
}
