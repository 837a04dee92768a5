//! `bdlab`: command-line driver for the multi-task DPO laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bdlab::balancing::Strategy;
use bdlab::config::{LabConfig, Overrides};
use bdlab::dpo::Task;
use bdlab::model::load_checkpoint;
use bdlab::runs::{self, Lab, RunSpec, DATASET_PATH};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bdlab", version, about = "Multi-task DPO gradient-interference laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (default: $BDLAB_OUT, then ./bdlab-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override (training seed, diagnostics seed, or data seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training preference pairs into <out>/data/train.jsonl.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Per-batch gradient diagnostics into <out>/diagnostics/.
    Diagnose(DiagArgs),
    /// Diagnostics plus inter/intra-task null calibration into <out>/calibration/.
    Calibrate(DiagArgs),
    /// Train one run into <out>/runs/<strategy>-b<beta>-s<seed>/.
    Train {
        #[command(flatten)]
        common: Common,
        /// Balancing strategy (default: train.balancing.strategy from the config).
        #[arg(long)]
        strategy: Option<Strategy>,
        /// DPO temperature β.
        #[arg(long)]
        beta: Option<f64>,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Strategies × seeds, the β sweep, post-hoc methods and the report.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Concurrent training runs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Optimizer steps per run.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Comparison report from the runs under <out>.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render the per-run SVG charts under <out>/runs.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct DiagArgs {
    #[command(flatten)]
    common: Common,
    /// Number of paired batches to measure.
    #[arg(long)]
    n_batches: Option<usize>,
    /// Use synthetic gradient vectors from [diagnostics.synthetic] instead of the model.
    #[arg(long)]
    synthetic_vectors: bool,
    /// Model checkpoint to diagnose (default: a fresh initialization).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// DPO temperature β used for the loss gradients.
    #[arg(long)]
    beta: Option<f64>,
}

fn load_config(common: &Common, overrides: &Overrides) -> Result<LabConfig> {
    let mut cfg = match &common.config {
        Some(path) => LabConfig::load(path)?,
        None => LabConfig::default(),
    };
    cfg.apply_overrides(overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    runs::resolve_out(common.out.as_deref())
}

fn diag(args: &DiagArgs, calibrate: bool) -> Result<()> {
    let cfg = load_config(
        &args.common,
        &Overrides {
            seed: args.common.seed,
            n_batches: args.n_batches,
            beta: args.beta,
            ..Default::default()
        },
    )?;
    let state = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let dir = out_dir(&args.common).join(if calibrate { "calibration" } else { "diagnostics" });
    if calibrate {
        let report = runs::run_calibration(&cfg, state.as_ref(), args.synthetic_vectors, &dir)?;
        println!(
            "inter-task cos mean {:.4e} (t = {:.3}, p = {:.3}); intra-understanding mean {:.4e} (Welch p = {:.3e})",
            report.inter.mean,
            report.inter_vs_zero.t,
            report.inter_vs_zero.p,
            report.intra_understanding.mean,
            report.intra_understanding_vs_inter.p,
        );
    } else {
        let (samples, summary) = runs::run_diagnostics(&cfg, state.as_ref(), args.synthetic_vectors, &dir)?;
        println!(
            "{} batches, {} zero-norm flagged; mean cos {}; 1/rho {}",
            samples.records.len(),
            summary.zero_norm_batches,
            summary
                .cos
                .as_ref()
                .map_or_else(|| "n/a".into(), |c| format!("{:.4e}", c.mean)),
            summary
                .inverse_rho_of_means
                .map_or_else(|| "n/a".into(), |r| format!("{r:.3}")),
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load_config(&common, &Overrides::default())?;
            if let Some(seed) = common.seed {
                cfg.data.understanding.rng_seed = seed;
                cfg.data.generation.rng_seed = seed.wrapping_add(1);
            }
            cfg.validate()?;
            let out = out_dir(&common);
            let dataset = runs::training_dataset(&cfg)?;
            let path = out.join(DATASET_PATH);
            dataset.write_atomic(&path)?;
            println!(
                "wrote {} ({} understanding + {} generation pairs)",
                path.display(),
                dataset.count(Task::Understanding),
                dataset.count(Task::Generation)
            );
        }
        Command::Diagnose(args) => diag(&args, false)?,
        Command::Calibrate(args) => diag(&args, true)?,
        Command::Train {
            common,
            strategy,
            beta,
            steps,
        } => {
            let cfg = load_config(
                &common,
                &Overrides {
                    seed: common.seed,
                    strategy,
                    beta,
                    steps,
                    ..Default::default()
                },
            )?;
            let spec = RunSpec {
                strategy: cfg.train.balancing.strategy,
                beta: cfg.train.beta,
                seed: cfg.train.seed,
            };
            let lab = Lab::new(cfg, out_dir(&common))?;
            let summary = lab.run(spec)?;
            lab.base()?;
            if let Some(f) = &summary.final_losses {
                println!(
                    "{}: final loss_u {} loss_g {} combined {:.4}",
                    summary.name,
                    fmt_opt(f.loss_u),
                    fmt_opt(f.loss_g),
                    f.loss_combined
                );
            }
            println!("wrote {}", lab.run_dir(&spec.run_id()).display());
        }
        Command::Sweep { common, jobs, steps } => {
            let cfg = load_config(
                &common,
                &Overrides {
                    seed: common.seed,
                    jobs,
                    steps,
                    ..Default::default()
                },
            )?;
            let out = out_dir(&common);
            let lab = Lab::new(cfg, out.clone())?;
            let n = lab.sweep_specs().len();
            let doc = lab.sweep()?;
            println!("{n} training runs, {} report rows", doc.methods.len());
            println!("wrote {}", out.join("report").display());
        }
        Command::Report { common } => {
            let out = out_dir(&common);
            require_dir(&out)?;
            let doc = runs::write_report(&out)?;
            print!("{}", doc.to_text());
        }
        Command::Plot { common } => {
            let out = out_dir(&common);
            require_dir(&out)?;
            let n = runs::write_plots(&out)?;
            println!("rendered charts for {n} runs");
        }
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        anyhow::bail!("no runs found: {} is not a directory", path.display())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("bdlab failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
