//! `hjdc`: generate characteristic trajectories, train gradient fields, and
//! evaluate them.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjdc::config::ExperimentConfig;
use hjdc::field_net::PiecewiseField;
use hjdc::pipeline;
use hjdc::trajectory::TrajectoryBundle;
use hjdc::{HjError, Result};

#[derive(Parser)]
#[command(name = "hjdc", version, about = "Hamilton-Jacobi solutions learned from characteristic particles")]
struct Cli {
    /// Worker threads; outputs do not depend on this value.
    #[arg(long, global = true, env = "HJDC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample ρ₀ and integrate the characteristics into an HJT1 file.
    Generate {
        /// Config file, or `preset:NAME`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the trajectory seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the gradient field on a trajectory file.
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        traj: PathBuf,
        /// Model JSON output; the loss history goes next to it as `.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write residual, error, loss-curve and energy tables.
    Eval {
        #[arg(long)]
        config: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Roll out the learned control and compare with the optimal one.
    Control {
        #[arg(long)]
        config: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Train across sample sizes and seeds and tabulate the L² error.
    Study {
        #[arg(long)]
        config: String,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Collate summaries and check the config's thresholds.
    Report {
        #[arg(long)]
        outdir: PathBuf,
    },
    /// List the bundled presets, or print one.
    Presets {
        name: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = pipeline::generate(&cfg, seed)?;
            bundle.save(&out)?;
            println!("{}", pipeline::generate_summary(&bundle));
        }
        Command::Train { config, traj, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = TrajectoryBundle::load(&traj)?;
            let trained = pipeline::train(&cfg, &bundle)?;
            let loss_path = pipeline::save_training(&trained, cfg.train.n_iter, &out)?;
            let last: Vec<f64> = (0..cfg.train.m_t)
                .filter_map(|j| trained.history.iter().rev().find(|r| r.interval == j).map(|r| r.loss))
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "model": out.display().to_string(),
                    "loss_csv": loss_path.display().to_string(),
                    "intervals": cfg.train.m_t,
                    "final_batch_loss": last,
                })
            );
        }
        Command::Eval { config, model, traj, outdir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let field = PiecewiseField::load(&model)?;
            let bundle = TrajectoryBundle::load(&traj)?;
            let summary = pipeline::evaluate(&cfg, &field, &bundle, &outdir)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Control { config, model, outdir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let field = PiecewiseField::load(&model)?;
            let summary = pipeline::control(&cfg, &field, &outdir)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Study { config, outdir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, bands) = pipeline::study(&cfg, &outdir)?;
            println!("{}", serde_json::to_string(&bands)?);
        }
        Command::Report { outdir } => {
            let (_, checks) = pipeline::report(&outdir)?;
            for c in &checks {
                println!(
                    "{} {}: {:.6e} (threshold {:.6e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold
                );
            }
        }
        Command::Presets { name } => match name {
            None => {
                for (n, _) in hjdc::config::PRESETS {
                    println!("{n}");
                }
            }
            Some(n) => println!("{}", ExperimentConfig::preset(&n)?.to_json()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &HjError) -> u8 {
    e.exit_code() as u8
}
