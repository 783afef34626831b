use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use congrad::analysis::SWEEP_FRACTIONS;
use congrad::config::ExperimentConfig;
use congrad::filtering::Arm;
use congrad::runner::{self, TrainOptions};
use congrad::{CongradError, Result};

/// Consensus-gradient filtering for self-rewarding multilingual preference training.
#[derive(Parser)]
#[command(name = "congrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write prompt definitions and held-out pairs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run the self-rewarding loop.
    Train {
        #[command(flatten)]
        common: Common,
        /// Filter arm: congrad-max, congrad-min, reward-max, reward-min,
        /// length-max, length-min or random.
        #[arg(long)]
        arm: Option<Arm>,
        /// Retention fraction per language.
        #[arg(long)]
        rho: Option<f64>,
        /// Directory with gen-data output (defaults to the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume after this completed round.
        #[arg(long)]
        resume: Option<u32>,
    },
    /// Score histograms, retention summaries and offline re-selection.
    FilterAnalyze {
        /// Run directory or filter_report.jsonl.
        report: PathBuf,
        /// Histogram bins.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Re-select offline at 0.25, 0.5 and 0.75.
        #[arg(long)]
        sweep: bool,
        /// Re-select offline at these fractions (repeatable).
        #[arg(long)]
        rho: Vec<f64>,
        /// Write the analysis as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render markdown tables and plot-ready series from finished runs.
    Report {
        /// Run directories or report.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.md and series.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let s = runner::gen_data(&cfg, &cfg.output_dir)?;
            println!(
                "wrote {} prompts and {} held-out pairs to {}",
                s.prompts,
                s.heldout_pairs,
                cfg.output_dir.display()
            );
        }
        Command::Train {
            common,
            arm,
            rho,
            data,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = arm {
                cfg.filter.kind = a.kind;
                cfg.filter.direction = a.direction;
            }
            if let Some(r) = rho {
                cfg.filter.retain_fraction = r;
            }
            let m = runner::train(
                &cfg,
                &TrainOptions {
                    data_dir: data,
                    resume_from: resume,
                },
            )?;
            println!(
                "{} rounds complete; artifacts in {}",
                m.rounds_completed,
                cfg.output_dir.display()
            );
        }
        Command::FilterAnalyze {
            report,
            bins,
            sweep,
            rho,
            out,
        } => {
            let fractions = if !rho.is_empty() {
                rho
            } else if sweep {
                SWEEP_FRACTIONS.to_vec()
            } else {
                Vec::new()
            };
            let a = runner::filter_analyze(&report, bins, &fractions)?;
            if let Some(path) = out {
                write_json(&path, &a)?;
            }
            print!("{}", runner::render_filter_analysis(&a));
        }
        Command::Report { runs, out } => {
            let files = runner::report(&runs, &out)?;
            println!("wrote {} and {}", files.markdown.display(), files.series.display());
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("analysis serializes");
    std::fs::write(path, text + "\n").map_err(|e| CongradError::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
