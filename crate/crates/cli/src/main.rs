//! Command-line interface: dataset generation, training, evaluation,
//! ablation sweeps, and plot rendering.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use pamil::ablate::{ablate, AblationAxis, AblationOptions};
use pamil::config::RunConfig;
use pamil::data::manifest::Split;
use pamil::data::{generate_synthetic_dataset, SyntheticConfig};
use pamil::plot::plot_run;
use pamil::sampler::SchemeKind;
use pamil::train::{evaluate, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pamil",
    version,
    about = "Policy-driven adaptive multi-instance learning over feature bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOverrides {
    /// JSON run config; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Sampling scheme override (gmss, ghss, liis, random, position, kmeans,
    /// random-group).
    #[arg(long)]
    scheme: Option<SchemeKind>,
    /// Group size override (instances per sampled group).
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal dataset.
    GenerateData {
        /// JSON generator config (SyntheticConfig); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for bags/, manifest.csv, generator.json.
        #[arg(long, default_value = "runs/data")]
        out: PathBuf,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: CommonOverrides,
        /// Dataset manifest override.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Evaluate {
        /// Checkpoint file to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory for metrics and attention CSVs.
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Sweep one ablation axis across shared seeds.
    Ablate {
        #[command(flatten)]
        common: CommonOverrides,
        /// Dataset manifest override.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Axis: group-size, scheme, loss-terms, or reward-terms.
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds (default: seed, seed+1, seed+2).
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated group sizes for the group-size axis.
        #[arg(long)]
        group_sizes: Option<String>,
        /// Comma-separated schemes for the scheme axis.
        #[arg(long)]
        schemes: Option<String>,
    },
    /// Render SVG charts from a run directory.
    Plot {
        /// Directory containing epochs.csv and/or ablation CSVs.
        #[arg(long, default_value = "runs/out")]
        run_dir: PathBuf,
    },
}

fn load_run_config(common: &CommonOverrides, manifest: &Option<PathBuf>) -> Result<RunConfig, pamil::Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(scheme) = common.scheme {
        config.sampler.scheme = scheme;
    }
    if let Some(group_size) = common.group_size {
        config.model.group_size = group_size;
    }
    if let Some(path) = manifest {
        config.data.manifest = path.clone();
    }
    config.validate()?;
    Ok(config)
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, pamil::Error> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| pamil::Error::InvalidConfig(format!("bad {what} entry `{s}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), pamil::Error> {
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            let mut synth = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| pamil::Error::io(&path, e))?;
                    serde_json::from_str::<SyntheticConfig>(&text)?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(seed) = seed {
                synth.master_seed = seed;
            }
            let manifest = generate_synthetic_dataset(&synth, &out)?;
            println!(
                "generated {} bags into {} (manifest.csv, generator.json)",
                manifest.num_bags(),
                out.display()
            );
        }
        Command::Train { common, manifest, resume } => {
            let config = load_run_config(&common, &manifest)?;
            let outputs = train(&config, &common.out, resume.as_deref())?;
            println!(
                "best epoch {} | val accuracy {:.4} auc {:.4} | checkpoint {}",
                outputs.best_epoch,
                outputs.best_val.accuracy,
                outputs.best_val.auc,
                outputs.checkpoint_path.display()
            );
        }
        Command::Evaluate { checkpoint, manifest, split, out } => {
            let split: Split = split.parse()?;
            let report = evaluate(&checkpoint, &manifest, split, &out)?;
            println!(
                "{split}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4} ({} bags)",
                report.accuracy,
                report.precision,
                report.recall,
                report.f1,
                report.auc,
                report.num_bags
            );
        }
        Command::Ablate { common, manifest, axis, seeds, group_sizes, schemes } => {
            let config = load_run_config(&common, &manifest)?;
            let axis: AblationAxis = axis.parse()?;
            let mut options = AblationOptions::defaults(config.train.seed);
            if let Some(raw) = seeds {
                options.seeds = parse_list(&raw, "seed")?;
            }
            if let Some(raw) = group_sizes {
                options.group_sizes = parse_list(&raw, "group size")?;
            }
            if let Some(raw) = schemes {
                options.schemes = parse_list(&raw, "scheme")?;
            }
            let outputs = ablate(&config, axis, &options, &common.out)?;
            for row in &outputs.rows {
                println!(
                    "{axis}={}: accuracy {:.4} f1 {:.4} auc {:.4}",
                    row.setting, row.mean.accuracy, row.mean.f1, row.mean.auc
                );
            }
            println!("wrote {}", outputs.csv_path.display());
        }
        Command::Plot { run_dir } => {
            for path in plot_run(&run_dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
