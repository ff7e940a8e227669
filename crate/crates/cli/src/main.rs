use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psp_cli::commands::{self, TransferSource};
use psp_cli::{CliError, CliResult, RunConfig};
use psp_core::attack::{parse_number, AttackMode};

#[derive(Parser)]
#[command(name = "psp-uap", version, about = "Data-free universal adversarial perturbations on toy CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set attack.samples=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Split of the configured data to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    /// IDX images to evaluate on instead of the configured split.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on the configured dataset.
    TrainModel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arch: Option<String>,
        /// Weight initialization seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft a perturbation on one model.
    CraftUap {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fooling rate of a perturbation file on a model.
    EvalFr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fooling rates of surrogate-crafted perturbations on every target.
    TransferMatrix {
        /// Comma-separated checkpoints; each is both surrogate and target.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        /// Crafts per surrogate, ignored when `--delta` is given.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Precomputed `name=path` perturbation. Repeatable.
        #[arg(long = "delta", value_name = "NAME=PATH")]
        deltas: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean black-box fooling rate per attack mode over a model zoo.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "rp,psp,psp-rw,psp-t,psp-rw-t")]
        modes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Sample counts to sweep with the configured mode.
        #[arg(long, value_delimiter = ',')]
        n_values: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dominant label and region diversity of a perturbation.
    AnalyzeUap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 256)]
        probes: usize,
        #[arg(long, default_value_t = 200)]
        crops: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a perturbation file as PGM/PPM.
    ExportImage {
        #[arg(long)]
        delta: PathBuf,
        /// Budget mapped to the byte range; defaults to `attack.epsilon`.
        #[arg(long)]
        epsilon: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut overrides = cfg.overrides.clone();
    overrides.extend(flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}"))));
    commands::resolve_config(cfg.config.as_deref(), &overrides)
}

fn eval_data(cfg: &RunConfig, d: &DataArgs) -> CliResult<psp_core::data::Dataset> {
    let idx = d.images.as_deref().zip(d.labels.as_deref());
    commands::eval_split(cfg, &d.split, idx)
}

fn show(v: Option<impl ToString>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainModel { cfg, arch, seed, epochs, out } => {
            let cfg = resolve(&cfg, &[("model.arch", arch), ("model.seed", show(seed)), ("train.epochs", show(epochs))])?;
            let s = commands::train_model(&cfg, &out)?;
            println!("model {}", s.model.display());
            println!("train_accuracy {:.4}", s.train_accuracy);
            println!("test_accuracy {:.4}", s.test_accuracy);
            if let Some(w) = s.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::CraftUap { model, cfg, mode, seed, epsilon, max_iters, samples, out } => {
            let cfg = resolve(
                &cfg,
                &[
                    ("attack.mode", mode),
                    ("attack.seed", show(seed)),
                    ("attack.epsilon", epsilon),
                    ("attack.max_iters", show(max_iters)),
                    ("attack.samples", show(samples)),
                ],
            )?;
            let s = commands::craft_uap(&model, &cfg, &out)?;
            println!("iterations {}", s.log.iterations.len());
            println!("selected_iteration {}", s.log.selected_iteration);
            println!("linf {:.6}", s.delta.linf_norm());
        }
        Command::EvalFr { model, delta, cfg, data, out } => {
            let cfg = resolve(&cfg, &[])?;
            let split = eval_data(&cfg, &data)?;
            let fr = commands::eval_fr(&model, &delta, &split, &cfg, out.as_deref())?;
            println!("FR {fr:.4}");
        }
        Command::TransferMatrix { models, seeds, deltas, cfg, data, workers, out } => {
            let cfg = resolve(&cfg, &[])?;
            let split = eval_data(&cfg, &data)?;
            let zoo = commands::load_zoo(&models)?;
            let source = if deltas.is_empty() {
                TransferSource::Craft { seeds }
            } else {
                TransferSource::Files(deltas.iter().map(|d| parse_named(d)).collect::<CliResult<_>>()?)
            };
            let tm = commands::transfer(&zoo, source, &split, &cfg, workers, &out)?;
            print!("{}", tm.to_table(','));
        }
        Command::Ablate { models, modes, seeds, n_values, cfg, data, workers, out } => {
            let cfg = resolve(&cfg, &[])?;
            let split = eval_data(&cfg, &data)?;
            let zoo = commands::load_zoo(&models)?;
            let modes = modes.iter().map(|m| m.parse()).collect::<Result<Vec<AttackMode>, _>>()?;
            let report = commands::ablate(&zoo, &modes, seeds, &n_values, &split, &cfg, workers, &out)?;
            print!("{}", report.to_table(','));
        }
        Command::AnalyzeUap { model, delta, cfg, probes, crops, out } => {
            let cfg = resolve(&cfg, &[])?;
            let a = commands::analyze_uap(&model, &delta, &cfg, probes, crops, &out)?;
            print!("{}", a.to_text());
        }
        Command::ExportImage { delta, epsilon, cfg, out } => {
            let cfg = resolve(&cfg, &[])?;
            let eps = match epsilon {
                Some(e) => parse_number("epsilon", &e)?,
                None => cfg.attack.epsilon,
            };
            commands::export(&delta, eps, &out)?;
            println!("image {}", out.display());
        }
    }
    Ok(())
}

fn parse_named(s: &str) -> CliResult<(String, PathBuf)> {
    let (name, path) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("`--delta {s}` is not NAME=PATH")))?;
    Ok((name.to_string(), Path::new(path).to_path_buf()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments").to_string();
            let msg = first.trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(msg).render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::FAILURE
        }
    }
}
