mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Saliency-guided U-Net training with eye-gaze supervision.
#[derive(Debug, Parser)]
#[command(name = "gazesal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// key = value run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory (images/, labels.csv, fixations.csv).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Run single-threaded.
    #[arg(long)]
    serial: bool,
    /// Any config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Render static and temporal gaze heatmaps as PNGs.
    RenderGaze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sigma_frac: Option<f64>,
        #[arg(long)]
        window_ms: Option<f64>,
    },
    /// Split a corpus by patient into train/val/test.
    Split {
        #[command(flatten)]
        common: Common,
        /// Three comma-separated fractions.
        #[arg(long)]
        fractions: Option<String>,
    },
    /// Train a model and write its checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// cls-only, mask-vs-gaze, sal-vs-gaze, mask-vs-sal or combined.
        #[arg(long)]
        regime: Option<String>,
        /// Generator rule: deconvnet or guided.
        #[arg(long)]
        rule: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda_cls: Option<f64>,
        #[arg(long)]
        lambda_seg: Option<f64>,
        /// adam or sgd.
        #[arg(long)]
        optimizer: Option<String>,
        /// Encoder widths, comma-separated.
        #[arg(long)]
        channels: Option<String>,
        /// Split file from `split`; computed from the seed when absent.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Bootstrap ROC-AUC report for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Score every example instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Four-panel explanation images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// backprop, deconvnet, guided or gradcam.
        #[arg(long, default_value = "guided")]
        rule: String,
        /// Comma-separated image ids; defaults to the first --limit images.
        #[arg(long)]
        images: Option<String>,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
}

pub enum Failure {
    Usage(String),
    Runtime(gazesal::Error),
}

impl From<gazesal::Error> for Failure {
    fn from(e: gazesal::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(common: &Common, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    let mut overrides = vec![
        ("data", common.data.as_ref().map(|p| p.display().to_string())),
        ("seed", common.seed.map(|s| s.to_string())),
        ("image_size", common.size.map(|s| s.to_string())),
        ("execution", common.serial.then(|| "serial".to_owned())),
    ];
    overrides.extend(extra);
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| Failure::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(Failure::Usage)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let s = |v: Option<f64>| v.map(|v| v.to_string());
    let u = |v: Option<usize>| v.map(|v| v.to_string());
    match cli.command {
        Command::Synth { common, per_class } => {
            let cfg = resolve(&common, vec![("per_class", u(per_class))])?;
            commands::synth(&cfg, &common.out)
        }
        Command::RenderGaze { common, sigma_frac, window_ms } => {
            let cfg = resolve(&common, vec![("sigma_frac", s(sigma_frac)), ("window_ms", s(window_ms))])?;
            commands::render_gaze(&cfg, &common.out)
        }
        Command::Split { common, fractions } => {
            let cfg = resolve(&common, vec![("split_fractions", fractions)])?;
            commands::split(&cfg, &common.out)
        }
        Command::Train {
            common,
            regime,
            rule,
            alpha,
            epochs,
            batch_size,
            lr,
            lambda_cls,
            lambda_seg,
            optimizer,
            channels,
            split,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("regime", regime),
                    ("rule", rule),
                    ("alpha", s(alpha)),
                    ("epochs", u(epochs)),
                    ("batch_size", u(batch_size)),
                    ("learning_rate", s(lr)),
                    ("lambda_cls", s(lambda_cls)),
                    ("lambda_seg", s(lambda_seg)),
                    ("optimizer", optimizer),
                    ("encoder_channels", channels),
                    ("split", split.map(|p| p.display().to_string())),
                ],
            )?;
            commands::train(&cfg, &common.out)
        }
        Command::Eval { common, checkpoint, split, iterations, all } => {
            let cfg = resolve(
                &common,
                vec![
                    ("checkpoint", checkpoint.map(|p| p.display().to_string())),
                    ("split", split.map(|p| p.display().to_string())),
                    ("bootstrap_iterations", u(iterations)),
                ],
            )?;
            commands::eval(&cfg, &common.out, all)
        }
        Command::Explain { common, checkpoint, rule, images, limit } => {
            let cfg = resolve(&common, vec![("checkpoint", checkpoint.map(|p| p.display().to_string()))])?;
            let rule = commands::ExplainRule::parse(&rule).map_err(Failure::Usage)?;
            let images = images.map(|s| s.split(',').map(|i| i.trim().to_owned()).collect());
            commands::explain(&cfg, &common.out, rule, images, limit)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `gazesal --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
