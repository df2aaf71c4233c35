//! `ecgraph`: train, apply and score emotion-cause graph models.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecgraph::encoder::TextMode;
use ecgraph::metrics::MatchMode;
use ecgraph::postprocess::TaskMode;
use ecgraph::synthetic::SyntheticConfig;

use commands::{EvalArgs, FeaturePaths, PredictArgs, TrainArgs};

/// An error caused by the invocation or its inputs rather than by the
/// program. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "ecgraph", version, about = "Emotion-cause graph prediction over conversations")]
struct Cli {
    /// Cap on worker threads for parallel prediction and scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct FeatureFlags {
    /// Word-level text features (precomputed mode).
    #[arg(long)]
    text_features: Option<PathBuf>,
    #[arg(long)]
    visual_features: Option<PathBuf>,
    #[arg(long)]
    audio_features: Option<PathBuf>,
}

impl From<FeatureFlags> for FeaturePaths {
    fn from(f: FeatureFlags) -> Self {
        FeaturePaths {
            text: f.text_features,
            visual: f.visual_features,
            audio: f.audio_features,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Toy,
    Precomputed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Span,
    Pair,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Strict,
    Proportional,
    PairOnly,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint, a training log and a manifest.
    Train {
        /// Training conversations (canonical or task JSON).
        #[arg(long)]
        data: PathBuf,
        /// Development conversations; without it a fraction of --data is held out.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        dev_fraction: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with `[model.encoder]`, `[model.decoder]` and `[train]` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Width of the role projections.
        #[arg(long)]
        d_g: Option<usize>,
        /// Score used for early stopping.
        #[arg(long, value_enum)]
        dev_metric: Option<MetricArg>,
        #[command(flatten)]
        features: FeatureFlags,
    },
    /// Predict emotion-cause pairs for a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `span` emits cause spans, `pair` emits pairs only.
        #[arg(long, value_enum, default_value = "span")]
        task: TaskArg,
        #[arg(long)]
        arc_threshold: Option<f64>,
        #[arg(long)]
        span_threshold: Option<f64>,
        #[command(flatten)]
        features: FeatureFlags,
    },
    /// Score predictions against gold pairs.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        mode: MetricArg,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report (and a manifest) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe a checkpoint, feature file or dataset.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a generated corpus with fixed emotion and cause patterns.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        conversations: usize,
        #[arg(long, default_value_t = 3)]
        min_utterances: usize,
        #[arg(long, default_value_t = 6)]
        max_utterances: usize,
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn metric_modes(m: MetricArg) -> Vec<MatchMode> {
    match m {
        MetricArg::Strict => vec![MatchMode::Strict],
        MetricArg::Proportional => vec![MatchMode::Proportional],
        MetricArg::PairOnly => vec![MatchMode::PairOnly],
        MetricArg::All => MatchMode::ALL.to_vec(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train {
            data,
            dev,
            dev_fraction,
            out,
            config,
            mode,
            seed,
            epochs,
            patience,
            lr,
            d_g,
            dev_metric,
            features,
        } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.model.encoder.mode = match m {
                    ModeArg::Toy => TextMode::Toy,
                    ModeArg::Precomputed => TextMode::Precomputed,
                };
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.patience = cfg.train.patience.min(e);
            }
            if let Some(p) = patience {
                cfg.train.patience = p;
            }
            if lr.is_some() {
                cfg.train.lr = lr;
            }
            if let Some(d) = d_g {
                cfg.model.decoder.d_g = d;
            }
            if let Some(m) = dev_metric {
                match metric_modes(m).as_slice() {
                    [one] => cfg.train.dev_metric = *one,
                    _ => return Err(UsageError("--dev-metric takes a single mode".into()).into()),
                }
            }
            if dev_fraction.is_some() {
                cfg.dev_fraction = dev_fraction;
            }
            commands::train(TrainArgs {
                data,
                dev,
                out,
                config: cfg,
                config_path: config,
                features: features.into(),
            })
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            task,
            arc_threshold,
            span_threshold,
            features,
        } => commands::predict(PredictArgs {
            checkpoint,
            data,
            out,
            task: match task {
                TaskArg::Span => TaskMode::Span,
                TaskArg::Pair => TaskMode::Pair,
            },
            arc_threshold,
            span_threshold,
            features: features.into(),
        }),
        Command::Eval {
            pred,
            gold,
            mode,
            json,
            out,
        } => commands::eval(EvalArgs {
            predictions: pred,
            gold,
            modes: metric_modes(mode),
            json,
            out,
        }),
        Command::Inspect { path, json } => commands::inspect(&path, json),
        Command::Synth {
            out,
            conversations,
            min_utterances,
            max_utterances,
            vocab_size,
            seed,
        } => commands::synth(
            &out,
            &SyntheticConfig {
                conversations,
                min_utterances,
                max_utterances,
                vocab_size,
                seed,
            },
        ),
    }
}

/// Errors in the inputs exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ecgraph::Error>() {
            return match e {
                ecgraph::Error::Tensor(_) | ecgraph::Error::Diverged { .. } => 1,
                _ => 2,
            };
        }
        if cause.is::<ecgraph::data::DataError>() || cause.is::<ecgraph::encoder::FeatureError>() {
            return 2;
        }
    }
    1
}

/// The error chain on one line. Library errors repeat their source in their
/// own message, so a cause already spelled out by its parent is skipped.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut previous = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !previous.is_empty() && previous.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
        previous = text;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
