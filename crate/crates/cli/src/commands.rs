use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ecgraph::data::{parse_dataset, parse_pair_file, split_dataset, to_json_string, Dataset, EmotionSet, ParseMode};
use ecgraph::encoder::{FeatureFile, ModalityConfig, TextMode};
use ecgraph::metrics::{evaluate, pair_map, MatchMode, Prf};
use ecgraph::model::{FeatureSources, Model, ModelConfig};
use ecgraph::postprocess::{predict_conversation, TaskMode};
use ecgraph::synthetic::{synthetic_corpus, SyntheticConfig};
use ecgraph::training::{fit, load_checkpoint, save_checkpoint, sidecar_path, write_atomic, CheckpointMeta, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{manifest_path_for, RunManifest};
use crate::UsageError;

/// Writes one line to stdout. A closed pipe (`ecgraph inspect m | head`)
/// ends output quietly instead of failing the command.
fn emit(line: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}

macro_rules! say {
    ($($arg:tt)*) => {
        emit(&format!($($arg)*))?
    };
}

/// Contents of the `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of `--data` held out for early stopping when no `--dev`
    /// file is given.
    pub dev_fraction: Option<f64>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {what} {}", path.display()))
}

fn load_dataset(path: &Path, mode: ParseMode) -> Result<Dataset> {
    let bytes = read(path, "dataset")?;
    parse_dataset(&bytes, mode).with_context(|| format!("parsing {}", path.display()))
}

fn load_features(path: Option<&Path>, what: &str) -> Result<Option<FeatureFile>> {
    path.map(|p| {
        FeatureFile::load(p).with_context(|| format!("loading {what} features {}", p.display()))
    })
    .transpose()
}

#[derive(Clone, Debug, Default)]
pub struct FeaturePaths {
    pub text: Option<PathBuf>,
    pub visual: Option<PathBuf>,
    pub audio: Option<PathBuf>,
}

impl FeaturePaths {
    fn load(&self) -> Result<FeatureSources> {
        Ok(FeatureSources {
            text: load_features(self.text.as_deref(), "text")?,
            visual: load_features(self.visual.as_deref(), "visual")?,
            audio: load_features(self.audio.as_deref(), "audio")?,
        })
    }

    fn record(&self, manifest: &mut RunManifest) -> Result<()> {
        for (role, p) in [("text features", &self.text), ("visual features", &self.visual), ("audio features", &self.audio)] {
            if let Some(p) = p {
                manifest.input(role, p)?;
            }
        }
        Ok(())
    }
}

/// Checks that the configured modalities and the given files agree. A
/// feature file for a modality the configuration leaves off switches that
/// modality on with the file's width.
fn reconcile_modalities(model: &mut ModelConfig, features: &FeatureSources, paths: &FeaturePaths) -> Result<()> {
    let enc = &mut model.encoder;
    match (enc.mode, &features.text) {
        (TextMode::Precomputed, None) => {
            return Err(UsageError("precomputed mode needs --text-features".into()).into());
        }
        (TextMode::Toy, Some(_)) => {
            return Err(UsageError("--text-features is only used in precomputed mode".into()).into());
        }
        _ => {}
    }
    let default_width = enc.d_speaker;
    for (name, slot, file, path) in [
        ("visual", &mut enc.visual, &features.visual, &paths.visual),
        ("audio", &mut enc.audio, &features.audio, &paths.audio),
    ] {
        match (slot.as_ref(), file) {
            (Some(_), None) => {
                return Err(UsageError(format!("the configuration enables {name} features but --{name}-features is missing")).into());
            }
            (Some(cfg), Some(f)) if cfg.d_in != f.dim() => {
                return Err(UsageError(format!(
                    "{} has width {} but the configuration expects {}",
                    path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                    f.dim(),
                    cfg.d_in
                ))
                .into());
            }
            (None, Some(f)) => {
                *slot = Some(ModalityConfig {
                    d_in: f.dim(),
                    d_out: default_width,
                });
            }
            _ => {}
        }
    }
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub dev: Option<PathBuf>,
    pub out: PathBuf,
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub features: FeaturePaths,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let TrainArgs {
        data,
        dev,
        out,
        mut config,
        config_path,
        features: paths,
    } = args;
    let full = load_dataset(&data, ParseMode::Train)?;
    let seed = config.train.seed;
    let (train_set, dev_set, emotions) = match &dev {
        Some(dev_path) => {
            let dev_set = load_dataset(dev_path, ParseMode::Train)?;
            let emotions = EmotionSet::new(full.emotions.iter().chain(dev_set.emotions.iter()).cloned());
            (full, dev_set, emotions)
        }
        None => {
            let fraction = config.dev_fraction.unwrap_or(0.15);
            let (t, d) = split_dataset(&full, fraction, seed).context("splitting --data")?;
            (t, d, full.emotions.clone())
        }
    };
    let features = paths.load()?;
    reconcile_modalities(&mut config.model, &features, &paths)?;
    config.model.encoder.validate()?;
    config.train.validate()?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut model = Model::new(config.model.clone(), train_set.vocabulary.clone(), emotions, seed)?;
    log::info!(
        "training on {} conversations, {} dev, {} parameters",
        train_set.len(),
        dev_set.len(),
        model.num_parameters()
    );
    let log = fit(&mut model, &train_set.conversations, &dev_set.conversations, &features, &config.train)?;
    log::info!("best dev {} F {:.4} at epoch {}", config.train.dev_metric, log.best_f1, log.best_epoch);

    let checkpoint = out.join("model.uft1");
    let log_path = out.join("train_log.json");
    save_checkpoint(&model, &checkpoint)?;
    write_atomic(&log_path, &serde_json::to_vec_pretty(&log)?)?;

    let mut manifest = RunManifest::new("train", Some(seed), &config)?;
    manifest.input("train data", &data)?;
    if let Some(d) = &dev {
        manifest.input("dev data", d)?;
    }
    if let Some(c) = &config_path {
        manifest.input("config", c)?;
    }
    paths.record(&mut manifest)?;
    for p in [&checkpoint, &sidecar_path(&checkpoint), &log_path] {
        manifest.output(p);
    }
    manifest.write(&out.join("manifest.json"))?;
    say!(
        "best dev F {:.4} at epoch {} ({} epochs); checkpoint {}",
        log.best_f1,
        log.best_epoch,
        log.epochs.len(),
        checkpoint.display()
    );
    Ok(())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub task: TaskMode,
    pub arc_threshold: Option<f64>,
    pub span_threshold: Option<f64>,
    pub features: FeaturePaths,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data = load_dataset(&args.data, ParseMode::Predict)?;
    let features = args.features.load()?;
    let mut decode = ecgraph::postprocess::DecodeConfig::default();
    if let Some(t) = args.arc_threshold {
        decode.arc_threshold = t;
    }
    if let Some(t) = args.span_threshold {
        decode.span_threshold = t;
    }
    decode.validate(&model.emotions).map_err(UsageError)?;
    let predictions = data
        .conversations
        .par_iter()
        .map(|c| {
            let scores = model.scores(&model.input(c, &features)?)?;
            Ok(predict_conversation(c, &scores, &model.emotions, &decode, args.task))
        })
        .collect::<ecgraph::Result<Vec<_>>>()?;
    write_atomic(&args.out, to_json_string(&predictions).as_bytes())
        .with_context(|| format!("writing {}", args.out.display()))?;

    #[derive(Serialize)]
    struct Snapshot<'a> {
        task: TaskMode,
        decode: &'a ecgraph::postprocess::DecodeConfig,
        model: &'a ModelConfig,
    }
    let mut manifest = RunManifest::new(
        "predict",
        None,
        Snapshot {
            task: args.task,
            decode: &decode,
            model: &model.config,
        },
    )?;
    manifest.input("checkpoint", &args.checkpoint)?;
    manifest.input("checkpoint metadata", &sidecar_path(&args.checkpoint))?;
    manifest.input("data", &args.data)?;
    args.features.record(&mut manifest)?;
    manifest.output(&args.out);
    manifest.write(&manifest_path_for(&args.out))?;
    let pairs: usize = predictions.iter().map(|c| c.pairs.len()).sum();
    say!("{} conversations, {pairs} pairs → {}", predictions.len(), args.out.display());
    Ok(())
}

pub struct EvalArgs {
    pub predictions: PathBuf,
    pub gold: PathBuf,
    pub modes: Vec<MatchMode>,
    pub json: bool,
    pub out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let preds = parse_pair_file(&read(&args.predictions, "predictions")?)
        .with_context(|| format!("parsing {}", args.predictions.display()))?;
    let gold = load_dataset(&args.gold, ParseMode::Train)?;
    let golds = pair_map(&gold.conversations);
    let reports: Vec<Prf> = args
        .modes
        .iter()
        .map(|&mode| evaluate(&preds, &golds, mode))
        .collect::<ecgraph::Result<_>>()?;
    let json = serde_json::to_string_pretty(&reports)?;
    if args.json {
        say!("{json}");
    } else {
        for r in &reports {
            say!("{}", r.to_table());
        }
    }
    if let Some(out) = &args.out {
        write_atomic(out, json.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
        let mut manifest = RunManifest::new("eval", None, &args.modes)?;
        manifest.input("predictions", &args.predictions)?;
        manifest.input("gold", &args.gold)?;
        manifest.output(out);
        manifest.write(&manifest_path_for(out))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ParamRow {
    name: String,
    shape: Vec<usize>,
    count: usize,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Inspection {
    Checkpoint {
        config: ModelConfig,
        emotions: Vec<String>,
        vocabulary: usize,
        parameters: Vec<ParamRow>,
        total: usize,
    },
    Features {
        dim: usize,
        records: Vec<(String, usize, String)>,
    },
    Dataset {
        conversations: usize,
        utterances: usize,
        pairs: usize,
        emotions: Vec<String>,
    },
}

pub fn inspect(path: &Path, json: bool) -> Result<()> {
    let bytes = read(path, "file")?;
    let sidecar = sidecar_path(path);
    let report = if bytes.starts_with(b"UFT1") && sidecar.exists() && sidecar != path {
        let meta: CheckpointMeta = serde_json::from_slice(&read(&sidecar, "checkpoint metadata")?)
            .with_context(|| format!("parsing {}", sidecar.display()))?;
        // loading validates shapes against the configuration
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let parameters: Vec<ParamRow> = meta
            .parameters
            .iter()
            .map(|(name, shape)| ParamRow {
                name: name.clone(),
                shape: shape.clone(),
                count: shape.iter().product(),
            })
            .collect();
        Inspection::Checkpoint {
            total: parameters.iter().map(|p| p.count).sum(),
            config: meta.config,
            emotions: meta.emotions.iter().map(|e| e.as_str().to_string()).collect(),
            vocabulary: meta.vocabulary.len(),
            parameters,
        }
    } else if bytes.starts_with(b"UFT1") {
        let file = FeatureFile::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        Inspection::Features {
            dim: file.dim(),
            records: file
                .records()
                .iter()
                .map(|r| (r.id.clone(), r.rows, r.checksum()))
                .collect(),
        }
    } else {
        let data = parse_dataset(&bytes, ParseMode::Train)
            .with_context(|| format!("{} is neither a UFT1 file nor a dataset", path.display()))?;
        Inspection::Dataset {
            conversations: data.len(),
            utterances: data.num_utterances(),
            pairs: data.num_pairs(),
            emotions: data.emotions.iter().map(|e| e.as_str().to_string()).collect(),
        }
    };
    if json {
        say!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    match report {
        Inspection::Checkpoint {
            config,
            emotions,
            vocabulary,
            parameters,
            total,
        } => {
            say!("checkpoint {}", path.display());
            say!("mode {:?}, d_text {}, d_G {}", config.encoder.mode, config.encoder.d_text, config.decoder.d_g);
            say!("emotions: {}", emotions.join(", "));
            say!("vocabulary: {vocabulary} entries");
            for p in &parameters {
                say!("  {:<36} {:>16} {:>10}", p.name, format!("{:?}", p.shape), p.count);
            }
            say!("total parameters: {total}");
        }
        Inspection::Features { dim, records } => {
            say!("feature file {}: width {dim}, {} records", path.display(), records.len());
            for (id, rows, sum) in records {
                say!("  {id:<24} {rows:>6} rows  {sum}");
            }
        }
        Inspection::Dataset {
            conversations,
            utterances,
            pairs,
            emotions,
        } => {
            say!("dataset {}: {conversations} conversations, {utterances} utterances, {pairs} pairs", path.display());
            say!("emotions: {}", emotions.join(", "));
        }
    }
    Ok(())
}

pub fn synth(out: &Path, cfg: &SyntheticConfig) -> Result<()> {
    if cfg.min_utterances < 2 || cfg.min_utterances > cfg.max_utterances {
        bail!(UsageError("utterance bounds must satisfy 2 <= min <= max".into()));
    }
    let data = synthetic_corpus(cfg);
    write_atomic(out, to_json_string(&data.conversations).as_bytes())
        .with_context(|| format!("writing {}", out.display()))?;
    say!("{} conversations → {}", data.len(), out.display());
    Ok(())
}
