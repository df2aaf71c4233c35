//! Modality ablation on a synthetic corpus with stub audio and visual
//! features.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::split_dataset;
use crate::encoder::ModalityConfig;
use crate::error::Result;
use crate::metrics::MatchMode;
use crate::model::{FeatureSources, Model, ModelConfig};
use crate::synthetic::{stub_features, synthetic_corpus, SyntheticConfig};
use crate::training::{evaluate_examples, fit, prepare, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub corpus: SyntheticConfig,
    pub dev_fraction: f64,
    /// Text-only model; modality summarisers are added per setting.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub visual_dim: usize,
    pub visual_frames: usize,
    pub audio_dim: usize,
    pub audio_frames: usize,
    /// Width of each modality summary vector.
    pub summary_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// Pair-level weighted scores.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Weighted strict F-score with spans.
    pub strict_f1: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>7} {:>7} {:>9} {:>7}",
            "setting", "P_w", "R_w", "F_w", "strict F", "epochs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>9.2} {:>7}",
                r.setting,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.f1,
                100.0 * r.strict_f1,
                r.epochs
            );
        }
        out
    }
}

/// Trains one model per input combination (text, +visual, +audio, both) on
/// the same split and reports dev scores.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let data = synthetic_corpus(&cfg.corpus);
    let (train, dev) = split_dataset(&data, cfg.dev_fraction, cfg.train.seed)?;
    let visual = stub_features(&data, cfg.visual_dim, cfg.visual_frames, cfg.train.seed);
    let audio = stub_features(&data, cfg.audio_dim, cfg.audio_frames, cfg.train.seed + 1);
    let settings = [("text", false, false), ("+visual", true, false), ("+audio", false, true), ("+audio+visual", true, true)];
    let mut rows = Vec::with_capacity(settings.len());
    for (name, use_visual, use_audio) in settings {
        let mut model_cfg = cfg.model.clone();
        model_cfg.encoder.visual = use_visual.then_some(ModalityConfig {
            d_in: cfg.visual_dim,
            d_out: cfg.summary_width,
        });
        model_cfg.encoder.audio = use_audio.then_some(ModalityConfig {
            d_in: cfg.audio_dim,
            d_out: cfg.summary_width,
        });
        let features = FeatureSources {
            text: None,
            visual: use_visual.then(|| visual.clone()),
            audio: use_audio.then(|| audio.clone()),
        };
        let mut model = Model::new(model_cfg, train.vocabulary.clone(), data.emotions.clone(), cfg.train.seed)?;
        let train_cfg = TrainConfig {
            dev_metric: MatchMode::PairOnly,
            ..cfg.train.clone()
        };
        let log = fit(&mut model, &train.conversations, &dev.conversations, &features, &train_cfg)?;
        let dev_ex = prepare(&model, &dev.conversations, &features)?;
        let pair = evaluate_examples(&model, &dev_ex, &train_cfg.decode, MatchMode::PairOnly)?;
        let strict = evaluate_examples(&model, &dev_ex, &train_cfg.decode, MatchMode::Strict)?;
        log::info!("{name}: pair F {:.4} strict F {:.4}", pair.f1, strict.f1);
        rows.push(AblationRow {
            setting: name.to_string(),
            precision: pair.precision,
            recall: pair.recall,
            f1: pair.f1,
            strict_f1: strict.f1,
            epochs: log.epochs.len(),
        });
    }
    Ok(AblationReport { rows })
}
