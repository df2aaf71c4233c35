//! Loss, optimisation loop and checkpoints.

mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gold_targets, Conversation, GoldTargets};
use crate::decoder::ScoreVars;
use crate::encoder::{ConversationInput, TextMode};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pair_map, MatchMode, Prf};
use crate::model::{FeatureSources, Model};
use crate::postprocess::{predict_conversation, DecodeConfig, TaskMode};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, write_atomic, CheckpointMeta};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub arc: f64,
    pub label: f64,
    pub span: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            arc: 1.0,
            label: 1.0,
            span: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate; when unset it depends on the text mode.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub dev_metric: MatchMode,
    /// Stop as soon as the dev score reaches this value.
    pub target_f1: Option<f64>,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: None,
            weight_decay: 0.01,
            epochs: 100,
            patience: 10,
            seed: 0,
            loss_weights: LossWeights::default(),
            clip_norm: 1.0,
            dev_metric: MatchMode::Strict,
            target_f1: None,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, mode: TextMode) -> f64 {
        self.lr.unwrap_or(match mode {
            TextMode::Toy => 1e-3,
            TextMode::Precomputed => 1e-6,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 || self.patience > self.epochs {
            return bad(format!(
                "patience {} must lie in 1..={}",
                self.patience, self.epochs
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        let w = self.loss_weights;
        if [w.arc, w.label, w.span].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Total loss on the tape plus the detached component values. Components
/// without any supervised cell are `None` and do not contribute.
#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub arc: f64,
    pub label: Option<f64>,
    pub span: Option<f64>,
}

/// Arc BCE over every cell, label cross-entropy over gold arcs, and span BCE
/// over the real tokens of gold arcs that carry a span.
pub fn compute_loss(
    tape: &Tape,
    scores: &ScoreVars,
    gold: &GoldTargets,
    weights: LossWeights,
) -> crate::tensor::Result<Loss> {
    let m = gold.m();
    if tape.shape(scores.arc) != [m, m] || scores.spans.len() != m {
        return Err(TensorError::Shape {
            op: "compute_loss",
            detail: format!(
                "arc scores {:?} and {} span blocks for {m} utterances",
                tape.shape(scores.arc),
                scores.spans.len()
            ),
        });
    }
    let arc = tape.bce_with_logits(scores.arc, &gold.arcs, &Tensor::filled(&[m, m], 1.0))?;
    let mut total = tape.scale(arc, weights.arc)?;
    let arc_value = tape.value(arc).item();

    let label = if gold.num_arcs() > 0 {
        let l = tape.masked_softmax_ce(scores.label, &gold.labels)?;
        total = tape.add(total, tape.scale(l, weights.label)?)?;
        Some(tape.value(l).item())
    } else {
        None
    };

    let (mut targets, mut mask) = (Vec::new(), Vec::new());
    for (i, &block) in scores.spans.iter().enumerate() {
        let len = tape.shape(block)[1];
        if len > gold.max_len() {
            return Err(TensorError::Shape {
                op: "compute_loss",
                detail: format!("span block {i} is wider than the gold targets"),
            });
        }
        for j in 0..m {
            let on = gold.arc(i, j) && gold.has_span[i * m + j];
            targets.extend_from_slice(&gold.span_row(i, j)[..len]);
            mask.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, len));
        }
    }
    let span = if mask.iter().any(|&v| v != 0.0) {
        let flat = tape.concat_flat(&scores.spans)?;
        let n = targets.len();
        let s = tape.bce_with_logits(
            flat,
            &Tensor::new(vec![n], targets)?,
            &Tensor::new(vec![n], mask)?,
        )?;
        total = tape.add(total, tape.scale(s, weights.span)?)?;
        Some(tape.value(s).item())
    } else {
        None
    };
    Ok(Loss {
        total,
        arc: arc_value,
        label,
        span,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub arc_loss: f64,
    pub label_loss: f64,
    pub span_loss: f64,
    pub dev: DevScore,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub steps: usize,
    /// First epoch whose dev score reached the configured target.
    pub epochs_to_target: Option<usize>,
}

/// Prepared model input and targets for one conversation.
pub struct Example<'a> {
    pub conversation: &'a Conversation,
    pub input: ConversationInput,
    pub gold: GoldTargets,
}

pub fn prepare<'a>(
    model: &Model,
    conversations: &'a [Conversation],
    features: &FeatureSources,
) -> Result<Vec<Example<'a>>> {
    conversations
        .iter()
        .map(|c| {
            Ok(Example {
                conversation: c,
                input: model.input(c, features)?,
                gold: gold_targets(c, &model.emotions),
            })
        })
        .collect()
}

/// Decodes every example with the current parameters.
pub fn predict_examples(
    model: &Model,
    examples: &[Example<'_>],
    decode: &DecodeConfig,
    mode: TaskMode,
) -> Result<Vec<Conversation>> {
    examples
        .par_iter()
        .map(|ex| {
            let scores = model.scores(&ex.input)?;
            Ok(predict_conversation(
                ex.conversation,
                &scores,
                &model.emotions,
                decode,
                mode,
            ))
        })
        .collect()
}

pub fn evaluate_examples(
    model: &Model,
    examples: &[Example<'_>],
    decode: &DecodeConfig,
    metric: MatchMode,
) -> Result<Prf> {
    let task = if metric == MatchMode::PairOnly {
        TaskMode::Pair
    } else {
        TaskMode::Span
    };
    let preds = predict_examples(model, examples, decode, task)?;
    let golds: Vec<Conversation> = examples.iter().map(|e| e.conversation.clone()).collect();
    evaluate(&pair_map(&preds), &pair_map(&golds), metric)
}

/// One optimisation step on one conversation. Returns the loss.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    example: &Example<'_>,
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> crate::tensor::Result<Loss> {
    let tape = Tape::training(dropout_seed);
    let vars = model.forward(&tape, &example.input).map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    })?;
    let loss = compute_loss(&tape, &vars, &example.gold, cfg.loss_weights)?;
    tape.backward(loss.total)?;
    model.store.zero_grad();
    tape.flush_param_grads(&mut model.store);
    model.store.clip_grad_norm(cfg.clip_norm);
    optimizer.step(&mut model.store)?;
    Ok(loss)
}

/// Trains `model` on `train`, selecting parameters by the dev score.
///
/// Each epoch visits the training conversations in a seeded random order
/// with one optimiser step per conversation. Training stops after
/// `patience` epochs without improvement, at `epochs`, or when the optional
/// target score is reached. The best parameters are restored at the end.
pub fn fit(
    model: &mut Model,
    train: &[Conversation],
    dev: &[Conversation],
    features: &FeatureSources,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    cfg.decode
        .validate(&model.emotions)
        .map_err(Error::Config)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("training and dev sets must be non-empty".into()));
    }
    let train_ex = prepare(model, train, features)?;
    let dev_ex = prepare(model, dev, features)?;
    let adam = AdamWConfig {
        lr: cfg.learning_rate(model.config.encoder.mode),
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut optimizer = AdamW::new(adam, &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut log = TrainLog {
        best_f1: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.store.snapshot();
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut arc, mut label, mut span) = (0.0, 0.0, 0.0, 0.0);
        for &k in &order {
            let loss = train_step(model, &mut optimizer, &train_ex[k], cfg, rng.random())
                .map_err(|e| Error::Diverged {
                    epoch,
                    detail: format!("conversation {}: {e}", train_ex[k].conversation.id),
                })?;
            let l = &loss;
            let w = cfg.loss_weights;
            let parts = w.arc * l.arc + w.label * l.label.unwrap_or(0.0) + w.span * l.span.unwrap_or(0.0);
            total += parts;
            arc += l.arc;
            label += l.label.unwrap_or(0.0);
            span += l.span.unwrap_or(0.0);
            log.steps += 1;
        }
        let n = train_ex.len() as f64;
        let prf = evaluate_examples(model, &dev_ex, &cfg.decode, cfg.dev_metric)?;
        let dev = DevScore {
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev {} P {:.4} R {:.4} F {:.4} ({:.1}s)",
            total / n,
            cfg.dev_metric,
            dev.precision,
            dev.recall,
            dev.f1,
            started.elapsed().as_secs_f64()
        );
        let f = dev.f1;
        log.epochs.push(EpochLog {
            epoch,
            loss: total / n,
            arc_loss: arc / n,
            label_loss: label / n,
            span_loss: span / n,
            dev,
        });
        if f > log.best_f1 {
            log.best_f1 = f;
            log.best_epoch = epoch;
            best = model.store.snapshot();
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(target) = cfg.target_f1 {
            if f >= target {
                log.epochs_to_target = Some(epoch);
                break;
            }
        }
        if stale >= cfg.patience {
            log::info!("no improvement for {stale} epochs, stopping");
            break;
        }
    }
    model.store.restore(&best);
    Ok(log)
}
