//! Turns decoder scores into emotion-cause pairs.

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Emotion, EmotionCausePair, EmotionSet, Span};
use crate::decoder::CauseGraphScores;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Pairs carry the cause span.
    #[default]
    Span,
    /// Pairs only.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Arc logits strictly above this value become arcs.
    pub arc_threshold: f64,
    /// Span logits strictly above this value mark cause tokens.
    pub span_threshold: f64,
    /// Emotion for utterances without an incoming arc. When unset,
    /// `neutral` is used if the inventory has it.
    pub fallback_emotion: Option<Emotion>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            arc_threshold: 0.0,
            span_threshold: 0.0,
            fallback_emotion: None,
        }
    }
}

/// How to label an utterance that receives no arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    Fixed(usize),
    /// Best emotion after summing label scores over every candidate cause.
    Aggregate,
}

impl DecodeConfig {
    pub fn validate(&self, emotions: &EmotionSet) -> Result<(), String> {
        if !self.arc_threshold.is_finite() || !self.span_threshold.is_finite() {
            return Err("decode thresholds must be finite".into());
        }
        if let Some(e) = &self.fallback_emotion {
            if !emotions.contains(e) {
                return Err(format!("fallback emotion {e} is not in the inventory"));
            }
        }
        Ok(())
    }

    pub fn fallback(&self, emotions: &EmotionSet) -> Fallback {
        let wanted = self
            .fallback_emotion
            .clone()
            .unwrap_or_else(|| Emotion::new("neutral"));
        emotions
            .id(&wanted)
            .map_or(Fallback::Aggregate, Fallback::Fixed)
    }
}

/// 0-based `(cause, effect)` cells of `g` above `threshold`, row-major.
pub fn decode_arcs(g: &Tensor, threshold: f64) -> Vec<(usize, usize)> {
    let m = g.cols();
    g.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(k, _)| (k / m, k % m))
        .collect()
}

/// Index of the largest value, earliest on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// One emotion id per utterance: label scores are summed over the
/// predicted causes of each effect and the best emotion wins.
pub fn decode_emotions(label: &Tensor, arcs: &[(usize, usize)], fallback: Fallback) -> Vec<usize> {
    let (m, n_emo) = (label.shape()[0], label.shape()[2]);
    let row = |i: usize, j: usize| &label.data()[(i * m + j) * n_emo..(i * m + j + 1) * n_emo];
    let mut sums = vec![vec![0.0; n_emo]; m];
    let mut has_arc = vec![false; m];
    for &(i, j) in arcs {
        has_arc[j] = true;
        for (s, v) in sums[j].iter_mut().zip(row(i, j)) {
            *s += v;
        }
    }
    (0..m)
        .map(|j| {
            if has_arc[j] {
                return argmax(&sums[j]);
            }
            match fallback {
                Fallback::Fixed(id) => id,
                Fallback::Aggregate => {
                    let mut all = vec![0.0; n_emo];
                    for i in 0..m {
                        for (s, v) in all.iter_mut().zip(row(i, j)) {
                            *s += v;
                        }
                    }
                    argmax(&all)
                }
            }
        })
        .collect()
}

/// Leftmost to rightmost position above `threshold`, gaps included.
pub fn decode_span(logits: &[f64], threshold: f64) -> Option<Span> {
    let l = logits.iter().position(|&v| v > threshold)?;
    let r = logits.iter().rposition(|&v| v > threshold)?;
    Some(Span::new(l, r + 1))
}

/// Builds the prediction list for `c`, sorted by `(effect, cause)`.
///
/// `arcs` are 0-based; `emotion_ids` holds one id per utterance; `spans`
/// runs parallel to `arcs`. A missing span falls back to the whole cause
/// utterance.
pub fn assemble_predictions(
    c: &Conversation,
    arcs: &[(usize, usize)],
    emotion_ids: &[usize],
    spans: &[Option<Span>],
    emotions: &EmotionSet,
    mode: TaskMode,
) -> Vec<EmotionCausePair> {
    let mut pairs: Vec<EmotionCausePair> = arcs
        .iter()
        .zip(spans)
        .map(|(&(i, j), span)| EmotionCausePair {
            cause: i + 1,
            effect: j + 1,
            emotion: emotions.get(emotion_ids[j]).clone(),
            span: match mode {
                TaskMode::Pair => None,
                TaskMode::Span => {
                    let len = c.utterances[i].len();
                    let s = span.unwrap_or(Span::new(0, len));
                    Some(Span::new(s.start.min(len), s.end.min(len)))
                }
            },
        })
        .collect();
    pairs.sort_by_key(|p| (p.effect, p.cause));
    pairs
}

/// Full decode of one conversation. Returns the pairs and the emotion
/// chosen for each utterance.
pub fn decode_conversation(
    c: &Conversation,
    scores: &CauseGraphScores,
    emotions: &EmotionSet,
    cfg: &DecodeConfig,
    mode: TaskMode,
) -> (Vec<EmotionCausePair>, Vec<Emotion>) {
    let arcs = decode_arcs(&scores.arc, cfg.arc_threshold);
    let ids = decode_emotions(&scores.label, &arcs, cfg.fallback(emotions));
    let spans: Vec<Option<Span>> = arcs
        .iter()
        .map(|&(i, j)| decode_span(scores.span_row(i, j), cfg.span_threshold))
        .collect();
    let pairs = assemble_predictions(c, &arcs, &ids, &spans, emotions, mode);
    let labels = ids.iter().map(|&k| emotions.get(k).clone()).collect();
    (pairs, labels)
}

/// Copy of `c` carrying predicted utterance emotions and pairs.
pub fn predict_conversation(
    c: &Conversation,
    scores: &CauseGraphScores,
    emotions: &EmotionSet,
    cfg: &DecodeConfig,
    mode: TaskMode,
) -> Conversation {
    let (pairs, labels) = decode_conversation(c, scores, emotions, cfg, mode);
    let mut out = c.clone();
    for (u, e) in out.utterances.iter_mut().zip(labels) {
        u.emotion = Some(e);
    }
    out.pairs = pairs;
    out
}
