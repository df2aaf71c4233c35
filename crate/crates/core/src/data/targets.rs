use crate::tensor::Tensor;

use super::{Conversation, EmotionCausePair, EmotionSet, Span};

/// Dense training targets for one conversation.
///
/// All indices are 0-based: `arcs[i][j]` is 1 when utterance `i + 1` causes
/// the emotion of utterance `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldTargets {
    /// `m × m`, binary.
    pub arcs: Tensor,
    /// `m × m` emotion ids, `-1` where there is no arc.
    pub labels: Vec<i64>,
    /// `m × m × ℓmax`, binary; cell `[i][j][k]` marks token `k` of cause `i`.
    pub spans: Tensor,
    /// `m × m`, true where the gold pair carries a span.
    pub has_span: Vec<bool>,
    /// Token count of each utterance.
    pub lengths: Vec<usize>,
}

impl GoldTargets {
    pub fn m(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.spans.shape()[2]
    }

    pub fn arc(&self, i: usize, j: usize) -> bool {
        self.arcs.at2(i, j) != 0.0
    }

    pub fn label(&self, i: usize, j: usize) -> i64 {
        self.labels[i * self.m() + j]
    }

    pub fn span_row(&self, i: usize, j: usize) -> &[f64] {
        let l = self.max_len();
        let off = (i * self.m() + j) * l;
        &self.spans.data()[off..off + l]
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.data().iter().filter(|&&a| a != 0.0).count()
    }

    /// Rebuilds the pair list these targets encode, sorted by
    /// `(effect, cause)`.
    pub fn to_pairs(&self, emotions: &EmotionSet) -> Vec<EmotionCausePair> {
        let m = self.m();
        let mut pairs = Vec::new();
        for j in 0..m {
            for i in 0..m {
                if !self.arc(i, j) {
                    continue;
                }
                let row = self.span_row(i, j);
                let first = row.iter().position(|&v| v != 0.0);
                let last = row.iter().rposition(|&v| v != 0.0);
                let span = first.zip(last).map(|(l, r)| Span::new(l, r + 1));
                pairs.push(EmotionCausePair {
                    cause: i + 1,
                    effect: j + 1,
                    emotion: emotions.get(self.label(i, j) as usize).clone(),
                    span,
                });
            }
        }
        pairs
    }
}

/// Encodes a conversation's gold pairs as arc, label and span targets.
///
/// Pairs whose emotion is missing from `emotions` are skipped; ingestion
/// already rejects them for gold data.
pub fn gold_targets(c: &Conversation, emotions: &EmotionSet) -> GoldTargets {
    let m = c.len();
    let lengths: Vec<usize> = c.utterances.iter().map(|u| u.len()).collect();
    let lmax = lengths.iter().copied().max().unwrap_or(0).max(1);
    let mut arcs = Tensor::zeros(&[m, m]);
    let mut labels = vec![-1i64; m * m];
    let mut spans = Tensor::zeros(&[m, m, lmax]);
    let mut has_span = vec![false; m * m];
    for p in &c.pairs {
        let Some(label) = emotions.id(&p.emotion) else {
            continue;
        };
        let (i, j) = (p.cause - 1, p.effect - 1);
        arcs.data_mut()[i * m + j] = 1.0;
        labels[i * m + j] = label as i64;
        if let Some(span) = p.span {
            has_span[i * m + j] = true;
            let end = span.end.min(lengths[i]);
            for k in span.start..end {
                spans.data_mut()[(i * m + j) * lmax + k] = 1.0;
            }
        }
    }
    GoldTargets {
        arcs,
        labels,
        spans,
        has_span,
        lengths,
    }
}
