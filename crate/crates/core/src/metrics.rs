//! Weighted precision, recall and F-score over emotion-cause pairs.
//!
//! Credits are accumulated as exact rationals so the result does not depend
//! on the order in which conversations are visited.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use num::{BigInt, BigRational, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Emotion, EmotionCausePair, Span};
use crate::error::{Error, Result};

/// Pairs keyed by conversation id.
pub type PairMap = BTreeMap<String, Vec<EmotionCausePair>>;

pub fn pair_map(conversations: &[Conversation]) -> PairMap {
    conversations
        .iter()
        .map(|c| (c.id.clone(), c.pairs.clone()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Cause, effect, emotion and span must all match.
    #[default]
    Strict,
    /// Span credit proportional to token overlap.
    Proportional,
    /// Spans are ignored.
    PairOnly,
}

impl MatchMode {
    pub const ALL: [MatchMode; 3] = [MatchMode::Strict, MatchMode::Proportional, MatchMode::PairOnly];

    pub fn name(self) -> &'static str {
        match self {
            MatchMode::Strict => "strict",
            MatchMode::Proportional => "proportional",
            MatchMode::PairOnly => "pair_only",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strict" => Ok(MatchMode::Strict),
            "proportional" => Ok(MatchMode::Proportional),
            "pair_only" | "pair-only" | "pair" => Ok(MatchMode::PairOnly),
            other => Err(format!("unknown match mode '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionScore {
    pub emotion: Emotion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold pairs carrying this emotion.
    pub support: usize,
    /// Predicted pairs carrying this emotion.
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub mode: MatchMode,
    pub per_emotion: Vec<EmotionScore>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl Prf {
    /// Plain-text table with one row per emotion and a weighted row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9} {:>8} {:>9}",
            "emotion", "precision", "recall", "f1", "support", "predicted"
        );
        for s in &self.per_emotion {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>9}",
                s.emotion.as_str(),
                s.precision,
                s.recall,
                s.f1,
                s.support,
                s.predicted
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            "weighted", self.precision, self.recall, self.f1, self.support
        );
        out
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, Default)]
struct Tally {
    predicted: usize,
    gold: usize,
    precision_credit: BigRational,
    recall_credit: BigRational,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        self.predicted += other.predicted;
        self.gold += other.gold;
        self.precision_credit += other.precision_credit;
        self.recall_credit += other.recall_credit;
    }
}

fn ratio(num: usize, den: usize) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Precision and recall credit for a prediction that matches a gold pair on
/// cause, effect and emotion.
fn span_credit(pred: Option<Span>, gold: Option<Span>, mode: MatchMode) -> (BigRational, BigRational) {
    let one = || ratio(1, 1);
    match mode {
        MatchMode::PairOnly => (one(), one()),
        MatchMode::Strict => {
            if pred == gold {
                (one(), one())
            } else {
                (BigRational::zero(), BigRational::zero())
            }
        }
        MatchMode::Proportional => match (pred, gold) {
            (None, None) => (one(), one()),
            (Some(p), Some(g)) if !p.is_empty() && !g.is_empty() => {
                let o = p.overlap(&g);
                (ratio(o, p.len()), ratio(o, g.len()))
            }
            _ => (BigRational::zero(), BigRational::zero()),
        },
    }
}

/// Keeps the first of any pairs sharing cause, effect and emotion.
fn dedup(pairs: &[EmotionCausePair]) -> Vec<&EmotionCausePair> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert((p.cause, p.effect, p.emotion.clone())))
        .collect()
}

fn tally_conversation(
    preds: &[EmotionCausePair],
    golds: &[EmotionCausePair],
    mode: MatchMode,
) -> BTreeMap<Emotion, Tally> {
    let mut out: BTreeMap<Emotion, Tally> = BTreeMap::new();
    let golds = dedup(golds);
    let index: BTreeMap<(usize, usize, &Emotion), &EmotionCausePair> = golds
        .iter()
        .map(|g| ((g.cause, g.effect, &g.emotion), *g))
        .collect();
    for g in &golds {
        out.entry(g.emotion.clone()).or_default().gold += 1;
    }
    for p in dedup(preds) {
        let t = out.entry(p.emotion.clone()).or_default();
        t.predicted += 1;
        if let Some(g) = index.get(&(p.cause, p.effect, &p.emotion)) {
            let (pc, rc) = span_credit(p.span, g.span, mode);
            t.precision_credit += pc;
            t.recall_credit += rc;
        }
    }
    out
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(0.0)
}

/// Scores `preds` against `golds`.
///
/// Conversations missing from `preds` count as having no predictions;
/// prediction ids absent from `golds` are an error.
pub fn evaluate(preds: &PairMap, golds: &PairMap, mode: MatchMode) -> Result<Prf> {
    let unknown: Vec<String> = preds
        .keys()
        .filter(|id| !golds.contains_key(*id))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownConversations(unknown));
    }
    let tallies = golds
        .par_iter()
        .map(|(id, gold)| {
            let pred = preds.get(id).map_or(&[][..], Vec::as_slice);
            tally_conversation(pred, gold, mode)
        })
        .reduce(BTreeMap::new, |mut acc, part| {
            for (e, t) in part {
                acc.entry(e).or_default().merge(t);
            }
            acc
        });

    let mut per_emotion = Vec::with_capacity(tallies.len());
    for (emotion, t) in tallies {
        let precision = if t.predicted == 0 {
            0.0
        } else {
            to_f64(&(t.precision_credit / ratio(t.predicted, 1)))
        };
        let recall = if t.gold == 0 {
            0.0
        } else {
            to_f64(&(t.recall_credit / ratio(t.gold, 1)))
        };
        per_emotion.push(EmotionScore {
            emotion,
            precision,
            recall,
            f1: f1(precision, recall),
            support: t.gold,
            predicted: t.predicted,
        });
    }
    let support: usize = per_emotion.iter().map(|s| s.support).sum();
    let weighted = |field: fn(&EmotionScore) -> f64| {
        if support == 0 {
            return 0.0;
        }
        per_emotion
            .iter()
            .map(|s| s.support as f64 * field(s))
            .sum::<f64>()
            / support as f64
    };
    Ok(Prf {
        mode,
        precision: weighted(|s| s.precision),
        recall: weighted(|s| s.recall),
        f1: weighted(|s| s.f1),
        support,
        per_emotion,
    })
}
