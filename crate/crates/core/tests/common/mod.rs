//! Independent reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ecgraph::data::{Conversation, Emotion, EmotionCausePair, EmotionSet, Span, Utterance};
use ecgraph::metrics::MatchMode;
use ecgraph::tensor::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;

/// `A[i][j] = Σ_a Σ_b C[i][a] W[a][b] E[j][b]`.
pub fn naive_arc(c: &Tensor, w: &Tensor, e: &Tensor) -> Vec<f64> {
    let (m, d) = (c.rows(), c.cols());
    let n = e.rows();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += c.at2(i, a) * w.at2(a, b) * e.at2(j, b);
                }
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `T[i][j][l] = Σ_a Σ_b C[i][a] W[a][l][b] E[j][b]`.
pub fn naive_label(c: &Tensor, w: &Tensor, e: &Tensor) -> Vec<f64> {
    let (m, d) = (c.rows(), c.cols());
    let n = e.rows();
    let labels = w.shape()[1];
    let mut out = vec![0.0; m * n * labels];
    for i in 0..m {
        for j in 0..n {
            for l in 0..labels {
                let mut s = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        s += c.at2(i, a) * w.at3(a, l, b) * e.at2(j, b);
                    }
                }
                out[(i * n + j) * labels + l] = s;
            }
        }
    }
    out
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn emotion_names(n: usize) -> Vec<Emotion> {
    const NAMES: [&str; 8] = [
        "anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise", "contempt",
    ];
    NAMES[..n].iter().map(|s| Emotion::new(s)).collect()
}

/// A conversation with a random gold graph: `1..=max_m` utterances of
/// 1..=8 tokens, unique `(cause, effect)` pairs, one emotion per effect and
/// spans of at most `max_span` tokens (always present).
pub fn random_gold<R: Rng>(rng: &mut R, id: &str, max_m: usize, max_span: usize, emotions: &[Emotion]) -> Conversation {
    let m = rng.random_range(1..=max_m);
    random_gold_with(rng, id, m, max_span, emotions)
}

/// As [`random_gold`] with exactly `m` utterances.
pub fn random_gold_with<R: Rng>(rng: &mut R, id: &str, m: usize, max_span: usize, emotions: &[Emotion]) -> Conversation {
    let lengths: Vec<usize> = (0..m).map(|_| rng.random_range(1..=8)).collect();
    let mut labels: Vec<Emotion> = vec![Emotion::new("neutral"); m];
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..rng.random_range(0..=m * 2) {
        let (cause, effect) = (rng.random_range(0..m), rng.random_range(0..m));
        if !seen.insert((cause, effect)) {
            continue;
        }
        let emotion = if pairs.iter().any(|p: &EmotionCausePair| p.effect == effect + 1) {
            labels[effect].clone()
        } else {
            let e = emotions.choose(rng).unwrap().clone();
            labels[effect] = e.clone();
            e
        };
        let len = lengths[cause];
        let width = rng.random_range(1..=max_span.min(len));
        let start = rng.random_range(0..=len - width);
        pairs.push(EmotionCausePair {
            cause: cause + 1,
            effect: effect + 1,
            emotion,
            span: Some(Span::new(start, start + width)),
        });
    }
    pairs.sort_by_key(|p| (p.effect, p.cause));
    let utterances = (0..m)
        .map(|i| {
            let tokens: Vec<String> = (0..lengths[i]).map(|k| format!("t{k}")).collect();
            Utterance {
                index: i + 1,
                text: tokens.join(" "),
                tokens,
                speaker: format!("s{}", i % 3),
                emotion: Some(labels[i].clone()),
            }
        })
        .collect();
    Conversation {
        id: id.to_string(),
        utterances,
        pairs,
    }
}

pub fn inventory(emotions: &[Emotion]) -> EmotionSet {
    EmotionSet::new(emotions.iter().cloned().chain([Emotion::new("neutral")]))
}

/// Exact non-negative fraction over `u128`, kept reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Frac {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Frac { num: num / g, den: den / g }
    }

    pub fn zero() -> Self {
        Frac { num: 0, den: 1 }
    }

    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    pub fn div_int(self, k: u128) -> Frac {
        Frac::new(self.num, self.den * k)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

pub struct OracleScore {
    /// `(emotion, precision, recall, f1, support)` in emotion order.
    pub per_emotion: Vec<(Emotion, f64, f64, f64, usize)>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn oracle_credit(pred: Option<Span>, gold: Option<Span>, mode: MatchMode) -> (Frac, Frac) {
    let one = Frac::new(1, 1);
    match mode {
        MatchMode::PairOnly => (one, one),
        MatchMode::Strict if pred == gold => (one, one),
        MatchMode::Strict => (Frac::zero(), Frac::zero()),
        MatchMode::Proportional => match (pred, gold) {
            (None, None) => (one, one),
            (Some(p), Some(g)) => {
                let overlap = (p.start..p.end).filter(|k| (g.start..g.end).contains(k)).count() as u128;
                (
                    Frac::new(overlap, (p.end - p.start) as u128),
                    Frac::new(overlap, (g.end - g.start) as u128),
                )
            }
            _ => (Frac::zero(), Frac::zero()),
        },
    }
}

/// Enumerates every (prediction, gold) combination per conversation.
pub fn brute_force_scores(
    preds: &BTreeMap<String, Vec<EmotionCausePair>>,
    golds: &BTreeMap<String, Vec<EmotionCausePair>>,
    mode: MatchMode,
) -> OracleScore {
    let mut emotions = BTreeSet::new();
    let mut npred: BTreeMap<Emotion, u128> = BTreeMap::new();
    let mut ngold: BTreeMap<Emotion, u128> = BTreeMap::new();
    let mut pc: BTreeMap<Emotion, Frac> = BTreeMap::new();
    let mut rc: BTreeMap<Emotion, Frac> = BTreeMap::new();
    for (id, gold_list) in golds {
        let empty = Vec::new();
        let pred_list = preds.get(id).unwrap_or(&empty);
        // first occurrence of each (cause, effect, emotion) survives
        let mut kept: Vec<&EmotionCausePair> = Vec::new();
        for p in pred_list {
            if !kept.iter().any(|k| k.cause == p.cause && k.effect == p.effect && k.emotion == p.emotion) {
                kept.push(p);
            }
        }
        let mut gold_kept: Vec<&EmotionCausePair> = Vec::new();
        for g in gold_list {
            if !gold_kept.iter().any(|k| k.cause == g.cause && k.effect == g.effect && k.emotion == g.emotion) {
                gold_kept.push(g);
            }
        }
        for g in &gold_kept {
            emotions.insert(g.emotion.clone());
            *ngold.entry(g.emotion.clone()).or_default() += 1;
        }
        for p in &kept {
            emotions.insert(p.emotion.clone());
            *npred.entry(p.emotion.clone()).or_default() += 1;
            for g in &gold_kept {
                if p.cause == g.cause && p.effect == g.effect && p.emotion == g.emotion {
                    let (a, b) = oracle_credit(p.span, g.span, mode);
                    let e = pc.entry(p.emotion.clone()).or_insert(Frac::zero());
                    *e = e.add(a);
                    let e = rc.entry(g.emotion.clone()).or_insert(Frac::zero());
                    *e = e.add(b);
                }
            }
        }
    }
    let mut per_emotion = Vec::new();
    for e in emotions {
        let np = npred.get(&e).copied().unwrap_or(0);
        let ng = ngold.get(&e).copied().unwrap_or(0);
        let p = if np == 0 { 0.0 } else { pc.get(&e).copied().unwrap_or(Frac::zero()).div_int(np).to_f64() };
        let r = if ng == 0 { 0.0 } else { rc.get(&e).copied().unwrap_or(Frac::zero()).div_int(ng).to_f64() };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_emotion.push((e, p, r, f, ng as usize));
    }
    let support: usize = per_emotion.iter().map(|x| x.4).sum();
    let weighted = |k: usize| {
        if support == 0 {
            return 0.0;
        }
        per_emotion
            .iter()
            .map(|x| x.4 as f64 * [x.1, x.2, x.3][k])
            .sum::<f64>()
            / support as f64
    };
    OracleScore {
        precision: weighted(0),
        recall: weighted(1),
        f1: weighted(2),
        per_emotion,
    }
}

/// Random prediction set derived from `gold`: pairs are kept, dropped,
/// relabelled, re-spanned, duplicated or invented.
pub fn perturb<R: Rng>(rng: &mut R, gold: &Conversation, emotions: &[Emotion]) -> Vec<EmotionCausePair> {
    let m = gold.len();
    let mut out = Vec::new();
    for g in &gold.pairs {
        match rng.random_range(0..6) {
            0 => {}
            1 => out.push(EmotionCausePair {
                emotion: emotions.choose(rng).unwrap().clone(),
                ..g.clone()
            }),
            2 | 3 => {
                let len = gold.utterance(g.cause).len();
                let s = rng.random_range(0..len);
                let e = rng.random_range(s + 1..=len);
                out.push(EmotionCausePair {
                    span: if rng.random_bool(0.1) { None } else { Some(Span::new(s, e)) },
                    ..g.clone()
                });
            }
            4 => {
                out.push(g.clone());
                out.push(g.clone());
            }
            _ => out.push(g.clone()),
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let cause = rng.random_range(1..=m);
        let len = gold.utterance(cause).len();
        let s = rng.random_range(0..len);
        out.push(EmotionCausePair {
            cause,
            effect: rng.random_range(1..=m),
            emotion: emotions.choose(rng).unwrap().clone(),
            span: Some(Span::new(s, rng.random_range(s + 1..=len))),
        });
    }
    out
}
