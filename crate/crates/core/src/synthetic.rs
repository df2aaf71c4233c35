//! Small generated corpora with deterministic cause patterns, plus stub
//! feature files for the non-text modalities.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::{Conversation, Dataset, Emotion, EmotionCausePair, EmotionSet, Span, Utterance};
use crate::encoder::FeatureFile;

/// Emotion, the word that expresses it, and the phrase that causes it.
const PATTERNS: [(&str, &str, [&str; 2]); 4] = [
    ("anger", "grr", ["rude", "insult"]),
    ("joy", "yay", ["free", "gift"]),
    ("sadness", "sob", ["lost", "dog"]),
    ("surprise", "wow", ["big", "news"]),
];

const SPEAKERS: [&str; 3] = ["alice", "bob", "carol"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    /// Total number of distinct words the generator may emit.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            conversations: 8,
            min_utterances: 3,
            max_utterances: 6,
            vocab_size: 50,
            seed: 0,
        }
    }
}

fn fillers(vocab_size: usize) -> Vec<String> {
    let pattern_words = PATTERNS.len() * 3;
    let n = vocab_size.saturating_sub(pattern_words).max(1);
    (0..n).map(|k| format!("w{k:02}")).collect()
}

/// Generates a corpus where each emotional utterance carries a trigger word
/// for its emotion and its cause utterance carries that emotion's cause
/// phrase, which is also the gold span. Every emotion occurs at most once
/// per conversation, so the graph is fully determined by the words.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Dataset {
    assert!(cfg.min_utterances >= 2 && cfg.min_utterances <= cfg.max_utterances);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fill = fillers(cfg.vocab_size);
    let conversations = (0..cfg.conversations)
        .map(|k| conversation(&mut rng, &fill, cfg, k))
        .collect();
    let mut data = Dataset::from_conversations(conversations);
    data.emotions = EmotionSet::new(
        PATTERNS
            .iter()
            .map(|(e, _, _)| Emotion::new(e))
            .chain([Emotion::new("neutral")]),
    );
    data
}

fn conversation(rng: &mut ChaCha8Rng, fill: &[String], cfg: &SyntheticConfig, k: usize) -> Conversation {
    let m = rng.random_range(cfg.min_utterances..=cfg.max_utterances);
    // Utterances are built from chunks so that insertions never split a
    // cause phrase.
    let mut chunks: Vec<Vec<Vec<String>>> = (0..m)
        .map(|_| {
            let n = rng.random_range(2..=5);
            (0..n).map(|_| vec![fill.choose(rng).unwrap().clone()]).collect()
        })
        .collect();
    let mut emotions = vec![Emotion::new("neutral"); m];

    let events = rng.random_range(1..=2.min(m - 1));
    let mut kinds: Vec<usize> = (0..PATTERNS.len()).collect();
    kinds.shuffle(rng);
    let mut used_effects = BTreeSet::new();
    let mut used_causes = BTreeSet::new();
    let mut events_placed = Vec::new();
    for &kind in kinds.iter().take(events) {
        let (emotion, trigger, phrase) = PATTERNS[kind];
        let free: Vec<usize> = (0..m).filter(|j| !used_effects.contains(j)).collect();
        let Some(&effect) = free.choose(rng) else { break };
        let causes: Vec<usize> = (0..=effect).filter(|i| !used_causes.contains(i)).collect();
        let Some(&cause) = causes.choose(rng) else { break };
        used_effects.insert(effect);
        used_causes.insert(cause);

        let at = rng.random_range(0..=chunks[cause].len());
        chunks[cause].insert(at, phrase.iter().map(|w| w.to_string()).collect());
        let t = rng.random_range(0..=chunks[effect].len());
        chunks[effect].insert(t, vec![trigger.to_string()]);
        emotions[effect] = Emotion::new(emotion);
        events_placed.push((cause, effect, kind));
    }
    let words: Vec<Vec<String>> = chunks.into_iter().map(|c| c.concat()).collect();
    let mut pairs: Vec<EmotionCausePair> = events_placed
        .into_iter()
        .map(|(cause, effect, kind)| {
            let (emotion, _, phrase) = PATTERNS[kind];
            let start = words[cause]
                .windows(phrase.len())
                .position(|w| *w == phrase)
                .expect("phrase was inserted");
            EmotionCausePair {
                cause: cause + 1,
                effect: effect + 1,
                emotion: Emotion::new(emotion),
                span: Some(Span::new(start, start + phrase.len())),
            }
        })
        .collect();
    pairs.sort_by_key(|p| (p.effect, p.cause));

    let utterances = words
        .into_iter()
        .zip(emotions)
        .enumerate()
        .map(|(i, (tokens, emotion))| Utterance {
            index: i + 1,
            text: tokens.join(" "),
            tokens,
            speaker: SPEAKERS.choose(rng).unwrap().to_string(),
            emotion: Some(emotion),
        })
        .collect();
    Conversation {
        id: format!("syn{k}"),
        utterances,
        pairs,
    }
}

/// Gaussian stub features, `rows` frames of width `dim` per utterance. The
/// values for an utterance depend only on `seed` and its key.
pub fn stub_features(data: &Dataset, dim: usize, rows: usize, seed: u64) -> FeatureFile {
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut file = FeatureFile::new(dim);
    for c in &data.conversations {
        for u in &c.utterances {
            let key = c.utterance_key(u.index);
            let digest = Sha256::new()
                .chain_update(seed.to_le_bytes())
                .chain_update(key.as_bytes())
                .finalize();
            let mut s = [0u8; 8];
            s.copy_from_slice(&digest[..8]);
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(s));
            let values = (0..rows * dim)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            file.push(key, values).expect("keys are unique");
        }
    }
    file
}
