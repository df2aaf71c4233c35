//! Conversations, gold emotion-cause annotations and dataset ingestion.
//!
//! Utterance and pair indices are 1-based, as in the released data. Token
//! spans are half-open intervals over the word tokens produced by
//! [`tokenize`].

mod json;
mod split;
mod targets;
mod tokenize;
mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use json::{parse_dataset, parse_pair_file, to_json, to_json_string, ParseMode};
pub use split::split_dataset;
pub use targets::{gold_targets, GoldTargets};
pub use tokenize::{char_range_to_span, tokenize, Token};
pub use vocab::{Vocabulary, CLS_ID, PAD_ID, UNK_ID};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed JSON{}: {message}", .conversation.as_ref().map(|c| format!(" in conversation {c}")).unwrap_or_default())]
    Parse {
        conversation: Option<String>,
        message: String,
    },
    #[error("conversation {conversation}: {message}")]
    Validation {
        conversation: String,
        message: String,
    },
    #[error("{0}")]
    Dataset(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// An emotion label, always lowercase.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Emotion(String);

impl Emotion {
    pub fn new(label: &str) -> Self {
        Emotion(label.trim().to_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The emotion inventory, sorted so ids are stable across runs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionSet {
    labels: Vec<Emotion>,
}

impl EmotionSet {
    pub fn new(labels: impl IntoIterator<Item = Emotion>) -> Self {
        let mut labels: Vec<Emotion> = labels.into_iter().collect();
        labels.sort();
        labels.dedup();
        EmotionSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, emotion: &Emotion) -> Option<usize> {
        self.labels.binary_search(emotion).ok()
    }

    pub fn get(&self, id: usize) -> &Emotion {
        &self.labels[id]
    }

    pub fn contains(&self, emotion: &Emotion) -> bool {
        self.id(emotion).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Emotion> {
        self.labels.iter()
    }
}

/// Half-open token interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &Span) -> usize {
        self.end
            .min(other.end)
            .saturating_sub(self.start.max(other.start))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// 1-based position in the conversation.
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub speaker: String,
    pub emotion: Option<Emotion>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A directed relation from a cause utterance to the effect utterance whose
/// emotion it triggers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmotionCausePair {
    pub cause: usize,
    pub effect: usize,
    pub emotion: Emotion,
    pub span: Option<Span>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub pairs: Vec<EmotionCausePair>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, index: usize) -> &Utterance {
        &self.utterances[index - 1]
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }

    /// Feature-file key of an utterance.
    pub fn utterance_key(&self, index: usize) -> String {
        format!("{}_{}", self.id, index)
    }

    pub fn max_tokens(&self) -> usize {
        self.utterances.iter().map(Utterance::len).max().unwrap_or(0)
    }

    /// Checks the structural invariants of a gold conversation.
    pub fn validate(&self, emotions: Option<&EmotionSet>) -> Result<()> {
        let fail = |message: String| {
            Err(DataError::Validation {
                conversation: self.id.clone(),
                message,
            })
        };
        if self.utterances.is_empty() {
            return fail("conversation has no utterances".into());
        }
        for (k, u) in self.utterances.iter().enumerate() {
            if u.index != k + 1 {
                return fail(format!(
                    "utterance ids must be 1..m in order, found {} at position {}",
                    u.index,
                    k + 1
                ));
            }
            if u.tokens.is_empty() {
                return fail(format!("utterance {} has no tokens", u.index));
            }
        }
        let m = self.utterances.len();
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if p.cause == 0 || p.cause > m || p.effect == 0 || p.effect > m {
                return fail(format!(
                    "pair {}->{} references an utterance outside 1..{m}",
                    p.cause, p.effect
                ));
            }
            if let Some(set) = emotions {
                if !set.contains(&p.emotion) {
                    return fail(format!("unknown emotion '{}' in pair", p.emotion));
                }
            }
            match &self.utterance(p.effect).emotion {
                Some(e) if *e == p.emotion => {}
                other => {
                    return fail(format!(
                        "pair {}->{} has emotion '{}' but effect utterance is labelled {:?}",
                        p.cause,
                        p.effect,
                        p.emotion,
                        other.as_ref().map(Emotion::as_str)
                    ))
                }
            }
            if let Some(span) = p.span {
                let len = self.utterance(p.cause).len();
                if span.start >= span.end || span.end > len {
                    return fail(format!(
                        "span [{}, {}) outside cause utterance {} of {} tokens",
                        span.start, span.end, p.cause, len
                    ));
                }
            }
            if !seen.insert((p.cause, p.effect)) {
                return fail(format!("duplicate pair {}->{}", p.cause, p.effect));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub emotions: EmotionSet,
    pub vocabulary: Vocabulary,
}

impl Dataset {
    /// Builds a dataset whose inventory and vocabulary are derived from the
    /// conversations themselves.
    pub fn from_conversations(conversations: Vec<Conversation>) -> Self {
        let emotions = EmotionSet::new(
            conversations
                .iter()
                .flat_map(|c| c.utterances.iter().filter_map(|u| u.emotion.clone())),
        );
        let vocabulary = Vocabulary::from_conversations(&conversations);
        Dataset {
            conversations,
            emotions,
            vocabulary,
        }
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn num_pairs(&self) -> usize {
        self.conversations.iter().map(|c| c.pairs.len()).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emotion_lowercases() {
        assert_eq!(Emotion::new(" Joy").as_str(), "joy");
    }

    #[test]
    fn emotion_set_sorted_ids() {
        let set = EmotionSet::new(["sadness", "anger", "joy", "anger"].map(Emotion::new));
        assert_eq!(set.len(), 3);
        assert_eq!(set.id(&Emotion::new("anger")), Some(0));
        assert_eq!(set.id(&Emotion::new("sadness")), Some(2));
        assert_eq!(set.id(&Emotion::new("fear")), None);
    }

    #[test]
    fn span_overlap() {
        assert_eq!(Span::new(1, 3).overlap(&Span::new(0, 3)), 2);
        assert_eq!(Span::new(0, 2).overlap(&Span::new(2, 4)), 0);
    }
}
