//! Reading and writing the conversation JSON format.
//!
//! Canonical layout:
//!
//! ```json
//! [{"conversation_ID": "7",
//!   "conversation": [{"utterance_ID": 1, "text": "...", "speaker": "Ross", "emotion": "joy"}],
//!   "emotion-cause_pairs": [["2_joy", "1_0_3"]]}]
//! ```
//!
//! The effect entry is `<effect>_<emotion>`. The cause entry is `<cause>` (no
//! span), `<cause>_<l>_<r>` (token span `[l, r)`), or `<cause>_<text>` as in
//! the original task release, in which case the text is located in the cause
//! utterance and converted to the covering token span. Numeric conversation
//! ids and alternative key spellings from the release are accepted.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use serde_json::{json, Value};

use super::tokenize::{char_range_to_span, tokenize};
use super::{
    Conversation, DataError, Dataset, Emotion, EmotionCausePair, Result, Span, Utterance,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// Gold emotions and pairs are required and validated.
    Train,
    /// Gold fields are ignored.
    Predict,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Text(String),
    Number(i64),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Text(s) => s,
            RawId::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawConversation {
    #[serde(rename = "conversation_ID", alias = "conversation_id", alias = "id")]
    id: RawId,
    #[serde(rename = "conversation", alias = "utterances", default)]
    utterances: Vec<RawUtterance>,
    #[serde(rename = "emotion-cause_pairs", alias = "emotion_cause_pairs", default)]
    pairs: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct RawUtterance {
    #[serde(rename = "utterance_ID", alias = "utterance_id")]
    id: RawId,
    text: String,
    #[serde(default)]
    speaker: String,
    #[serde(default)]
    emotion: Option<String>,
}

fn raw_conversations(bytes: &[u8]) -> Result<Vec<(String, RawConversation)>> {
    let values: Vec<Value> = serde_json::from_slice(bytes).map_err(|e| DataError::Parse {
        conversation: None,
        message: e.to_string(),
    })?;
    values
        .into_iter()
        .enumerate()
        .map(|(k, v)| {
            let label = match v.get("conversation_ID") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => format!("#{}", k + 1),
            };
            let raw: RawConversation =
                serde_json::from_value(v).map_err(|e| DataError::Parse {
                    conversation: Some(label.clone()),
                    message: e.to_string(),
                })?;
            Ok((label, raw))
        })
        .collect()
}

fn build_utterances(
    conv: &str,
    raw: Vec<RawUtterance>,
    with_emotion: bool,
) -> Result<Vec<Utterance>> {
    raw.into_iter()
        .map(|u| {
            let id = u.id.into_string();
            let index = id.parse::<usize>().map_err(|_| DataError::Validation {
                conversation: conv.to_string(),
                message: format!("utterance id '{id}' is not a positive integer"),
            })?;
            let emotion = if with_emotion {
                let label = u.emotion.ok_or_else(|| DataError::Validation {
                    conversation: conv.to_string(),
                    message: format!("utterance {index} has no emotion label"),
                })?;
                Some(Emotion::new(&label))
            } else {
                None
            };
            let tokens = tokenize(&u.text).into_iter().map(|t| t.text).collect();
            Ok(Utterance {
                index,
                text: u.text,
                tokens,
                speaker: u.speaker,
                emotion,
            })
        })
        .collect()
}

fn parse_index(s: &str) -> Option<usize> {
    s.trim().parse().ok()
}

/// Decodes one `[effect, cause]` entry. `utterances` is needed only for text
/// spans and bounds checks.
fn parse_pair(
    effect: &str,
    cause: &str,
    utterances: &[Utterance],
) -> std::result::Result<EmotionCausePair, String> {
    let (effect_idx, emotion) = effect
        .split_once('_')
        .ok_or_else(|| format!("effect entry '{effect}' is not <index>_<emotion>"))?;
    let effect_idx =
        parse_index(effect_idx).ok_or_else(|| format!("bad effect index in '{effect}'"))?;
    let emotion = Emotion::new(emotion);

    let (cause_idx, rest) = match cause.split_once('_') {
        Some((i, rest)) => (i, Some(rest)),
        None => (cause, None),
    };
    let cause_idx =
        parse_index(cause_idx).ok_or_else(|| format!("bad cause index in '{cause}'"))?;
    let m = utterances.len();
    if m > 0 && (cause_idx == 0 || cause_idx > m || effect_idx == 0 || effect_idx > m) {
        return Err(format!(
            "pair {cause_idx}->{effect_idx} references an utterance outside 1..{m}"
        ));
    }

    let span = match rest {
        None => None,
        Some(rest) => {
            let token_span = rest
                .split_once('_')
                .and_then(|(l, r)| Some(Span::new(parse_index(l)?, parse_index(r)?)));
            match token_span {
                Some(span) => Some(span),
                None => {
                    if m == 0 {
                        return Err(format!(
                            "text span '{rest}' needs the conversation's utterances"
                        ));
                    }
                    Some(locate_text_span(&utterances[cause_idx - 1], rest).ok_or_else(
                        || format!("span text '{rest}' not found in utterance {cause_idx}"),
                    )?)
                }
            }
        }
    };
    Ok(EmotionCausePair {
        cause: cause_idx,
        effect: effect_idx,
        emotion,
        span,
    })
}

fn locate_text_span(utterance: &Utterance, needle: &str) -> Option<Span> {
    let needle = needle.trim();
    if needle.is_empty() {
        return None;
    }
    let text = &utterance.text;
    let start = text.find(needle).or_else(|| {
        text.to_ascii_lowercase()
            .find(&needle.to_ascii_lowercase())
    })?;
    char_range_to_span(&tokenize(text), start, start + needle.len())
}

/// Parses a conversation corpus.
///
/// In [`ParseMode::Train`] every utterance must carry an emotion, the
/// inventory is the set of utterance emotions and must be non-empty, and all
/// pairs are validated against it. In [`ParseMode::Predict`] gold fields are
/// dropped and the returned inventory is empty.
pub fn parse_dataset(bytes: &[u8], mode: ParseMode) -> Result<Dataset> {
    let train = mode == ParseMode::Train;
    let mut conversations = Vec::new();
    let mut ids = BTreeSet::new();
    for (label, raw) in raw_conversations(bytes)? {
        let id = raw.id.into_string();
        if !ids.insert(id.clone()) {
            return Err(DataError::Validation {
                conversation: id,
                message: "duplicate conversation id".into(),
            });
        }
        let utterances = build_utterances(&label, raw.utterances, train)?;
        let pairs = if train {
            raw.pairs
                .iter()
                .map(|(e, c)| {
                    parse_pair(e, c, &utterances).map_err(|message| DataError::Validation {
                        conversation: id.clone(),
                        message,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        conversations.push(Conversation {
            id,
            utterances,
            pairs,
        });
    }

    let dataset = Dataset::from_conversations(conversations);
    if train {
        if dataset.emotions.is_empty() {
            return Err(DataError::Dataset(
                "training data needs a non-empty emotion inventory".into(),
            ));
        }
        for c in &dataset.conversations {
            c.validate(Some(&dataset.emotions))?;
        }
    } else {
        for c in &dataset.conversations {
            c.validate(None)?;
        }
    }
    Ok(dataset)
}

/// Reads only the pair lists of a corpus-shaped file, keyed by conversation
/// id. Used for scoring prediction files, so emotions are not checked
/// against utterance labels.
pub fn parse_pair_file(bytes: &[u8]) -> Result<BTreeMap<String, Vec<EmotionCausePair>>> {
    let mut out = BTreeMap::new();
    for (label, raw) in raw_conversations(bytes)? {
        let id = raw.id.into_string();
        let utterances = build_utterances(&label, raw.utterances, false)?;
        let pairs = raw
            .pairs
            .iter()
            .map(|(e, c)| {
                parse_pair(e, c, &utterances).map_err(|message| DataError::Validation {
                    conversation: id.clone(),
                    message,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if out.insert(id.clone(), pairs).is_some() {
            return Err(DataError::Validation {
                conversation: id,
                message: "duplicate conversation id".into(),
            });
        }
    }
    Ok(out)
}

fn pair_entry(p: &EmotionCausePair) -> Value {
    let effect = format!("{}_{}", p.effect, p.emotion);
    let cause = match p.span {
        Some(s) => format!("{}_{}_{}", p.cause, s.start, s.end),
        None => p.cause.to_string(),
    };
    json!([effect, cause])
}

/// Canonical JSON for a list of conversations.
pub fn to_json(conversations: &[Conversation]) -> Value {
    Value::Array(
        conversations
            .iter()
            .map(|c| {
                let utterances: Vec<Value> = c
                    .utterances
                    .iter()
                    .map(|u| {
                        let mut obj = json!({
                            "utterance_ID": u.index,
                            "text": u.text,
                            "speaker": u.speaker,
                        });
                        if let Some(e) = &u.emotion {
                            obj["emotion"] = json!(e.as_str());
                        }
                        obj
                    })
                    .collect();
                json!({
                    "conversation_ID": c.id,
                    "conversation": utterances,
                    "emotion-cause_pairs": c.pairs.iter().map(pair_entry).collect::<Vec<_>>(),
                })
            })
            .collect(),
    )
}

pub fn to_json_string(conversations: &[Conversation]) -> String {
    serde_json::to_string_pretty(&to_json(conversations)).expect("JSON values always serialize")
}
