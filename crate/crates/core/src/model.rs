//! Encoder and decoder wired together, plus input assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, EmotionSet, Vocabulary};
use crate::decoder::{CauseGraphScores, Decoder, DecoderConfig, ScoreVars};
use crate::encoder::{
    load_sequence_features, load_text_features, speaker_relative_ids, ConversationInput,
    Encoder, EncoderConfig, FeatureFile, TextInput, TextMode,
};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Feature files for the modalities that are not computed in-process.
#[derive(Clone, Debug, Default)]
pub struct FeatureSources {
    pub text: Option<FeatureFile>,
    pub visual: Option<FeatureFile>,
    pub audio: Option<FeatureFile>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub vocabulary: Vocabulary,
    pub emotions: EmotionSet,
}

impl Model {
    /// Builds a model with freshly initialised parameters drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        vocabulary: Vocabulary,
        emotions: EmotionSet,
        seed: u64,
    ) -> Result<Self> {
        if emotions.is_empty() {
            return Err(Error::Config("the emotion inventory is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, vocabulary.len(), &mut store, &mut rng)?;
        let decoder = Decoder::new(
            &config.decoder,
            config.encoder.fused_width(),
            config.encoder.d_text,
            emotions.len(),
            &mut store,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            vocabulary,
            emotions,
        })
    }

    /// Builds the encoder input for one conversation.
    pub fn input(&self, c: &Conversation, features: &FeatureSources) -> Result<ConversationInput> {
        let cfg = &self.config.encoder;
        let text = match cfg.mode {
            TextMode::Toy => TextInput::Tokens(
                c.utterances
                    .iter()
                    .map(|u| {
                        if u.tokens.len() > cfg.max_len {
                            log::warn!(
                                "utterance {} has {} tokens; truncating to {}",
                                c.utterance_key(u.index),
                                u.tokens.len(),
                                cfg.max_len
                            );
                        }
                        let n = u.tokens.len().min(cfg.max_len);
                        self.vocabulary.encode(&u.tokens[..n])
                    })
                    .collect(),
            ),
            TextMode::Precomputed => {
                let file = features
                    .text
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed mode needs a text feature file".into()))?;
                TextInput::Features(load_text_features(file, c, cfg.d_text)?)
            }
        };
        let sequences = |name: &str, wanted: bool, file: &Option<FeatureFile>, d_in: usize| -> Result<_> {
            if !wanted {
                return Ok(None);
            }
            let file = file
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{name} features are enabled but no file was given")))?;
            if file.dim() != d_in {
                return Err(Error::Config(format!(
                    "{name} feature width {} does not match configured {d_in}",
                    file.dim()
                )));
            }
            Ok(Some(load_sequence_features(file, c)?))
        };
        let visual = sequences(
            "visual",
            cfg.visual.is_some(),
            &features.visual,
            cfg.visual.map_or(0, |m| m.d_in),
        )?;
        let audio = sequences(
            "audio",
            cfg.audio.is_some(),
            &features.audio,
            cfg.audio.map_or(0, |m| m.d_in),
        )?;
        Ok(ConversationInput {
            text,
            visual,
            audio,
            speakers: speaker_relative_ids(&c.speakers(), cfg.max_speakers),
        })
    }

    pub fn forward(&self, tape: &Tape, input: &ConversationInput) -> Result<ScoreVars> {
        let enc = self.encoder.forward(tape, &self.store, input)?;
        Ok(self.decoder.forward(tape, &self.store, enc.utterances, &enc.words)?)
    }

    /// Scores in evaluation mode (no dropout, nothing retained for
    /// backpropagation beyond the tape's lifetime).
    pub fn scores(&self, input: &ConversationInput) -> Result<CauseGraphScores> {
        let tape = Tape::new();
        let vars = self.forward(&tape, input)?;
        Ok(vars.detach(&tape)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Emotion, Utterance};

    fn conversation(speakers: &[&str]) -> Conversation {
        Conversation {
            id: "9".into(),
            utterances: speakers
                .iter()
                .enumerate()
                .map(|(k, s)| Utterance {
                    index: k + 1,
                    text: "a b c".into(),
                    tokens: vec!["a".into(), "b".into(), "c".into()],
                    speaker: s.to_string(),
                    emotion: None,
                })
                .collect(),
            pairs: vec![],
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_text: 8,
                n_heads: 2,
                n_layers: 1,
                max_len: 2,
                d_speaker: 4,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { d_g: 6, dropout: 0.1 },
        }
    }

    #[test]
    fn shapes_and_truncation() {
        let emotions = EmotionSet::new(["joy", "anger", "neutral"].map(Emotion::new));
        let model = Model::new(tiny(), Vocabulary::from_tokens(["a", "b"]), emotions, 1).unwrap();
        let c = conversation(&["x", "y", "x"]);
        let input = model.input(&c, &FeatureSources::default()).unwrap();
        assert_eq!(input.speakers, vec![0, 1, 0]);
        assert_eq!(input.text.lengths(), vec![2, 2, 2]);
        let s = model.scores(&input).unwrap();
        assert_eq!(s.arc.shape(), &[3, 3]);
        assert_eq!(s.label.shape(), &[3, 3, 3]);
        assert_eq!(s.span.shape(), &[3, 3, 2]);
    }

    #[test]
    fn precomputed_without_file_is_a_config_error() {
        let mut cfg = tiny();
        cfg.encoder.mode = TextMode::Precomputed;
        let emotions = EmotionSet::new([Emotion::new("joy")]);
        let model = Model::new(cfg, Vocabulary::default(), emotions, 1).unwrap();
        let err = model
            .input(&conversation(&["x"]), &FeatureSources::default())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
