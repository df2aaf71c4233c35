//! Utterance encoders, speaker encoding and modality fusion.

mod features;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Linear, Lstm, TransformerBlock};
use crate::tensor::{Init, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub use features::{
    load_sequence_features, load_text_features, FeatureError, FeatureFile, FeatureRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Small trainable transformer over the vocabulary.
    Toy,
    /// Frozen word features read from a feature file.
    Precomputed,
}

/// Summariser widths for one non-text modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    /// Width of the per-frame input features.
    pub d_in: usize,
    /// Width of the summary vector.
    pub d_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: TextMode,
    pub d_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Longest token sequence the toy encoder accepts; longer utterances
    /// are truncated.
    pub max_len: usize,
    pub max_speakers: usize,
    pub d_speaker: usize,
    pub visual: Option<ModalityConfig>,
    pub audio: Option<ModalityConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: TextMode::Toy,
            d_text: 128,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            max_len: 128,
            max_speakers: 16,
            d_speaker: 32,
            visual: None,
            audio: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid(msg));
        if self.d_text == 0 || self.n_heads == 0 || !self.d_text.is_multiple_of(self.n_heads) {
            return bad(format!(
                "text width {} must be a positive multiple of the head count {}",
                self.d_text, self.n_heads
            ));
        }
        if self.max_speakers == 0 {
            return bad("max_speakers must be at least 1".into());
        }
        if self.d_speaker == 0 || self.max_len == 0 {
            return bad("speaker width and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for m in [self.visual, self.audio].into_iter().flatten() {
            if m.d_in == 0 || m.d_out == 0 {
                return bad("modality widths must be positive".into());
            }
        }
        Ok(())
    }

    /// Width of the fused utterance vector handed to the decoder.
    pub fn fused_width(&self) -> usize {
        self.d_text
            + self.visual.map_or(0, |m| m.d_out)
            + self.audio.map_or(0, |m| m.d_out)
    }
}

/// Relative speaker ids: speakers are numbered in order of first
/// appearance, ids past `max_speakers - 1` are clamped.
pub fn speaker_relative_ids<S: AsRef<str>>(speakers: &[S], max_speakers: usize) -> Vec<usize> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    speakers
        .iter()
        .map(|s| {
            let next = seen.len();
            let id = *seen.entry(s.as_ref()).or_insert(next);
            id.min(max_speakers.saturating_sub(1))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    /// Token ids per utterance, summary token first.
    Tokens(Vec<Vec<usize>>),
    /// Word feature matrices per utterance, summary row first.
    Features(Vec<Tensor>),
}

impl TextInput {
    pub fn len(&self) -> usize {
        match self {
            TextInput::Tokens(t) => t.len(),
            TextInput::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of word positions (summary excluded) for each utterance.
    pub fn lengths(&self) -> Vec<usize> {
        match self {
            TextInput::Tokens(t) => t.iter().map(|ids| ids.len().saturating_sub(1)).collect(),
            TextInput::Features(f) => f.iter().map(|w| w.rows().saturating_sub(1)).collect(),
        }
    }
}

/// Everything the encoder needs for one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationInput {
    pub text: TextInput,
    /// Frame features per utterance.
    pub visual: Option<Vec<Tensor>>,
    /// Acoustic hidden states per utterance.
    pub audio: Option<Vec<Tensor>>,
    /// Relative speaker id per utterance.
    pub speakers: Vec<usize>,
}

impl ConversationInput {
    pub fn m(&self) -> usize {
        self.text.len()
    }
}

/// Encoder outputs for one conversation.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `m × fused_width`.
    pub utterances: Var,
    /// Per utterance `(ℓ_i + 1) × d_text`, summary row first.
    pub words: Vec<Var>,
}

#[derive(Clone, Debug)]
struct ToyText {
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    toy: Option<ToyText>,
    visual: Option<Lstm>,
    audio: Option<Lstm>,
    speakers: ParamId,
    speaker_proj: Linear,
}

impl Encoder {
    /// Registers encoder parameters in `store`. `vocab_size` is only used in
    /// toy mode.
    pub fn new<R: Rng>(
        config: &EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_text;
        let toy = match config.mode {
            TextMode::Toy => Some(ToyText {
                tokens: store.add("encoder.tokens", Init::normal(rng, &[vocab_size, d], 0.1)),
                positions: store.add(
                    "encoder.positions",
                    Init::normal(rng, &[config.max_len + 1, d], 0.1),
                ),
                blocks: (0..config.n_layers)
                    .map(|l| {
                        TransformerBlock::new(
                            store,
                            rng,
                            &format!("encoder.block{l}"),
                            d,
                            config.n_heads,
                            config.dropout,
                        )
                    })
                    .collect(),
            }),
            TextMode::Precomputed => None,
        };
        let visual = config
            .visual
            .map(|m| Lstm::new(store, rng, "encoder.visual", m.d_in, m.d_out));
        let audio = config
            .audio
            .map(|m| Lstm::new(store, rng, "encoder.audio", m.d_in, m.d_out));
        let speakers = store.add(
            "encoder.speakers",
            Init::normal(rng, &[config.max_speakers, config.d_speaker], 0.1),
        );
        let speaker_proj = Linear::new(
            store,
            rng,
            "encoder.speaker_proj",
            config.d_speaker,
            config.fused_width(),
            false,
        );
        Ok(Encoder {
            config: config.clone(),
            toy,
            visual,
            audio,
            speakers,
            speaker_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn speaker_table(&self) -> ParamId {
        self.speakers
    }

    /// Token embedding and positional tables of the toy encoder.
    pub fn toy_tables(&self) -> Option<(ParamId, ParamId)> {
        self.toy.as_ref().map(|t| (t.tokens, t.positions))
    }

    /// Parameters of the toy encoder's self-attention blocks.
    pub fn blocks(&self) -> &[TransformerBlock] {
        self.toy.as_ref().map_or(&[], |t| &t.blocks)
    }

    fn check_input(&self, input: &ConversationInput) -> Result<()> {
        let m = input.m();
        let bad = |msg: String| Err(TensorError::Invalid(msg));
        if m == 0 {
            return bad("conversation has no utterances".into());
        }
        if input.speakers.len() != m {
            return bad(format!("{} speaker ids for {m} utterances", input.speakers.len()));
        }
        match (&input.text, self.config.mode) {
            (TextInput::Tokens(_), TextMode::Toy) | (TextInput::Features(_), TextMode::Precomputed) => {}
            _ => return bad("text input does not match the encoder mode".into()),
        }
        for (name, given, expected) in [
            ("visual", &input.visual, self.visual.is_some()),
            ("audio", &input.audio, self.audio.is_some()),
        ] {
            match (given, expected) {
                (Some(seqs), true) if seqs.len() != m => {
                    return bad(format!("{name} features for {} of {m} utterances", seqs.len()))
                }
                (Some(_), false) => return bad(format!("{name} features given but not configured")),
                (None, true) => return bad(format!("{name} features configured but missing")),
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs every utterance of one conversation through the encoder and
    /// fuses modalities and speakers.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, input: &ConversationInput) -> Result<Encoded> {
        self.check_input(input)?;
        let (summary, words) = match &input.text {
            TextInput::Tokens(ids) => self.encode_toy(tape, store, ids)?,
            TextInput::Features(feats) => {
                let mut words = Vec::with_capacity(feats.len());
                let mut summary = Vec::with_capacity(feats.len());
                for w in feats {
                    if w.ndim() != 2 || w.cols() != self.config.d_text || w.rows() == 0 {
                        return Err(TensorError::Invalid(format!(
                            "word features of shape {:?} do not have width {}",
                            w.shape(),
                            self.config.d_text
                        )));
                    }
                    let v = tape.constant(w.clone())?;
                    summary.push(tape.slice_rows(v, 0, 1)?);
                    words.push(v);
                }
                (tape.concat_rows(&summary)?, words)
            }
        };
        let visual = match (&self.visual, &input.visual) {
            (Some(lstm), Some(seqs)) => Some(summarize_all(tape, store, lstm, seqs)?),
            _ => None,
        };
        let audio = match (&self.audio, &input.audio) {
            (Some(lstm), Some(seqs)) => Some(summarize_all(tape, store, lstm, seqs)?),
            _ => None,
        };
        let spk = tape.gather_rows(tape.param(store, self.speakers), &input.speakers)?;
        let spk = self.speaker_proj.forward(tape, store, spk)?;
        let utterances = fuse_modalities(tape, summary, visual, audio, Some(spk))?;
        Ok(Encoded { utterances, words })
    }

    fn encode_toy(&self, tape: &Tape, store: &ParamStore, ids: &[Vec<usize>]) -> Result<(Var, Vec<Var>)> {
        let toy = self.toy.as_ref().expect("toy mode");
        let table = tape.param(store, toy.tokens);
        let positions = tape.param(store, toy.positions);
        let vocab = store.value(toy.tokens).rows();
        let mut words = Vec::with_capacity(ids.len());
        let mut summary = Vec::with_capacity(ids.len());
        for seq in ids {
            if seq.is_empty() || seq.len() > self.config.max_len + 1 {
                return Err(TensorError::Invalid(format!(
                    "token sequence of length {} outside 1..={}",
                    seq.len(),
                    self.config.max_len + 1
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
                return Err(TensorError::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
            }
            let pos: Vec<usize> = (0..seq.len()).collect();
            let mut x = tape.add(tape.gather_rows(table, seq)?, tape.gather_rows(positions, &pos)?)?;
            x = tape.dropout(x, self.config.dropout)?;
            for block in &toy.blocks {
                x = block.forward(tape, store, x)?;
            }
            summary.push(tape.slice_rows(x, 0, 1)?);
            words.push(x);
        }
        Ok((tape.concat_rows(&summary)?, words))
    }

    /// Parameters that carry the per-word token features (empty in
    /// precomputed mode).
    pub fn text_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let name = store.name(id);
                name.starts_with("encoder.tokens")
                    || name.starts_with("encoder.positions")
                    || name.starts_with("encoder.block")
            })
            .collect()
    }
}

fn summarize_all(tape: &Tape, store: &ParamStore, lstm: &Lstm, seqs: &[Tensor]) -> Result<Var> {
    let rows = seqs
        .iter()
        .map(|s| summarize_sequence(tape, store, lstm, s))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Final hidden state of `lstm` over the rows of `seq` (`r × d_in`).
pub fn summarize_sequence(tape: &Tape, store: &ParamStore, lstm: &Lstm, seq: &Tensor) -> Result<Var> {
    let d_in = lstm.d_in(store);
    if seq.ndim() != 2 || seq.rows() == 0 || seq.cols() != d_in {
        return Err(TensorError::Shape {
            op: "summarize_sequence",
            detail: format!("sequence {:?} for input width {d_in}", seq.shape()),
        });
    }
    let x = tape.constant(seq.clone())?;
    lstm.forward(tape, store, x)
}

/// Concatenates the available modality matrices (`m` rows each) and adds
/// the projected speaker embedding.
pub fn fuse_modalities(
    tape: &Tape,
    text: Var,
    visual: Option<Var>,
    audio: Option<Var>,
    speaker: Option<Var>,
) -> Result<Var> {
    let mut parts = vec![text];
    parts.extend(visual);
    parts.extend(audio);
    let fused = if parts.len() == 1 {
        text
    } else {
        tape.concat_cols(&parts)?
    };
    match speaker {
        Some(s) => tape.add(fused, s),
        None => Ok(fused),
    }
}
