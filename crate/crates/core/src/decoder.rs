//! Biaffine graph decoder with a span head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::FeedForward;
use crate::tensor::{Init, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of the cause/effect projections.
    pub d_g: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_g: 600,
            dropout: 0.1,
        }
    }
}

/// Cause and effect views of the utterances, one pair for arcs and one for
/// labels. Each is `m × d_g`.
#[derive(Clone, Copy, Debug)]
pub struct RoleProjections {
    pub cause: Var,
    pub effect: Var,
    pub label_cause: Var,
    pub label_effect: Var,
}

/// Score variables still attached to the tape.
#[derive(Clone, Debug)]
pub struct ScoreVars {
    /// `m × m`, row = cause, column = effect.
    pub arc: Var,
    /// `m × m × |emotions|`.
    pub label: Var,
    /// One `m × ℓ_i` block per cause utterance `i`.
    pub spans: Vec<Var>,
}

/// Detached decoder scores for one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct CauseGraphScores {
    pub arc: Tensor,
    pub label: Tensor,
    /// `m × m × ℓmax`; cells past a cause's length hold `-inf`.
    pub span: Tensor,
    pub lengths: Vec<usize>,
}

impl CauseGraphScores {
    pub fn m(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_emotions(&self) -> usize {
        self.label.shape()[2]
    }

    pub fn label_row(&self, i: usize, j: usize) -> &[f64] {
        let l = self.num_emotions();
        let off = (i * self.m() + j) * l;
        &self.label.data()[off..off + l]
    }

    /// Span logits of cause `i` towards effect `j`, trimmed to the cause's
    /// real length.
    pub fn span_row(&self, i: usize, j: usize) -> &[f64] {
        let lmax = self.span.shape()[2];
        let off = (i * self.m() + j) * lmax;
        &self.span.data()[off..off + self.lengths[i]]
    }

    /// Packs per-cause span blocks into the padded layout.
    pub fn new(arc: Tensor, label: Tensor, spans: &[Tensor]) -> Result<Self> {
        let m = arc.rows();
        if arc.shape() != [m, m] || label.ndim() != 3 || label.shape()[..2] != [m, m] || spans.len() != m {
            return Err(TensorError::Shape {
                op: "CauseGraphScores::new",
                detail: format!(
                    "arc {:?}, label {:?}, {} span blocks",
                    arc.shape(),
                    label.shape(),
                    spans.len()
                ),
            });
        }
        let lengths: Vec<usize> = spans.iter().map(|s| s.cols()).collect();
        let lmax = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut span = Tensor::filled(&[m, m, lmax], f64::NEG_INFINITY);
        for (i, block) in spans.iter().enumerate() {
            if block.rows() != m {
                return Err(TensorError::Shape {
                    op: "CauseGraphScores::new",
                    detail: format!("span block {i} has {} rows, expected {m}", block.rows()),
                });
            }
            for j in 0..m {
                let off = (i * m + j) * lmax;
                span.data_mut()[off..off + lengths[i]].copy_from_slice(block.row(j));
            }
        }
        Ok(CauseGraphScores {
            arc,
            label,
            span,
            lengths,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cause: FeedForward,
    pub effect: FeedForward,
    pub label_cause: FeedForward,
    pub label_effect: FeedForward,
    /// Projects word vectors of a cause utterance to span queries.
    pub query: FeedForward,
    pub arc_weight: ParamId,
    pub label_weight: ParamId,
    d_g: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        config: &DecoderConfig,
        d_enc: usize,
        d_words: usize,
        num_emotions: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_g;
        if d == 0 || num_emotions == 0 {
            return Err(TensorError::Invalid(format!(
                "decoder needs positive d_g and at least one emotion (got {d}, {num_emotions})"
            )));
        }
        let mut ff = |name: &str, d_in: usize| {
            FeedForward::new(store, rng, &format!("decoder.{name}"), d_in, d, d, config.dropout)
        };
        let cause = ff("cause", d_enc);
        let effect = ff("effect", d_enc);
        let label_cause = ff("label_cause", d_enc);
        let label_effect = ff("label_effect", d_enc);
        let query = ff("query", d_words);
        let bound = (3.0 / d as f64).sqrt();
        let arc_weight = store.add("decoder.arc", Init::uniform(rng, &[d, d], bound));
        let label_weight = store.add(
            "decoder.label",
            Init::uniform(rng, &[d, num_emotions, d], bound),
        );
        Ok(Decoder {
            cause,
            effect,
            label_cause,
            label_effect,
            query,
            arc_weight,
            label_weight,
            d_g: d,
        })
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn project_roles(&self, tape: &Tape, store: &ParamStore, u: Var) -> Result<RoleProjections> {
        Ok(RoleProjections {
            cause: self.cause.forward(tape, store, u)?,
            effect: self.effect.forward(tape, store, u)?,
            label_cause: self.label_cause.forward(tape, store, u)?,
            label_effect: self.label_effect.forward(tape, store, u)?,
        })
    }

    pub fn arc_scores(&self, tape: &Tape, store: &ParamStore, p: &RoleProjections) -> Result<Var> {
        tape.bilinear_arc(p.cause, tape.param(store, self.arc_weight), p.effect)
    }

    pub fn label_scores(&self, tape: &Tape, store: &ParamStore, p: &RoleProjections) -> Result<Var> {
        tape.bilinear_label(p.label_cause, tape.param(store, self.label_weight), p.label_effect)
    }

    /// Scaled dot-product logits between each word of cause `i` (summary row
    /// excluded) and every effect embedding, laid out `m × ℓ_i`.
    pub fn span_scores(
        &self,
        tape: &Tape,
        store: &ParamStore,
        words: &[Var],
        effect: Var,
    ) -> Result<Vec<Var>> {
        let scale = 1.0 / (self.d_g as f64).sqrt();
        words
            .iter()
            .map(|&w| {
                let rows = tape.shape(w)[0];
                if rows < 2 {
                    return Err(TensorError::Shape {
                        op: "span_scores",
                        detail: "word matrix has no rows past the summary".into(),
                    });
                }
                let q = self.query.forward(tape, store, tape.slice_rows(w, 1, rows)?)?;
                let logits = tape.matmul(effect, tape.transpose(q)?)?;
                tape.scale(logits, scale)
            })
            .collect()
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, u: Var, words: &[Var]) -> Result<ScoreVars> {
        let p = self.project_roles(tape, store, u)?;
        Ok(ScoreVars {
            arc: self.arc_scores(tape, store, &p)?,
            label: self.label_scores(tape, store, &p)?,
            spans: self.span_scores(tape, store, words, p.effect)?,
        })
    }
}

impl ScoreVars {
    pub fn detach(&self, tape: &Tape) -> Result<CauseGraphScores> {
        let spans: Vec<Tensor> = self.spans.iter().map(|&s| (*tape.value(s)).clone()).collect();
        CauseGraphScores::new(
            (*tape.value(self.arc)).clone(),
            (*tape.value(self.label)).clone(),
            &spans,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_enc: usize, d_g: usize, emotions: usize) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { d_g, dropout: 0.0 };
        let dec = Decoder::new(&cfg, d_enc, d_enc, emotions, &mut store, &mut rng).unwrap();
        (store, dec)
    }

    fn make_identity(store: &mut ParamStore, ff: &FeedForward, d: usize) {
        let eye = Tensor::identity(d);
        store.set_values(ff.hidden.weight, eye.data()).unwrap();
        store.set_values(ff.output.weight, eye.data()).unwrap();
        store.set_values(ff.hidden.bias.unwrap(), &vec![50.0; d]).unwrap();
        store.set_values(ff.output.bias.unwrap(), &vec![-50.0; d]).unwrap();
    }

    #[test]
    fn identity_projections_return_input() {
        let (mut store, dec) = setup(5, 5, 3);
        for ff in [&dec.cause, &dec.effect, &dec.label_cause, &dec.label_effect] {
            make_identity(&mut store, ff, 5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Init::uniform(&mut rng, &[3, 5], 1.0);
        let tape = Tape::new();
        let x = tape.constant(u.clone()).unwrap();
        let p = dec.project_roles(&tape, &store, x).unwrap();
        for v in [p.cause, p.effect, p.label_cause, p.label_effect] {
            for (a, b) in tape.value(v).data().iter().zip(u.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_arc_weight_gives_zero_scores() {
        let (mut store, dec) = setup(4, 6, 2);
        store.value_mut(dec.arc_weight).data_mut().fill(0.0);
        let tape = Tape::new();
        let u = tape.constant(Tensor::filled(&[3, 4], 0.3)).unwrap();
        let p = dec.project_roles(&tape, &store, u).unwrap();
        let g = tape.value(dec.arc_scores(&tape, &store, &p).unwrap());
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn span_scores_match_loop_oracle() {
        let (store, dec) = setup(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w0 = Init::uniform(&mut rng, &[4, 3], 1.0);
        let w1 = Init::uniform(&mut rng, &[3, 3], 1.0);
        let e = Init::uniform(&mut rng, &[2, 4], 1.0);
        let tape = Tape::new();
        let words = [tape.constant(w0.clone()).unwrap(), tape.constant(w1.clone()).unwrap()];
        let ev = tape.constant(e.clone()).unwrap();
        let spans = dec.span_scores(&tape, &store, &words, ev).unwrap();

        // Oracle: project each word with the query network separately, then
        // take explicit dot products.
        for (i, w) in [w0, w1].iter().enumerate() {
            let s = tape.value(spans[i]);
            assert_eq!(s.shape(), &[2, w.rows() - 1]);
            for k in 1..w.rows() {
                let t2 = Tape::new();
                let row = t2.constant(Tensor::new(vec![1, 3], w.row(k).to_vec()).unwrap()).unwrap();
                let q = t2.value(dec.query.forward(&t2, &store, row).unwrap());
                for j in 0..2 {
                    let dot: f64 = (0..4).map(|a| q.data()[a] * e.at2(j, a)).sum();
                    assert!((s.at2(j, k - 1) - dot / 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicated_effect_rows_give_identical_span_rows() {
        let (store, dec) = setup(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Init::uniform(&mut rng, &[4, 3], 1.0);
        let row = Init::uniform(&mut rng, &[1, 4], 1.0);
        let e = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let tape = Tape::new();
        let words = [tape.constant(w).unwrap()];
        let spans = dec
            .span_scores(&tape, &store, &words, tape.constant(e).unwrap())
            .unwrap();
        let s = tape.value(spans[0]);
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn packed_scores_mask_tail() {
        let arc = Tensor::zeros(&[2, 2]);
        let label = Tensor::zeros(&[2, 2, 3]);
        let spans = [
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
            Tensor::from_rows(&[vec![7.0], vec![8.0]]).unwrap(),
        ];
        let s = CauseGraphScores::new(arc, label, &spans).unwrap();
        assert_eq!(s.span.shape(), &[2, 2, 3]);
        assert_eq!(s.span_row(0, 1), &[4.0, 5.0, 6.0]);
        assert_eq!(s.span_row(1, 0), &[7.0]);
        assert_eq!(s.span.at3(1, 1, 1), f64::NEG_INFINITY);
    }
}
