//! Small trainable layers built from tape operations.

use rand::Rng;

use crate::tensor::{Init, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Init::xavier(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, tape.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }
}

/// One hidden layer with GELU and dropout: `Linear → GELU → dropout → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        dropout: f64,
    ) -> Self {
        FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, d_hidden, true),
            output: Linear::new(store, rng, &format!("{name}.output"), d_hidden, d_out, true),
            dropout,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        self.output.forward(tape, store, h)
    }
}

/// Row-wise layer normalisation with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x)?;
        let y = tape.mul_row(y, tape.param(store, self.gain))?;
        tape.add_row(y, tape.param(store, self.shift))
    }
}

/// Single-layer LSTM that returns its final hidden state.
///
/// Gate blocks in the packed weights are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        Lstm {
            input: store.add(format!("{name}.input"), Init::xavier(rng, d_in, 4 * hidden)),
            recurrent: store.add(
                format!("{name}.recurrent"),
                Init::xavier(rng, hidden, 4 * hidden),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.input).rows()
    }

    /// Runs over the rows of `seq` (`r × d_in`) and returns `1 × hidden`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let h_dim = self.hidden;
        let rows = tape.shape(seq)[0];
        let projected = tape.matmul(seq, tape.param(store, self.input))?;
        let projected = tape.add_row(projected, tape.param(store, self.bias))?;
        let recurrent = tape.param(store, self.recurrent);
        let mut h = tape.constant(Tensor::zeros(&[1, h_dim]))?;
        let mut c = tape.constant(Tensor::zeros(&[1, h_dim]))?;
        for t in 0..rows {
            let z = tape.slice_rows(projected, t, t + 1)?;
            let z = tape.add(z, tape.matmul(h, recurrent)?)?;
            let i = tape.sigmoid(tape.slice_cols(z, 0, h_dim)?)?;
            let f = tape.sigmoid(tape.slice_cols(z, h_dim, 2 * h_dim)?)?;
            let g = tape.tanh(tape.slice_cols(z, 2 * h_dim, 3 * h_dim)?)?;
            let o = tape.sigmoid(tape.slice_cols(z, 3 * h_dim, 4 * h_dim)?)?;
            c = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
            h = tape.mul(o, tape.tanh(c)?)?;
        }
        Ok(h)
    }
}

/// Pre-norm multi-head self-attention block followed by a feed-forward
/// sublayer, both with residual connections.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        TransformerBlock {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            query: Linear::new(store, rng, &format!("{name}.query"), d, d, true),
            // a key bias only shifts each query row uniformly, which softmax ignores
            key: Linear::new(store, rng, &format!("{name}.key"), d, d, false),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d, true),
            attn_out: Linear::new(store, rng, &format!("{name}.attn_out"), d, d, true),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, 2 * d, d, dropout),
            heads,
            dropout,
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / self.heads;
        let h = self.attn_norm.forward(tape, store, x)?;
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul(qh, tape.transpose(kh)?)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = self.attn_out.forward(tape, store, merged)?;
        let attn = tape.dropout(attn, self.dropout)?;
        let x = tape.add(x, attn)?;
        let h = self.ffn_norm.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        let f = tape.dropout(f, self.dropout)?;
        tape.add(x, f)
    }
}
