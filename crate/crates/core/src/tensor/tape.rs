use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::params::{ParamId, ParamStore};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceRows { input: usize, start: usize },
    SliceCols { input: usize, start: usize },
    // Row concatenation and flat concatenation share the same memory layout.
    ConcatFlat(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Gather { table: usize, index: Vec<usize> },
    SoftmaxRows(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Dropout { input: usize, mask: Vec<f64> },
    LayerNorm { input: usize, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    BilinearLabel {
        c: usize,
        w: usize,
        e: usize,
        proj: Vec<f64>,
    },
    Bce {
        scores: usize,
        targets: Vec<f64>,
        mask: Vec<f64>,
        count: usize,
    },
    SoftmaxCe {
        logits: usize,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulRow(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::Dropout { input, .. }
            | Op::LayerNorm { input, .. } => vec![*input],
            Op::ConcatFlat(v) | Op::ConcatCols(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::BilinearLabel { c, w, e, .. } => vec![*c, *w, *e],
            Op::Bce { scores, .. } => vec![*scores],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatFlat(..) => "concat",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BilinearLabel { .. } => "bilinear_label",
            Op::Bce { .. } => "bce_with_logits",
            Op::SoftmaxCe { .. } => "masked_softmax_ce",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape belongs to one thread and one forward pass. Nodes are appended in
/// execution order, so the node list is always topologically sorted.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<f64>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(op.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad || op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        self.push_arc(Arc::new(value), op, false)
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push_arc(Arc::new(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Brings a parameter onto the tape, sharing its buffer. Repeated calls
    /// for the same id return the same leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let var = self
            .push_arc(store.value_arc(id), Op::Leaf, store.is_trainable(id))
            .expect("parameters are kept finite by the optimizer");
        self.params.borrow_mut().insert(id, var);
        var
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v);
        self.leaf_grads
            .borrow()
            .get(&v.0)
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient matches leaf shape"))
    }

    /// Moves the accumulated parameter gradients into `store`, adding to
    /// whatever the store already holds.
    pub fn flush_param_grads(&self, store: &mut ParamStore) {
        let params = self.params.borrow();
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for (id, var) in params.iter() {
            if let Some(g) = leaf_grads.remove(&var.0) {
                for (dst, src) in store.grad_mut(*id).iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary_same(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Scale(a.0, factor))
    }

    fn row_broadcast(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 1 || va.cols() != vb.numel() {
            return shape_err(name, format!("{:?} with row {:?}", va.shape(), vb.shape()));
        }
        let c = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| f(*x, vb.data()[k % c]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Adds a length-`d` vector to every row of an `n×d` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        self.push(t, Op::AddRow(a.0, row.0))
    }

    /// Multiplies every row of an `n×d` matrix by a length-`d` vector.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        self.push(t, Op::MulRow(a.0, row.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Sigmoid(a.0))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Tanh(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Gelu(a.0))
    }

    /// Inverted dropout with drop probability `p`. Identity on evaluation
    /// tapes or when `p == 0`.
    pub fn dropout(&self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            (0..va.numel())
                .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push(
            Tensor::new(va.shape().to_vec(), data)?,
            Op::Dropout { input: a.0, mask },
        )
    }

    // ----- structure ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.rows() {
            return shape_err("matmul", format!("{:?} · {:?}", va.shape(), vb.shape()));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        let data = matmul(va.data(), vb.data(), n, k, m);
        self.push(Tensor::new(vec![n, m], data)?, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return shape_err("transpose", format!("{:?} is not a matrix", va.shape()));
        }
        self.push(va.transpose(), Op::Transpose(a.0))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 || start > end || end > va.rows() {
            return shape_err("slice_rows", format!("{start}..{end} of {:?}", va.shape()));
        }
        let c = va.cols();
        let data = va.data()[start * c..end * c].to_vec();
        self.push(
            Tensor::new(vec![end - start, c], data)?,
            Op::SliceRows { input: a.0, start },
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 || start > end || end > va.cols() {
            return shape_err("slice_cols", format!("{start}..{end} of {:?}", va.shape()));
        }
        let data = (0..va.rows())
            .flat_map(|i| va.row(i)[start..end].iter().copied())
            .collect();
        self.push(
            Tensor::new(vec![va.rows(), end - start], data)?,
            Op::SliceCols { input: a.0, start },
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let Some(first) = vals.first() else {
            return shape_err("concat_rows", "no inputs");
        };
        if vals.iter().any(|v| v.ndim() != 2 || v.cols() != first.cols()) {
            return shape_err("concat_rows", "inputs must be matrices with equal widths");
        }
        let rows = vals.iter().map(|v| v.rows()).sum();
        let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        self.push(
            Tensor::new(vec![rows, first.cols()], data)?,
            Op::ConcatFlat(parts.iter().map(|p| p.0).collect()),
        )
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let Some(first) = vals.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        if vals.iter().any(|v| v.ndim() != 2 || v.rows() != first.rows()) {
            return shape_err("concat_cols", "inputs must be matrices with equal heights");
        }
        let rows = first.rows();
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        )
    }

    /// Flattens and joins any tensors into one vector.
    pub fn concat_flat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.value(*p).data().to_vec())
            .collect();
        self.push(
            Tensor::vector(data),
            Op::ConcatFlat(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let t = (*va).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a.0))
    }

    /// Embedding lookup: selects rows of `table` by index.
    pub fn gather_rows(&self, table: Var, index: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return shape_err("gather_rows", "table must be a matrix");
        }
        if let Some(bad) = index.iter().find(|&&i| i >= vt.rows()) {
            return shape_err(
                "gather_rows",
                format!("index {bad} out of range for {} rows", vt.rows()),
            );
        }
        let data = index.iter().flat_map(|&i| vt.row(i).iter().copied()).collect();
        self.push(
            Tensor::new(vec![index.len(), vt.cols()], data)?,
            Op::Gather {
                table: table.0,
                index: index.to_vec(),
            },
        )
    }

    // ----- normalisation and reductions --------------------------------

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return shape_err("softmax_rows", "input must be a matrix");
        }
        let mut data = Vec::with_capacity(va.numel());
        for i in 0..va.rows() {
            data.extend(softmax(va.row(i)));
        }
        self.push(Tensor::new(va.shape().to_vec(), data)?, Op::SoftmaxRows(a.0))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return shape_err("layer_norm", "input must be a matrix");
        }
        let d = va.cols() as f64;
        let mut data = Vec::with_capacity(va.numel());
        let mut inv_std = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let row = va.row(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            data.extend(row.iter().map(|x| (x - mean) * s));
        }
        self.push(
            Tensor::new(va.shape().to_vec(), data)?,
            Op::LayerNorm { input: a.0, inv_std },
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    // ----- biaffine products -------------------------------------------

    /// Arc scores `A = C·W·Eᵀ`, so `A[i][j] = c_iᵀ W e_j` with rows indexing
    /// causes and columns indexing effects.
    pub fn bilinear_arc(&self, c: Var, w: Var, e: Var) -> Result<Var> {
        let (sc, sw, se) = (self.shape(c), self.shape(w), self.shape(e));
        if sc.len() != 2 || sw.len() != 2 || se.len() != 2 || sc[1] != sw[0] || sw[1] != se[1] {
            return shape_err("bilinear_arc", format!("C {sc:?}, W {sw:?}, E {se:?}"));
        }
        let cw = self.matmul(c, w)?;
        let et = self.transpose(e)?;
        self.matmul(cw, et)
    }

    /// Label scores `T[i][j][l] = c_iᵀ · W[:, l, :] · e_j` for `W` of shape
    /// `d × L × d`. Output shape is `m × n × L`.
    pub fn bilinear_label(&self, c: Var, w: Var, e: Var) -> Result<Var> {
        let (vc, vw, ve) = (self.value(c), self.value(w), self.value(e));
        let (sc, sw, se) = (vc.shape(), vw.shape(), ve.shape());
        if sc.len() != 2
            || sw.len() != 3
            || se.len() != 2
            || sc[1] != sw[0]
            || sw[2] != se[1]
            || sw[1] == 0
        {
            return shape_err("bilinear_label", format!("C {sc:?}, W {sw:?}, E {se:?}"));
        }
        let (m, d, labels, d2, n) = (sc[0], sc[1], sw[1], sw[2], se[0]);
        // proj[i, l, b] = sum_a C[i, a] W[a, l, b]
        let proj = matmul(vc.data(), vw.data(), m, d, labels * d2);
        let mut out = vec![0.0; m * n * labels];
        for i in 0..m {
            for l in 0..labels {
                let p = &proj[(i * labels + l) * d2..(i * labels + l + 1) * d2];
                for j in 0..n {
                    let er = ve.row(j);
                    out[(i * n + j) * labels + l] = p.iter().zip(er).map(|(x, y)| x * y).sum();
                }
            }
        }
        self.push(
            Tensor::new(vec![m, n, labels], out)?,
            Op::BilinearLabel {
                c: c.0,
                w: w.0,
                e: e.0,
                proj,
            },
        )
    }

    // ----- losses ------------------------------------------------------

    /// Mean binary cross-entropy on logits over the cells where `mask` is 1.
    pub fn bce_with_logits(&self, scores: Var, targets: &Tensor, mask: &Tensor) -> Result<Var> {
        let vs = self.value(scores);
        if vs.shape() != targets.shape() || vs.shape() != mask.shape() {
            return shape_err(
                "bce_with_logits",
                format!(
                    "scores {:?}, targets {:?}, mask {:?}",
                    vs.shape(),
                    targets.shape(),
                    mask.shape()
                ),
            );
        }
        let count = mask.data().iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(TensorError::Invalid(
                "bce_with_logits: mask has no active cell".into(),
            ));
        }
        let mut total = 0.0;
        for ((&s, &t), &m) in vs.data().iter().zip(targets.data()).zip(mask.data()) {
            if m != 0.0 {
                total += s.max(0.0) - s * t + (-s.abs()).exp().ln_1p();
            }
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Op::Bce {
                scores: scores.0,
                targets: targets.data().to_vec(),
                mask: mask.data().to_vec(),
                count,
            },
        )
    }

    /// Mean cross-entropy of the last axis of `logits` against integer
    /// targets, skipping cells whose target is negative.
    pub fn masked_softmax_ce(&self, logits: Var, targets: &[i64]) -> Result<Var> {
        let vl = self.value(logits);
        let Some(&classes) = vl.shape().last() else {
            return shape_err("masked_softmax_ce", "logits must have a class axis");
        };
        if classes == 0 || vl.numel() / classes != targets.len() {
            return shape_err(
                "masked_softmax_ce",
                format!("logits {:?} vs {} targets", vl.shape(), targets.len()),
            );
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (cell, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            if t as usize >= classes {
                return Err(TensorError::Invalid(format!(
                    "masked_softmax_ce: target {t} outside {classes} classes"
                )));
            }
            let row = &vl.data()[cell * classes..(cell + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            for (p, x) in probs[cell * classes..(cell + 1) * classes].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Invalid(
                "masked_softmax_ce: no non-sentinel target".into(),
            ));
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Op::SoftmaxCe {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    // ----- backward ----------------------------------------------------

    /// Propagates gradients from a scalar `root` to every leaf that requires
    /// them. Leaf gradients accumulate across calls.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if root.0 >= nodes.len() {
            return Err(TensorError::Invalid("backward root is not on this tape".into()));
        }
        if nodes[root.0].value.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = leaf_grads
                    .entry(idx)
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                axpy(s, 1.0, g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                axpy(s, 1.0, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(grads, nodes, *a) {
                axpy(s, 1.0, g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                axpy(s, -1.0, g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(s) = slot(grads, nodes, *a) {
                for ((d, gi), y) in s.iter_mut().zip(g).zip(vb.data()) {
                    *d += gi * y;
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for ((d, gi), x) in s.iter_mut().zip(g).zip(va.data()) {
                    *d += gi * x;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(s) = slot(grads, nodes, *a) {
                axpy(s, *f, g);
            }
        }
        Op::AddRow(a, b) => {
            let c = out.cols();
            if let Some(s) = slot(grads, nodes, *a) {
                axpy(s, 1.0, g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for (k, gi) in g.iter().enumerate() {
                    s[k % c] += gi;
                }
            }
        }
        Op::MulRow(a, b) => {
            let c = out.cols();
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(s) = slot(grads, nodes, *a) {
                for (k, gi) in g.iter().enumerate() {
                    s[k] += gi * vb.data()[k % c];
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for (k, gi) in g.iter().enumerate() {
                    s[k % c] += gi * va.data()[k];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let (n, k, m) = (va.rows(), va.cols(), vb.cols());
            if nodes[*a].requires_grad {
                let da = matmul_nt(g, vb.data(), n, m, k);
                axpy(slot(grads, nodes, *a).unwrap(), 1.0, &da);
            }
            if nodes[*b].requires_grad {
                let db = matmul_tn(va.data(), g, n, k, m);
                axpy(slot(grads, nodes, *b).unwrap(), 1.0, &db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(s) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::SliceRows { input, start } => {
            let c = out.cols();
            if let Some(s) = slot(grads, nodes, *input) {
                axpy(&mut s[start * c..start * c + g.len()], 1.0, g);
            }
        }
        Op::SliceCols { input, start } => {
            let w = out.cols();
            let full = nodes[*input].value.cols();
            if let Some(s) = slot(grads, nodes, *input) {
                for i in 0..out.rows() {
                    axpy(
                        &mut s[i * full + start..i * full + start + w],
                        1.0,
                        &g[i * w..(i + 1) * w],
                    );
                }
            }
        }
        Op::ConcatFlat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(s) = slot(grads, nodes, p) {
                    axpy(s, 1.0, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(s) = slot(grads, nodes, p) {
                    for i in 0..out.rows() {
                        axpy(
                            &mut s[i * w..(i + 1) * w],
                            1.0,
                            &g[i * total + offset..i * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::Reshape(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                axpy(s, 1.0, g);
            }
        }
        Op::Gather { table, index } => {
            let d = out.cols();
            if let Some(s) = slot(grads, nodes, *table) {
                for (r, &i) in index.iter().enumerate() {
                    axpy(&mut s[i * d..(i + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            if let Some(s) = slot(grads, nodes, *a) {
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        s[i * c + j] += y[j] * (gi[j] - dot);
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                for ((d, gi), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                for ((d, gi), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Gelu(a) => {
            let va = nodes[*a].value.clone();
            if let Some(s) = slot(grads, nodes, *a) {
                for ((d, gi), &x) in s.iter_mut().zip(g).zip(va.data()) {
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    *d += gi * (0.5 * (1.0 + t) + 0.5 * x * dt);
                }
            }
        }
        Op::Dropout { input, mask } => {
            if let Some(s) = slot(grads, nodes, *input) {
                for ((d, gi), m) in s.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::LayerNorm { input, inv_std } => {
            let c = out.cols();
            if let Some(s) = slot(grads, nodes, *input) {
                for (i, &istd) in inv_std.iter().enumerate() {
                    let y = out.row(i);
                    let gi = &g[i * c..(i + 1) * c];
                    let mean_g = gi.iter().sum::<f64>() / c as f64;
                    let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        s[i * c + j] += istd * (gi[j] - mean_g - y[j] * mean_gy);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(grads, nodes, *a) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            if let Some(s) = slot(grads, nodes, *a) {
                s.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::BilinearLabel { c, w, e, proj } => {
            let (vc, vw, ve) = (
                nodes[*c].value.clone(),
                nodes[*w].value.clone(),
                nodes[*e].value.clone(),
            );
            let (m, d) = (vc.rows(), vc.cols());
            let (labels, d2) = (vw.shape()[1], vw.shape()[2]);
            let n = ve.rows();
            // dproj[i, l, :] = sum_j g[i, j, l] E[j, :]
            let need_proj = nodes[*c].requires_grad || nodes[*w].requires_grad;
            if need_proj {
                let mut dproj = vec![0.0; m * labels * d2];
                for i in 0..m {
                    for j in 0..n {
                        let er = ve.row(j);
                        for l in 0..labels {
                            let gv = g[(i * n + j) * labels + l];
                            if gv != 0.0 {
                                let off = (i * labels + l) * d2;
                                axpy(&mut dproj[off..off + d2], gv, er);
                            }
                        }
                    }
                }
                if nodes[*c].requires_grad {
                    let dc = matmul_nt(&dproj, vw.data(), m, labels * d2, d);
                    axpy(slot(grads, nodes, *c).unwrap(), 1.0, &dc);
                }
                if nodes[*w].requires_grad {
                    let dw = matmul_tn(vc.data(), &dproj, m, d, labels * d2);
                    axpy(slot(grads, nodes, *w).unwrap(), 1.0, &dw);
                }
            }
            if let Some(s) = slot(grads, nodes, *e) {
                for i in 0..m {
                    for j in 0..n {
                        for l in 0..labels {
                            let gv = g[(i * n + j) * labels + l];
                            if gv != 0.0 {
                                let off = (i * labels + l) * d2;
                                axpy(&mut s[j * d2..(j + 1) * d2], gv, &proj[off..off + d2]);
                            }
                        }
                    }
                }
            }
        }
        Op::Bce {
            scores,
            targets,
            mask,
            count,
        } => {
            let vs = nodes[*scores].value.clone();
            let scale = g[0] / *count as f64;
            if let Some(s) = slot(grads, nodes, *scores) {
                for (k, d) in s.iter_mut().enumerate() {
                    if mask[k] != 0.0 {
                        *d += scale * (sigmoid(vs.data()[k]) - targets[k]);
                    }
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            targets,
            probs,
            count,
        } => {
            let classes = *nodes[*logits].value.shape().last().unwrap();
            let scale = g[0] / *count as f64;
            if let Some(s) = slot(grads, nodes, *logits) {
                for (cell, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    for l in 0..classes {
                        let k = cell * classes + l;
                        let onehot = if l == t as usize { 1.0 } else { 0.0 };
                        s[k] += scale * (probs[k] - onehot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, -2.0], &[3.0, 4.0]]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn dot_product_grads_swap() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true).unwrap();
        let y = tape.leaf(Tensor::vector(vec![4.0, 5.0, 6.0]), true).unwrap();
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        assert_eq!(tape.value(s).item(), 32.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn nan_input_is_an_error() {
        let tape = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::vector(vec![f64::NAN]), false),
            Err(TensorError::NonFinite(_))
        ));
    }

    #[test]
    fn bce_reference_points() {
        let tape = Tape::new();
        let one = Tensor::vector(vec![1.0]);
        let s0 = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let l0 = tape.bce_with_logits(s0, &one, &one).unwrap();
        assert!((tape.value(l0).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let s50 = tape.constant(Tensor::vector(vec![50.0])).unwrap();
        let l50 = tape.bce_with_logits(s50, &one, &one).unwrap();
        let v = tape.value(l50).item();
        assert!(v.is_finite() && v < 1e-20);
        let sneg = tape.constant(Tensor::vector(vec![-800.0])).unwrap();
        let lneg = tape.bce_with_logits(sneg, &one, &one).unwrap();
        assert!((tape.value(lneg).item() - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_requires_active_mask() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let z = Tensor::zeros(&[2]);
        assert!(tape.bce_with_logits(s, &z, &z).is_err());
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 1, 4])).unwrap();
        let l = tape.masked_softmax_ce(logits, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let sharp = Tensor::new(vec![1, 1, 3], vec![-40.0, 40.0, -40.0]).unwrap();
        let logits = tape.constant(sharp).unwrap();
        let l = tape.masked_softmax_ce(logits, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-30);

        let logits = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.masked_softmax_ce(logits, &[-1, -1]).is_err());
        assert!(tape.masked_softmax_ce(logits, &[3, -1]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape
            .constant(t2(&[&[1.0, 2.0, 3.0], &[-100.0, 0.0, 100.0]]))
            .unwrap();
        let y = tape.value(tape.softmax_rows(x).unwrap());
        for i in 0..2 {
            assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape = Tape::training(11);
        let n = 100_000;
        let x = tape.constant(Tensor::filled(&[n], 1.0)).unwrap();
        let y = tape.value(tape.dropout(x, 0.1).unwrap());
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn shape_errors_surface() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.matmul(a, b).is_err());
        let w = tape.constant(Tensor::zeros(&[4, 4])).unwrap();
        assert!(tape.bilinear_arc(a, w, b).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        store.set_trainable(id, false);
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
    }
}
