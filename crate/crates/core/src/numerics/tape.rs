use std::borrow::Cow;

use rand::Rng;

use super::gru::{gru_backward, gru_batch_backward, gru_batch_forward, gru_forward, GruBatchCache, GruCache};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm, GemmArg};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceRows { input: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax { input: Var, axis: usize },
    MaskedSoftmax(Var),
    Dropout { input: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, label: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Gru(Box<GruRecord>),
    GruBatch(Box<GruBatchRecord>),
}

#[derive(Debug)]
struct GruBatchRecord {
    xproj: Var,
    w_h: Var,
    b_h: Var,
    reverse: bool,
    cache: GruBatchCache,
}

#[derive(Debug)]
struct GruRecord {
    xproj: Var,
    w_h: Var,
    b_h: Var,
    reverse: bool,
    cache: GruCache,
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is always a valid
/// topological order. Parameters are borrowed from their [`ParamStore`]
/// rather than copied.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(Var, ParamId)>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Adds every bound parameter's gradient into `into`.
    pub fn accumulate_into(&self, into: &mut ParamGrads) {
        for &(var, id) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                into.accumulate(id, g);
            }
        }
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(NumericsError::InvalidArgument(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        )))
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NumericsError> {
    require_matrix(op, a)?;
    require_matrix(op, b)?;
    match (
        broadcast_dim(a.rows(), b.rows()),
        broadcast_dim(a.cols(), b.cols()),
    ) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NumericsError::shape(op, a.shape(), b.shape())),
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, rows: usize, cols: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..cols {
            let x = ad[ai + if ac == 1 { 0 } else { j }];
            let y = bd[bi + if bc == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::matrix(rows, cols, out).expect("broadcast output shape")
}

/// Sums a broadcast gradient back down to `rows x cols`.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    let gc = grad.cols();
    for i in 0..grad.rows() {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if cols == 1 { 0 } else { j };
            let v = out.get(oi, oj) + grad.data()[i * gc + j];
            out.set(oi, oj, v);
        }
    }
    out
}

fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, NumericsError> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let keep = |j: usize| mask.map_or(true, |m| m.get(i, j) != 0.0);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::InvalidArgument(format!(
                "softmax row {i} has no unmasked entries"
            )));
        }
        let mut sum = 0.0;
        for j in 0..c {
            if keep(j) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= sum;
        }
    }
    Ok(Tensor::matrix(r, c, out).expect("softmax shape"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    /// Records a borrowed input, e.g. a value computed on another tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Records a parameter by reference; its gradient is reported by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let var = self.push(Cow::Borrowed(store.get(id)), Op::Leaf);
        self.params.push((var, id));
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    /// Elementwise sum with 2-D broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape("add", x, y)?;
        let out = broadcast_binary(x, y, r, c, |p, q| p + q);
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    /// Elementwise product with 2-D broadcasting over size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape("mul", x, y)?;
        let out = broadcast_binary(x, y, r, c, |p, q| p * q);
        Ok(self.push_owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_owned(out, Op::Scale(a, factor))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if inputs.is_empty() || axis > 1 {
            return Err(NumericsError::InvalidArgument(format!(
                "concat of {} inputs along axis {axis}",
                inputs.len()
            )));
        }
        let first = self.value(inputs[0]);
        require_matrix("concat", first)?;
        let (r0, c0) = (first.rows(), first.cols());
        for &v in &inputs[1..] {
            let t = self.value(v);
            require_matrix("concat", t)?;
            let ok = if axis == 0 { t.cols() == c0 } else { t.rows() == r0 };
            if !ok {
                return Err(NumericsError::shape("concat", first.shape(), t.shape()));
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &v in inputs {
                let t = self.value(v);
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = inputs.iter().map(|&v| self.value(v).cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row_slice(i));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        Ok(self.push_owned(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        require_matrix("slice_rows", t)?;
        if len == 0 || start + len > t.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "slice_rows {start}..{} out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push_owned(out, Op::SliceRows { input: a, start }))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var, NumericsError> {
        self.slice_rows(a, index, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        require_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        Ok(self.push_owned(out, Op::Transpose(a)))
    }

    /// Same data viewed as `rows x cols` in row-major order.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.numel() != rows * cols {
            return Err(NumericsError::shape("reshape", t.shape(), &[rows, cols]));
        }
        let out = Tensor::matrix(rows, cols, t.data().to_vec())?;
        Ok(self.push_owned(out, Op::Reshape(a)))
    }

    /// Mean along `axis`, keeping the reduced axis with size 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        require_matrix("mean", t)?;
        let (r, c) = (t.rows(), t.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(t.row_slice(i)) {
                        *s += v;
                    }
                }
                Tensor::matrix(1, c, acc.into_iter().map(|s| s / r as f64).collect())?
            }
            1 => Tensor::matrix(
                r,
                1,
                (0..r)
                    .map(|i| t.row_slice(i).iter().sum::<f64>() / c as f64)
                    .collect(),
            )?,
            _ => {
                return Err(NumericsError::InvalidArgument(format!(
                    "mean along axis {axis}"
                )))
            }
        };
        Ok(self.push_owned(out, Op::Mean { input: a, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_owned(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_owned(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push_owned(out, Op::LeakyRelu(a, slope))
    }

    /// Softmax along `axis` (1 = per row, 0 = per column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        require_matrix("softmax", t)?;
        let out = match axis {
            1 => softmax_rows(t, None)?,
            0 => softmax_rows(&t.transpose(), None)?.transpose(),
            _ => {
                return Err(NumericsError::InvalidArgument(format!(
                    "softmax along axis {axis}"
                )))
            }
        };
        Ok(self.push_owned(out, Op::Softmax { input: a, axis }))
    }

    /// Row softmax restricted to entries where `mask` is non-zero; masked
    /// entries get probability exactly 0. Every row needs one open entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor) -> Result<Var, NumericsError> {
        let t = self.value(a);
        require_matrix("masked_softmax", t)?;
        if t.shape() != mask.shape() {
            return Err(NumericsError::shape("masked_softmax", t.shape(), mask.shape()));
        }
        let out = softmax_rows(t, Some(mask))?;
        Ok(self.push_owned(out, Op::MaskedSoftmax(a)))
    }

    /// Inverted dropout. With `train == false` this records an exact identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::Dropout { input: a, mask }))
    }

    /// Negative log-likelihood of `label` under softmax of a `1 x C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        require_matrix("cross_entropy", t)?;
        if t.rows() != 1 || label >= t.cols() {
            return Err(NumericsError::InvalidArgument(format!(
                "cross_entropy label {label} for logits of shape {:?}",
                t.shape()
            )));
        }
        let row = t.row_slice(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        Ok(self.push_owned(Tensor::scalar(loss), Op::CrossEntropy { logits, label }))
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        require_matrix("gather_rows", t)?;
        if ids.is_empty() {
            return Err(NumericsError::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericsError::InvalidArgument(format!(
                "row id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(ids.len(), t.cols(), data)?;
        Ok(self.push_owned(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Runs a GRU over pre-projected inputs.
    ///
    /// `xproj` is `L x 3H` holding `x W_x + b_x` with gate blocks ordered
    /// update, reset, candidate. `w_h` is `H x 3H`, `b_h` is `1 x 3H`. The
    /// result is `L x H`; row `t` is the hidden state after consuming input
    /// `t`. With `reverse` the sequence is consumed from the last row to the
    /// first, so the final state sits in row 0.
    pub fn gru(&mut self, xproj: Var, w_h: Var, b_h: Var, reverse: bool) -> Result<Var, NumericsError> {
        let (x, w, b) = (self.value(xproj), self.value(w_h), self.value(b_h));
        require_matrix("gru", x)?;
        require_matrix("gru", w)?;
        require_matrix("gru", b)?;
        let hidden = w.rows();
        if w.cols() != 3 * hidden {
            return Err(NumericsError::shape("gru hidden weight", w.shape(), &[hidden, 3 * hidden]));
        }
        if x.cols() != 3 * hidden {
            return Err(NumericsError::shape("gru input projection", x.shape(), w.shape()));
        }
        if b.shape() != [1, 3 * hidden] {
            return Err(NumericsError::shape("gru hidden bias", b.shape(), w.shape()));
        }
        let (states, cache) = gru_forward(x, w, b, reverse);
        Ok(self.push_owned(
            states,
            Op::Gru(Box::new(GruRecord {
                xproj,
                w_h,
                b_h,
                reverse,
                cache,
            })),
        ))
    }

    /// Final GRU states of several sequences whose pre-projected inputs are
    /// stacked back to back in `xproj` (`sum(lengths) x 3H`); `B x H` with
    /// one row per entry of `lengths`. Equivalent to running [`Tape::gru`] on
    /// each sequence and keeping its final state.
    pub fn gru_last(
        &mut self,
        xproj: Var,
        lengths: &[usize],
        w_h: Var,
        b_h: Var,
        reverse: bool,
    ) -> Result<Var, NumericsError> {
        let (x, w, b) = (self.value(xproj), self.value(w_h), self.value(b_h));
        let hidden = w.rows();
        if w.shape() != [hidden, 3 * hidden] || b.shape() != [1, 3 * hidden] {
            return Err(NumericsError::shape("gru hidden weight", w.shape(), b.shape()));
        }
        if x.cols() != 3 * hidden {
            return Err(NumericsError::shape("gru input projection", x.shape(), w.shape()));
        }
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(NumericsError::EmptySequence);
        }
        if lengths.iter().sum::<usize>() != x.rows() {
            return Err(NumericsError::InvalidArgument(format!(
                "sequence lengths sum to {} but the input has {} rows",
                lengths.iter().sum::<usize>(),
                x.rows()
            )));
        }
        let (last, cache) = gru_batch_forward(x, lengths, w, b, reverse);
        Ok(self.push_owned(
            last,
            Op::GruBatch(Box::new(GruBatchRecord {
                xproj,
                w_h,
                b_h,
                reverse,
                cache,
            })),
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::new(shape.to_vec(), vec![1.0])?;
        self.backward_from(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor) -> Result<Gradients, NumericsError> {
        self.backward_seeded(vec![(root, seed)])
    }

    /// Reverse pass from several roots at once, each with its own upstream
    /// gradient.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, NumericsError> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Err(NumericsError::InvalidArgument("backward without seeds".into()));
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; top + 1];
        for (root, seed) in seeds {
            if seed.shape() != self.value(root).shape() {
                return Err(NumericsError::shape("backward seed", seed.shape(), self.value(root).shape()));
            }
            match &mut grads[root.0] {
                Some(g) => g.add_assign(&seed),
                slot @ None => *slot = Some(seed),
            }
        }
        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        let node = &self.nodes[idx];
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                gemm(GemmArg::plain(g), GemmArg::t(bv), &mut da, 0.0);
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                gemm(GemmArg::t(av), GemmArg::plain(g), &mut db, 0.0);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, reduce_to(g, av.rows(), av.cols()));
                acc(grads, *b, reduce_to(g, bv.rows(), bv.cols()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, c) = (g.rows(), g.cols());
                let ga = broadcast_binary(g, bv, r, c, |p, q| p * q);
                let gb = broadcast_binary(g, av, r, c, |p, q| p * q);
                acc(grads, *a, reduce_to(&ga, av.rows(), av.cols()));
                acc(grads, *b, reduce_to(&gb, bv.rows(), bv.cols()));
            }
            Op::Scale(a, f) => acc(grads, *a, g.map(|v| v * f)),
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let (r, c) = (t.rows(), t.cols());
                    let part = if *axis == 0 {
                        let gc = g.cols();
                        Tensor::matrix(r, c, g.data()[offset * gc..(offset + r) * gc].to_vec())
                    } else {
                        let data = (0..r)
                            .flat_map(|i| g.row_slice(i)[offset..offset + c].iter().copied())
                            .collect();
                        Tensor::matrix(r, c, data)
                    }
                    .expect("concat slice shape");
                    offset += if *axis == 0 { r } else { c };
                    acc(grads, v, part);
                }
            }
            Op::SliceRows { input, start } => {
                let t = self.value(*input);
                let c = t.cols();
                let mut d = Tensor::zeros(t.rows(), c);
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(grads, *input, d);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = Tensor::new(shape, g.data().to_vec()).expect("reshape preserves size");
                acc(grads, *a, d);
            }
            Op::Mean { input, axis } => {
                let t = self.value(*input);
                let (r, c) = (t.rows(), t.cols());
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let v = if *axis == 0 {
                            g.get(0, j) / r as f64
                        } else {
                            g.get(i, 0) / c as f64
                        };
                        d.set(i, j, v);
                    }
                }
                acc(grads, *input, d);
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                let gv = g.item();
                acc(grads, *a, t.map(|_| gv));
            }
            Op::Sigmoid(a) => acc(grads, *a, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv }));
            }
            Op::Softmax { input, axis } => {
                let d = if *axis == 1 {
                    softmax_backward_rows(out, g)
                } else {
                    softmax_backward_rows(&out.transpose(), &g.transpose()).transpose()
                };
                acc(grads, *input, d);
            }
            Op::MaskedSoftmax(input) => acc(grads, *input, softmax_backward_rows(out, g)),
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                acc(grads, *input, Tensor::new(g.shape().to_vec(), data).expect("dropout shape"));
            }
            Op::CrossEntropy { logits, label } => {
                let z = self.value(*logits);
                let mut p = softmax_rows(z, None).expect("finite logits");
                let gv = g.item();
                for (j, v) in p.data_mut().iter_mut().enumerate() {
                    *v = (*v - if j == *label { 1.0 } else { 0.0 }) * gv;
                }
                acc(grads, *logits, p);
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let c = t.cols();
                let d = grads[table.0].get_or_insert_with(|| Tensor::zeros(t.rows(), c));
                for (k, &i) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    for (a, b) in dst.iter_mut().zip(g.row_slice(k)) {
                        *a += b;
                    }
                }
            }
            Op::Gru(rec) => {
                let (dx, dw, db) = gru_backward(
                    self.value(rec.w_h),
                    &rec.cache,
                    g,
                    rec.reverse,
                );
                acc(grads, rec.xproj, dx);
                acc(grads, rec.w_h, dw);
                acc(grads, rec.b_h, db);
            }
            Op::GruBatch(rec) => {
                let rows = self.value(rec.xproj).rows();
                let (dx, dw, db) = gru_batch_backward(self.value(rec.w_h), &rec.cache, g, rows, rec.reverse);
                acc(grads, rec.xproj, dx);
                acc(grads, rec.w_h, dw);
                acc(grads, rec.b_h, db);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut d = Tensor::zeros(r, c);
    for i in 0..r {
        let (yr, gr) = (y.row_slice(i), g.row_slice(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            d.set(i, j, yr[j] * (gr[j] - dot));
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 1.0, 1.0]));
        let y = tape.softmax(x, 1).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_closed_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![5.0, 1.0, 2.0, 0.0, 0.0, 9.0]).unwrap());
        let mask = Tensor::matrix(2, 3, vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let y = tape.masked_softmax(x, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-15);
        let none = Tensor::zeros(2, 3);
        assert!(tape.masked_softmax(x, &none).is_err());
    }

    #[test]
    fn dropout_in_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, -2.0, 3.5]));
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(1, 1000, 1.0));
        let y = tape.dropout(x, 0.1, true, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!((850..950).contains(&kept), "{kept}");
    }

    #[test]
    fn broadcasting_add_and_shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::row(&[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let d = tape.leaf(Tensor::zeros(3, 2));
        let err = tape.add(c, d).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = tape.matmul(c, c).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::row(&[0.3, 0.3]));
        let l = tape.cross_entropy(z, 1).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(tape.cross_entropy(z, 2).is_err());
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::zeros(4, 2));
        assert!(tape.gather_rows(t, &[0, 4]).is_err());
        assert!(tape.gather_rows(t, &[]).is_err());
    }
}
