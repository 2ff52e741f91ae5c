//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every forward primitive appends a node to a [`Tape`]. Nodes are stored in
//! creation order, so the tape is always topologically sorted and `backward`
//! is a single reverse sweep. Gradients are returned in a separate
//! [`Gradients`] table rather than written into the tensors, which keeps the
//! tape immutable after the forward pass.

use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Leading extent, treating rank-0 and rank-1 tensors as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gather/scatter description of a convolution: for every kernel offset, the
/// (input row, output row) pairs it connects. Shared by the sparse 3D
/// convolution and the dense image convolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvRules {
    pub input_rows: usize,
    pub output_rows: usize,
    pub offsets: Vec<Vec<(u32, u32)>>,
}

impl ConvRules {
    pub fn kernel_volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn rule_count(&self) -> usize {
        self.offsets.iter().map(Vec::len).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Pow(Var, f64),
    PowVar(Var, Var),
    Recip(Var),
    ClampMin(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SegmentMax { input: Var, argmax: Vec<usize> },
    L2Norm(Var),
    RowNorms(Var),
    GatherRows { input: Var, index: Rc<Vec<usize>> },
    ScaleRows { input: Var, weights: Rc<Vec<f64>> },
    ConcatCols(Var, Var),
    SmoothL1 { input: Var, beta: f64 },
    Reshape(Var),
    Conv { input: Var, weight: Var, rules: Rc<ConvRules> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient buffers produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not require grad or is not
    /// reachable from the loss.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads.get(var.0).and_then(|g| {
            g.as_ref().map(|g| Tensor {
                shape: self.shapes[var.0].clone(),
                data: g.clone(),
            })
        })
    }

    pub fn get_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value.data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Without a gradient path the op record is dead weight.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[a.0].value;
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.unary(a, |x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// `[N, D] + [D]`, adding the vector to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if ta.cols() != tb.numel() {
            return Err(mismatch("add_row_broadcast", ta, tb));
        }
        let cols = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols.max(1)) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let v = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        self.push("add_row_broadcast", v, Op::AddRowBroadcast(a, bias), &[a, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; n * m];
        matmul_acc(&ta.data, &tb.data, &mut out, n, k, m);
        let v = Tensor {
            shape: vec![n, m],
            data: out,
        };
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.unary(a, |x| x.powf(p));
        self.push("pow", v, Op::Pow(a, p), &[a])
    }

    /// Elementwise `x^p` where `p` is a one-element tensor on the tape.
    /// Inputs must be positive for the exponent gradient to exist.
    pub fn pow_var(&mut self, a: Var, p: Var) -> Result<Var> {
        let tp = &self.nodes[p.0].value;
        if tp.numel() != 1 {
            return Err(mismatch("pow_var", &self.nodes[a.0].value, tp));
        }
        let e = tp.data[0];
        let v = self.unary(a, |x| x.powf(e));
        self.push("pow_var", v, Op::PowVar(a, p), &[a, p])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, |x| 1.0 / x);
        self.push("recip", v, Op::Recip(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let v = self.unary(a, |x| x.max(lo));
        self.push("clamp_min", v, Op::ClampMin(a, lo), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column means of an `[N, D]` tensor, giving `[1, D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, d) = (t.rows(), t.cols());
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean_rows",
                reason: "no rows".into(),
            });
        }
        let mut out = vec![0.0; d];
        for row in t.data.chunks(d.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let v = Tensor {
            shape: vec![1, d],
            data: out,
        };
        self.push("mean_rows", v, Op::MeanRows(a), &[a])
    }

    /// Column-wise max within contiguous row segments. `segments[s]` is the
    /// end (exclusive) of segment `s`; segment `s` starts where `s - 1` ended.
    /// Ties go to the lowest row index.
    pub fn segment_max(&mut self, a: Var, segment_ends: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(segment_ends.len() * d);
        let mut argmax = Vec::with_capacity(segment_ends.len() * d);
        let mut start = 0;
        for &end in segment_ends {
            if end <= start || end > n {
                return Err(TensorError::InvalidArgument {
                    op: "segment_max",
                    reason: format!("bad segment {start}..{end} over {n} rows"),
                });
            }
            for c in 0..d {
                let mut best = start;
                let mut best_val = t.data[start * d + c];
                for r in start + 1..end {
                    let x = t.data[r * d + c];
                    if x > best_val {
                        best_val = x;
                        best = r;
                    }
                }
                out.push(best_val);
                argmax.push(best);
            }
            start = end;
        }
        let v = Tensor {
            shape: vec![segment_ends.len(), d],
            data: out,
        };
        self.push("segment_max", v, Op::SegmentMax { input: a, argmax }, &[a])
    }

    /// Column-wise max over all rows; returns `[1, D]` and the argmax rows.
    pub fn reduce_max(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let n = self.nodes[a.0].value.rows();
        let out = self.segment_max(a, &[n])?;
        let argmax = match &self.nodes[out.0].op {
            Op::SegmentMax { argmax, .. } => argmax.clone(),
            // Untracked: recompute the argmax directly.
            _ => {
                let t = &self.nodes[a.0].value;
                let d = t.cols();
                (0..d)
                    .map(|c| {
                        let mut best = 0;
                        for r in 1..n {
                            if t.data[r * d + c] > t.data[best * d + c] {
                                best = r;
                            }
                        }
                        best
                    })
                    .collect()
            }
        };
        Ok((out, argmax))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("l2_norm", Tensor::scalar(s), Op::L2Norm(a), &[a])
    }

    /// Euclidean norm of each row: `[N, D] -> [N]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let d = t.cols().max(1);
        let data: Vec<f64> = t
            .data
            .chunks(d)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::vector(data);
        self.push("row_norms", v, Op::RowNorms(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            if i >= n {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row {i} out of {n}"),
                });
            }
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let v = Tensor {
            shape: vec![index.len(), d],
            data,
        };
        self.push("gather_rows", v, Op::GatherRows { input: a, index }, &[a])
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: Rc<Vec<f64>>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rows() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape.clone(),
                rhs: vec![weights.len()],
            });
        }
        let d = t.cols().max(1);
        let mut data = t.data.clone();
        for (row, w) in data.chunks_mut(d).zip(weights.iter()) {
            row.iter_mut().for_each(|x| *x *= w);
        }
        let v = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push("scale_rows", v, Op::ScaleRows { input: a, weights }, &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows() != tb.rows() || ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(mismatch("concat_cols", ta, tb));
        }
        let (n, da, db) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(&ta.data[r * da..(r + 1) * da]);
            data.extend_from_slice(&tb.data[r * db..(r + 1) * db]);
        }
        let v = Tensor {
            shape: vec![n, da + db],
            data,
        };
        self.push("concat_cols", v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Elementwise Huber term: `0.5 x^2 / beta` below `beta`, `|x| - beta/2` above.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "smooth_l1",
                reason: format!("beta must be positive, got {beta}"),
            });
        }
        let v = self.unary(a, |x| smooth_l1_scalar(x, beta));
        self.push("smooth_l1", v, Op::SmoothL1 { input: a, beta }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Rule-driven convolution. `input` is `[rules.input_rows, C_in]`,
    /// `weight` is `[K, C_in, C_out]` with `K = rules.kernel_volume()`.
    pub fn conv(&mut self, input: Var, weight: Var, rules: Rc<ConvRules>) -> Result<Var> {
        let (ti, tw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        if tw.shape.len() != 3 || tw.shape[0] != rules.kernel_volume() {
            return Err(mismatch("conv", ti, tw));
        }
        let (cin, cout) = (tw.shape[1], tw.shape[2]);
        if ti.rows() != rules.input_rows || ti.cols() != cin {
            return Err(mismatch("conv", ti, tw));
        }
        let mut out = vec![0.0; rules.output_rows * cout];
        for (k, pairs) in rules.offsets.iter().enumerate() {
            let w = &tw.data[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let x = &ti.data[i as usize * cin..(i as usize + 1) * cin];
                let y = &mut out[o as usize * cout..(o as usize + 1) * cout];
                for (ci, xv) in x.iter().enumerate() {
                    if *xv == 0.0 {
                        continue;
                    }
                    let wr = &w[ci * cout..(ci + 1) * cout];
                    for (yv, wv) in y.iter_mut().zip(wr) {
                        *yv += xv * wv;
                    }
                }
            }
        }
        let v = Tensor {
            shape: vec![rules.output_rows, cout],
            data: out,
        };
        self.push("conv", v, Op::Conv { input, weight, rules }, &[input, weight])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = &self.nodes[loss.0].value;
        if t.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: t.shape.clone(),
            });
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Reverse sweep from an arbitrary output with an upstream gradient
    /// `seed` of the same shape.
    pub fn backward_seeded(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: "empty tape".into(),
            });
        }
        let out = &self.nodes[output.0].value;
        if out.numel() != seed.numel() {
            return Err(mismatch("backward", out, seed));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.data.clone());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape.clone()).collect();
        // Only leaves and tracked intermediates keep gradients; drop buffers
        // for nodes that never required one.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * tb.data[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ta.data[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddRowBroadcast(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let d = val(*b).numel().max(1);
                acc(*b, &mut |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs(*a) {
                    // dA = G · Bᵀ
                    acc(*a, &mut |ga| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for c in 0..k {
                                let brow = &tb.data[c * m..(c + 1) * m];
                                ga[r * k + c] += dot(grow, brow);
                            }
                        }
                    });
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    acc(*b, &mut |gb| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for c in 0..k {
                                let av = ta.data[r * k + c];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[c * m..(c + 1) * m];
                                dst.iter_mut().zip(grow).for_each(|(x, y)| *x += av * y);
                            }
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if ta.data[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Pow(a, p) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let x = ta.data[i];
                        let d = if *p == 0.0 {
                            0.0
                        } else if x == 0.0 && *p < 1.0 {
                            0.0
                        } else {
                            p * x.powf(p - 1.0)
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::PowVar(a, p) => {
                let (ta, e) = (val(*a), val(*p).data[0]);
                let out = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let x = ta.data[i];
                        let d = if x == 0.0 { 0.0 } else { e * x.powf(e - 1.0) };
                        ga[i] += g[i] * d;
                    }
                });
                acc(*p, &mut |gp| {
                    let mut s = 0.0;
                    for i in 0..ta.data.len() {
                        let x = ta.data[i];
                        if x > 0.0 {
                            s += g[i] * out.data[i] * x.ln();
                        }
                    }
                    gp[0] += s;
                });
            }
            Op::Recip(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let x = ta.data[i];
                        ga[i] -= g[i] / (x * x);
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if ta.data[i] > *lo {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * ta.data[i].signum() * (ta.data[i] != 0.0) as u8 as f64;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (n, d) = (ta.rows(), ta.cols().max(1));
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(d) {
                        row.iter_mut().zip(g).for_each(|(x, y)| *x += y / n as f64);
                    }
                });
            }
            Op::SegmentMax { input, argmax } => {
                let d = val(*input).cols().max(1);
                acc(*input, &mut |ga| {
                    for (j, &r) in argmax.iter().enumerate() {
                        ga[r * d + j % d] += g[j];
                    }
                });
            }
            Op::L2Norm(a) => {
                let ta = val(*a);
                let n = node.value.data[0];
                acc(*a, &mut |ga| {
                    if n > 0.0 {
                        for i in 0..ga.len() {
                            ga[i] += g[0] * ta.data[i] / n;
                        }
                    }
                });
            }
            Op::RowNorms(a) => {
                let ta = val(*a);
                let d = ta.cols().max(1);
                acc(*a, &mut |ga| {
                    for (r, (grow, xrow)) in ga.chunks_mut(d).zip(ta.data.chunks(d)).enumerate() {
                        let n = node.value.data[r];
                        if n > 0.0 {
                            grow.iter_mut().zip(xrow).for_each(|(gx, x)| *gx += g[r] * x / n);
                        }
                    }
                });
            }
            Op::GatherRows { input, index } => {
                let d = val(*input).cols().max(1);
                acc(*input, &mut |ga| {
                    for (j, &r) in index.iter().enumerate() {
                        let src = &g[j * d..(j + 1) * d];
                        ga[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::ScaleRows { input, weights } => {
                let d = val(*input).cols().max(1);
                acc(*input, &mut |ga| {
                    for ((grow, src), w) in ga.chunks_mut(d).zip(g.chunks(d)).zip(weights.iter()) {
                        grow.iter_mut().zip(src).for_each(|(x, y)| *x += w * y);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (val(*a).cols(), val(*b).cols());
                let w = da + db;
                acc(*a, &mut |ga| {
                    for (r, row) in ga.chunks_mut(da.max(1)).enumerate() {
                        row.iter_mut().zip(&g[r * w..r * w + da]).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, row) in gb.chunks_mut(db.max(1)).enumerate() {
                        row.iter_mut().zip(&g[r * w + da..(r + 1) * w]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SmoothL1 { input, beta } => {
                let ta = val(*input);
                acc(*input, &mut |ga| {
                    for i in 0..ga.len() {
                        let x = ta.data[i];
                        let d = if x.abs() < *beta { x / beta } else { x.signum() };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Conv { input, weight, rules } => {
                let (ti, tw) = (val(*input), val(*weight));
                let (cin, cout) = (tw.shape[1], tw.shape[2]);
                if needs(*input) {
                    acc(*input, &mut |gi| {
                        for (k, pairs) in rules.offsets.iter().enumerate() {
                            let w = &tw.data[k * cin * cout..(k + 1) * cin * cout];
                            for &(i, o) in pairs {
                                let gy = &g[o as usize * cout..(o as usize + 1) * cout];
                                let gx = &mut gi[i as usize * cin..(i as usize + 1) * cin];
                                for (ci, gxv) in gx.iter_mut().enumerate() {
                                    *gxv += dot(gy, &w[ci * cout..(ci + 1) * cout]);
                                }
                            }
                        }
                    });
                }
                if needs(*weight) {
                    acc(*weight, &mut |gw| {
                        for (k, pairs) in rules.offsets.iter().enumerate() {
                            let gwk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                            for &(i, o) in pairs {
                                let gy = &g[o as usize * cout..(o as usize + 1) * cout];
                                let x = &ti.data[i as usize * cin..(i as usize + 1) * cin];
                                for (ci, xv) in x.iter().enumerate() {
                                    if *xv == 0.0 {
                                        continue;
                                    }
                                    let dst = &mut gwk[ci * cout..(ci + 1) * cout];
                                    dst.iter_mut().zip(gy).for_each(|(d, y)| *d += xv * y);
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

pub fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[n×m] += a[n×k] · b[k×m]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            let brow = &b[c * m..(c + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// Compares the tape gradient of `f` at `x` against central finite
/// differences. Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn check_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "check_gradient",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        let y = t.value(out).item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "check_gradient" });
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += step;
        let mut minus = x.clone();
        minus.data[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(m(2, 1, &[1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
        assert_eq!(t.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn relu_and_mean() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = t.constant(Tensor::vector(vec![2.0, 4.0]));
        let mu = t.mean(y).unwrap();
        assert_eq!(t.value(mu).item(), 3.0);
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]), true);
        let sq = t.pow(x, 2.0).unwrap();
        let loss = t.mean(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_zero_for_negative_and_at_zero() {
        for x0 in [-1.0, 0.0] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(vec![x0]), true);
            let r = t.relu(x).unwrap();
            let loss = t.sum(r).unwrap();
            let g = t.backward(loss).unwrap();
            assert_eq!(g.get(x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
        let c = t.constant(m(2, 3, &[0.0; 6]));
        let d = t.constant(m(2, 3, &[0.0; 6]));
        assert!(t.matmul(c, d).is_err());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_is_caught_in_debug() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(t.recip(a), Err(TensorError::NonFinite { op: "recip" })));
    }

    #[test]
    fn two_path_accumulation() {
        // y = x*x + 3x at x = 2: dy/dx = 2x + 3 = 7
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0).unwrap();
        let y = t.add(sq, lin).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]), true);
        let unused = t.leaf(Tensor::vector(vec![5.0]), true);
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn segment_max_ties_take_lowest_index() {
        let mut t = Tape::new();
        let x = t.leaf(m(3, 1, &[2.0, 2.0, 1.0]), true);
        let (mx, arg) = t.reduce_max(x).unwrap();
        assert_eq!(arg, vec![0]);
        let loss = t.sum(mx).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradcheck_quadratic_and_smooth_l1() {
        let err = check_gradient(
            |t, x| {
                let y = t.pow(x, 2.0)?;
                t.sum(y)
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(
            |t, x| {
                let y = t.smooth_l1(x, 1.0)?;
                t.sum(y)
            },
            &Tensor::vector(vec![0.5]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let a = t.leaf(m(2, 3, &[0.1, -0.4, 0.9, 1.3, -2.0, 0.25]), true);
            let b = t.leaf(m(3, 2, &[0.5, 0.6, -0.7, 0.8, 0.3, -0.2]), true);
            let c = t.matmul(a, b).unwrap();
            let r = t.relu(c).unwrap();
            let n = t.l2_norm(r).unwrap();
            let g = t.backward(n).unwrap();
            (g.get(a).unwrap(), g.get(b).unwrap())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&b1), bits(&b2));
    }
}
