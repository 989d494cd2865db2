//! Append-only computation tape for reverse-mode differentiation.
//!
//! Each forward op pushes one node holding its result and whatever backward
//! needs. Insertion order is a topological order by construction, so
//! [`Tape::backward`] is a single sweep in exact reverse insertion order,
//! accumulating gradients additively at every fan-out.

use super::{ensure_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of the node on its tape.
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Running-statistics access for a batch-norm op: training mode updates the
/// stats in place, eval mode only reads them.
pub enum BnStats<'a> {
    Train {
        running_mean: &'a mut [f64],
        running_var: &'a mut [f64],
        momentum: f64,
    },
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub invstd: Vec<f64>,
    pub train: bool,
    pub features: usize,
    /// Spatial positions per sample (1 for rank-2 input).
    pub spatial: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScalarMul { a: Var, c: f64 },
    ScalarAdd { a: Var },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    ConcatRows { a: Var, b: Var },
    RowSum { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanAxis0 { a: Var },
    VarAxis0 { a: Var, ddof: usize },
    AddRowVec { a: Var, v: Var },
    SubRowVec { a: Var, v: Var },
    MulRowVec { a: Var, v: Var },
    DivRowVec { a: Var, v: Var },
    Sqrt { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Relu { a: Var },
    RowL2Normalize { a: Var, norms: Vec<f64> },
    Diag { a: Var },
    Gather2d { a: Var, pairs: Vec<(usize, usize)> },
    Reshape { a: Var },
    Conv2d { x: Var, kernel: Var, dims: ConvDims },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Append-only tape of tensor ops. Gradients live beside the nodes and are
/// filled in by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Push an input node. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf)
    }

    /// Copy a node's value onto the tape as a fresh leaf, cutting the
    /// gradient path to its ancestors.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push_node(value, Op::Leaf)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target w.r.t. node `v`, if it received
    /// any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Drop all gradients, e.g. after an optimizer consumed them.
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn push_node(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        ensure_finite(&data, name)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Sub { a, b }, "sub")
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Mul { a, b }, "mul")
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(
            self.value(a).shape().to_vec(),
            data,
            Op::ScalarMul { a, c },
            "scalar_mul",
        )
    }

    pub fn scalar_add(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        self.push(
            self.value(a).shape().to_vec(),
            data,
            Op::ScalarAdd { a },
            "scalar_add",
        )
    }

    /// Matrix product of rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).rank2("matmul")?;
        let (k2, n) = self.value(b).rank2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut data = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let out = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        out[j] += x * brow[j];
                    }
                }
            }
        }
        self.push(vec![m, n], data, Op::Matmul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rank2("transpose")?;
        let av = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        self.push(vec![c, r], data, Op::Transpose { a }, "transpose")
    }

    /// Stack two rank-2 tensors with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).rank2("concat_rows")?;
        let (rb, cb) = self.value(b).rank2("concat_rows")?;
        if ca != cb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        self.push(vec![ra + rb, ca], data, Op::ConcatRows { a, b }, "concat_rows")
    }

    /// Sum each row of a rank-2 tensor: `[r,c] -> [r]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rank2("row_sum")?;
        let av = self.value(a).data();
        let data: Vec<f64> = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(vec![r], data, Op::RowSum { a }, "row_sum")
    }

    /// Sum of all entries, any rank, to a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, "sum")
    }

    /// Mean of all entries, any rank, to a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s / n], Op::Mean { a }, "mean")
    }

    /// Column means of a rank-2 tensor: `[r,c] -> [c]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rank2("mean_axis0")?;
        let av = self.value(a).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += av[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        self.push(vec![c], data, Op::MeanAxis0 { a }, "mean_axis0")
    }

    /// Column variances of a rank-2 tensor with `r - ddof` in the
    /// denominator: `[r,c] -> [c]`. Requires `r > ddof`.
    pub fn var_axis0(&mut self, a: Var, ddof: usize) -> Result<Var> {
        let (r, c) = self.value(a).rank2("var_axis0")?;
        if r <= ddof {
            return Err(Error::DegenerateBatch {
                op: "var_axis0",
                batch: r,
                min: ddof + 1,
            });
        }
        let av = self.value(a).data();
        let mut means = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                means[j] += av[i * c + j];
            }
        }
        for m in &mut means {
            *m /= r as f64;
        }
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = av[i * c + j] - means[j];
                data[j] += d * d;
            }
        }
        let denom = (r - ddof) as f64;
        for v in &mut data {
            *v /= denom;
        }
        self.push(vec![c], data, Op::VarAxis0 { a, ddof }, "var_axis0")
    }

    fn rowvec_shapes(&self, a: Var, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.value(a).rank2(op)?;
        let vs = self.value(v).shape();
        if vs != [c] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![r, c],
                rhs: vs.to_vec(),
            });
        }
        Ok((r, c))
    }

    /// Add a `[c]` vector to every row of a `[r,c]` tensor.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_shapes(a, v, "add_row_vec")?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let data: Vec<f64> = (0..r * c).map(|i| av[i] + vv[i % c]).collect();
        self.push(vec![r, c], data, Op::AddRowVec { a, v }, "add_row_vec")
    }

    /// Subtract a `[c]` vector from every row of a `[r,c]` tensor.
    pub fn sub_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_shapes(a, v, "sub_row_vec")?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let data: Vec<f64> = (0..r * c).map(|i| av[i] - vv[i % c]).collect();
        self.push(vec![r, c], data, Op::SubRowVec { a, v }, "sub_row_vec")
    }

    /// Multiply every row of a `[r,c]` tensor by a `[c]` vector.
    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_shapes(a, v, "mul_row_vec")?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let data: Vec<f64> = (0..r * c).map(|i| av[i] * vv[i % c]).collect();
        self.push(vec![r, c], data, Op::MulRowVec { a, v }, "mul_row_vec")
    }

    /// Divide every row of a `[r,c]` tensor by a `[c]` vector with no zero
    /// entries.
    pub fn div_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rowvec_shapes(a, v, "div_row_vec")?;
        if self.value(v).data().iter().any(|&x| x == 0.0) {
            return Err(Error::domain("div_row_vec", "division by zero entry"));
        }
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let data: Vec<f64> = (0..r * c).map(|i| av[i] / vv[i % c]).collect();
        self.push(vec![r, c], data, Op::DivRowVec { a, v }, "div_row_vec")
    }

    /// Elementwise square root; requires non-negative input.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "negative input"));
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.sqrt()).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Sqrt { a }, "sqrt")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.exp()).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Exp { a }, "exp")
    }

    /// Elementwise natural log; requires strictly positive input.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "non-positive input"));
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.ln()).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Log { a }, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        self.push(self.value(a).shape().to_vec(), data, Op::Relu { a }, "relu")
    }

    /// Normalize each row of a rank-2 tensor to unit L2 norm. An all-zero
    /// row maps to the zero row and receives zero gradient.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rank2("row_l2_normalize")?;
        let av = self.value(a).data();
        let mut norms = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                for j in 0..c {
                    data[i * c + j] = row[j] / norm;
                }
            }
        }
        self.push(vec![r, c], data, Op::RowL2Normalize { a, norms }, "row_l2_normalize")
    }

    /// Main diagonal of a square rank-2 tensor: `[n,n] -> [n]`.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).rank2("diag")?;
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "diag",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let av = self.value(a).data();
        let data: Vec<f64> = (0..r).map(|i| av[i * c + i]).collect();
        self.push(vec![r], data, Op::Diag { a }, "diag")
    }

    /// Gather fixed `(row, col)` entries of a rank-2 tensor into a vector.
    pub fn gather2d(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (r, c) = self.value(a).rank2("gather2d")?;
        if pairs.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::contract("gather2d", "index out of bounds"));
        }
        if pairs.is_empty() {
            return Err(Error::contract("gather2d", "empty index list"));
        }
        let av = self.value(a).data();
        let data: Vec<f64> = pairs.iter().map(|&(i, j)| av[i * c + j]).collect();
        self.push(vec![pairs.len()], data, Op::Gather2d { a, pairs }, "gather2d")
    }

    /// Reinterpret a tensor under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).data().to_vec();
        self.push(shape, data, Op::Reshape { a }, "reshape")
    }

    /// Run the reverse sweep from scalar `loss`. Gradients of earlier
    /// backward calls on this tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("target has shape {:?}, expected scalar", self.value(loss).shape()),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.step_backward(i, &g)?;
        }

        for g in self.grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    /// Propagate gradient `g` of node `i` to its parents.
    fn step_backward(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let Tape { nodes, grads } = self;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(*b, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(*b, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bv = val(b);
                acc(a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * bv[k];
                    }
                });
                let av = val(a);
                acc(b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * av[k];
                    }
                });
            }
            Op::ScalarMul { a, c } => {
                let c = *c;
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * c;
                    }
                });
            }
            Op::ScalarAdd { a } | Op::Reshape { a } => {
                acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = nodes[a.0].value.rank2("matmul")?;
                let n = nodes[b.0].value.shape()[1];
                let bv = val(b);
                // dA = G B^T
                acc(a, &mut |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                let av = val(a);
                // dB = A^T G
                acc(b, &mut |buf| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            buf[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = nodes[a.0].value.rank2("transpose")?;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].value.numel();
                acc(a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(&g[..na]) {
                        *o += gi;
                    }
                });
                acc(b, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(&g[na..]) {
                        *o += gi;
                    }
                });
            }
            Op::RowSum { a } => {
                let (r, c) = nodes[a.0].value.rank2("row_sum")?;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[i];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::MeanAxis0 { a } => {
                let (r, c) = nodes[a.0].value.rank2("mean_axis0")?;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::VarAxis0 { a, ddof } => {
                let (a, ddof) = (*a, *ddof);
                let (r, c) = nodes[a.0].value.rank2("var_axis0")?;
                let av = val(a);
                let mut means = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        means[j] += av[i * c + j];
                    }
                }
                for m in &mut means {
                    *m /= r as f64;
                }
                let denom = (r - ddof) as f64;
                acc(a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j] * 2.0 * (av[i * c + j] - means[j]) / denom;
                        }
                    }
                });
            }
            Op::AddRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = nodes[v.0].value.numel();
                acc(a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(v, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        buf[k % c] += gi;
                    }
                });
            }
            Op::SubRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = nodes[v.0].value.numel();
                acc(a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                acc(v, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        buf[k % c] -= gi;
                    }
                });
            }
            Op::MulRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = nodes[v.0].value.numel();
                let vv = val(v);
                acc(a, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        buf[k] += gi * vv[k % c];
                    }
                });
                let av = val(a);
                acc(v, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        buf[k % c] += gi * av[k];
                    }
                });
            }
            Op::DivRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = nodes[v.0].value.numel();
                let vv = val(v);
                acc(a, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        buf[k] += gi / vv[k % c];
                    }
                });
                let av = val(a);
                acc(v, &mut |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        let j = k % c;
                        buf[j] -= gi * av[k] / (vv[j] * vv[j]);
                    }
                });
            }
            Op::Sqrt { a } => {
                let a = *a;
                let yv = nodes[i].value.data();
                acc(a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] / (2.0 * yv[k]);
                    }
                });
            }
            Op::Exp { a } => {
                let a = *a;
                let yv = nodes[i].value.data();
                acc(a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * yv[k];
                    }
                });
            }
            Op::Log { a } => {
                let a = *a;
                let av = val(a);
                acc(a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] / av[k];
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                let av = val(a);
                acc(a, &mut |buf| {
                    for k in 0..buf.len() {
                        if av[k] > 0.0 {
                            buf[k] += g[k];
                        }
                    }
                });
            }
            Op::RowL2Normalize { a, norms } => {
                let a = *a;
                let (r, c) = nodes[a.0].value.rank2("row_l2_normalize")?;
                let yv = nodes[i].value.data();
                // dx_i = (g_i - (g_i . y_i) y_i) / ||x_i||, zero for zero rows.
                acc(a, &mut |buf| {
                    for row in 0..r {
                        let norm = norms[row];
                        if norm == 0.0 {
                            continue;
                        }
                        let gr = &g[row * c..(row + 1) * c];
                        let yr = &yv[row * c..(row + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        let out = &mut buf[row * c..(row + 1) * c];
                        for j in 0..c {
                            out[j] += (gr[j] - dot * yr[j]) / norm;
                        }
                    }
                });
            }
            Op::Diag { a } => {
                let a = *a;
                let n = nodes[a.0].value.shape()[0];
                acc(a, &mut |buf| {
                    for j in 0..n {
                        buf[j * n + j] += g[j];
                    }
                });
            }
            Op::Gather2d { a, pairs } => {
                let a = *a;
                let c = nodes[a.0].value.shape()[1];
                acc(a, &mut |buf| {
                    for (k, &(pi, pj)) in pairs.iter().enumerate() {
                        buf[pi * c + pj] += g[k];
                    }
                });
            }
            Op::Conv2d { .. } | Op::MaxPool2d { .. } | Op::BatchNorm { .. } => {
                super::nn::step_backward_nn(nodes, grads, i, g)?;
            }
        }
        Ok(())
    }
}
