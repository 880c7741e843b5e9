//! Define-by-run reverse-mode tape.
//!
//! Every forward operation appends a node holding its value and the recipe
//! needed to push a gradient back to its parents. Nodes are only ever
//! appended, so parents always precede children and the backward sweep is a
//! plain reverse iteration.

use crate::error::{AutodiffError, Result};
use crate::tensor::{logsumexp, softmax_into, Tensor};

/// Handle to a node on a [`Tape`].
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
    Constant,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Concat(Var, Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Mse(Var, Var),
    SqNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }
}

#[derive(Clone, Copy)]
struct Broadcast {
    rows: usize,
    cols: usize,
    lhs: (usize, usize),
    rhs: (usize, usize),
}

impl Broadcast {
    #[inline]
    fn lhs_index(&self, i: usize, j: usize) -> usize {
        flat(self.lhs, i, j)
    }

    #[inline]
    fn rhs_index(&self, i: usize, j: usize) -> usize {
        flat(self.rhs, i, j)
    }
}

#[inline]
fn flat((r, c): (usize, usize), i: usize, j: usize) -> usize {
    let i = if r == 1 { 0 } else { i };
    let j = if c == 1 { 0 } else { j };
    i * c + j
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().all(|&d| d == 1)
}

/// Broadcasting rules: identical shapes; a one-element operand against
/// anything; rank-2 against rank-2 where each axis matches or is 1; a rank-1
/// row against a rank-2 tensor with the same number of columns. A rank-1
/// vector never broadcasts against a column, which would silently produce an
/// outer sum.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (ar, ac) = as_2d(a);
    let (br, bc) = as_2d(b);
    let out_shape = if a == b || is_scalar_shape(b) {
        a.to_vec()
    } else if is_scalar_shape(a) {
        b.to_vec()
    } else if a.len() == 2 && b.len() == 2 {
        let r = if ar == br || br == 1 {
            ar
        } else if ar == 1 {
            br
        } else {
            return Err(mismatch());
        };
        let c = if ac == bc || bc == 1 {
            ac
        } else if ac == 1 {
            bc
        } else {
            return Err(mismatch());
        };
        vec![r, c]
    } else if a.len() == 2 && b.len() == 1 && ac == bc {
        a.to_vec()
    } else if a.len() == 1 && b.len() == 2 && ac == bc {
        b.to_vec()
    } else {
        return Err(mismatch());
    };
    let (rows, cols) = as_2d(&out_shape);
    Ok((
        out_shape,
        Broadcast {
            rows,
            cols,
            lhs: (ar, ac),
            rhs: (br, bc),
        },
    ))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value as `x`; gradients stop here.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(bc.rows * bc.cols);
        for i in 0..bc.rows {
            for j in 0..bc.cols {
                out.push(f(av[bc.lhs_index(i, j)], bv[bc.rhs_index(i, j)]));
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::raw(shape, out), op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), g))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let g = self.nodes[x.0].needs_grad;
        self.push(value, op, g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn rowwise(&mut self, x: Var, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let value = &self.nodes[x.0].value;
        let cols = value.cols();
        let mut out = vec![0.0; value.len()];
        if cols > 0 {
            for (src, dst) in value.data().chunks(cols).zip(out.chunks_mut(cols)) {
                f(src, dst);
            }
        }
        let shape = value.shape().to_vec();
        let g = self.nodes[x.0].needs_grad;
        self.push(Tensor::raw(shape, out), op, g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, softmax_into, Op::Softmax(x))
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |src, dst| {
                let lse = logsumexp(src);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            },
            Op::LogSoftmax(x),
        )
    }

    fn reduce_last(&mut self, x: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let value = &self.nodes[x.0].value;
        let cols = value.cols();
        let out: Vec<f64> = if cols == 0 {
            vec![0.0; value.rows()]
        } else {
            value.data().chunks(cols).map(&f).collect()
        };
        let shape = reduced_shape(value.shape());
        let g = self.nodes[x.0].needs_grad;
        self.push(Tensor::raw(shape, out), op, g)
    }

    /// Overflow-safe log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        self.reduce_last(x, logsumexp, Op::LogSumExp(x))
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        self.reduce_last(x, |r| r.iter().sum(), Op::SumLast(x))
    }

    /// Squared L2 norm over the last axis; drops that axis.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        self.reduce_last(x, |r| r.iter().map(|v| v * v).sum(), Op::SqNorm(x))
    }

    /// Picks `x[.., indices[row]]` from every row.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = &self.nodes[x.0].value;
        let (rows, cols) = (value.rows(), value.cols());
        if indices.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: value.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(rows);
        for (i, &k) in indices.iter().enumerate() {
            if k >= cols {
                return Err(AutodiffError::IndexOutOfRange {
                    index: k,
                    size: cols,
                });
            }
            out.push(value.data()[i * cols + k]);
        }
        let shape = reduced_shape(value.shape());
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::Gather(x, indices.to_vec()),
            g,
        ))
    }

    /// Rows of a `[n, d]` matrix selected by index, giving `[indices.len(), d]`.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = &self.nodes[x.0].value;
        if value.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_rows",
                lhs: value.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, cols) = (value.rows(), value.cols());
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &k in indices {
            if k >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    index: k,
                    size: rows,
                });
            }
            out.extend_from_slice(value.row(k));
        }
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::raw(vec![indices.len(), cols], out),
            Op::SelectRows(x, indices.to_vec()),
            g,
        ))
    }

    /// Concatenates two rank-2 tensors along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(
            Tensor::raw(vec![rows, ca + cb], out),
            Op::Concat(a, b),
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let g = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let g = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s), Op::SumAll(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let g = !v.is_empty() && self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(m), Op::MeanAll(x), g)
    }

    /// Unweighted mean of squared differences (no one-half factor).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = va.len().max(1) as f64;
        let m = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), g))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::raw(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        // Accumulates into a parent's gradient buffer when it wants one.
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p.0].needs_grad {
                return;
            }
            let buf = grads[p.0].get_or_insert_with(|| vec![0.0; nodes[p.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (_, bc) = broadcast("backward", nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("shapes validated in forward");
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let kind = match &node.op {
                    Op::Add(..) => 0,
                    Op::Sub(..) => 1,
                    _ => 2,
                };
                acc(*a, &mut |ga| {
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let go = g[i * bc.cols + j];
                            let d = if kind == 2 { bv[bc.rhs_index(i, j)] } else { 1.0 };
                            ga[bc.lhs_index(i, j)] += go * d;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let go = g[i * bc.cols + j];
                            let d = match kind {
                                0 => 1.0,
                                1 => -1.0,
                                _ => av[bc.lhs_index(i, j)],
                            };
                            gb[bc.rhs_index(i, j)] += go * d;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &mut |ga| {
                    // dA = G · Bᵀ
                    let bd = vb.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · G
                    let ad = va.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, x) in dst.iter_mut().zip(grow) {
                                *d += a_ip * x;
                            }
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (d, go) in gx.iter_mut().zip(g) {
                    *d += go * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| {
                for (d, go) in gx.iter_mut().zip(g) {
                    *d += go;
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((d, go), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += go * (1.0 - y * y);
                }
            }),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((d, go), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += go;
                        }
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((d, go), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += go * y;
                }
            }),
            Op::Log(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((d, go), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += go / v;
                    }
                })
            }
            Op::Square(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((d, go), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * go * v;
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((d, go), v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > lo && v < hi {
                            *d += go;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((dst, go), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let dot: f64 = go.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dst.iter_mut().zip(go).zip(y) {
                            *d += yi * (gi - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((dst, go), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: f64 = go.iter().sum();
                        for ((d, gi), yi) in dst.iter_mut().zip(go).zip(y) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                })
            }
            Op::LogSumExp(x) => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                acc(*x, &mut |gx| {
                    for ((dst, src), (&go, &lse)) in gx
                        .chunks_mut(cols)
                        .zip(xv.data().chunks(cols))
                        .zip(g.iter().zip(out))
                    {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += go * (s - lse).exp();
                        }
                    }
                })
            }
            Op::SumLast(x) => {
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (dst, &go) in gx.chunks_mut(cols).zip(g) {
                        for d in dst {
                            *d += go;
                        }
                    }
                })
            }
            Op::SqNorm(x) => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                acc(*x, &mut |gx| {
                    for ((dst, src), &go) in gx.chunks_mut(cols).zip(xv.data().chunks(cols)).zip(g) {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += 2.0 * go * s;
                        }
                    }
                })
            }
            Op::Gather(x, indices) => {
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (i, (&k, &go)) in indices.iter().zip(g).enumerate() {
                        gx[i * cols + k] += go;
                    }
                })
            }
            Op::SelectRows(x, indices) => {
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (i, &k) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gx[k * cols + c] += g[i * cols + c];
                        }
                    }
                })
            }
            Op::Concat(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                let width = ca + cb;
                acc(*a, &mut |ga| {
                    for (dst, src) in ga.chunks_mut(ca.max(1)).zip(g.chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[..ca]) {
                            *d += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (dst, src) in gb.chunks_mut(cb.max(1)).zip(g.chunks(width)) {
                        for (d, s) in dst.iter_mut().zip(&src[ca..]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::MeanAll(x) => acc(*x, &mut |gx| {
                let scale = g[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += scale;
                }
            }),
            Op::Mse(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let scale = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x - y);
                    }
                });
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (d, x) in dst.iter_mut().zip(brow) {
                *d += a_ip * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logsumexp_of_two_zeros_is_ln2() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x);
        assert!(close(t.value(y).item(), std::f64::consts::LN_2, 1e-12));
        assert!(t.shape(y).is_empty());
    }

    #[test]
    fn softmax_is_uniform_on_equal_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0; 3]));
        let y = t.softmax(x);
        for &p in t.value(y).data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.matmul(i, m).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn vector_does_not_broadcast_against_column() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![4]));
        let b = t.leaf(Tensor::zeros(vec![4, 1]));
        assert!(t.sub(a, b).is_err());
    }

    #[test]
    fn stop_gradient_detaches_one_factor() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let sx = t.stop_gradient(x);
        assert_eq!(t.value(sx).data(), &[3.0]);
        let y = t.mul(x, sx).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0]);
    }

    #[test]
    fn fully_detached_gradient_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.7]));
        let sx = t.stop_gradient(x);
        let y = t.square(sx);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn mse_gradient_has_no_half_factor() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]));
        let z = t.constant(Tensor::vector(vec![0.0]));
        let loss = t.mse(x, z).unwrap();
        assert_eq!(t.value(loss).item(), 4.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let q = vec![0.3, -1.2, 2.0, 0.0];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(q.clone()));
        let loss = t.logsumexp(x);
        let g = t.backward(loss).unwrap();
        let expected = crate::tensor::softmax(&q);
        for (a, b) in g.wrt(x).data().iter().zip(&expected) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            t.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            t.gather(x, &[0, 3]),
            Err(AutodiffError::IndexOutOfRange { index: 3, size: 3 })
        ));
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row = t.leaf(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let col = t.leaf(Tensor::matrix(2, 1, vec![100.0, 200.0]).unwrap());
        let a = t.add(m, row).unwrap();
        let b = t.add(a, col).unwrap();
        assert_eq!(t.value(b).data(), &[111.0, 122.0, 133.0, 214.0, 225.0, 236.0]);
        let loss = t.sum(b);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(row).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(col).data(), &[3.0, 3.0]);
    }
}
