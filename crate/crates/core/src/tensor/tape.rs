//! Define-by-run tape.
//!
//! Every operation evaluates eagerly and pushes a node holding the result, so
//! values can flow through constant-only graphs. The backward record of a node
//! participates in differentiation only when at least one input requires a
//! gradient. A tape stays valid after `backward`, which may be called for any
//! scalar node; each call starts from fresh gradient buffers.
//!
//! Broadcasting is restricted to scalar-tensor and trailing-dimension
//! expansion (the right operand's shape is a suffix of the left's). Anything
//! else must be reshaped explicitly.

use std::sync::Arc;

use super::kernels::{self, PlaneGeom};
use super::{numel, Scalar, Tensor};
use crate::error::{NemfError, NemfResult};

/// Guard used by `log` (and the `sqrt` derivative) to keep near-zero inputs
/// finite: log(x) is evaluated as ln(max(x, LOG_EPS)).
pub const LOG_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which 2D factor of a rank-5 volume a plane convolution slides over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// First two spatial axes.
    Source,
    /// Last two spatial axes.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Suffix,
}

fn bcast(lhs: &[usize], rhs: &[usize]) -> Option<Bcast> {
    if lhs == rhs {
        Some(Bcast::Same)
    } else if numel(rhs) == 1 {
        Some(Bcast::Scalar)
    } else if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        Some(Bcast::Suffix)
    } else {
        None
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    RowScale(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    Softmax(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    LayerNorm(Var, Var, Var),
    ConvPlane(Var, Var, Var, Plane),
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor; it participates in gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, needs, Op::Leaf)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- element-wise binary ----------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> NemfResult<(Tensor<T>, Bcast)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = bcast(ta.shape(), tb.shape()).ok_or_else(|| NemfError::ShapeMismatch {
            op: op_name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<T> = match kind {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::Suffix => {
                let nb = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % nb]))
                    .collect()
            }
        };
        Ok((
            Tensor::from_vec(ta.shape().to_vec(), out).expect("binary keeps shape"),
            kind,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> NemfResult<Var> {
        let (value, _) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NemfResult<Var> {
        let (value, _) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> NemfResult<Var> {
        let (value, _) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mul(a, b)))
    }

    /// a[r, c] scaled per row by w (shape [r] or [r, 1]).
    pub fn row_scale(&mut self, a: Var, w: Var) -> NemfResult<Var> {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let rows = *ta.shape().first().unwrap_or(&0);
        if ta.shape().len() != 2 || tw.numel() != rows {
            return Err(NemfError::ShapeMismatch {
                op: "row_scale",
                lhs: ta.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let cols = ta.shape()[1];
        let mut out = Vec::with_capacity(ta.numel());
        for (i, chunk) in ta.data().chunks(cols).enumerate() {
            let s = tw.data()[i];
            out.extend(chunk.iter().map(|&x| x * s));
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), out).expect("row_scale keeps shape");
        let needs = self.needs(a) || self.needs(w);
        Ok(self.push(value, needs, Op::RowScale(a, w)))
    }

    // ---- element-wise unary -----------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(value, needs, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                // Symmetric form, stable for |x| large in both directions.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    /// ln(max(x, LOG_EPS)); the guard keeps the NLL of near-zero scores finite.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = T::of(LOG_EPS);
        self.unary(a, |x| x.max(eps).ln(), Op::Log(a))
    }

    /// sqrt(max(x, 0)); exact at zero, with a guarded derivative.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()).sqrt(), Op::Sqrt(a))
    }

    /// Clamp to [lo, hi]; the gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> NemfResult<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NemfError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::from_vec(vec![m, n], out).expect("matmul shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> NemfResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NemfError::InvalidShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        kernels::transpose(ta.data(), r, c, &mut out);
        let value = Tensor::from_vec(vec![c, r], out).expect("transpose shape");
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Transpose(a)))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let mut acc = T::zero();
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(acc / T::of(n as f64)),
            needs,
            Op::Mean(a),
        )
    }

    fn reduce_last(&mut self, a: Var, divide: bool) -> Var {
        let ta = &self.nodes[a.0].value;
        let shape = ta.shape();
        let last = *shape.last().expect("reduce_last needs rank >= 1");
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let inv = T::one() / T::of(last as f64);
        let out: Vec<T> = ta
            .data()
            .chunks(last)
            .map(|row| {
                let mut acc = T::zero();
                for &v in row {
                    acc += v;
                }
                if divide {
                    acc * inv
                } else {
                    acc
                }
            })
            .collect();
        let value = Tensor::from_vec(out_shape, out).expect("reduce_last shape");
        let needs = self.needs(a);
        let op = if divide { Op::MeanLast(a) } else { Op::SumLast(a) };
        self.push(value, needs, op)
    }

    /// Sum over the trailing axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, false)
    }

    /// Arithmetic mean over the trailing axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, true)
    }

    /// Row-wise softmax over the trailing axis, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let last = *ta.shape().last().expect("softmax needs rank >= 1");
        let mut out = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(last) {
            let mut m = row[0];
            for &v in &row[1..] {
                if v > m {
                    m = v;
                }
            }
            let start = out.len();
            let mut denom = T::zero();
            for &v in row {
                let e = (v - m).exp();
                denom += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / denom;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), out).expect("softmax keeps shape");
        let needs = self.needs(a);
        self.push(value, needs, Op::Softmax(a))
    }

    // ---- indexing / layout --------------------------------------------------

    /// Select rows of a rank-2 tensor. Duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> NemfResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(NemfError::InvalidShape {
                op: "gather_rows",
                shape: ta.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NemfError::InvalidShape {
                op: "gather_rows",
                shape: ta.shape().to_vec(),
                reason: format!("row index {bad} out of range"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&ta.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_vec(vec![idx.len(), cols], out).expect("gather shape");
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::GatherRows(a, idx)))
    }

    /// Concatenate rank-2 tensors along the given axis (0 or 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> NemfResult<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NemfError::InvalidShape {
                op: "concat",
                shape: vec![parts.len(), axis],
                reason: "needs at least one rank-2 input and axis in {0, 1}".into(),
            });
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                return Err(NemfError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let value = if axis == 0 {
            let cols = first[1];
            let rows: usize = parts
                .iter()
                .map(|&p| self.nodes[p.0].value.shape()[0])
                .sum();
            let mut out = Vec::with_capacity(rows * cols);
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::from_vec(vec![rows, cols], out).expect("concat shape")
        } else {
            let rows = first[0];
            let cols: usize = parts
                .iter()
                .map(|&p| self.nodes[p.0].value.shape()[1])
                .sum();
            let mut out = vec![T::zero(); rows * cols];
            let mut col0 = 0;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.shape()[1];
                for r in 0..rows {
                    out[r * cols + col0..r * cols + col0 + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                col0 += c;
            }
            Tensor::from_vec(vec![rows, cols], out).expect("concat shape")
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = if axis == 0 {
            Op::ConcatRows(parts.to_vec())
        } else {
            Op::ConcatCols(parts.to_vec())
        };
        Ok(self.push(value, needs, op))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> NemfResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 || start + len > ta.shape()[1] || len == 0 {
            return Err(NemfError::InvalidShape {
                op: "slice_cols",
                shape: ta.shape().to_vec(),
                reason: format!("columns {start}..{} out of range", start + len),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], out).expect("slice shape");
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::SliceCols(a, start, len)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> NemfResult<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Reshape(a)))
    }

    /// Repeat each row of a rank-2 tensor `times` consecutive times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> NemfResult<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 || times == 0 {
            return Err(NemfError::InvalidShape {
                op: "repeat_rows",
                shape: ta.shape().to_vec(),
                reason: format!("expected rank 2 and times > 0, got times={times}"),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::from_vec(vec![rows * times, cols], out).expect("repeat shape");
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::RepeatRows(a, times)))
    }

    // ---- composite layers ---------------------------------------------------

    /// Row-wise layer normalization of a rank-2 tensor with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> NemfResult<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(NemfError::InvalidShape {
                op: "layer_norm",
                shape: tx.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let cols = tx.shape()[1];
        for &(p, name) in &[(gamma, "gamma"), (beta, "beta")] {
            let s = self.nodes[p.0].value.shape();
            if s != [cols] {
                return Err(NemfError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layer_norm gamma"
                    } else {
                        "layer_norm beta"
                    },
                    lhs: tx.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let g = self.nodes[gamma.0].value.data().to_vec();
        let b = self.nodes[beta.0].value.data().to_vec();
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            let (mu, var) = row_moments(row);
            let inv = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mu) * inv * g[j] + b[j]);
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out).expect("layer_norm shape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, needs, Op::LayerNorm(x, gamma, beta)))
    }

    /// 3x3 convolution over one 2D factor of a rank-5 [d0,d1,d2,d3,cin]
    /// volume; kernel [3,3,cin,cout], bias [cout], zero padding.
    pub fn conv_plane(&mut self, x: Var, kernel: Var, bias: Var, plane: Plane) -> NemfResult<Var> {
        let tx = &self.nodes[x.0].value;
        let tk = &self.nodes[kernel.0].value;
        let tb = &self.nodes[bias.0].value;
        let sx = tx.shape();
        if sx.len() != 5 {
            return Err(NemfError::InvalidShape {
                op: "conv_plane",
                shape: sx.to_vec(),
                reason: "expected rank 5".into(),
            });
        }
        let cin = sx[4];
        let sk = tk.shape();
        if sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != cin {
            return Err(NemfError::ShapeMismatch {
                op: "conv_plane kernel",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let cout = sk[3];
        if tb.shape() != [cout] {
            return Err(NemfError::ShapeMismatch {
                op: "conv_plane bias",
                lhs: sk.to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let geom = plane_geom(sx, plane);
        let mut out = vec![T::zero(); geom.cells() * cout];
        kernels::conv_plane_fwd(tx.data(), tk.data(), tb.data(), geom, cin, cout, &mut out);
        let out_shape = vec![sx[0], sx[1], sx[2], sx[3], cout];
        let value = Tensor::from_vec(out_shape, out).expect("conv shape");
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, needs, Op::ConvPlane(x, kernel, bias, plane)))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// requires one; leaves created with `requires_grad` are the usual targets.
    pub fn backward(&self, root: Var) -> NemfResult<Gradients<T>> {
        let root_t = &self.nodes[root.0].value;
        if root_t.numel() != 1 {
            return Err(NemfError::NonScalarRoot {
                shape: root_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                let dst = existing.data_mut();
                for (d, &s) in dst.iter_mut().zip(contrib.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(
                    grads,
                    *b,
                    reduce_to(g, self.val(*b).shape()),
                );
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let neg = g.map(|v| -v);
                self.acc(grads, *b, reduce_to(&neg, self.val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let da = zip_broadcast(g, tb, |gv, bv| gv * bv);
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let full = zip_same(g, ta, |gv, av| gv * av);
                    self.acc(grads, *b, reduce_to(&full, tb.shape()));
                }
            }
            Op::RowScale(a, w) => {
                let (ta, tw) = (self.val(*a), self.val(*w));
                let cols = ta.shape()[1];
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(ta.numel());
                    for (r, chunk) in g.data().chunks(cols).enumerate() {
                        let s = tw.data()[r];
                        da.extend(chunk.iter().map(|&v| v * s));
                    }
                    self.acc(
                        grads,
                        *a,
                        Tensor::from_vec(ta.shape().to_vec(), da).expect("row_scale grad"),
                    );
                }
                if self.needs(*w) {
                    let dw: Vec<T> = g
                        .data()
                        .chunks(cols)
                        .zip(ta.data().chunks(cols))
                        .map(|(gr, ar)| {
                            let mut acc = T::zero();
                            for (&gv, &av) in gr.iter().zip(ar) {
                                acc += gv * av;
                            }
                            acc
                        })
                        .collect();
                    self.acc(
                        grads,
                        *w,
                        Tensor::from_vec(tw.shape().to_vec(), dw).expect("row_scale grad w"),
                    );
                }
            }
            Op::Neg(a) => self.acc(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt(g.data(), tb.data(), m, n, k, &mut da);
                    self.acc(
                        grads,
                        *a,
                        Tensor::from_vec(vec![m, k], da).expect("matmul grad a"),
                    );
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(ta.data(), g.data(), m, k, n, &mut db);
                    self.acc(
                        grads,
                        *b,
                        Tensor::from_vec(vec![k, n], db).expect("matmul grad b"),
                    );
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![T::zero(); r * c];
                kernels::transpose(g.data(), r, c, &mut da);
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(vec![c, r], da).expect("transpose grad"),
                );
            }
            Op::Relu(a) => {
                let da = zip_same(g, self.val(*a), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da = zip_same(g, y, |gv, yv| gv * yv * (T::one() - yv));
                self.acc(grads, *a, da);
            }
            Op::Sin(a) => {
                let da = zip_same(g, self.val(*a), |gv, xv| gv * xv.cos());
                self.acc(grads, *a, da);
            }
            Op::Cos(a) => {
                let da = zip_same(g, self.val(*a), |gv, xv| -gv * xv.sin());
                self.acc(grads, *a, da);
            }
            Op::Log(a) => {
                let eps = T::of(LOG_EPS);
                let da = zip_same(g, self.val(*a), |gv, xv| gv / xv.max(eps));
                self.acc(grads, *a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let floor = T::of(LOG_EPS);
                let half = T::of(0.5);
                let da = zip_same(g, y, |gv, yv| gv * half / yv.max(floor));
                self.acc(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let da = zip_same(g, self.val(*a), |gv, xv| {
                    if xv > lo && xv < hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *a, da);
            }
            Op::Sum(a) => {
                let ta = self.val(*a);
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(ta.shape(), gv));
            }
            Op::Mean(a) => {
                let ta = self.val(*a);
                let gv = g.item() / T::of(ta.numel() as f64);
                self.acc(grads, *a, Tensor::full(ta.shape(), gv));
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let ta = self.val(*a);
                let last = *ta.shape().last().unwrap();
                let scale = if matches!(self.nodes[i].op, Op::MeanLast(_)) {
                    T::one() / T::of(last as f64)
                } else {
                    T::one()
                };
                let mut da = Vec::with_capacity(ta.numel());
                for &gv in g.data() {
                    let v = gv * scale;
                    da.extend(std::iter::repeat(v).take(last));
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(ta.shape().to_vec(), da).expect("reduce grad"),
                );
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let last = *y.shape().last().unwrap();
                let mut da = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(last).zip(y.data().chunks(last)) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        da.push(yv * (gv - dot));
                    }
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(y.shape().to_vec(), da).expect("softmax grad"),
                );
            }
            Op::GatherRows(a, idx) => {
                let ta = self.val(*a);
                let cols = ta.shape()[1];
                let mut da = vec![T::zero(); ta.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let drow = &mut da[src * cols..(src + 1) * cols];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(ta.shape().to_vec(), da).expect("gather grad"),
                );
            }
            Op::ConcatRows(parts) => {
                let cols = g.shape()[1];
                let mut row0 = 0;
                for &p in parts {
                    let rows = self.val(p).shape()[0];
                    if self.needs(p) {
                        let slice = g.data()[row0 * cols..(row0 + rows) * cols].to_vec();
                        self.acc(
                            grads,
                            p,
                            Tensor::from_vec(vec![rows, cols], slice).expect("concat grad"),
                        );
                    }
                    row0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let cols = g.shape()[1];
                let mut col0 = 0;
                for &p in parts {
                    let c = self.val(p).shape()[1];
                    if self.needs(p) {
                        let mut slice = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            slice.extend_from_slice(
                                &g.data()[r * cols + col0..r * cols + col0 + c],
                            );
                        }
                        self.acc(
                            grads,
                            p,
                            Tensor::from_vec(vec![rows, c], slice).expect("concat grad"),
                        );
                    }
                    col0 += c;
                }
            }
            Op::SliceCols(a, start, len) => {
                let ta = self.val(*a);
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(ta.shape().to_vec(), da).expect("slice grad"),
                );
            }
            Op::Reshape(a) => {
                let ta = self.val(*a);
                self.acc(
                    grads,
                    *a,
                    g.reshaped(ta.shape()).expect("reshape grad"),
                );
            }
            Op::RepeatRows(a, times) => {
                let ta = self.val(*a);
                let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let drow = &mut da[r * cols..(r + 1) * cols];
                    for t in 0..*times {
                        let grow = &g.data()[(r * times + t) * cols..(r * times + t + 1) * cols];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                self.acc(
                    grads,
                    *a,
                    Tensor::from_vec(ta.shape().to_vec(), da).expect("repeat grad"),
                );
            }
            Op::LayerNorm(x, gamma, beta) => {
                let tx = self.val(*x);
                let tg = self.val(*gamma);
                let cols = tx.shape()[1];
                let eps = T::of(LAYER_NORM_EPS);
                let inv_cols = T::one() / T::of(cols as f64);
                let mut dx = Vec::with_capacity(tx.numel());
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                for (xr, gr) in tx.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let (mu, var) = row_moments(xr);
                    let inv = T::one() / (var + eps).sqrt();
                    let mut mean_gy = T::zero();
                    let mut mean_gyx = T::zero();
                    for (j, (&xv, &gv)) in xr.iter().zip(gr).enumerate() {
                        let xhat = (xv - mu) * inv;
                        let gy = gv * tg.data()[j];
                        mean_gy += gy;
                        mean_gyx += gy * xhat;
                        dgamma[j] += gv * xhat;
                        dbeta[j] += gv;
                    }
                    mean_gy *= inv_cols;
                    mean_gyx *= inv_cols;
                    for (j, (&xv, &gv)) in xr.iter().zip(gr).enumerate() {
                        let xhat = (xv - mu) * inv;
                        let gy = gv * tg.data()[j];
                        dx.push((gy - mean_gy - xhat * mean_gyx) * inv);
                    }
                }
                self.acc(
                    grads,
                    *x,
                    Tensor::from_vec(tx.shape().to_vec(), dx).expect("ln grad x"),
                );
                self.acc(
                    grads,
                    *gamma,
                    Tensor::from_vec(vec![cols], dgamma).expect("ln grad gamma"),
                );
                self.acc(
                    grads,
                    *beta,
                    Tensor::from_vec(vec![cols], dbeta).expect("ln grad beta"),
                );
            }
            Op::ConvPlane(x, kernel, bias, plane) => {
                let tx = self.val(*x);
                let tk = self.val(*kernel);
                let sx = tx.shape();
                let cin = sx[4];
                let cout = tk.shape()[3];
                let geom = plane_geom(sx, *plane);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); geom.cells() * cin];
                    kernels::conv_plane_grad_input(g.data(), tk.data(), geom, cin, cout, &mut dx);
                    self.acc(
                        grads,
                        *x,
                        Tensor::from_vec(sx.to_vec(), dx).expect("conv grad x"),
                    );
                }
                if self.needs(*kernel) || self.needs(*bias) {
                    let mut dk = vec![T::zero(); 9 * cin * cout];
                    let mut db = vec![T::zero(); cout];
                    kernels::conv_plane_grad_params(
                        tx.data(),
                        g.data(),
                        geom,
                        cin,
                        cout,
                        &mut dk,
                        &mut db,
                    );
                    self.acc(
                        grads,
                        *kernel,
                        Tensor::from_vec(vec![3, 3, cin, cout], dk).expect("conv grad k"),
                    );
                    self.acc(
                        grads,
                        *bias,
                        Tensor::from_vec(vec![cout], db).expect("conv grad b"),
                    );
                }
            }
        }
    }
}

fn plane_geom(shape: &[usize], plane: Plane) -> PlaneGeom {
    PlaneGeom {
        dims: [shape[0], shape[1], shape[2], shape[3]],
        axes: match plane {
            Plane::Source => (0, 1),
            Plane::Target => (2, 3),
        },
    }
}

fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let inv = T::one() / T::of(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu += v;
    }
    mu *= inv;
    let mut var = T::zero();
    for &v in row {
        let d = v - mu;
        var += d * d;
    }
    var *= inv;
    (mu, var)
}

fn zip_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.numel(), b.numel());
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), out).expect("zip_same shape")
}

/// a has the full (output) shape; b may broadcast against it.
fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let nb = b.numel();
    let out: Vec<T> = if nb == a.numel() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % nb]))
            .collect()
    };
    Tensor::from_vec(a.shape().to_vec(), out).expect("zip_broadcast shape")
}

/// Sum a full-shaped gradient down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let target = numel(shape);
    if target == g.numel() {
        return g.reshaped(shape).expect("reduce_to same size");
    }
    let mut out = vec![T::zero(); target];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % target] += v;
    }
    Tensor::from_vec(shape.to_vec(), out).expect("reduce_to shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(shape.to_vec(), data).unwrap().with_grad())
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![-3.0, 3.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![2.5, 2.5, 2.5]).unwrap());
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_dot_gradient_at_zero_weights() {
        // d/dw sigmoid(w . x) at w = 0 is 0.25 * x
        let x_data = vec![0.7, -1.3, 2.0];
        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, &[1, 3], vec![0.0; 3]);
        let x = tape.constant(Tensor::from_vec(vec![3, 1], x_data.clone()).unwrap());
        let z = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(z);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let gw = grads.get(w).unwrap();
        for (g, xv) in gw.data().iter().zip(&x_data) {
            assert!((g - 0.25 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.relu(x);
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, NemfError::NonScalarRoot { .. }));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn trailing_broadcast_add_and_rejection() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, &[2, 3], vec![0.0; 6]);
        let bias = leaf64(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[2.0, 2.0, 2.0]);

        // leading-dimension broadcast is rejected
        let lead = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, lead).is_err());
    }

    #[test]
    fn constant_only_graph_records_no_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.relu(a);
        let s = tape.sum(b);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[2], vec![1.5, -0.5]);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1.get(x).unwrap().data(), g2.get(x).unwrap().data());
        assert_eq!(g1.get(x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = tape
            .gather_rows(x, Arc::new(vec![1, 1, 2]))
            .unwrap();
        assert_eq!(tape.value(picked).data(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.sum(picked);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
