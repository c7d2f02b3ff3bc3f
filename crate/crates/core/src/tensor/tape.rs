//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it needs
//! for the backward sweep. [`Var`] is a plain index into the tape, so graphs are
//! cheap to build per sample and are dropped wholesale when the tape goes away.

use std::fmt;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::{check_shape, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a fused operation defined outside the tape.
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &str;

    /// Vector-Jacobian product: one gradient per input, in input order.
    fn backward(&self, out_grad: &[f64], inputs: &[&[f64]], output: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Sum {
        x: Var,
        map: Vec<usize>,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        in_block: usize,
        offset: usize,
        out_block: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        row_len: usize,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
        row_len: usize,
    },
    MulRows {
        x: Var,
        w: Var,
        row_len: usize,
    },
    AddRows {
        x: Var,
        w: Var,
        row_len: usize,
    },
    RowNorm {
        x: Var,
        row_len: usize,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norm: f64,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::Conv3d { .. } => "conv3d",
            Op::Sum { .. } => "sum",
            Op::Max { .. } => "max",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::MulRows { .. } => "mul_rows",
            Op::AddRows { .. } => "add_rows",
            Op::RowNorm { .. } => "row_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is unreachable
    /// from the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A computation graph recorded in execution order.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

/// Broadcast rule: the smaller operand, with leading unit dims removed, must be a
/// trailing suffix of the larger one.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb <= na && a.ends_with(strip_leading_ones(b)) {
        Some(a.to_vec())
    } else if na <= nb && b.ends_with(strip_leading_ones(a)) {
        Some(b.to_vec())
    } else {
        None
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..shape.len()).map(|d| !axes.contains(&d)).collect();
    let mut out_shape: Vec<usize> = shape
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&d, _)| d)
        .collect();
    // output strides for kept dims, zero for reduced
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if keep[d] {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    let n = numel(shape);
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; shape.len()];
    for m in map.iter_mut() {
        *m = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    (out_shape, map)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no node requires gradients and no
    /// backward state is kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }

    /// Copies the value of `v` out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Places a tensor on the tape as a leaf, honouring its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    // ---- elementwise ----

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| shape_err(name, sa, sb))?;
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let n = numel(&shape);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let value: Vec<f64> = if na == n && nb == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % na], vb[i % nb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
        };
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::AddScalar(x))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut value,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], value, rg, Op::Transpose(x)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(x);
        let mut value = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(v[base + k * inner]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (v[base + k * inner] - mx).exp();
                    value[base + k * inner] = e;
                    z += e;
                }
                for k in 0..len {
                    value[base + k * inner] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(s, value, rg, Op::Softmax { x, len, inner }))
    }

    /// Single-sample 3D cross-correlation. `x` is `Cin x T x H x W`, `w` is
    /// `Cout x Cin x kT x kH x kW`, `bias` is `Cout`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[1] {
            return Err(shape_err("conv3d", &sx, &sw));
        }
        let geom = ConvGeom::new(
            sx[0],
            [sx[1], sx[2], sx[3]],
            sw[0],
            [sw[2], sw[3], sw[4]],
            stride,
            pad,
        )
        .ok_or_else(|| {
            Error::Dimension(format!(
                "conv3d: kernel {:?} with stride {stride:?} and padding {pad:?} does not fit input {sx:?}",
                &sw[2..]
            ))
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err("conv3d bias", self.shape(b), &[geom.cout]));
            }
        }
        let cols = im2col(self.value(x), &geom);
        let npos = geom.out_positions();
        let mut value = vec![0.0; geom.cout * npos];
        if let Some(b) = bias {
            for (co, chunk) in value.chunks_mut(npos).enumerate() {
                chunk.fill(self.value(b)[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            geom.cout,
            geom.col_rows(),
            npos,
            self.value(w),
            false,
            &cols,
            false,
            beta,
            &mut value,
        );
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let keep_cols = rg && self.nodes[w.0].requires_grad;
        let shape = vec![geom.cout, geom.output[0], geom.output[1], geom.output[2]];
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Conv3d {
                x,
                w,
                bias,
                geom,
                cols: keep_cols.then_some(cols),
            },
        ))
    }

    // ---- reductions ----

    /// Reduces over `axes`, dropping them from the shape. An empty axis set is a no-op.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Ok(x);
        }
        let s = self.shape(x).to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= s.len()) {
            return Err(Error::Dimension(format!(
                "reduce axis {bad} out of range for shape {s:?}"
            )));
        }
        let (out_shape, map) = reduce_map(&s, axes);
        let n_out = numel(&out_shape);
        let count = numel(&s) / n_out;
        let v = self.value(x);
        let rg = self.rg(&[x]);
        match kind {
            Reduce::Sum | Reduce::Mean => {
                let mut value = vec![0.0; n_out];
                for (i, &m) in map.iter().enumerate() {
                    value[m] += v[i];
                }
                let out = self.push(out_shape, value, rg, Op::Sum { x, map });
                Ok(if kind == Reduce::Mean {
                    self.scale(out, 1.0 / count as f64)
                } else {
                    out
                })
            }
            Reduce::Max => {
                let mut value = vec![f64::NEG_INFINITY; n_out];
                let mut argmax = vec![usize::MAX; n_out];
                for (i, &m) in map.iter().enumerate() {
                    if argmax[m] == usize::MAX || v[i] > value[m] {
                        value[m] = v[i];
                        argmax[m] = i;
                    }
                }
                Ok(self.push(out_shape, value, rg, Op::Max { x, argmax }))
            }
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduce::Sum, x, &axes)
            .expect("all axes are valid")
    }

    /// Mean over every axis but the first: `C x T x H x W -> C`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "avg_pool_global expects a channel-first map, got {:?}",
                self.shape(x)
            )));
        }
        let axes: Vec<usize> = (1..rank).collect();
        self.reduce(Reduce::Mean, x, &axes)
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != numel(self.shape(x)) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut blocks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
            blocks.push(s[axis] * inner);
        }
        let row: usize = blocks.iter().sum();
        let mut value = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                value.extend_from_slice(&self.value(v)[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) along axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_block = s[axis] * inner;
        let out_block = len * inner;
        let offset = start * inner;
        let v = self.value(x);
        let mut value = Vec::with_capacity(outer * out_block);
        for o in 0..outer {
            value.extend_from_slice(&v[o * in_block + offset..][..out_block]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Narrow {
                x,
                outer,
                in_block,
                offset,
                out_block,
            },
        ))
    }

    /// Selects rows (slices along axis 0) in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for shape {s:?}"
            )));
        }
        let row_len = numel(&s[1..]);
        let v = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            value.extend_from_slice(&v[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row_len,
            },
        ))
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.len() != s[0] {
            return Err(Error::Dimension(format!(
                "scatter_rows: {} indices for {} rows",
                idx.len(),
                s[0]
            )));
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!(
                    "scatter_rows: index {i} out of range or repeated"
                )));
            }
        }
        let row_len = numel(&s[1..]);
        let v = self.value(x);
        let mut value = vec![0.0; rows * row_len];
        for (k, &i) in idx.iter().enumerate() {
            value[i * row_len..(i + 1) * row_len]
                .copy_from_slice(&v[k * row_len..(k + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = rows;
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
                row_len,
            },
        ))
    }

    fn row_check(&self, op: &str, x: Var, w: Var) -> Result<usize> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if numel(sw) != sx[0] {
            return Err(shape_err(op, sx, sw));
        }
        Ok(numel(&sx[1..]))
    }

    /// Scales row `r` (slice `r` along axis 0) of `x` by `w[r]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let row_len = self.row_check("mul_rows", x, w)?;
        let (vx, vw) = (self.value(x), self.value(w));
        let value = vx
            .chunks(row_len)
            .zip(vw)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, w]);
        Ok(self.push(shape, value, rg, Op::MulRows { x, w, row_len }))
    }

    /// Adds `w[r]` to every entry of row `r` of `x`.
    pub fn add_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let row_len = self.row_check("add_rows", x, w)?;
        let (vx, vw) = (self.value(x), self.value(w));
        let value = vx
            .chunks(row_len)
            .zip(vw)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v + s))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, w]);
        Ok(self.push(shape, value, rg, Op::AddRows { x, w, row_len }))
    }

    /// Normalizes every row (slice along axis 0) to zero mean and unit variance.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!(
                "row_norm expects rank >= 2, got shape {s:?}"
            )));
        }
        let row_len = numel(&s[1..]);
        let v = self.value(x);
        let mut value = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(s[0]);
        for row in v.chunks(row_len) {
            let mean = row.iter().sum::<f64>() / row_len as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / row_len as f64;
            let is = 1.0 / (var + eps).sqrt();
            value.extend(row.iter().map(|&a| (a - mean) * is));
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            s,
            value,
            rg,
            Op::RowNorm {
                x,
                row_len,
                inv_std,
            },
        ))
    }

    /// Scales the whole tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let value = v.iter().map(|a| a / norm).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::L2Normalize { x, norm })
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<f64>,
        op: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "{}: output shape {shape:?} given {} values",
                op.name(),
                value.len()
            )));
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            shape.to_vec(),
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds a contribution into the gradient slot of `v` if it needs one.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.len(), vb.len());
                match kind {
                    Binary::Add => {
                        self.acc(grads, *a, |ga| {
                            g.iter().enumerate().for_each(|(k, &d)| ga[k % na] += d)
                        });
                        self.acc(grads, *b, |gb| {
                            g.iter().enumerate().for_each(|(k, &d)| gb[k % nb] += d)
                        });
                    }
                    Binary::Sub => {
                        self.acc(grads, *a, |ga| {
                            g.iter().enumerate().for_each(|(k, &d)| ga[k % na] += d)
                        });
                        self.acc(grads, *b, |gb| {
                            g.iter().enumerate().for_each(|(k, &d)| gb[k % nb] -= d)
                        });
                    }
                    Binary::Mul => {
                        self.acc(grads, *a, |ga| {
                            g.iter()
                                .enumerate()
                                .for_each(|(k, &d)| ga[k % na] += d * vb[k % nb])
                        });
                        self.acc(grads, *b, |gb| {
                            g.iter()
                                .enumerate()
                                .for_each(|(k, &d)| gb[k % nb] += d * va[k % na])
                        });
                    }
                    Binary::Div => {
                        self.acc(grads, *a, |ga| {
                            g.iter()
                                .enumerate()
                                .for_each(|(k, &d)| ga[k % na] += d / vb[k % nb])
                        });
                        self.acc(grads, *b, |gb| {
                            g.iter().enumerate().for_each(|(k, &d)| {
                                let y = vb[k % nb];
                                gb[k % nb] -= d * va[k % na] / (y * y)
                            })
                        });
                    }
                }
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k]
                            * match kind {
                                Unary::Relu => {
                                    if vx[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => out[k] * (1.0 - out[k]),
                                Unary::Exp => out[k],
                                Unary::Log => 1.0 / vx[k],
                            };
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += c * d)
                });
            }
            Op::AddScalar(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                // dA = G B^T, dB = A^T G
                self.acc(grads, *a, |ga| gemm(m, n, k, g, false, vb, true, 1.0, ga));
                self.acc(grads, *b, |gb| gemm(k, m, n, va, true, g, false, 1.0, gb));
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                self.acc(grads, *x, |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Softmax { x, len, inner } => {
                let (len, inner) = (*len, *inner);
                self.acc(grads, *x, |gx| {
                    let outer = out.len() / (len * inner);
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * len * inner + q;
                            let dot: f64 = (0..len)
                                .map(|k| g[base + k * inner] * out[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let p = base + k * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv3d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let npos = geom.out_positions();
                let krows = geom.col_rows();
                if let Some(b) = bias {
                    self.acc(grads, *b, |gb| {
                        for (co, chunk) in g.chunks(npos).enumerate() {
                            gb[co] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                if let Some(cols) = cols {
                    self.acc(grads, *w, |gw| {
                        gemm(geom.cout, npos, krows, g, false, cols, true, 1.0, gw)
                    });
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; krows * npos];
                    gemm(
                        krows,
                        geom.cout,
                        npos,
                        self.value(*w),
                        true,
                        g,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, geom);
                    self.acc(grads, *x, |gx| add_into(gx, &dx));
                }
            }
            Op::Sum { x, map } => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(map).for_each(|(a, &m)| *a += g[m])
                });
            }
            Op::Max { x, argmax } => {
                self.acc(grads, *x, |gx| {
                    argmax.iter().zip(g).for_each(|(&i, &d)| gx[i] += d)
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let row: usize = blocks.iter().sum();
                let mut off = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    self.acc(grads, v, |gv| {
                        for o in 0..*outer {
                            add_into(
                                &mut gv[o * blk..(o + 1) * blk],
                                &g[o * row + off..o * row + off + blk],
                            );
                        }
                    });
                    off += blk;
                }
            }
            Op::Narrow {
                x,
                outer,
                in_block,
                offset,
                out_block,
            } => {
                self.acc(grads, *x, |gx| {
                    for o in 0..*outer {
                        add_into(
                            &mut gx[o * in_block + offset..][..*out_block],
                            &g[o * out_block..(o + 1) * out_block],
                        );
                    }
                });
            }
            Op::GatherRows { x, idx, row_len } => {
                self.acc(grads, *x, |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[r * row_len..(r + 1) * row_len],
                            &g[k * row_len..(k + 1) * row_len],
                        );
                    }
                });
            }
            Op::ScatterRows { x, idx, row_len } => {
                self.acc(grads, *x, |gx| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[k * row_len..(k + 1) * row_len],
                            &g[r * row_len..(r + 1) * row_len],
                        );
                    }
                });
            }
            Op::MulRows { x, w, row_len } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |gx| {
                    for (r, &s) in vw.iter().enumerate() {
                        let sl = r * row_len..(r + 1) * row_len;
                        gx[sl.clone()]
                            .iter_mut()
                            .zip(&g[sl])
                            .for_each(|(a, &d)| *a += d * s);
                    }
                });
                self.acc(grads, *w, |gw| {
                    for (r, gr) in gw.iter_mut().enumerate() {
                        let sl = r * row_len..(r + 1) * row_len;
                        *gr += g[sl.clone()]
                            .iter()
                            .zip(&vx[sl])
                            .map(|(d, v)| d * v)
                            .sum::<f64>();
                    }
                });
            }
            Op::AddRows { x, w, row_len } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *w, |gw| {
                    for (r, gr) in gw.iter_mut().enumerate() {
                        *gr += g[r * row_len..(r + 1) * row_len].iter().sum::<f64>();
                    }
                });
            }
            Op::RowNorm {
                x,
                row_len,
                inv_std,
            } => {
                let n = *row_len as f64;
                self.acc(grads, *x, |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let sl = r * row_len..(r + 1) * row_len;
                        let (gr, yr) = (&g[sl.clone()], &out[sl.clone()]);
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dst, &d), &y) in gx[sl].iter_mut().zip(gr).zip(yr) {
                            *dst += is / n * (n * d - sg - y * sgy);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norm } => {
                let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                self.acc(grads, *x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += (g[k] - out[k] * dot) / norm;
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(g, &vals, out);
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.acc(grads, v, |dst| add_into(dst, &gv));
                }
            }
        }
    }
}
