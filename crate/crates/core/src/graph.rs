//! Reverse-mode automatic differentiation over a fixed operation vocabulary.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, records what its backward rule needs, and returns a [`Var`]
//! handle. Since nodes are only ever appended, arena order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::rng;
use crate::ssm::kernels::{self as ssmk, Dims};
use crate::tensor::{broadcast_shapes, BroadcastMap, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh approximation `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`, with
    /// the exact derivative of that approximation.
    Gelu,
    Silu,
    Softplus,
    Exp,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Exp => x.exp(),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Flip(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L2NormLast(Var),
    Dropout { x: Var, mask: Vec<f64> },
    ZohDecay { delta: Var, a: Var },
    ZohInput { delta: Var, a: Var, b: Var },
    Scan { abar: Var, bbar: Var, c: Var, x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Act(_, Activation::Gelu) => "gelu",
            Op::Act(_, Activation::Silu) => "silu",
            Op::Act(_, Activation::Softplus) => "softplus",
            Op::Act(_, Activation::Exp) => "exp",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "logsoftmax",
            Op::Flip(_) => "flip",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::L2NormLast(_) => "l2norm",
            Op::Dropout { .. } => "dropout",
            Op::ZohDecay { .. } => "zoh_decay",
            Op::ZohInput { .. } => "zoh_input",
            Op::Scan { .. } => "scan",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph recorded during a forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, `None` if the node does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros when it was never reached.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
    }

    /// Number of gradient buffers allocated during the sweep.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// da[m,k] += dy[m,p] · b[k,p]ᵀ
fn matmul_grad_a(dy: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &dy[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            da[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// db[k,p] += a[m,k]ᵀ · dy[m,p]
fn matmul_grad_b(a: &[f64], dy: &[f64], db: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &dy[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[kk * p..(kk + 1) * p];
            for (d, &g) in drow.iter_mut().zip(grow) {
                *d += av * g;
            }
        }
    }
}

struct MatMulPlan {
    m: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
    // (a offset, b offset) per output batch entry, in units of matrices
    pairs: Vec<(usize, usize)>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    if bb.is_empty() {
        // weight-style right operand: fold all of a's batch into rows
        let rows = ab.iter().product::<usize>() * m;
        let mut out_shape = ab.to_vec();
        out_shape.extend([m, p]);
        return Ok(MatMulPlan {
            m: rows,
            k,
            p,
            out_shape,
            pairs: vec![(0, 0)],
        });
    }
    let batch = broadcast_shapes(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let nb: usize = batch.iter().product();
    let ma = BroadcastMap::new(ab, &batch);
    let mb = BroadcastMap::new(bb, &batch);
    let pairs = (0..nb).map(|i| (ma.index(i), mb.index(i))).collect();
    let mut out_shape = batch;
    out_shape.extend([m, p]);
    Ok(MatMulPlan {
        m,
        k,
        p,
        out_shape,
        pairs,
    })
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape.last().copied().ok_or_else(|| Error::InvalidShape {
        shape: shape.to_vec(),
        reason: format!("{op} needs at least one axis"),
    })
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op}: axis {axis} out of range"),
        });
    }
    Ok(())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

// outer = product of axes before `axis`, inner = product after it
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
        }
    }

    /// A graph in training mode; dropout is only active in this mode.
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., M, K] · [.., K, P]`; leading batch axes
    /// broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (m, k, p) = (plan.m, plan.k, plan.p);
        let mut out = vec![0.0; plan.pairs.len() * m * p];
        for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
            matmul_kernel(
                &av[ia * m * k..(ia + 1) * m * k],
                &bv[ib * k * p..(ib + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let value = Tensor::from_raw(plan.out_shape, out);
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let ma = BroadcastMap::new(sa, &out_shape);
        let mb = BroadcastMap::new(sb, &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data = (0..n).map(|i| f(av[ma.index(i)], bv[mb.index(i)])).collect();
        Ok(Tensor::from_raw(out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(v, Op::Act(x, kind), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    // ---- normalisation -------------------------------------------------

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x), "layernorm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bb[j];
            }
        }
        let value = Tensor::from_raw(self.shape(x).to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    fn softmax_rows(&self, x: Var, log: bool) -> Result<Tensor> {
        let d = last_dim(self.shape(x), "softmax")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                for (o, v) in o.iter_mut().zip(row) {
                    *o = v - lse;
                }
            } else {
                for (o, v) in o.iter_mut().zip(row) {
                    *o = (v - max).exp() / sum;
                }
            }
        }
        Ok(Tensor::from_raw(self.shape(x).to_vec(), out))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.softmax_rows(x, false)?;
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.softmax_rows(x, true)?;
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    // ---- structural ----------------------------------------------------

    /// Reverses the last axis.
    pub fn flip_last(&mut self, x: Var) -> Result<Var> {
        let d = last_dim(self.shape(x), "flip")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            row.reverse();
        }
        let v = Tensor::from_raw(self.shape(x).to_vec(), data);
        self.push(v, Op::Flip(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_raw(shape, data);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis, "slice")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_raw(out_shape, data);
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (s, data) = permute_data(self.value(x).data(), shape, perm);
        let v = Tensor::from_raw(s, data);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape, "sum_last")?;
        let data = self.value(x).data().chunks(d).map(|r| r.iter().sum()).collect();
        let v = Tensor::from_raw(shape[..shape.len() - 1].to_vec(), data);
        self.push(v, Op::SumLast(x), &[x])
    }

    /// Euclidean norm over the last axis.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape, "l2norm")?;
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::from_raw(shape[..shape.len() - 1].to_vec(), data);
        self.push(v, Op::L2NormLast(x), &[x])
    }

    /// Inverted dropout. The mask is a pure function of `(seed, element
    /// index)`, so a forward pass replays exactly. Identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n as u64)
            .map(|i| if rng::counter_uniform(seed, i) < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::from_raw(self.shape(x).to_vec(), data);
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    // ---- selective-SSM kernels -----------------------------------------

    /// `exp(Δ·A)` per `(b, l, d, n)`.
    pub fn zoh_decay(&mut self, delta: Var, a: Var) -> Result<Var> {
        let v = ssmk::zoh_decay(self.value(delta), self.value(a))?;
        self.push(v, Op::ZohDecay { delta, a }, &[delta, a])
    }

    /// `(exp(Δ·A) − 1)/(Δ·A) · Δ · B_sel` per `(b, l, d, n)`.
    pub fn zoh_input(&mut self, delta: Var, a: Var, b_sel: Var) -> Result<Var> {
        let v = ssmk::zoh_input(self.value(delta), self.value(a), self.value(b_sel))?;
        self.push(v, Op::ZohInput { delta, a, b: b_sel }, &[delta, a, b_sel])
    }

    /// The selective scan `y = SSM(Ā, B̄, C)(x)`. `chunk` selects the chunked
    /// forward kernel; the backward sweep is the same either way.
    pub fn selective_scan(&mut self, abar: Var, bbar: Var, c: Var, x: Var, chunk: Option<usize>) -> Result<Var> {
        let (av, bv, cv, xv) = (self.value(abar), self.value(bbar), self.value(c), self.value(x));
        let dims = ssmk::scan_dims(av, bv, cv, xv)?;
        let y = match chunk {
            Some(ch) if ch == 0 => return Err(Error::Domain("chunk size must be at least 1".into())),
            Some(ch) if ch < dims.l => ssmk::chunked_raw(dims, av.data(), bv.data(), cv.data(), xv.data(), ch),
            _ => ssmk::sequential_raw(dims, av.data(), bv.data(), cv.data(), xv.data(), None),
        };
        self.push(y, Op::Scan { abar, bbar, c, x }, &[abar, bbar, c, x])
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss with upstream gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse sweep with an explicit upstream gradient `seed` on the loss.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), seed));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.vjp(id, g.data())? {
                if !gi.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        op: node.op.name(),
                        node: id,
                    });
                }
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&gi) {
                            *a += b;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::from_raw(self.shape(input).to_vec(), gi));
                    }
                }
            }
            // keep the gradient of intermediate nodes available to callers
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn reduce_broadcast(&self, input: Var, out_shape: &[usize], g: &[f64], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let s = self.shape(input);
        let map = BroadcastMap::new(s, out_shape);
        let mut out = vec![0.0; self.value(input).numel()];
        for (i, &gv) in g.iter().enumerate() {
            out[map.index(i)] += f(i, gv);
        }
        out
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let plan = plan_matmul(self.shape(*a), self.shape(*b))?;
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let mut ga = vec![0.0; self.value(*a).numel()];
                let mut gb = vec![0.0; self.value(*b).numel()];
                for (i, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    let gy = &g[i * m * p..(i + 1) * m * p];
                    if self.requires_grad(*a) {
                        matmul_grad_a(gy, &val(*b)[ib * k * p..(ib + 1) * k * p], &mut ga[ia * m * k..(ia + 1) * m * k], m, k, p);
                    }
                    if self.requires_grad(*b) {
                        matmul_grad_b(&val(*a)[ia * m * k..(ia + 1) * m * k], gy, &mut gb[ib * k * p..(ib + 1) * k * p], m, k, p);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![
                (*a, self.reduce_broadcast(*a, out_shape, g, |_, v| v)),
                (*b, self.reduce_broadcast(*b, out_shape, g, |_, v| v)),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.reduce_broadcast(*a, out_shape, g, |_, v| v)),
                (*b, self.reduce_broadcast(*b, out_shape, g, |_, v| -v)),
            ],
            Op::Mul(a, b) | Op::Div(a, b) => {
                let ma = BroadcastMap::new(self.shape(*a), out_shape);
                let mb = BroadcastMap::new(self.shape(*b), out_shape);
                let (av, bv) = (val(*a), val(*b));
                let is_div = matches!(node.op, Op::Div(..));
                let ga = self.reduce_broadcast(*a, out_shape, g, |i, v| {
                    let bx = bv[mb.index(i)];
                    if is_div { v / bx } else { v * bx }
                });
                let gb = self.reduce_broadcast(*b, out_shape, g, |i, v| {
                    let ax = av[ma.index(i)];
                    if is_div {
                        let bx = bv[mb.index(i)];
                        -v * ax / (bx * bx)
                    } else {
                        v * ax
                    }
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::Offset(x) => vec![(*x, g.to_vec())],
            Op::Act(x, kind) => {
                let xv = val(*x);
                let gi = g
                    .iter()
                    .zip(xv)
                    .zip(y)
                    .map(|((gv, &xe), &ye)| gv * kind.derivative(xe, ye))
                    .collect();
                vec![(*x, gi)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let gv = val(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..g.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * xh[j];
                        gbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gbias)]
            }
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let d = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..d {
                        o[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Flip(x) => {
                let d = *out_shape.last().unwrap();
                let mut gx = g.to_vec();
                for row in gx.chunks_mut(d) {
                    row.reverse();
                }
                vec![(*x, gx)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut pos = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    let mut gi = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = o * total * inner + pos * inner;
                        gi.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    pos += ext;
                    res.push((v, gi));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, ext, inner) = split_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = permute_data(g, out_shape, &inv);
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::SumLast(x) => {
                let d = *self.shape(*x).last().unwrap();
                vec![(*x, g.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect())]
            }
            Op::L2NormLast(x) => {
                let d = *self.shape(*x).last().unwrap();
                let xv = val(*x);
                let mut gx = vec![0.0; xv.len()];
                for (r, (&gv, &norm)) in g.iter().zip(y).enumerate() {
                    if norm > 0.0 {
                        for j in 0..d {
                            gx[r * d + j] = gv * xv[r * d + j] / norm;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect())],
            Op::ZohDecay { delta, a } => {
                let dims = ssmk::zoh_dims(self.value(*delta), self.value(*a))?;
                let (gd, ga) = ssmk::zoh_decay_backward(dims, val(*delta), val(*a), y, g);
                vec![(*delta, gd), (*a, ga)]
            }
            Op::ZohInput { delta, a, b } => {
                let dims = ssmk::zoh_dims(self.value(*delta), self.value(*a))?;
                let (gd, ga, gb) = ssmk::zoh_input_backward(dims, val(*delta), val(*a), val(*b), g);
                vec![(*delta, gd), (*a, ga), (*b, gb)]
            }
            Op::Scan { abar, bbar, c, x } => {
                let dims: Dims = ssmk::scan_dims(self.value(*abar), self.value(*bbar), self.value(*c), self.value(*x))?;
                let sg = ssmk::scan_backward(dims, val(*abar), val(*bbar), val(*c), val(*x), g);
                vec![(*abar, sg.abar), (*bbar, sg.bbar), (*c, sg.c), (*x, sg.x)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        // element-by-element: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        let oracle = [1.0 * 5.0 + 2.0 * 7.0, 1.0 * 6.0 + 2.0 * 8.0, 3.0 * 5.0 + 4.0 * 7.0, 3.0 * 6.0 + 4.0 * 8.0];
        assert_eq!(g.value(ab).data(), &oracle);
        assert_eq!(oracle, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(vec![3, 2, 2], |i| (i % 5) as f64));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2, 2]);
        // check one block by hand: batch (1, 2)
        let av = g.value(a).data();
        let bv = g.value(b).data();
        let cv = g.value(c).data();
        let ao = (3 + 2) * 4;
        let bo = 2 * 4;
        for i in 0..2 {
            for j in 0..2 {
                let e: f64 = (0..2).map(|k| av[ao + i * 2 + k] * bv[bo + k * 2 + j]).sum();
                assert_eq!(cv[ao + i * 2 + j], e);
            }
        }
    }

    #[test]
    fn activation_fixed_points() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.silu(z).unwrap();
        let sp = g.softplus(z).unwrap();
        let ge = g.gelu(z).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        assert!((g.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.value(ge).item(), 0.0);
        let big = g.constant(Tensor::scalar(800.0));
        let spb = g.softplus(big).unwrap();
        assert_eq!(g.value(spb).item(), 800.0);
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(vec![3], 1.0));
        let zero = g.constant(Tensor::zeros(vec![3]));
        let bias = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let c = g.constant(Tensor::full(vec![2, 3], 4.0));
        let y = g.layernorm(c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let yb = g.layernorm(c, one, bias, 1e-5).unwrap();
        assert_eq!(g.value(yb).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        let one2 = g.constant(Tensor::full(vec![2], 1.0));
        let zero2 = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y2 = g.layernorm(x, one2, zero2, 1e-300).unwrap();
        let v = g.value(y2).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_family() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(vec![3], 2.5));
        let s = g.softmax(c).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.constant(Tensor::zeros(vec![2]));
        let ls = g.log_softmax(z).unwrap();
        for &v in g.value(ls).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let x = g.constant(t(&[4], &[0.3, 2.0, -1.0, 1.9]));
        let sx = g.softmax(x).unwrap();
        let p = g.value(sx).data();
        let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 1);
    }

    #[test]
    fn structural_ops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![2, 1, 3], |i| i as f64));
        let f = g.flip_last(x).unwrap();
        assert_eq!(g.value(f).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let ff = g.flip_last(f).unwrap();
        assert_eq!(g.value(ff), g.value(x));
        let c = g.concat(&[f, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(g.value(c).data(), &[2.0, 1.0, 0.0, 0.0, 1.0, 2.0, 5.0, 4.0, 3.0, 3.0, 4.0, 5.0]);
        let s = g.slice(c, 1, 1, 1).unwrap();
        assert_eq!(g.value(s), g.value(x));
        let v = g.constant(t(&[2], &[3.0, 4.0]));
        let n = g.l2norm(v).unwrap();
        assert_eq!(g.value(n).item(), 5.0);
        let bad = g.constant(Tensor::zeros(vec![2, 2, 2]));
        assert!(g.concat(&[x, bad], 1).is_err());
    }

    #[test]
    fn dropout_is_replayable_and_inactive_in_eval() {
        let x = Tensor::full(vec![64], 1.0);
        let mut g1 = Graph::training();
        let a = g1.constant(x.clone());
        let d1 = g1.dropout(a, 0.25, 11).unwrap();
        let mut g2 = Graph::training();
        let b = g2.constant(x.clone());
        let d2 = g2.dropout(b, 0.25, 11).unwrap();
        assert_eq!(g1.value(d1).data(), g2.value(d2).data());
        assert!(g1.value(d1).data().iter().any(|&v| v == 0.0));
        let mut ge = Graph::new();
        let c = ge.constant(x);
        let de = ge.dropout(c, 0.25, 11).unwrap();
        assert_eq!(de, c);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let unused = g.param(Tensor::scalar(1.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        assert_eq!(grads.get_or_zeros(&g, unused).item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let big = g.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(g.mul(big, big), Err(Error::NonFinite { op: "mul" })));
        let x = g.param(Tensor::scalar(0.0));
        let y = g.mul(x, big).unwrap();
        let s = g.sum(y).unwrap();
        assert!(matches!(
            g.backward_scaled(s, 10.0),
            Err(Error::NonFiniteGradient { op: "mul", .. })
        ));
    }

    #[test]
    fn constants_get_no_gradient_buffers() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(vec![2, 2], 1.0));
        let x = g.param(Tensor::full(vec![1, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
