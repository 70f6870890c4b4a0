use rand::Rng;

use super::rng::StreamRng;
use super::gemm::{gemm_view, View};
use super::{gemm, ParamId, ParamStore, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Sin(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu { a: Var, tanh: Vec<f64> },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout { a: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Huber { pred: Var, target: Var, delta: f64 },
    Attention { qkv: Var, heads: usize, last_only: bool, probs: Vec<f64> },
    LstmCell { gates: Var, c_prev: Option<Var>, acts: Vec<f64>, tanh_c: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Node ids are assigned in execution
/// order, so every op's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

/// `b` broadcasts against `a` when its shape equals a trailing suffix of `a`'s.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Splits `shape` around `axis` into (outer, dim, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `o` of a permuted tensor reads input element `map[o]`.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    for o in 0..n {
        let mut rem = o;
        let mut src = 0;
        for (d, &os) in out_strides.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            src += idx * in_strides[perm[d]];
        }
        map.push(src);
    }
    (out_shape, map)
}

/// `tanh` through one `exp`; accurate to a few ulps in absolute terms.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inner `tanh` of the GELU approximation.
fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_A * x * x * x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn huber_terms(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let r = (p - t).abs();
            if r <= delta {
                0.5 * r * r
            } else {
                delta * (r - 0.5 * delta)
            }
        })
        .sum()
}

/// Mean Huber loss outside any tape, used for validation scoring.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64, TensorError> {
    if pred.shape() != target.shape() {
        return Err(mismatch("huber_loss", pred, target));
    }
    if pred.numel() == 0 {
        return Err(invalid("huber_loss", "empty input"));
    }
    Ok(huber_terms(pred.data(), target.data(), delta) / pred.numel() as f64)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => self.req(*a) || self.req(*b),
            Op::Scale { a, .. }
            | Op::Dropout { a, .. }
            | Op::Slice { a, .. }
            | Op::Permute { a, .. }
            | Op::Sin(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu { a, .. }
            | Op::Attention { qkv: a, .. }
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.req(*a),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.req(*x) || self.req(*gamma) || self.req(*beta)
            }
            Op::Concat { parts, .. } => parts.iter().any(|p| self.req(*p)),
            Op::Huber { pred, target, .. } => self.req(*pred) || self.req(*target),
            Op::LstmCell { gates, c_prev, .. } => self.req(*gates) || c_prev.is_some_and(|c| self.req(c)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Loads the current value of a parameter as a differentiable node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        self.push(store.value(id).clone(), Op::Param(id), "param")
    }

    /// `a @ b`. With a 2-D `b` every leading axis of `a` is treated as rows;
    /// with equal-rank operands the leading axes are batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch("matmul", av, bv));
        }
        let k = ash[ash.len() - 1];
        if bsh.len() == 2 {
            if bsh[0] != k {
                return Err(mismatch("matmul", av, bv));
            }
            let n = bsh[1];
            let rows = av.numel() / k.max(1);
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, false);
            let mut shape = ash.to_vec();
            *shape.last_mut().unwrap() = n;
            let t = Tensor::new(shape, out)?;
            return self.push(t, Op::MatMul { a, b, batched: false }, "matmul");
        }
        if ash.len() != bsh.len()
            || ash[..ash.len() - 2] != bsh[..bsh.len() - 2]
            || bsh[bsh.len() - 2] != k
        {
            return Err(mismatch("matmul", av, bv));
        }
        let m = ash[ash.len() - 2];
        let n = bsh[bsh.len() - 1];
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::MatMul { a, b, batched: true }, "matmul")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcasts(av.shape(), bv.shape()) || bv.numel() == 0 {
            return Err(mismatch(name, av, bv));
        }
        let bn = bv.numel();
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(bn) {
            data.extend(chunk.iter().zip(bv.data()).map(|(x, y)| f(*x, *y)));
        }
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("sub", self.value(a), self.value(b)));
        }
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, "sub")
    }

    /// Elementwise product, `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect())?;
        self.push(t, Op::Scale { a, factor }, "scale")
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, TensorError> {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::sin)?;
        self.push(t, Op::Sin(a), "sin")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::exp)?;
        self.push(t, Op::Exp(a), "exp")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })?;
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.unary(a, f64::tanh)?;
        self.push(t, Op::Tanh(a), "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let tanh: Vec<f64> = av.data().iter().map(|x| gelu_tanh(*x)).collect();
        let data = av.data().iter().zip(&tanh).map(|(x, t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Gelu { a, tanh }, "gelu")
    }

    /// Multi-head scaled dot-product attention over a fused projection
    /// `qkv: [B, T, 3d]` holding queries, keys and values in that order, each
    /// split into `heads` contiguous blocks. Returns `[B, T, d]`, or
    /// `[B, 1, d]` for the final query position only when `last_only`.
    pub fn attention(&mut self, qkv: Var, heads: usize, last_only: bool) -> Result<Var, TensorError> {
        let xv = self.value(qkv);
        let sh = xv.shape();
        if sh.len() != 3 || heads == 0 || sh[2] % (3 * heads) != 0 || sh[1] == 0 {
            return Err(invalid("attention", format!("shape {sh:?} with {heads} heads")));
        }
        let (b, t, d) = (sh[0], sh[1], sh[2] / 3);
        let dh = d / heads;
        let q0 = if last_only { t - 1 } else { 0 };
        let tq = t - q0;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = xv.data();
        let mut probs = vec![0.0; b * heads * tq * t];
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            let base = bi * t * 3 * d;
            for h in 0..heads {
                let p_off = (bi * heads + h) * tq * t;
                let q = View::new(base + q0 * 3 * d + h * dh, 3 * d, 1);
                let kt = View::new(base + d + h * dh, 1, 3 * d);
                gemm_view(tq, dh, t, x, q, x, kt, &mut probs, View::new(p_off, t, 1), false);
                for row in probs[p_off..p_off + tq * t].chunks_mut(t) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) * scale;
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v * scale - max).exp();
                        sum += *v;
                    }
                    let inv = 1.0 / sum;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                let v = View::new(base + 2 * d + h * dh, 3 * d, 1);
                let o = View::new(bi * tq * d + h * dh, d, 1);
                gemm_view(tq, t, dh, &probs, View::new(p_off, t, 1), x, v, &mut out, o, false);
            }
        }
        let t = Tensor::new([b, tq, d], out)?;
        self.push(
            t,
            Op::Attention {
                qkv,
                heads,
                last_only,
                probs,
            },
            "attention",
        )
    }

    /// One LSTM step. `gates: [B, 4h]` holds input, forget, cell and output
    /// pre-activations; `c_prev: [B, h]` is the previous cell state (zero when
    /// absent). Returns `[B, 2h]`: the new hidden state then the new cell.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Option<Var>) -> Result<Var, TensorError> {
        let gv = self.value(gates);
        let sh = gv.shape();
        if sh.len() != 2 || sh[1] % 4 != 0 {
            return Err(invalid("lstm_cell", format!("gate shape {sh:?}")));
        }
        let (b, h) = (sh[0], sh[1] / 4);
        if let Some(c) = c_prev {
            if self.shape(c) != [b, h] {
                return Err(mismatch("lstm_cell", gv, self.value(c)));
            }
        }
        let g = gv.data();
        let cp = c_prev.map(|c| self.value(c).data());
        let mut acts = vec![0.0; b * 4 * h];
        let mut tanh_c = vec![0.0; b * h];
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let (gr, ar) = (&g[r * 4 * h..(r + 1) * 4 * h], &mut acts[r * 4 * h..(r + 1) * 4 * h]);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let c_in = fast_tanh(gr[2 * h + j]);
                let o = sigmoid(gr[3 * h + j]);
                ar[j] = i;
                ar[h + j] = f;
                ar[2 * h + j] = c_in;
                ar[3 * h + j] = o;
                let c = i * c_in + cp.map_or(0.0, |c| f * c[r * h + j]);
                let tc = fast_tanh(c);
                tanh_c[r * h + j] = tc;
                out[r * 2 * h + j] = o * tc;
                out[r * 2 * h + h + j] = c;
            }
        }
        let t = Tensor::new([b, 2 * h], out)?;
        self.push(
            t,
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            },
            "lstm_cell",
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let d = av.last_dim();
        if d == 0 {
            return Err(invalid("softmax", "empty last axis"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (eps 1e-5),
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout: each element is kept with probability `keep_prob` and
    /// scaled by `1 / keep_prob`. `keep_prob == 1` returns `a` unchanged and
    /// draws nothing.
    pub fn dropout(&mut self, a: Var, keep_prob: f64, rng: &mut StreamRng) -> Result<Var, TensorError> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(invalid("dropout", format!("keep probability {keep_prob}")));
        }
        if keep_prob == 1.0 {
            return Ok(a);
        }
        let av = self.value(a);
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { a, mask }, "dropout")
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_blocks(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        self.push(t, Op::Slice { a, axis, start }, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..av.ndim()).collect::<Vec<_>>() {
            return Err(invalid("permute", format!("{perm:?} for rank {}", av.ndim())));
        }
        let (out_shape, map) = permute_map(av.shape(), perm);
        let data = map.iter().map(|&i| av.data()[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push(
            t,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).ndim();
        if n < 2 {
            return Err(invalid("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(a, &perm)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(invalid("mean", "empty input"));
        }
        let t = Tensor::scalar(av.sum() / av.numel() as f64);
        self.push(t, Op::Mean(a), "mean")
    }

    /// Mean over elements of the quadratic/linear Huber penalty.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var, TensorError> {
        let loss = huber_loss(self.value(pred), self.value(target), delta)?;
        self.push(
            Tensor::scalar(loss),
            Op::Huber {
                pred,
                target,
                delta,
            },
            "huber",
        )
    }

    /// Reverse pass from a scalar node. Parameter gradients are added to the
    /// accumulators in `store`; the tape cannot be replayed afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(loss_shape, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, store)?;
        }
        Ok(())
    }

    /// Gradient accumulator of `v`, zero-initialized on first use; `None`
    /// when `v` needs no gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.req(v) {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape().to_vec())))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.req(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, &g),
            Op::MatMul { a, b, batched } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ash = av.shape();
                let bsh = bv.shape();
                let k = ash[ash.len() - 1];
                let n = bsh[bsh.len() - 1];
                if !batched {
                    let rows = av.numel() / k.max(1);
                    if let Some(da) = self.grad_slot(grads, *a) {
                        gemm(rows, n, k, gd, false, bv.data(), true, da.data_mut(), true);
                    }
                    if let Some(db) = self.grad_slot(grads, *b) {
                        gemm(k, rows, n, av.data(), true, gd, false, db.data_mut(), true);
                    }
                } else {
                    let m = ash[ash.len() - 2];
                    let batch = av.numel() / (m * k).max(1);
                    if self.req(*a) {
                        let mut da = vec![0.0; av.numel()];
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[t * m * n..(t + 1) * m * n],
                                false,
                                &bv.data()[t * k * n..(t + 1) * k * n],
                                true,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                        self.accumulate(grads, *a, Tensor::new(ash.to_vec(), da)?);
                    }
                    if self.req(*b) {
                        let mut db = vec![0.0; bv.numel()];
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[t * m * k..(t + 1) * m * k],
                                true,
                                &gd[t * m * n..(t + 1) * m * n],
                                false,
                                &mut db[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                        self.accumulate(grads, *b, Tensor::new(bsh.to_vec(), db)?);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(db) = self.grad_slot(grads, *b) {
                    let db = db.data_mut();
                    for chunk in gd.chunks(db.len()) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += sign * x;
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                if let Some(db) = self.grad_slot(grads, *b) {
                    let db = db.data_mut();
                    for (gc, ac) in gd.chunks(bn).zip(av.data().chunks(bn)) {
                        for ((d, x), y) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                }
                if self.req(*a) {
                    let mut da = Vec::with_capacity(gd.len());
                    for gc in gd.chunks(bn) {
                        da.extend(gc.iter().zip(bv.data()).map(|(x, y)| x * y));
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
            }
            Op::Scale { a, factor } => {
                let da = gd.iter().map(|x| x * factor).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Sin(a) => {
                let av = self.value(*a);
                let da = gd.iter().zip(av.data()).map(|(x, v)| x * v.cos()).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Exp(a) => {
                let da = gd.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Tanh(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Gelu { a, tanh } => {
                let av = self.value(*a);
                let da = gd
                    .iter()
                    .zip(av.data())
                    .zip(tanh)
                    .map(|((x, v), t)| x * gelu_grad(*v, *t))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Softmax(a) => {
                let d = out.last_dim();
                let mut da = vec![0.0; out.numel()];
                for ((dr, yr), gr) in da
                    .chunks_mut(d)
                    .zip(out.data().chunks(d))
                    .zip(gd.chunks(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gamma).data();
                if self.req(*gamma) || self.req(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new([d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new([d], dbeta)?);
                }
                if self.req(*x) {
                    let mut dx = vec![0.0; out.numel()];
                    let inv_d = 1.0 / d as f64;
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                }
            }
            Op::Dropout { a, mask } => {
                let da = gd.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_blocks(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.shape()[*axis];
                    if self.req(*p) {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, dim, inner) = axis_blocks(self.value(*a).shape(), *axis);
                let len = out.shape()[*axis];
                if let Some(da) = self.grad_slot(grads, *a) {
                    let da = da.data_mut();
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for (d, x) in da[dst..dst + len * inner].iter_mut().zip(&gd[src..src + len * inner]) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(shape)?);
            }
            Op::Permute { a, perm } => {
                let av = self.value(*a);
                let (_, map) = permute_map(av.shape(), perm);
                let mut da = vec![0.0; av.numel()];
                for (o, &src) in map.iter().enumerate() {
                    da[src] = gd[o];
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(shape, gd[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = gd[0] / av.numel() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape().to_vec(), v));
            }
            Op::Attention {
                qkv,
                heads,
                last_only,
                probs,
            } => {
                let sh = self.value(*qkv).shape().to_vec();
                let (b, t, d) = (sh[0], sh[1], sh[2] / 3);
                let (heads, dh) = (*heads, d / *heads);
                let q0 = if *last_only { t - 1 } else { 0 };
                let tq = t - q0;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = self.value(*qkv).data();
                let Some(dx) = self.grad_slot(grads, *qkv) else {
                    return Ok(());
                };
                let dx = dx.data_mut();
                let mut ds = vec![0.0; tq * t];
                for bi in 0..b {
                    let base = bi * t * 3 * d;
                    for h in 0..heads {
                        let p_off = (bi * heads + h) * tq * t;
                        let p = &probs[p_off..p_off + tq * t];
                        let dout = View::new(bi * tq * d + h * dh, d, 1);
                        let v = View::new(base + 2 * d + h * dh, 3 * d, 1);
                        let vt = View::new(base + 2 * d + h * dh, 1, 3 * d);
                        let q = View::new(base + q0 * 3 * d + h * dh, 3 * d, 1);
                        let k = View::new(base + d + h * dh, 3 * d, 1);
                        let dense = View::new(0, t, 1);
                        let dense_t = View::new(0, 1, t);
                        // dV += P^T dO
                        gemm_view(t, tq, dh, p, dense_t, gd, dout, dx, v, true);
                        // dP = dO V^T, then the softmax Jacobian
                        gemm_view(tq, dh, t, gd, dout, x, vt, &mut ds, dense, false);
                        for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ += dS K, dK += dS^T Q
                        gemm_view(tq, t, dh, &ds, dense, x, k, dx, q, true);
                        gemm_view(t, tq, dh, &ds, dense_t, x, q, dx, k, true);
                    }
                }
            }
            Op::LstmCell {
                gates,
                c_prev,
                acts,
                tanh_c,
            } => {
                let h = acts.len() / out.shape()[0] / 4;
                let b = out.shape()[0];
                let mut dg = vec![0.0; b * 4 * h];
                let mut dc_prev = vec![0.0; b * h];
                let cp = c_prev.map(|c| self.value(c).data());
                for r in 0..b {
                    let ar = &acts[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, c_in, o) = (ar[j], ar[h + j], ar[2 * h + j], ar[3 * h + j]);
                        let tc = tanh_c[r * h + j];
                        let dh = gd[r * 2 * h + j];
                        let dc = gd[r * 2 * h + h + j] + dh * o * (1.0 - tc * tc);
                        let prev = cp.map_or(0.0, |c| c[r * h + j]);
                        let g = &mut dg[r * 4 * h..(r + 1) * 4 * h];
                        g[j] = dc * c_in * i * (1.0 - i);
                        g[h + j] = dc * prev * f * (1.0 - f);
                        g[2 * h + j] = dc * i * (1.0 - c_in * c_in);
                        g[3 * h + j] = dh * tc * o * (1.0 - o);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                self.accumulate(grads, *gates, Tensor::new([b, 4 * h], dg)?);
                if let Some(c) = c_prev {
                    self.accumulate(grads, *c, Tensor::new([b, h], dc_prev)?);
                }
            }
            Op::Huber {
                pred,
                target,
                delta,
            } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = gd[0] / pv.numel() as f64;
                let dp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(p, t)| scale * (p - t).clamp(-delta, *delta))
                    .collect();
                if self.req(*target) {
                    let dt = dp.iter().map(|x| -x).collect();
                    self.accumulate(grads, *target, Tensor::new(tv.shape().to_vec(), dt)?);
                }
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), dp)?);
            }
        }
        Ok(())
    }
}
