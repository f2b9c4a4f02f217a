use std::collections::HashMap;
use std::sync::Arc;

use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear operator: `out[o] = sum_j w[o, j] * x[src[o, j]]`.
///
/// Used for every data-movement op the pipeline needs (head splitting,
/// pixel shuffle, bilinear upsampling, pooling, finite differences) so a
/// single backward rule covers them all.
#[derive(Clone, Debug)]
pub struct SparseMap<R> {
    in_len: usize,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<R>,
}

impl<R: Real> SparseMap<R> {
    /// Builds the map from one list of `(source index, weight)` per output element.
    pub fn from_rows<I>(in_len: usize, out_shape: &[usize], rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<(usize, R)>>,
    {
        let mut offsets = vec![0];
        let mut src = Vec::new();
        let mut weight = Vec::new();
        for row in rows {
            for (s, w) in row {
                if s >= in_len {
                    return Err(TensorError::Contract(format!(
                        "sparse map source {s} out of range {in_len}"
                    )));
                }
                src.push(s);
                weight.push(w);
            }
            offsets.push(src.len());
        }
        let out_len: usize = out_shape.iter().product();
        if offsets.len() != out_len + 1 {
            return Err(TensorError::DataLength {
                shape: out_shape.to_vec(),
                expected: out_len,
                actual: offsets.len() - 1,
            });
        }
        Ok(SparseMap {
            in_len,
            out_shape: out_shape.to_vec(),
            offsets,
            src,
            weight,
        })
    }

    /// Builds the map from compressed rows: output `o` reads
    /// `src[offsets[o]..offsets[o + 1]]` with matching `weight`s.
    pub fn from_csr(
        in_len: usize,
        out_shape: &[usize],
        offsets: Vec<usize>,
        src: Vec<usize>,
        weight: Vec<R>,
    ) -> Result<Self> {
        let out_len: usize = out_shape.iter().product();
        let monotone = offsets.windows(2).all(|w| w[0] <= w[1]);
        if offsets.len() != out_len + 1
            || offsets[0] != 0
            || !monotone
            || offsets[out_len] != src.len()
            || src.len() != weight.len()
        {
            return Err(TensorError::Contract("malformed sparse map rows".into()));
        }
        if let Some(s) = src.iter().find(|&&s| s >= in_len) {
            return Err(TensorError::Contract(format!(
                "sparse map source {s} out of range {in_len}"
            )));
        }
        Ok(SparseMap {
            in_len,
            out_shape: out_shape.to_vec(),
            offsets,
            src,
            weight,
        })
    }

    /// Pure permutation/selection: `out[o] = x[index[o]]`.
    pub fn gather(in_len: usize, out_shape: &[usize], index: &[usize]) -> Result<Self> {
        Self::from_csr(
            in_len,
            out_shape,
            (0..=index.len()).collect(),
            index.to_vec(),
            vec![R::one(); index.len()],
        )
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, x: &[R]) -> Vec<R> {
        (0..self.offsets.len() - 1)
            .map(|o| {
                let mut acc = R::zero();
                for j in self.offsets[o]..self.offsets[o + 1] {
                    acc += self.weight[j] * x[self.src[j]];
                }
                acc
            })
            .collect()
    }

    fn apply_transpose(&self, g: &[R], dx: &mut [R]) {
        for o in 0..self.offsets.len() - 1 {
            let go = g[o];
            for j in self.offsets[o]..self.offsets[o + 1] {
                dx[self.src[j]] += self.weight[j] * go;
            }
        }
    }
}

/// Per-token 2x2 block rotations: `pairs` (sin, cos) entries per token.
#[derive(Clone, Debug)]
pub struct RotationTable<R> {
    tokens: usize,
    pairs: usize,
    sin: Vec<R>,
    cos: Vec<R>,
}

impl<R: Real> RotationTable<R> {
    pub fn new(tokens: usize, pairs: usize, sin: Vec<R>, cos: Vec<R>) -> Result<Self> {
        if sin.len() != tokens * pairs || cos.len() != tokens * pairs {
            return Err(TensorError::DataLength {
                shape: vec![tokens, pairs],
                expected: tokens * pairs,
                actual: sin.len().min(cos.len()),
            });
        }
        Ok(RotationTable {
            tokens,
            pairs,
            sin,
            cos,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn sin_cos(&self, token: usize, pair: usize) -> (R, R) {
        let i = token * self.pairs + pair;
        (self.sin[i], self.cos[i])
    }

    /// Rotates the first `2 * pairs` coefficients of each `[heads, tokens, dim]` row.
    /// `inverse` applies the transposed rotation.
    pub fn rotate(&self, x: &mut [R], heads: usize, dim: usize, inverse: bool) {
        for h in 0..heads {
            for t in 0..self.tokens {
                let row = &mut x[(h * self.tokens + t) * dim..][..dim];
                for p in 0..self.pairs {
                    let (s, c) = self.sin_cos(t, p);
                    let s = if inverse { -s } else { s };
                    let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                    row[2 * p] = x0 * c - x1 * s;
                    row[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary<R> {
    Silu,
    Sigmoid,
    Exp,
    Expm1,
    Ln,
    Abs,
    Square,
    Clamp(R, R),
}

impl<R: Real> Unary<R> {
    fn eval(self, x: R) -> R {
        match self {
            Unary::Silu => x / (R::one() + (-x).exp()),
            Unary::Sigmoid => R::one() / (R::one() + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Expm1 => x.exp_m1(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    fn derivative(self, x: R, y: R) -> R {
        match self {
            Unary::Silu => {
                let s = R::one() / (R::one() + (-x).exp());
                s + x * s * (R::one() - s)
            }
            Unary::Sigmoid => y * (R::one() - y),
            Unary::Exp => y,
            Unary::Expm1 => y + R::one(),
            Unary::Ln => R::one() / x,
            Unary::Abs => {
                if x > R::zero() {
                    R::one()
                } else if x < R::zero() {
                    -R::one()
                } else {
                    R::zero()
                }
            }
            Unary::Square => x + x,
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    R::one()
                } else {
                    R::zero()
                }
            }
        }
    }
}

enum Op<R> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, R),
    Offset(Var),
    Map(Var, Unary<R>),
    SumAll(Var),
    MeanAll(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<R>,
    },
    Sparse {
        x: Var,
        map: Arc<SparseMap<R>>,
    },
    Rotate {
        x: Var,
        table: Arc<RotationTable<R>>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<R>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it
/// and a reverse sweep is a valid topological order for backward.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the requires-grad leaves, keyed by their handles.
#[derive(Debug)]
pub struct Gradients<R> {
    grads: HashMap<Var, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push_leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Cross-attention probabilities saved by an [`Tape::attention_core`] node,
    /// laid out `[heads, queries, keys]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[R]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `a[..., k] x b[k, n] -> [..., n]`; leading extents of `a` act as a batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = if k == 0 { 0 } else { self.value(a).len() / k };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            R::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(R, R) -> R,
    ) -> Result<Tensor<R>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.len() || tx.rank() == 0 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let n = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| v * c).collect(),
        };
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| v + c).collect(),
        };
        self.push(t, Op::Offset(x), &[x])
    }

    fn map(&mut self, x: Var, f: Unary<R>) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| f.eval(v)).collect(),
        };
        self.push(t, Op::Map(x, f), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Unary::Exp)
    }

    pub fn expm1(&mut self, x: Var) -> Var {
        self.map(x, Unary::Expm1)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Unary::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Unary::Square)
    }

    pub fn clamp(&mut self, x: Var, lo: R, hi: R) -> Var {
        self.map(x, Unary::Clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = R::of(tx.len().max(1) as f64);
        let t = Tensor::scalar(tx.sum() / n);
        self.push(t, Op::MeanAll(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut mx = R::neg_infinity();
                for i in 0..len {
                    mx = mx.max(out[idx(i)]);
                }
                let mut total = R::zero();
                for i in 0..len {
                    let e = (out[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// RMS normalization over the last axis, optionally followed by a gain.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: R) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if let Some(g) = gain {
            let tg = self.value(g);
            if tg.rank() != 1 || tg.len() != d {
                return Err(shape_err("rms_norm", tx.shape(), tg.shape()));
            }
        }
        let rows = if d == 0 { 0 } else { tx.len() / d };
        let mut out = vec![R::zero(); tx.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        let gain_data = gain.map(|g| self.value(g).data());
        for r in 0..rows {
            let xs = &tx.data()[r * d..(r + 1) * d];
            let ms = xs.iter().fold(R::zero(), |a, &v| a + v * v) / R::of(d as f64);
            let inv = R::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (i, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                let g = gain_data.map_or(R::one(), |gd| gd[i]);
                *o = xs[i] * inv * g;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &inputs))
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap<R>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != map.in_len() {
            return Err(shape_err("sparse", tx.shape(), &[map.in_len()]));
        }
        let t = Tensor::new(map.out_shape().to_vec(), map.apply(tx.data()))?;
        Ok(self.push(t, Op::Sparse { x, map }, &[x]))
    }

    /// Block-rotates `x[heads, tokens, dim]` with per-token angles.
    pub fn rotate(&mut self, x: Var, table: Arc<RotationTable<R>>) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || s[1] != table.tokens() || 2 * table.pairs() > s[2] {
            return Err(shape_err("rotate", s, &[table.tokens(), 2 * table.pairs()]));
        }
        let heads = s[0];
        let mut data = tx.data().to_vec();
        table.rotate(&mut data, heads, s[2], false);
        let t = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(t, Op::Rotate { x, table, heads }, &[x]))
    }

    /// `softmax(q k^T / sqrt(d)) v` per head. `q: [h, tq, d]`, `k: [h, tk, d]`,
    /// `v: [h, tk, dv]`.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(shape_err("attention", sq, sk));
        }
        if sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", sq, sk));
        }
        if sk[0] != sv[0] || sk[1] != sv[1] {
            return Err(shape_err("attention", sk, sv));
        }
        let (h, tq, d) = (sq[0], sq[1], sq[2]);
        let (tk, dv) = (sk[1], sv[2]);
        if tk == 0 {
            return Err(shape_err("attention", sq, sk));
        }
        let scale = R::one() / R::of(d as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![R::zero(); h * tq * tk];
        let mut out = vec![R::zero(); h * tq * dv];
        for head in 0..h {
            let p = &mut probs[head * tq * tk..][..tq * tk];
            R::gemm(
                tq,
                d,
                tk,
                scale,
                &qd[head * tq * d..][..tq * d],
                (d as isize, 1),
                &kd[head * tk * d..][..tk * d],
                (1, d as isize),
                R::zero(),
                p,
                (tk as isize, 1),
            );
            for row in p.chunks_mut(tk) {
                let mx = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
                let mut total = R::zero();
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                    total += *e;
                }
                for e in row.iter_mut() {
                    *e /= total;
                }
            }
            R::gemm(
                tq,
                tk,
                dv,
                R::one(),
                p,
                (tk as isize, 1),
                &vd[head * tk * dv..][..tk * dv],
                (dv as isize, 1),
                R::zero(),
                &mut out[head * tq * dv..][..tq * dv],
                (dv as isize, 1),
            );
        }
        let t = Tensor::new(vec![h, tq, dv], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    /// Same-size 3x3 convolution. `x: [ci, h, w]`, `w: [co, ci, 3, 3]`, `bias: [co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("conv3x3", sx, sw));
        }
        let (ci, hh, ww) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(shape_err("conv3x3", sw, self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), ci, hh, ww);
        let hw = hh * ww;
        let mut out = vec![R::zero(); co * hw];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (c, chunk) in out.chunks_mut(hw.max(1)).enumerate().take(co) {
                chunk.iter_mut().for_each(|o| *o = bd[c]);
            }
        }
        R::gemm(
            co,
            ci * 9,
            hw,
            R::one(),
            self.value(w).data(),
            ((ci * 9) as isize, 1),
            &cols,
            (hw as isize, 1),
            R::one(),
            &mut out,
            (hw as isize, 1),
        );
        let t = Tensor::new(vec![co, hh, ww], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv3x3 { x, w, bias }, &inputs))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() == 0 || tp.shape()[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(*first), tp.shape()));
            }
            rows += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<R>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward_node(&nodes, node, &g, &mut acc);
        }

        let mut out = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![R::zero(); node.value.len()]);
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

struct Accumulator<'a, R> {
    nodes: &'a [Node<R>],
    grads: &'a mut [Option<Vec<R>>],
}

impl<R: Real> Accumulator<'_, R> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    fn buf(&mut self, v: Var) -> &mut [R] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
    }

    fn add_with(&mut self, v: Var, f: impl Fn(usize) -> R) {
        if !self.wants(v) {
            return;
        }
        for (i, b) in self.buf(v).iter_mut().enumerate() {
            *b += f(i);
        }
    }
}

fn im2col<R: Real>(x: &[R], ci: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let mut cols = vec![R::zero(); ci * 9 * hw];
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        row[y * w + xx] = x[(c * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<R: Real>(cols: &[R], ci: usize, h: usize, w: usize, dx: &mut [R]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[(c * h + sy as usize) * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

fn backward_node<R: Real>(
    nodes: &[Node<R>],
    node: &Node<R>,
    g: &[R],
    acc: &mut Accumulator<'_, R>,
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if acc.wants(*a) {
                let bd = val(*b);
                let buf = acc.buf(*a);
                R::gemm(
                    m,
                    n,
                    k,
                    R::one(),
                    g,
                    (n as isize, 1),
                    bd,
                    (1, n as isize),
                    R::one(),
                    buf,
                    (k as isize, 1),
                );
            }
            if acc.wants(*b) {
                let ad = val(*a);
                let buf = acc.buf(*b);
                R::gemm(
                    k,
                    m,
                    n,
                    R::one(),
                    ad,
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    R::one(),
                    buf,
                    (n as isize, 1),
                );
            }
        }
        Op::Add(a, b) => {
            acc.add_with(*a, |i| g[i]);
            acc.add_with(*b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc.add_with(*a, |i| g[i]);
            acc.add_with(*b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            acc.add_with(*a, |i| g[i] * bd[i]);
            acc.add_with(*b, |i| g[i] * ad[i]);
        }
        Op::AddBias { x, bias } => {
            acc.add_with(*x, |i| g[i]);
            if acc.wants(*bias) {
                let buf = acc.buf(*bias);
                let n = buf.len();
                for (i, &gi) in g.iter().enumerate() {
                    buf[i % n] += gi;
                }
            }
        }
        Op::Scale(x, c) => acc.add_with(*x, |i| g[i] * *c),
        Op::Offset(x) => acc.add_with(*x, |i| g[i]),
        Op::Map(x, f) => {
            let (xd, yd) = (val(*x), node.value.data());
            acc.add_with(*x, |i| g[i] * f.derivative(xd[i], yd[i]));
        }
        Op::SumAll(x) => acc.add_with(*x, |_| g[0]),
        Op::MeanAll(x) => {
            let n = R::of(nodes[x.0].value.len().max(1) as f64);
            acc.add_with(*x, |_| g[0] / n);
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if acc.wants(*x) {
                let y = node.value.data();
                let buf = acc.buf(*x);
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot = (0..*len).fold(R::zero(), |a, i| a + g[idx(i)] * y[idx(i)]);
                        for i in 0..*len {
                            buf[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xd = val(*x);
            let d = nodes[x.0].value.last_dim();
            let gd = gain.map(&val);
            if acc.wants(*x) {
                let buf = acc.buf(*x);
                let dn = R::of(d as f64);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xs = &xd[r * d..][..d];
                    let gs = &g[r * d..][..d];
                    let dyg = |i: usize| gd.map_or(gs[i], |gd| gs[i] * gd[i]);
                    let dot = (0..d).fold(R::zero(), |a, i| a + dyg(i) * xs[i] * inv) / dn;
                    for i in 0..d {
                        buf[r * d + i] += inv * (dyg(i) - xs[i] * inv * dot);
                    }
                }
            }
            if let Some(gv) = gain {
                if acc.wants(*gv) {
                    let buf = acc.buf(*gv);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for i in 0..d {
                            buf[i] += g[r * d + i] * xd[r * d + i] * inv;
                        }
                    }
                }
            }
        }
        Op::Sparse { x, map } => {
            if acc.wants(*x) {
                map.apply_transpose(g, acc.buf(*x));
            }
        }
        Op::Rotate { x, table, heads } => {
            if acc.wants(*x) {
                let dim = nodes[x.0].value.last_dim();
                let mut gr = g.to_vec();
                table.rotate(&mut gr, *heads, dim, true);
                for (b, v) in acc.buf(*x).iter_mut().zip(gr) {
                    *b += v;
                }
            }
        }
        Op::Attention { q, k, v, probs } => {
            let (sq, sk, sv) = (
                nodes[q.0].value.shape(),
                nodes[k.0].value.shape(),
                nodes[v.0].value.shape(),
            );
            let (h, tq, d, tk, dv) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
            let scale = R::one() / R::of(d as f64).sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut ds = vec![R::zero(); tq * tk];
            for head in 0..h {
                let p = &probs[head * tq * tk..][..tq * tk];
                let go = &g[head * tq * dv..][..tq * dv];
                if acc.wants(*v) {
                    let buf = &mut acc.buf(*v)[head * tk * dv..][..tk * dv];
                    R::gemm(
                        tk,
                        tq,
                        dv,
                        R::one(),
                        p,
                        (1, tk as isize),
                        go,
                        (dv as isize, 1),
                        R::one(),
                        buf,
                        (dv as isize, 1),
                    );
                }
                if !acc.wants(*q) && !acc.wants(*k) {
                    continue;
                }
                // dP = dO V^T, then through the softmax
                R::gemm(
                    tq,
                    dv,
                    tk,
                    R::one(),
                    go,
                    (dv as isize, 1),
                    &vd[head * tk * dv..][..tk * dv],
                    (1, dv as isize),
                    R::zero(),
                    &mut ds,
                    (tk as isize, 1),
                );
                for (row, prow) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot = row
                        .iter()
                        .zip(prow)
                        .fold(R::zero(), |a, (&x, &y)| a + x * y);
                    for (e, &pv) in row.iter_mut().zip(prow) {
                        *e = pv * (*e - dot);
                    }
                }
                if acc.wants(*q) {
                    let buf = &mut acc.buf(*q)[head * tq * d..][..tq * d];
                    R::gemm(
                        tq,
                        tk,
                        d,
                        scale,
                        &ds,
                        (tk as isize, 1),
                        &kd[head * tk * d..][..tk * d],
                        (d as isize, 1),
                        R::one(),
                        buf,
                        (d as isize, 1),
                    );
                }
                if acc.wants(*k) {
                    let buf = &mut acc.buf(*k)[head * tk * d..][..tk * d];
                    R::gemm(
                        tk,
                        tq,
                        d,
                        scale,
                        &ds,
                        (1, tk as isize),
                        &qd[head * tq * d..][..tq * d],
                        (d as isize, 1),
                        R::one(),
                        buf,
                        (d as isize, 1),
                    );
                }
            }
        }
        Op::Conv3x3 { x, w, bias } => {
            let sx = nodes[x.0].value.shape();
            let (ci, hh, ww) = (sx[0], sx[1], sx[2]);
            let co = nodes[w.0].value.shape()[0];
            let hw = hh * ww;
            if acc.wants(*w) {
                let cols = im2col(val(*x), ci, hh, ww);
                let buf = acc.buf(*w);
                R::gemm(
                    co,
                    hw,
                    ci * 9,
                    R::one(),
                    g,
                    (hw as isize, 1),
                    &cols,
                    (1, hw as isize),
                    R::one(),
                    buf,
                    ((ci * 9) as isize, 1),
                );
            }
            if acc.wants(*x) {
                let mut dcols = vec![R::zero(); ci * 9 * hw];
                R::gemm(
                    ci * 9,
                    co,
                    hw,
                    R::one(),
                    val(*w),
                    (1, (ci * 9) as isize),
                    g,
                    (hw as isize, 1),
                    R::zero(),
                    &mut dcols,
                    (hw as isize, 1),
                );
                col2im_add(&dcols, ci, hh, ww, acc.buf(*x));
            }
            if let Some(b) = bias {
                if acc.wants(*b) {
                    let buf = acc.buf(*b);
                    for (c, chunk) in g.chunks(hw.max(1)).enumerate().take(co) {
                        buf[c] += chunk.iter().fold(R::zero(), |a, &v| a + v);
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                acc.add_with(p, |i| g[offset + i]);
                offset += n;
            }
        }
        Op::Reshape(x) => acc.add_with(*x, |i| g[i]),
    }
}
