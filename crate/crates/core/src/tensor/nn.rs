//! Composite layers built from tape primitives.

use std::sync::Arc;

use super::{Real, Result, SparseMap, Tape, TensorError, Var};

/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// `x w (+ b)`.
pub fn linear<R: Real>(tape: &mut Tape<R>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

pub fn rms_norm<R: Real>(tape: &mut Tape<R>, x: Var, gain: Var) -> Result<Var> {
    tape.rms_norm(x, Some(gain), R::of(RMS_EPS))
}

pub fn softmax<R: Real>(tape: &mut Tape<R>, x: Var, axis: usize) -> Result<Var> {
    tape.softmax(x, axis)
}

/// `(silu(x w_gate) * (x w_up)) w_down`.
pub fn swiglu_ffn<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
) -> Result<Var> {
    let (sg, su, sd) = (tape.shape(w_gate), tape.shape(w_up), tape.shape(w_down));
    if sg != su || sd.len() != 2 || sg.len() != 2 || sd[0] != sg[1] || sd[1] != sg[0] {
        return Err(TensorError::Shape {
            op: "swiglu_ffn",
            lhs: sg.to_vec(),
            rhs: sd.to_vec(),
        });
    }
    let gate = tape.matmul(x, w_gate)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(x, w_up)?;
    let hidden = tape.mul(gate, up)?;
    tape.matmul(hidden, w_down)
}

/// Multi-head attention over `[heads, tokens, dim]` inputs. With
/// `qk_normalize`, queries and keys are RMS-normalized per token first.
pub fn attention<R: Real>(
    tape: &mut Tape<R>,
    q: Var,
    k: Var,
    v: Var,
    qk_normalize: bool,
) -> Result<Var> {
    let (q, k) = if qk_normalize {
        let eps = R::of(RMS_EPS);
        (tape.rms_norm(q, None, eps)?, tape.rms_norm(k, None, eps)?)
    } else {
        (q, k)
    };
    tape.attention_core(q, k, v)
}

/// `[tokens, heads * dim] -> [heads, tokens, dim]`.
pub fn split_heads<R: Real>(tape: &mut Tape<R>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(TensorError::Shape {
            op: "split_heads",
            lhs: s,
            rhs: vec![heads],
        });
    }
    let (t, dim) = (s[0], s[1] / heads);
    let mut index = Vec::with_capacity(t * s[1]);
    for h in 0..heads {
        for tok in 0..t {
            for j in 0..dim {
                index.push(tok * s[1] + h * dim + j);
            }
        }
    }
    let map = SparseMap::gather(t * s[1], &[heads, t, dim], &index)?;
    tape.sparse(x, Arc::new(map))
}

/// `[heads, tokens, dim] -> [tokens, heads * dim]`.
pub fn merge_heads<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op: "merge_heads",
            lhs: s,
            rhs: vec![],
        });
    }
    let (heads, t, dim) = (s[0], s[1], s[2]);
    let mut index = Vec::with_capacity(heads * t * dim);
    for tok in 0..t {
        for h in 0..heads {
            for j in 0..dim {
                index.push((h * t + tok) * dim + j);
            }
        }
    }
    let map = SparseMap::gather(heads * t * dim, &[t, heads * dim], &index)?;
    tape.sparse(x, Arc::new(map))
}
