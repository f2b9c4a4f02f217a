use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Result;
use crate::oracle::HdrImage;
use crate::tensor::{Real, SparseMap, Tape, Tensor, TensorError, Var};

/// Pyramid levels of the gradient term.
pub const GRADIENT_LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            perceptual: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Var,
}

/// `log(1 + x)` in channel-major `[3, H, W]` order.
pub fn log_chw(img: &HdrImage) -> Vec<f64> {
    let n = img.width * img.height;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = (img.pixels[3 * i + c] as f64).ln_1p();
        }
    }
    out
}

fn csr<R: Real>(
    in_len: usize,
    shape: &[usize],
    rows: impl Iterator<Item = Vec<(usize, f64)>>,
) -> std::result::Result<SparseMap<R>, TensorError> {
    let mut offsets = vec![0];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    for row in rows {
        for (i, w) in row {
            src.push(i);
            weight.push(R::of(w));
        }
        offsets.push(src.len());
    }
    SparseMap::from_csr(in_len, shape, offsets, src, weight)
}

fn pool2<R: Real>(c: usize, h: usize, w: usize) -> std::result::Result<SparseMap<R>, TensorError> {
    let (h2, w2) = (h / 2, w / 2);
    let rows = (0..c * h2 * w2).map(move |o| {
        let (ch, y, x) = (o / (h2 * w2), (o / w2) % h2, o % w2);
        let at = |dy: usize, dx: usize| ((ch * h + 2 * y + dy) * w + 2 * x + dx, 0.25);
        vec![at(0, 0), at(0, 1), at(1, 0), at(1, 1)]
    });
    csr(c * h * w, &[c, h2, w2], rows)
}

/// Forward differences along x (`axis = 2`) or y (`axis = 1`).
fn diff<R: Real>(
    c: usize,
    h: usize,
    w: usize,
    axis: usize,
) -> std::result::Result<SparseMap<R>, TensorError> {
    let (oh, ow) = if axis == 2 { (h, w - 1) } else { (h - 1, w) };
    let step = if axis == 2 { 1 } else { w };
    let rows = (0..c * oh * ow).map(move |o| {
        let (ch, y, x) = (o / (oh * ow), (o / ow) % oh, o % ow);
        let i = (ch * h + y) * w + x;
        vec![(i + step, 1.0), (i, -1.0)]
    });
    csr(c * h * w, &[c, oh, ow], rows)
}

/// `clamp(log2(expm1(y)), 0, 1)` written so the clamp happens before the log.
fn tone<R: Real>(tape: &mut Tape<R>, y: Var) -> Var {
    let x = tape.expm1(y);
    let x = tape.clamp(x, R::one(), R::of(2.0));
    let l = tape.ln(x);
    tape.scale(l, R::of(std::f64::consts::LOG2_E))
}

/// Training loss of predicted log-radiance `y` (`[3, H, W]`) against a
/// linear reference image.
pub fn tape_loss<R: Real>(
    tape: &mut Tape<R>,
    y: Var,
    reference: &HdrImage,
    weights: &LossWeights,
) -> Result<LossVars> {
    let (h, w) = (reference.height, reference.width);
    if tape.shape(y) != [3, h, w] {
        return Err(TensorError::Shape {
            op: "loss",
            lhs: tape.shape(y).to_vec(),
            rhs: vec![3, h, w],
        }
        .into());
    }
    let r = tape.constant(Tensor::from_f64(&[3, h, w], &log_chw(reference))?);
    let d = tape.sub(y, r)?;
    let a = tape.abs(d);
    let l1 = tape.mean(a);

    let ty = tone(tape, y);
    let tr = tone(tape, r);
    let mut e = tape.sub(ty, tr)?;
    let (mut lh, mut lw) = (h, w);
    let mut terms = Vec::new();
    for level in 0..GRADIENT_LEVELS {
        if level > 0 {
            if lh < 4 || lw < 4 {
                break;
            }
            e = tape.sparse(e, Arc::new(pool2(3, lh, lw)?))?;
            lh /= 2;
            lw /= 2;
        }
        for axis in [1, 2] {
            let g = tape.sparse(e, Arc::new(diff(3, lh, lw, axis)?))?;
            let g = tape.abs(g);
            terms.push(tape.mean(g));
        }
    }
    let mut perceptual = terms[0];
    for &t in &terms[1..] {
        perceptual = tape.add(perceptual, t)?;
    }
    let perceptual = tape.scale(perceptual, R::of(2.0 / terms.len() as f64));

    let a = tape.scale(l1, R::of(weights.l1));
    let b = tape.scale(perceptual, R::of(weights.perceptual));
    let total = tape.add(a, b)?;
    Ok(LossVars {
        total,
        l1,
        perceptual,
    })
}

/// Loss between two linear images, computed in f64.
pub fn loss_fn(pred: &HdrImage, reference: &HdrImage, weights: &LossWeights) -> Result<LossTerms> {
    pred.same_size(reference)?;
    let mut tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::from_f64(
        &[3, pred.height, pred.width],
        &log_chw(pred),
    )?);
    let v = tape_loss(&mut tape, y, reference, weights)?;
    let get = |x: Var| tape.value(x).data()[0];
    Ok(LossTerms {
        total: get(v.total),
        l1: get(v.l1),
        perceptual: get(v.perceptual),
    })
}
