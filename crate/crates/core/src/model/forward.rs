use std::sync::Arc;

use indexmap::IndexMap;

use super::{ModelConfig, ModelError, ModelWeights, Result};
use crate::oracle::HdrImage;
use crate::scene::{Scene, DEFAULT_MAX_TRIANGLES};
use crate::tensor::{self, Real, RotationTable, SparseMap, Tape, Var};
use crate::tokenizer::{
    embed_ray_bundles, embed_triangles, make_register_tokens, ray_bundles, register_anchor,
    triangle_features, Anchor, EmbedLayer, RayBundleGrid, RopeTable, TokenSequence,
};

/// Weight handles on a tape, looked up by name.
#[derive(Clone, Debug)]
pub struct Params {
    vars: IndexMap<String, Var>,
}

impl Params {
    /// Records every weight as a leaf: trainable params or constants.
    pub fn bind<R: Real>(tape: &mut Tape<R>, weights: &ModelWeights<R>, trainable: bool) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Params { vars }
    }

    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Params {
            vars: names
                .into_iter()
                .map(String::from)
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("missing weight {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn embed(&self, prefix: &str) -> EmbedLayer {
        EmbedLayer {
            weight: self.get(&format!("{prefix}.w")),
            bias: self.get(&format!("{prefix}.b")),
            gain: self.get(&format!("{prefix}.g")),
        }
    }
}

fn rotation<R: Real>(anchors: &[Anchor], cfg: &ModelConfig) -> Result<Arc<RotationTable<R>>> {
    Ok(RopeTable::new(anchors, &cfg.frequencies, cfg.rope_pairs, cfg.head_dim)?.rotation())
}

/// Projects `[T, d]` to QK-normalized `[heads, T, head_dim]` and optionally
/// rotates it.
fn project_heads<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    w: Var,
    gain: Option<Var>,
    heads: usize,
    rope: Option<&Arc<RotationTable<R>>>,
) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let mut y = tensor::split_heads(tape, y, heads)?;
    if let Some(g) = gain {
        y = tensor::rms_norm(tape, y, g)?;
    }
    if let Some(table) = rope {
        y = tape.rotate(y, table.clone())?;
    }
    Ok(y)
}

/// Multi-head attention block without residual. Returns the output and the
/// attention node, whose probabilities stay readable on the tape.
#[allow(clippy::too_many_arguments)]
fn attention_block<R: Real>(
    tape: &mut Tape<R>,
    p: &Params,
    prefix: &str,
    cfg: &ModelConfig,
    queries: Var,
    context: Var,
    q_rope: Option<&Arc<RotationTable<R>>>,
    k_rope: Option<&Arc<RotationTable<R>>>,
) -> Result<(Var, Var)> {
    let w = |n: &str| p.get(&format!("{prefix}.{n}"));
    let q = project_heads(
        tape,
        queries,
        w("wq"),
        Some(w("q_gain")),
        cfg.n_heads,
        q_rope,
    )?;
    let k = project_heads(
        tape,
        context,
        w("wk"),
        Some(w("k_gain")),
        cfg.n_heads,
        k_rope,
    )?;
    let v = project_heads(tape, context, w("wv"), None, cfg.n_heads, None)?;
    let a = tape.attention_core(q, k, v)?;
    let merged = tensor::merge_heads(tape, a)?;
    Ok((tape.matmul(merged, w("wo"))?, a))
}

fn ffn_block<R: Real>(tape: &mut Tape<R>, p: &Params, prefix: &str, x: Var) -> Result<Var> {
    let w = |n: &str| p.get(&format!("{prefix}.{n}"));
    let h = tensor::rms_norm(tape, x, w("norm"))?;
    let y = tensor::swiglu_ffn(tape, h, w("gate"), w("up"), w("down"))?;
    Ok(tape.add(x, y)?)
}

/// Triangle transport in world space. Returns `[T, d]` tokens after the
/// final norm; anchors are unchanged.
pub fn view_independent_forward<R: Real>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    p: &Params,
    seq: &TokenSequence,
) -> Result<Var> {
    if seq.triangle_count() == 0 {
        return Err(ModelError::Config("token sequence has no triangles".into()));
    }
    let s = tape.shape(seq.tokens).to_vec();
    if s.len() != 2 || s[1] != cfg.d_model || s[0] != seq.len() {
        return Err(ModelError::Config(format!(
            "token matrix {s:?} does not match {} tokens of width {}",
            seq.len(),
            cfg.d_model
        )));
    }
    let rope = rotation::<R>(&seq.anchors, cfg)?;
    let mut x = seq.tokens;
    for l in 0..cfg.vi_layers {
        let pre = format!("vi.{l}");
        let h = tensor::rms_norm(tape, x, p.get(&format!("{pre}.attn.norm")))?;
        let (a, _) = attention_block(
            tape,
            p,
            &format!("{pre}.attn"),
            cfg,
            h,
            h,
            Some(&rope),
            Some(&rope),
        )?;
        x = tape.add(x, a)?;
        x = ffn_block(tape, p, &format!("{pre}.ffn"), x)?;
    }
    Ok(tensor::rms_norm(tape, x, p.get("vi.final_norm"))?)
}

/// Per-layer ray-token features and the cross-attention nodes.
#[derive(Clone, Debug)]
pub struct ViewDependentOutput {
    pub features: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

/// Decodes ray-bundle tokens `[B, d]` against camera-space triangle tokens.
/// Queries carry no rotation; keys are rotated by `camera_anchors`.
pub fn view_dependent_forward<R: Real>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    p: &Params,
    rays: Var,
    triangles: Var,
    camera_anchors: &[Anchor],
) -> Result<ViewDependentOutput> {
    if camera_anchors.is_empty() || tape.shape(triangles)[0] == 0 {
        return Err(ModelError::Config("triangle sequence is empty".into()));
    }
    let k_rope = rotation::<R>(camera_anchors, cfg)?;
    let mut x = rays;
    let mut features = Vec::with_capacity(cfg.vd_layers);
    let mut cross_attention = Vec::with_capacity(cfg.vd_layers);
    for l in 0..cfg.vd_layers {
        let pre = format!("vd.{l}");
        let q = tensor::rms_norm(tape, x, p.get(&format!("{pre}.cross.q_norm")))?;
        let kv = tensor::rms_norm(tape, triangles, p.get(&format!("{pre}.cross.kv_norm")))?;
        let (a, probs) = attention_block(
            tape,
            p,
            &format!("{pre}.cross"),
            cfg,
            q,
            kv,
            None,
            Some(&k_rope),
        )?;
        x = tape.add(x, a)?;
        cross_attention.push(probs);
        let h = tensor::rms_norm(tape, x, p.get(&format!("{pre}.self.norm")))?;
        let (a, _) = attention_block(tape, p, &format!("{pre}.self"), cfg, h, h, None, None)?;
        x = tape.add(x, a)?;
        x = ffn_block(tape, p, &format!("{pre}.ffn"), x)?;
        features.push(x);
    }
    Ok(ViewDependentOutput {
        features,
        cross_attention,
    })
}

/// `[B, s*s*c]` bundle rows to a `[c, rows*s, cols*s]` grid.
fn pixel_shuffle<R: Real>(rows: usize, cols: usize, s: usize, c: usize) -> Result<SparseMap<R>> {
    let (h, w) = (rows * s, cols * s);
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let b = (y / s) * cols + x / s;
                index.push((b * s * s + (y % s) * s + x % s) * c + ch);
            }
        }
    }
    Ok(SparseMap::gather(
        rows * cols * s * s * c,
        &[c, h, w],
        &index,
    )?)
}

/// 2x bilinear upsampling of `[c, h, w]` with half-pixel centers and edge clamping.
fn upsample2<R: Real>(c: usize, h: usize, w: usize) -> Result<SparseMap<R>> {
    let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    };
    let (h2, w2) = (2 * h, 2 * w);
    let mut offsets = Vec::with_capacity(c * h2 * w2 + 1);
    let mut src = Vec::with_capacity(4 * c * h2 * w2);
    let mut weight = Vec::with_capacity(4 * c * h2 * w2);
    offsets.push(0);
    for ch in 0..c {
        for y in 0..h2 {
            let ty = taps(y, h);
            for x in 0..w2 {
                let tx = taps(x, w);
                for (iy, wy) in ty {
                    for (ix, wx) in tx {
                        src.push((ch * h + iy) * w + ix);
                        weight.push(R::of(wy * wx));
                    }
                }
                offsets.push(src.len());
            }
        }
    }
    Ok(SparseMap::from_csr(
        c * h * w,
        &[c, h2, w2],
        offsets,
        src,
        weight,
    )?)
}

fn conv_residual<R: Real>(tape: &mut Tape<R>, p: &Params, prefix: &str, z: Var) -> Result<Var> {
    let y = tape.conv3x3(
        z,
        p.get(&format!("{prefix}.w")),
        Some(p.get(&format!("{prefix}.b"))),
    )?;
    let y = tape.silu(y);
    Ok(tape.add(z, y)?)
}

/// Dense decoder. `features` are the last `dpt_taps` layer outputs, oldest
/// first. Returns log-radiance `[3, rows * 8, cols * 8]`.
pub fn dpt_decode<R: Real>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    p: &Params,
    features: &[Var],
    rows: usize,
    cols: usize,
) -> Result<Var> {
    if features.len() != cfg.dpt_taps {
        return Err(ModelError::Config(format!(
            "{} decoder taps given, config expects {}",
            features.len(),
            cfg.dpt_taps
        )));
    }
    let c = cfg.dpt_channels;
    let mut z: Option<Var> = None;
    for (j, &f) in features.iter().enumerate() {
        let s = 1usize << cfg.tap_level(j);
        let pre = format!("dpt.{j}");
        let h = tensor::rms_norm(tape, f, p.get(&format!("{pre}.norm")))?;
        let r = tensor::linear(
            tape,
            h,
            p.get(&format!("{pre}.reassemble.w")),
            Some(p.get(&format!("{pre}.reassemble.b"))),
        )?;
        let r = tape.sparse(r, Arc::new(pixel_shuffle(rows, cols, s, c)?))?;
        let merged = match z {
            None => r,
            Some(prev) => {
                let up = tape.sparse(prev, Arc::new(upsample2(c, rows * s / 2, cols * s / 2)?))?;
                tape.add(up, r)?
            }
        };
        z = Some(conv_residual(tape, p, &format!("{pre}.fuse"), merged)?);
    }
    let z = z.expect("at least one tap");
    Ok(tape.conv3x3(z, p.get("dpt.head.w"), Some(p.get("dpt.head.b")))?)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Log-radiance `[3, H, W]`.
    pub log_image: Var,
    pub cross_attention: Vec<Var>,
    pub tokens: usize,
    pub triangles: usize,
    pub grid: RayBundleGrid,
}

/// Full pipeline on a tape.
pub fn forward<R: Real>(
    tape: &mut Tape<R>,
    cfg: &ModelConfig,
    p: &Params,
    scene: &Scene,
) -> Result<ForwardOutput> {
    let feats = triangle_features::<R>(&scene.triangles, &cfg.frequencies);
    let tri = embed_triangles(
        tape,
        &feats,
        &p.embed("embed.normal"),
        &p.embed("embed.material"),
    )?;
    let seq = make_register_tokens(tape, scene, tri, p.get("registers"))?;
    let tokens = view_independent_forward(tape, cfg, p, &seq)?;

    let cam = &scene.camera;
    let reg = register_anchor(&scene.to_camera_space())?;
    let camera_anchors: Vec<Anchor> = scene
        .triangles
        .iter()
        .map(|t| {
            let mut a = [0.0; 9];
            for (k, v) in t.vertices.iter().enumerate() {
                a[3 * k..3 * k + 3].copy_from_slice(&cam.world_to_camera(*v).to_array());
            }
            a
        })
        .chain(std::iter::repeat_n(reg, seq.len() - seq.triangle_count()))
        .collect();

    let grid = ray_bundles(cam)?;
    let rays = embed_ray_bundles(tape, &grid, &p.embed("embed.ray"))?;
    let vd = view_dependent_forward(tape, cfg, p, rays, tokens, &camera_anchors)?;
    let taps = &vd.features[cfg.vd_layers - cfg.dpt_taps..];
    let log_image = dpt_decode(tape, cfg, p, taps, grid.rows, grid.cols)?;
    Ok(ForwardOutput {
        log_image,
        cross_attention: vd.cross_attention,
        tokens: seq.len(),
        triangles: seq.triangle_count(),
        grid,
    })
}

/// Log-radiance values `[3, H, W]` for a scene, without recording gradients.
pub fn render_log<R: Real>(
    scene: &Scene,
    cfg: &ModelConfig,
    weights: &ModelWeights<R>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    scene.validate(DEFAULT_MAX_TRIANGLES)?;
    let mut tape = Tape::new();
    let p = Params::bind(&mut tape, weights, false);
    let out = forward(&mut tape, cfg, &p, scene)?;
    Ok(tape
        .value(out.log_image)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect())
}

/// Renders the scene's view: `radiance = max(exp(y) - 1, 0)`.
pub fn render<R: Real>(
    scene: &Scene,
    cfg: &ModelConfig,
    weights: &ModelWeights<R>,
) -> Result<HdrImage> {
    let y = render_log(scene, cfg, weights)?;
    let (w, h) = (scene.camera.width as usize, scene.camera.height as usize);
    let mut pixels = vec![0f32; w * h * 3];
    for ch in 0..3 {
        for i in 0..w * h {
            let v = y[ch * w * h + i].exp_m1().max(0.0);
            pixels[3 * i + ch] = if v.is_finite() { v as f32 } else { f32::MAX };
        }
    }
    Ok(HdrImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Cross-attention mass that one ray bundle puts on every key token
/// (triangles first, then registers).
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub triangles: usize,
    pub registers: usize,
    /// One row per (layer, head), layer-major; each row sums to 1.
    pub per_head: Vec<Vec<f64>>,
    /// Sum of `per_head` rows.
    pub total: Vec<f64>,
}

pub fn attention_maps<R: Real>(
    scene: &Scene,
    cfg: &ModelConfig,
    weights: &ModelWeights<R>,
    bundle_index: usize,
) -> Result<AttentionMap> {
    cfg.validate()?;
    scene.validate(DEFAULT_MAX_TRIANGLES)?;
    let grid = ray_bundles(&scene.camera)?;
    if bundle_index >= grid.len() {
        return Err(ModelError::BundleIndex {
            index: bundle_index,
            count: grid.len(),
        });
    }
    let mut tape = Tape::new();
    let p = Params::bind(&mut tape, weights, false);
    let out = forward(&mut tape, cfg, &p, scene)?;
    let (bundles, keys) = (grid.len(), out.tokens);
    let mut per_head = Vec::new();
    let mut total = vec![0.0; keys];
    for &node in &out.cross_attention {
        let probs = tape.attention_probs(node).expect("attention node");
        for h in 0..cfg.n_heads {
            let row: Vec<f64> = probs[(h * bundles + bundle_index) * keys..][..keys]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            for (t, v) in total.iter_mut().zip(&row) {
                *t += v;
            }
            per_head.push(row);
        }
    }
    Ok(AttentionMap {
        triangles: out.triangles,
        registers: keys - out.triangles,
        per_head,
        total,
    })
}
