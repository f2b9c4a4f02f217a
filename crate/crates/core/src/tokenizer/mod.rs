//! Scene and camera tokenization.
//!
//! Triangles become tokens built from their shading normals and material;
//! their positions live separately in 9D anchors that only enter attention
//! through the rotary encoding. Camera rays are grouped into 8x8 bundles,
//! one token per output patch.

use std::sync::Arc;

use thiserror::Error;

use crate::scene::{Camera, Material, Scene, Triangle, Vec3, PATCH};
use crate::tensor::{self, Real, RotationTable, Tape, Tensor, TensorError, Var};

pub const DEFAULT_FREQUENCIES: [f64; 6] = [1.0, 1.3797, 1.9037, 2.6265, 3.6239, 5.0];
pub const DEFAULT_REGISTERS: usize = 16;
pub const ANCHOR_DIMS: usize = 9;
pub const MATERIAL_FEATURES: usize = Material::CHANNELS;
pub const RAYS_PER_BUNDLE: usize = (PATCH * PATCH) as usize;
pub const RAY_FEATURES: usize = 3 * RAYS_PER_BUNDLE;

pub type Anchor = [f64; ANCHOR_DIMS];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("head_dim {head_dim} too small for {pairs} rotary pairs")]
    HeadDimTooSmall { head_dim: usize, pairs: usize },
    #[error("{pairs} rotary pairs requested but only {available} exist")]
    TooManyPairs { pairs: usize, available: usize },
    #[error("scene has no triangles")]
    EmptyScene,
    #[error("resolution {0}x{1} not divisible by 8")]
    Resolution(u32, u32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// `(sin, cos)` of every anchor component times every frequency,
/// component-major.
pub fn rope_angles(anchor: &Anchor, frequencies: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(ANCHOR_DIMS * frequencies.len());
    for &a in anchor {
        for &f in frequencies {
            out.push((a * f).sin_cos());
        }
    }
    out
}

/// The `(component, frequency index)` pairs kept when only `pairs` of the
/// full set fit in a head. Lowest frequencies are kept first; the survivors
/// stay in component-major order.
pub fn rope_pair_layout(n_frequencies: usize, pairs: usize) -> Result<Vec<(usize, usize)>> {
    let available = ANCHOR_DIMS * n_frequencies;
    if pairs > available {
        return Err(TokenizerError::TooManyPairs { pairs, available });
    }
    let mut by_freq: Vec<(usize, usize)> = (0..n_frequencies)
        .flat_map(|f| (0..ANCHOR_DIMS).map(move |c| (c, f)))
        .take(pairs)
        .collect();
    by_freq.sort_unstable();
    Ok(by_freq)
}

/// Per-token rotation angles for a fixed head layout.
#[derive(Clone, Debug)]
pub struct RopeTable {
    frequencies: Vec<f64>,
    layout: Vec<(usize, usize)>,
    head_dim: usize,
    tokens: usize,
    sin: Vec<f64>,
    cos: Vec<f64>,
}

impl RopeTable {
    pub fn new(
        anchors: &[Anchor],
        frequencies: &[f64],
        pairs: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if 2 * pairs > head_dim {
            return Err(TokenizerError::HeadDimTooSmall { head_dim, pairs });
        }
        let layout = rope_pair_layout(frequencies.len(), pairs)?;
        let mut sin = Vec::with_capacity(anchors.len() * pairs);
        let mut cos = Vec::with_capacity(anchors.len() * pairs);
        for a in anchors {
            for &(c, f) in &layout {
                let (s, co) = (a[c] * frequencies[f]).sin_cos();
                sin.push(s);
                cos.push(co);
            }
        }
        Ok(RopeTable {
            frequencies: frequencies.to_vec(),
            layout,
            head_dim,
            tokens: anchors.len(),
            sin,
            cos,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn layout(&self) -> &[(usize, usize)] {
        &self.layout
    }

    pub fn pairs(&self) -> usize {
        self.layout.len()
    }

    pub fn rotated_dims(&self) -> usize {
        2 * self.layout.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn sin_cos(&self, token: usize, pair: usize) -> (f64, f64) {
        let i = token * self.layout.len() + pair;
        (self.sin[i], self.cos[i])
    }

    pub fn rotation<R: Real>(&self) -> Arc<RotationTable<R>> {
        let cast = |v: &[f64]| v.iter().map(|&x| R::of(x)).collect();
        Arc::new(
            RotationTable::new(
                self.tokens,
                self.layout.len(),
                cast(&self.sin),
                cast(&self.cos),
            )
            .expect("table sizes are consistent by construction"),
        )
    }
}

/// Rotates the leading `2 * pairs` coefficients of every head row of an
/// `[heads, tokens, head_dim]` tensor; the remaining coefficients pass through.
pub fn apply_rope<R: Real>(x: &Tensor<R>, table: &RopeTable) -> Result<Tensor<R>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != table.tokens || s[2] != table.head_dim {
        return Err(TensorError::Shape {
            op: "apply_rope",
            lhs: s.to_vec(),
            rhs: vec![table.tokens, table.head_dim],
        }
        .into());
    }
    let mut out = x.clone();
    table
        .rotation::<R>()
        .rotate(out.data_mut(), s[0], s[2], false);
    Ok(out)
}

/// Sin/cos encoding of the nine normal components at every frequency:
/// component-major, then frequency, then (sin, cos).
pub fn normal_encoding(normals: &[Vec3; 3], frequencies: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ANCHOR_DIMS * frequencies.len() * 2);
    for n in normals {
        for c in n.to_array() {
            for &f in frequencies {
                let (s, co) = (c * f).sin_cos();
                out.push(s);
                out.push(co);
            }
        }
    }
    out
}

pub fn normal_features(n_frequencies: usize) -> usize {
    ANCHOR_DIMS * n_frequencies * 2
}

/// Material channels in stacking order. Emission is compressed with
/// `ln(1 + e)` since its range spans several orders of magnitude.
pub fn material_features(m: &Material) -> [f64; MATERIAL_FEATURES] {
    let mut s = m.stack();
    for e in &mut s[7..] {
        *e = e.ln_1p();
    }
    s
}

/// One `rms_norm(x w + b) * gain` projection into model width.
#[derive(Clone, Copy, Debug)]
pub struct EmbedLayer {
    pub weight: Var,
    pub bias: Var,
    pub gain: Var,
}

impl EmbedLayer {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let y = tensor::linear(tape, x, self.weight, Some(self.bias))?;
        Ok(tensor::rms_norm(tape, y, self.gain)?)
    }
}

/// Raw per-triangle inputs: `[T, normal_features]` and `[T, 10]`.
#[derive(Clone, Debug)]
pub struct TriangleFeatures<R> {
    pub normals: Tensor<R>,
    pub materials: Tensor<R>,
}

pub fn triangle_features<R: Real>(
    triangles: &[Triangle],
    frequencies: &[f64],
) -> TriangleFeatures<R> {
    let nf = normal_features(frequencies.len());
    let mut normals = Vec::with_capacity(triangles.len() * nf);
    let mut materials = Vec::with_capacity(triangles.len() * MATERIAL_FEATURES);
    for t in triangles {
        normals.extend(
            normal_encoding(&t.normals, frequencies)
                .into_iter()
                .map(R::of),
        );
        materials.extend(material_features(&t.material).into_iter().map(R::of));
    }
    TriangleFeatures {
        normals: Tensor::new(vec![triangles.len(), nf], normals).expect("feature length"),
        materials: Tensor::new(vec![triangles.len(), MATERIAL_FEATURES], materials)
            .expect("feature length"),
    }
}

/// Triangle tokens `[T, d]`: normal embedding plus material embedding.
pub fn embed_triangles<R: Real>(
    tape: &mut Tape<R>,
    features: &TriangleFeatures<R>,
    normal_layer: &EmbedLayer,
    material_layer: &EmbedLayer,
) -> Result<Var> {
    let n = tape.constant(features.normals.clone());
    let m = tape.constant(features.materials.clone());
    let n = normal_layer.forward(tape, n)?;
    let m = material_layer.forward(tape, m)?;
    Ok(tape.add(n, m)?)
}

/// Anchor of a triangle: its three vertices concatenated.
pub fn triangle_anchor(t: &Triangle) -> Anchor {
    t.anchor()
}

/// Shared anchor of all register tokens: the mean vertex, tiled three times.
pub fn register_anchor(scene: &Scene) -> Result<Anchor> {
    if scene.triangles.is_empty() {
        return Err(TokenizerError::EmptyScene);
    }
    let m = scene.mean_vertex().to_array();
    let mut a = [0.0; ANCHOR_DIMS];
    for k in 0..3 {
        a[3 * k..3 * k + 3].copy_from_slice(&m);
    }
    Ok(a)
}

/// Token matrix plus the anchors consumed by the rotary encoding.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub anchors: Vec<Anchor>,
    pub is_register: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn triangle_count(&self) -> usize {
        self.is_register.iter().filter(|r| !**r).count()
    }
}

/// Appends the learned `[count, d]` register matrix after the triangle tokens.
pub fn make_register_tokens<R: Real>(
    tape: &mut Tape<R>,
    scene: &Scene,
    triangle_tokens: Var,
    registers: Var,
) -> Result<TokenSequence> {
    let anchor = register_anchor(scene)?;
    let count = tape.shape(registers)[0];
    let tokens = tape.concat_rows(&[triangle_tokens, registers])?;
    let mut anchors: Vec<Anchor> = scene.triangles.iter().map(triangle_anchor).collect();
    let mut is_register = vec![false; anchors.len()];
    anchors.extend(std::iter::repeat_n(anchor, count));
    is_register.extend(std::iter::repeat_n(true, count));
    Ok(TokenSequence {
        tokens,
        anchors,
        is_register,
    })
}

/// Ray directions grouped by 8x8 output patch, in camera space.
#[derive(Clone, Debug)]
pub struct RayBundleGrid {
    pub rows: usize,
    pub cols: usize,
    /// `rows * cols * 192` values: per bundle, its 64 rays in row-major
    /// pixel order with `(x, y, z)` interleaved.
    pub directions: Vec<f64>,
}

impl RayBundleGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bundle(&self, index: usize) -> &[f64] {
        &self.directions[index * RAY_FEATURES..][..RAY_FEATURES]
    }

    pub fn features<R: Real>(&self) -> Tensor<R> {
        Tensor::new(
            vec![self.len(), RAY_FEATURES],
            self.directions.iter().map(|&v| R::of(v)).collect(),
        )
        .expect("grid length")
    }
}

pub fn ray_bundles(camera: &Camera) -> Result<RayBundleGrid> {
    if !camera.width.is_multiple_of(PATCH)
        || !camera.height.is_multiple_of(PATCH)
        || camera.width == 0
        || camera.height == 0
    {
        return Err(TokenizerError::Resolution(camera.width, camera.height));
    }
    let p = PATCH as usize;
    let rows = camera.height as usize / p;
    let cols = camera.width as usize / p;
    let mut directions = Vec::with_capacity(rows * cols * RAY_FEATURES);
    for br in 0..rows {
        for bc in 0..cols {
            for py in 0..p {
                for px in 0..p {
                    let x = (bc * p + px) as f64 + 0.5;
                    let y = (br * p + py) as f64 + 0.5;
                    directions.extend(camera.camera_ray(x, y).to_array());
                }
            }
        }
    }
    Ok(RayBundleGrid {
        rows,
        cols,
        directions,
    })
}

/// Ray-bundle tokens `[bundles, d]`.
pub fn embed_ray_bundles<R: Real>(
    tape: &mut Tape<R>,
    grid: &RayBundleGrid,
    layer: &EmbedLayer,
) -> Result<Var> {
    let x = tape.constant(grid.features());
    layer.forward(tape, x)
}
