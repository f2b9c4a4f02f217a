//! Lambertian plus GGX microfacet reflectance.
//!
//! `alpha = roughness` (no squaring), Smith height-correlated masking and
//! Schlick Fresnel. F0 is the specular albedo; the grazing value is
//! `min(1, 50 F0) * (1 - diffuse)` per channel, which keeps zero specular
//! purely Lambertian and bounds the total albedo by one.

use std::f64::consts::PI;

use crate::scene::{Material, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrdfParams {
    pub diffuse: Vec3,
    pub specular: Vec3,
    pub roughness: f64,
}

impl From<&Material> for BrdfParams {
    fn from(m: &Material) -> Self {
        BrdfParams {
            diffuse: m.diffuse.into(),
            specular: m.specular.into(),
            roughness: m.roughness,
        }
    }
}

impl BrdfParams {
    pub fn is_black(&self) -> bool {
        self.diffuse.max_elem() <= 0.0 && self.specular.max_elem() <= 0.0
    }

    fn f90(&self) -> Vec3 {
        let c = |f0: f64, d: f64| (50.0 * f0).min(1.0) * (1.0 - d);
        Vec3::new(
            c(self.specular.x, self.diffuse.x),
            c(self.specular.y, self.diffuse.y),
            c(self.specular.z, self.diffuse.z),
        )
    }

    fn fresnel(&self, cos: f64) -> Vec3 {
        let w = (1.0 - cos).clamp(0.0, 1.0).powi(5);
        self.specular + (self.f90() - self.specular) * w
    }

    /// Probability of picking the specular lobe when sampling.
    fn specular_weight(&self) -> f64 {
        let lum = |v: Vec3| 0.2126 * v.x + 0.7152 * v.y + 0.0722 * v.z;
        let (d, s) = (
            lum(self.diffuse),
            lum(self.specular).max(lum(self.f90()) * 0.25),
        );
        if s <= 0.0 {
            0.0
        } else if d <= 0.0 {
            1.0
        } else {
            (s / (s + d)).clamp(0.1, 0.9)
        }
    }
}

pub fn ggx_d(cos_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

fn smith_lambda(cos: f64, alpha: f64) -> f64 {
    let c2 = cos * cos;
    let tan2 = (1.0 - c2).max(0.0) / c2;
    0.5 * (-1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

/// Height-correlated masking-shadowing.
pub fn smith_g2(cos_i: f64, cos_o: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + smith_lambda(cos_i, alpha) + smith_lambda(cos_o, alpha))
}

pub fn smith_g1(cos: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + smith_lambda(cos, alpha))
}

/// Reflectance `f(wi, wo)` in 1/sr; zero when either direction is below
/// the horizon of `n`.
pub fn ggx_brdf(wi: Vec3, wo: Vec3, n: Vec3, p: &BrdfParams) -> Vec3 {
    let (ci, co) = (wi.dot(n), wo.dot(n));
    if ci <= 0.0 || co <= 0.0 {
        return Vec3::ZERO;
    }
    let mut f = p.diffuse / PI;
    if p.specular.max_elem() > 0.0 {
        let h = (wi + wo).normalize();
        let d = ggx_d(h.dot(n).max(0.0), p.roughness);
        let g = smith_g2(ci, co, p.roughness);
        let fr = p.fresnel(wi.dot(h));
        f += fr * (d * g / (4.0 * ci * co));
    }
    f
}

/// Density of [`sample_brdf`] for `wi` given `wo`, in 1/sr.
pub fn brdf_pdf(wi: Vec3, wo: Vec3, n: Vec3, p: &BrdfParams) -> f64 {
    let (ci, co) = (wi.dot(n), wo.dot(n));
    if ci <= 0.0 || co <= 0.0 {
        return 0.0;
    }
    let ps = p.specular_weight();
    let mut pdf = (1.0 - ps) * ci / PI;
    if ps > 0.0 {
        let h = (wi + wo).normalize();
        let d = ggx_d(h.dot(n).max(0.0), p.roughness);
        pdf += ps * smith_g1(co, p.roughness) * d / (4.0 * co);
    }
    pdf
}

/// Cosine-weighted direction about `n` from two uniforms.
pub fn sample_cosine(n: Vec3, u1: f64, u2: f64) -> Vec3 {
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let (t, b) = n.frame();
    (t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u1).max(0.0).sqrt()).normalize()
}

/// Visible-normal GGX sample of a half vector in the local frame where the
/// normal is +z.
fn sample_vndf(wo: Vec3, alpha: f64, u1: f64, u2: f64) -> Vec3 {
    let vh = Vec3::new(alpha * wo.x, alpha * wo.y, wo.z).normalize();
    let lensq = vh.x * vh.x + vh.y * vh.y;
    let t1 = if lensq > 0.0 {
        Vec3::new(-vh.y, vh.x, 0.0) / lensq.sqrt()
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let t2 = vh.cross(t1);
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let p1 = r * phi.cos();
    let s = 0.5 * (1.0 + vh.z);
    let p2 = (1.0 - s) * (1.0 - p1 * p1).max(0.0).sqrt() + s * r * phi.sin();
    let nh = t1 * p1 + t2 * p2 + vh * (1.0 - p1 * p1 - p2 * p2).max(0.0).sqrt();
    Vec3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize()
}

/// Samples `wi` from the diffuse/specular mixture. Returns `None` when the
/// sample falls below the horizon.
pub fn sample_brdf(wo: Vec3, n: Vec3, p: &BrdfParams, u: [f64; 3]) -> Option<Vec3> {
    let ps = p.specular_weight();
    let wi = if u[0] < ps {
        let (t, b) = n.frame();
        let local = Vec3::new(wo.dot(t), wo.dot(b), wo.dot(n));
        let h = sample_vndf(local, p.roughness, u[1], u[2]);
        let h = t * h.x + b * h.y + n * h.z;
        h * (2.0 * wo.dot(h)) - wo
    } else {
        sample_cosine(n, u[1], u[2])
    };
    (wi.dot(n) > 0.0).then_some(wi)
}
