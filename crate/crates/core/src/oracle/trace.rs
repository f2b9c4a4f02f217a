use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::brdf::{brdf_pdf, ggx_brdf, sample_brdf, BrdfParams};
use super::bvh::{Bvh, Ray};
use super::image::HdrImage;
use super::OracleError;
use crate::scene::{Scene, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceConfig {
    pub spp: u32,
    pub max_depth: u32,
    /// Path length after which Russian roulette starts.
    pub rr_depth: u32,
    pub seed: u64,
}

impl TraceConfig {
    pub fn new(spp: u32, seed: u64) -> Self {
        TraceConfig {
            spp,
            max_depth: 8,
            rr_depth: 3,
            seed,
        }
    }
}

/// Image plus the per-value variance of each pixel mean.
#[derive(Clone, Debug)]
pub struct TraceOutput {
    pub image: HdrImage,
    pub variance: Vec<f64>,
}

/// Everything the integrator needs, precomputed once per scene.
pub struct Tracer<'a> {
    scene: &'a Scene,
    bvh: Bvh,
    emitters: Vec<usize>,
    emitter_cdf: Vec<f64>,
    emitter_area: f64,
    eps: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream key for one (seed, pixel, sample) triple.
pub fn sample_seed(seed: u64, pixel: u64, sample: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ pixel) ^ sample)
}

fn power_heuristic(a: f64, b: f64) -> f64 {
    let (a2, b2) = (a * a, b * b);
    if a2 + b2 == 0.0 {
        0.0
    } else {
        a2 / (a2 + b2)
    }
}

struct Surface {
    point: Vec3,
    ng: Vec3,
    ns: Vec3,
}

impl<'a> Tracer<'a> {
    pub fn new(scene: &'a Scene) -> Result<Self, OracleError> {
        let emitters: Vec<usize> = (0..scene.triangles.len())
            .filter(|&i| scene.triangles[i].material.is_emissive())
            .collect();
        if emitters.is_empty() {
            return Err(OracleError::NoEmitters);
        }
        let mut emitter_cdf = Vec::with_capacity(emitters.len());
        let mut acc = 0.0;
        for &i in &emitters {
            acc += scene.triangles[i].area();
            emitter_cdf.push(acc);
        }
        let (lo, hi) = scene.bounds();
        let extent = (hi - lo)
            .max_elem()
            .max((scene.camera.position - lo).max_elem().abs());
        Ok(Tracer {
            scene,
            bvh: Bvh::build(&scene.triangles),
            emitters,
            emitter_cdf,
            emitter_area: acc,
            eps: 1e-9 * extent.max(1.0),
        })
    }

    fn surface(&self, tri: usize, u: f64, v: f64, point: Vec3) -> Surface {
        let t = &self.scene.triangles[tri];
        let ng = t.geometric_normal();
        let ns = if t.flat_shaded {
            ng
        } else {
            (t.normals[0] * (1.0 - u - v) + t.normals[1] * u + t.normals[2] * v)
                .try_normalize()
                .unwrap_or(ng)
        };
        Surface { point, ng, ns }
    }

    /// Emitted radiance leaving `s` toward `-dir`; lights emit on the side
    /// their shading normal faces.
    fn emitted(&self, tri: usize, s: &Surface, dir: Vec3) -> Vec3 {
        let m = &self.scene.triangles[tri].material;
        if s.ns.dot(dir) < 0.0 {
            Vec3::from(m.emission)
        } else {
            Vec3::ZERO
        }
    }

    /// Solid-angle density of light sampling for a point seen along `dir`
    /// at distance `dist` on a surface with geometric normal `ng`.
    fn light_pdf(&self, ng: Vec3, dir: Vec3, dist: f64) -> f64 {
        let cos = ng.dot(dir).abs();
        if cos <= 0.0 {
            return 0.0;
        }
        dist * dist / (cos * self.emitter_area)
    }

    fn offset(&self, s: &Surface, dir: Vec3) -> Vec3 {
        let side = if s.ng.dot(dir) >= 0.0 { 1.0 } else { -1.0 };
        s.point + s.ng * (side * self.eps * 1e3)
    }

    fn sample_light(&self, rng: &mut ChaCha8Rng) -> (usize, Vec3, f64, f64) {
        let x = rng.random::<f64>() * self.emitter_area;
        let k = self
            .emitter_cdf
            .partition_point(|&c| c <= x)
            .min(self.emitters.len() - 1);
        let tri = self.emitters[k];
        let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
        if a + b > 1.0 {
            a = 1.0 - a;
            b = 1.0 - b;
        }
        let v = self.scene.triangles[tri].vertices;
        let p = v[0] + (v[1] - v[0]) * a + (v[2] - v[0]) * b;
        (tri, p, a, b)
    }

    /// Radiance along one camera ray.
    pub fn radiance(&self, mut ray: Ray, cfg: &TraceConfig, rng: &mut ChaCha8Rng) -> Vec3 {
        let mut l = Vec3::ZERO;
        let mut throughput = Vec3::splat(1.0);
        let mut bsdf_pdf = 0.0;
        for depth in 0..cfg.max_depth {
            let Some(hit) = self.bvh.intersect(&ray, self.eps, f64::INFINITY) else {
                break;
            };
            let point = ray.origin + ray.dir * hit.t;
            let mut s = self.surface(hit.triangle, hit.u, hit.v, point);
            let tri = &self.scene.triangles[hit.triangle];
            if tri.material.is_emissive() {
                let le = self.emitted(hit.triangle, &s, ray.dir);
                if depth == 0 {
                    l += throughput.mul_elem(le);
                } else {
                    let pl = self.light_pdf(s.ng, ray.dir, hit.t);
                    l += throughput.mul_elem(le) * power_heuristic(bsdf_pdf, pl);
                }
            }
            let brdf = BrdfParams::from(&tri.material);
            if brdf.is_black() {
                break;
            }
            let wo = -ray.dir;
            if s.ng.dot(wo) < 0.0 {
                s.ng = -s.ng;
                s.ns = -s.ns;
            }
            if s.ns.dot(wo) <= 0.0 {
                break;
            }

            // next-event estimation
            let (ltri, lp, la, lb) = self.sample_light(rng);
            let to_light = lp - s.point;
            let dist = to_light.length();
            if dist > 0.0 {
                let wi = to_light / dist;
                if wi.dot(s.ng) > 0.0 && wi.dot(s.ns) > 0.0 {
                    let light = &self.scene.triangles[ltri];
                    let ls = self.surface(ltri, la, lb, lp);
                    let le = self.emitted(ltri, &ls, wi);
                    let pl = self.light_pdf(light.geometric_normal(), wi, dist);
                    if le.max_elem() > 0.0 && pl > 0.0 {
                        let origin = self.offset(&s, wi);
                        let reach = (lp - origin).length();
                        let shadow = Ray {
                            origin,
                            dir: (lp - origin) / reach,
                        };
                        if !self.bvh.occluded(&shadow, self.eps, reach * (1.0 - 1e-6)) {
                            let f = ggx_brdf(wi, wo, s.ns, &brdf);
                            let pb = brdf_pdf(wi, wo, s.ns, &brdf);
                            let w = power_heuristic(pl, pb);
                            l += throughput.mul_elem(f.mul_elem(le)) * (wi.dot(s.ns) * w / pl);
                        }
                    }
                }
            }

            // continue the path
            let u = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let Some(wi) = sample_brdf(wo, s.ns, &brdf, u) else {
                break;
            };
            if wi.dot(s.ng) <= 0.0 {
                break;
            }
            let pdf = brdf_pdf(wi, wo, s.ns, &brdf);
            if pdf <= 0.0 {
                break;
            }
            let f = ggx_brdf(wi, wo, s.ns, &brdf);
            throughput = throughput.mul_elem(f) * (wi.dot(s.ns) / pdf);
            bsdf_pdf = pdf;
            if depth + 1 >= cfg.rr_depth {
                let q = throughput.max_elem().min(0.95);
                if q <= 0.0 || rng.random::<f64>() >= q {
                    break;
                }
                throughput = throughput / q;
            }
            ray = Ray {
                origin: self.offset(&s, wi),
                dir: wi,
            };
        }
        l
    }

    /// Mean and variance-of-mean of one pixel.
    pub fn pixel(&self, px: usize, py: usize, cfg: &TraceConfig) -> ([f64; 3], [f64; 3]) {
        let cam = &self.scene.camera;
        let pixel_id = (py * cam.width as usize + px) as u64;
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for s in 0..cfg.spp {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, pixel_id, s as u64));
            let (jx, jy) = (rng.random::<f64>(), rng.random::<f64>());
            let dir = cam.world_ray(px as f64 + jx, py as f64 + jy);
            let l = self.radiance(
                Ray {
                    origin: cam.position,
                    dir,
                },
                cfg,
                &mut rng,
            );
            for c in 0..3 {
                sum[c] += l[c];
                sum_sq[c] += l[c] * l[c];
            }
        }
        let n = cfg.spp as f64;
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            var[c] = if cfg.spp > 1 {
                ((sum_sq[c] - n * mean[c] * mean[c]) / (n - 1.0)).max(0.0) / n
            } else {
                0.0
            };
        }
        (mean, var)
    }
}

/// Renders the scene's camera view. Pixels run in parallel; every sample
/// draws from its own keyed stream, so the result does not depend on the
/// thread count.
pub fn path_trace(scene: &Scene, cfg: &TraceConfig) -> Result<TraceOutput, OracleError> {
    if cfg.spp == 0 {
        return Err(OracleError::Config("spp must be at least 1".into()));
    }
    let tracer = Tracer::new(scene)?;
    let (w, h) = (scene.camera.width as usize, scene.camera.height as usize);
    let rows: Vec<Vec<([f64; 3], [f64; 3])>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| tracer.pixel(x, y, cfg)).collect())
        .collect();
    let mut pixels = Vec::with_capacity(w * h * 3);
    let mut variance = Vec::with_capacity(w * h * 3);
    for (mean, var) in rows.into_iter().flatten() {
        pixels.extend(mean.iter().map(|&v| v as f32));
        variance.extend(var);
    }
    let image =
        HdrImage::from_pixels(w, h, pixels).map_err(|e| OracleError::Numerical(e.to_string()))?;
    Ok(TraceOutput { image, variance })
}
