use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::brdf::{brdf_pdf, sample_brdf, sample_cosine};
use super::*;
use crate::scene::{Camera, Material, Scene, Triangle, Vec3};

fn random_unit_upper(rng: &mut ChaCha8Rng) -> Vec3 {
    sample_cosine(Vec3::new(0.0, 0.0, 1.0), rng.random(), rng.random())
}

fn random_params(rng: &mut ChaCha8Rng) -> BrdfParams {
    let total = rng.random_range(0.0..1.0);
    let split: f64 = rng.random();
    let tint = |rng: &mut ChaCha8Rng| Vec3::new(rng.random(), rng.random(), rng.random());
    BrdfParams {
        diffuse: tint(rng) * (total * split),
        specular: tint(rng) * (total * (1.0 - split)),
        roughness: (0.01f64.ln() * rng.random::<f64>()).exp(),
    }
}

#[test]
fn zero_specular_is_lambertian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = BrdfParams {
        diffuse: Vec3::new(0.2, 0.5, 0.9),
        specular: Vec3::ZERO,
        roughness: 0.3,
    };
    let n = Vec3::new(0.0, 0.0, 1.0);
    for _ in 0..100 {
        let (wi, wo) = (random_unit_upper(&mut rng), random_unit_upper(&mut rng));
        let f = ggx_brdf(wi, wo, n, &p);
        assert!((f - p.diffuse / PI).length() < 1e-15);
    }
}

#[test]
fn below_horizon_is_zero() {
    let p = BrdfParams {
        diffuse: Vec3::splat(0.5),
        specular: Vec3::splat(0.4),
        roughness: 0.2,
    };
    let n = Vec3::new(0.0, 0.0, 1.0);
    let up = Vec3::new(0.0, 0.6, 0.8);
    assert_eq!(ggx_brdf(Vec3::new(0.0, 0.6, -0.8), up, n, &p), Vec3::ZERO);
    assert_eq!(ggx_brdf(up, Vec3::new(0.6, 0.0, -0.8), n, &p), Vec3::ZERO);
}

#[test]
fn ggx_distribution_is_normalized() {
    // projected-area normalization: integral of D(h) cos(h) over the hemisphere is 1
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for alpha in [0.3, 0.6, 1.0] {
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let cos: f64 = rng.random();
            acc += brdf::ggx_d(cos, alpha) * cos * 2.0 * PI;
        }
        assert!(
            (acc / n as f64 - 1.0).abs() < 0.02,
            "alpha {alpha}: {}",
            acc / n as f64
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn brdf_is_reciprocal(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let n = Vec3::new(0.0, 0.0, 1.0);
        let (wi, wo) = (random_unit_upper(&mut rng), random_unit_upper(&mut rng));
        let a = ggx_brdf(wi, wo, n, &p);
        let b = ggx_brdf(wo, wi, n, &p);
        prop_assert!((a - b).length() <= 1e-6 * (1.0 + a.length()));
    }
}

/// Importance-sampled directional albedo and its standard error.
fn albedo(p: &BrdfParams, wo: Vec3, samples: usize, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    let n = Vec3::new(0.0, 0.0, 1.0);
    let mut sum = Vec3::ZERO;
    let mut sq = Vec3::ZERO;
    for _ in 0..samples {
        let u = [rng.random(), rng.random(), rng.random()];
        if let Some(wi) = sample_brdf(wo, n, p, u) {
            let pdf = brdf_pdf(wi, wo, n, p);
            if pdf > 0.0 {
                let v = ggx_brdf(wi, wo, n, p) * (wi.z / pdf);
                sum += v;
                sq += v.mul_elem(v);
            }
        }
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sq / m - mean.mul_elem(mean)) / m;
    (mean, Vec3::new(var.x.sqrt(), var.y.sqrt(), var.z.sqrt()))
}

#[test]
fn albedo_is_bounded_by_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p = random_params(&mut rng);
        let wo = random_unit_upper(&mut rng);
        let (mean, se) = albedo(&p, wo, 50_000, &mut rng);
        for c in 0..3 {
            assert!(mean[c] <= 1.0 + 3.0 * se[c], "{p:?}: {mean:?} +- {se:?}");
        }
    }
}

#[test]
fn sampling_matches_cosine_estimator() {
    // the importance sampler and a plain cosine-weighted estimator agree
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = BrdfParams {
        diffuse: Vec3::splat(0.3),
        specular: Vec3::splat(0.5),
        roughness: 0.5,
    };
    let n = Vec3::new(0.0, 0.0, 1.0);
    let wo = Vec3::new(0.3, 0.1, 0.9).normalize();
    let (is, se) = albedo(&p, wo, 200_000, &mut rng);
    let samples = 200_000;
    let mut cos_est = 0.0;
    for _ in 0..samples {
        let wi = sample_cosine(n, rng.random(), rng.random());
        cos_est += ggx_brdf(wi, wo, n, &p).x * PI;
    }
    cos_est /= samples as f64;
    assert!(
        (is.x - cos_est).abs() < 5.0 * se.x + 5e-3,
        "{} vs {cos_est}",
        is.x
    );
}

#[test]
fn tone_map_examples() {
    assert_eq!(tone_map_value(1.0), 0.0);
    assert_eq!(tone_map_value(2.0), 1.0);
    assert_eq!(tone_map_value(4.0), 1.0);
    assert_eq!(tone_map_value(0.0), 0.0);
    assert!((tone_map_value(2f64.sqrt()) - 0.5).abs() < 1e-12);
}

fn constant_image(w: usize, h: usize, v: f32) -> HdrImage {
    HdrImage::from_pixels(w, h, vec![v; w * h * 3]).unwrap()
}

#[test]
fn psnr_examples() {
    let a = constant_image(4, 4, 0.7);
    assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
    assert_eq!(Psnr::Infinite.to_string(), "inf");
    let zero = constant_image(4, 4, 0.0);
    let peak = constant_image(4, 4, (1f64.exp() - 1.0) as f32);
    assert!(psnr(&zero, &peak).unwrap().value().abs() < 1e-6);
    assert!(psnr(&zero, &constant_image(4, 2, 0.0)).is_err());
}

#[test]
fn psnr_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut a = HdrImage::new(8, 8);
    let mut b = HdrImage::new(8, 8);
    for v in a.pixels.iter_mut().chain(b.pixels.iter_mut()) {
        *v = rng.random_range(0.0..20.0);
    }
    let mut se = 0.0;
    let mut peak: f64 = 0.0;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let (lx, ly) = ((1.0 + *x as f64).ln(), (1.0 + *y as f64).ln());
        se += (lx - ly).powi(2);
        peak = peak.max(lx).max(ly);
    }
    let expected = 10.0 * (peak * peak / (se / a.pixels.len() as f64)).log10();
    assert!((psnr(&a, &b).unwrap().value() - expected).abs() < 1e-6);
}

#[test]
fn composite_examples() {
    let a = constant_image(2, 2, 1.5);
    let b = constant_image(2, 2, 0.25);
    assert_eq!(
        composite_lights(std::slice::from_ref(&a), &[[1.0; 3]]).unwrap(),
        a
    );
    let sum = composite_lights(&[a.clone(), b.clone()], &[[1.0; 3], [1.0; 3]]).unwrap();
    assert!(sum.pixels.iter().all(|&v| v == 1.75));
    let black = composite_lights(&[a.clone(), b.clone()], &[[0.0; 3], [0.0; 3]]).unwrap();
    assert!(black.pixels.iter().all(|&v| v == 0.0));
    let tinted = composite_lights(std::slice::from_ref(&a), &[[1.0, 0.0, 2.0]]).unwrap();
    assert_eq!(tinted.get(1, 1), [1.5, 0.0, 3.0]);
    assert!(composite_lights(&[a, constant_image(2, 4, 1.0)], &[[1.0; 3], [1.0; 3]]).is_err());
}

#[test]
fn pfm_round_trip_and_layout() {
    let mut img = HdrImage::new(3, 2);
    for (i, v) in img.pixels.iter_mut().enumerate() {
        *v = i as f32 * 0.5;
    }
    let bytes = img.to_pfm_bytes();
    assert!(bytes.starts_with(b"PF\n3 2\n-1.0\n"));
    // the first stored scanline is the bottom row
    let raster = &bytes[12..];
    assert_eq!(
        f32::from_le_bytes(raster[..4].try_into().unwrap()),
        img.get(0, 1)[0]
    );
    let back = HdrImage::from_pfm_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, img);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pfm");
    img.write_pfm(&p).unwrap();
    assert_eq!(HdrImage::read_pfm(&p).unwrap(), img);
    assert!(HdrImage::from_pfm_bytes(b"P6\n1 1\n255\n", "x").is_err());
    assert!(HdrImage::from_pfm_bytes(&bytes[..bytes.len() - 1], "x").is_err());
}

#[test]
fn negative_or_nan_values_are_rejected() {
    assert!(HdrImage::from_pixels(1, 1, vec![0.0, -1.0, 0.0]).is_err());
    assert!(HdrImage::from_pixels(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    assert!(HdrImage::from_pixels(1, 2, vec![0.0; 3]).is_err());
}

#[test]
fn png_export_decodes() {
    let img = constant_image(8, 8, 1.5);
    let bytes = png_bytes(&img).unwrap();
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (8, 8));
    let expected = (1.5f64.log2() * 255.0).round() as u8;
    assert!(buf[..info.buffer_size()].iter().all(|&v| v == expected));
}

fn camera(pos: [f64; 3], target: [f64; 3], fov: f64, res: u32) -> Camera {
    Camera::look_at(
        pos.into(),
        target.into(),
        Vec3::new(0.0, 1.0, 0.0),
        fov,
        res,
        res,
    )
    .unwrap()
}

fn diffuse(albedo: f64) -> Material {
    Material {
        diffuse: [albedo; 3],
        specular: [0.0; 3],
        roughness: 1.0,
        emission: [0.0; 3],
    }
}

#[test]
fn no_emitters_is_an_error() {
    let tri = Triangle::flat(
        [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ],
        diffuse(0.5),
    );
    let s = Scene {
        triangles: vec![tri],
        camera: camera([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], 40.0, 8),
    };
    let err = path_trace(&s, &TraceConfig::new(1, 0)).unwrap_err();
    assert_eq!(err.to_string(), "scene has no emitters");
}

#[test]
fn empty_view_is_black() {
    let light = Triangle::flat(
        [
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(0.0, 1.0, 5.0),
            Vec3::new(1.0, 0.0, 5.0),
        ],
        Material::emitter([10.0; 3]),
    );
    let s = Scene {
        triangles: vec![light],
        camera: camera([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], 40.0, 8),
    };
    let out = path_trace(&s, &TraceConfig::new(4, 1)).unwrap();
    assert!(out.image.pixels.iter().all(|&v| v == 0.0));
}

#[test]
fn visible_emitter_gives_exact_radiance() {
    // large emitter facing the camera fills the view
    let light = Triangle::flat(
        [
            Vec3::new(-10.0, -10.0, -1.0),
            Vec3::new(10.0, -10.0, -1.0),
            Vec3::new(0.0, 10.0, -1.0),
        ],
        Material::emitter([3.0, 2.0, 1.0]),
    );
    let s = Scene {
        triangles: vec![light],
        camera: camera([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], 20.0, 8),
    };
    let out = path_trace(&s, &TraceConfig::new(3, 2)).unwrap();
    for p in out.image.pixels.chunks(3) {
        assert_eq!(p, [3.0, 2.0, 1.0]);
    }
    assert!(out.variance.iter().all(|&v| v == 0.0));
    // seen from behind it emits nothing
    let back = Scene {
        triangles: s.triangles.clone(),
        camera: camera([0.0, 0.0, -2.0], [0.0, 0.0, 0.0], 20.0, 8),
    };
    assert!(path_trace(&back, &TraceConfig::new(2, 2))
        .unwrap()
        .image
        .pixels
        .iter()
        .all(|&v| v == 0.0));
}

/// Irradiance at `x` (normal `n`) from a one-sided uniform triangle light of
/// unit radiance, by Lambert's edge-contour formula.
fn polygon_irradiance(x: Vec3, n: Vec3, verts: &[Vec3; 3]) -> f64 {
    let mut sum = 0.0;
    for i in 0..3 {
        let a = (verts[i] - x).normalize();
        let b = (verts[(i + 1) % 3] - x).normalize();
        let theta = a.dot(b).clamp(-1.0, 1.0).acos();
        let gamma = a.cross(b).normalize();
        sum += theta * gamma.dot(n);
    }
    0.5 * sum.abs()
}

#[test]
fn edge_formula_matches_small_source_limit() {
    let d = 50.0;
    let v = [
        Vec3::new(0.0, d, 0.0),
        Vec3::new(0.1, d, 0.0),
        Vec3::new(0.0, d, 0.1),
    ];
    let e = polygon_irradiance(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), &v);
    let approx = 0.005 / (d * d);
    assert!((e - approx).abs() / approx < 1e-3);
}

pub(crate) fn direct_light_scene(res: u32) -> (Scene, [Vec3; 3], f64, f64) {
    let albedo = 0.6;
    let emission = 40.0;
    let floor = [
        Triangle::flat(
            [
                Vec3::new(-3.0, 0.0, -3.0),
                Vec3::new(-3.0, 0.0, 3.0),
                Vec3::new(3.0, 0.0, 3.0),
            ],
            diffuse(albedo),
        ),
        Triangle::flat(
            [
                Vec3::new(-3.0, 0.0, -3.0),
                Vec3::new(3.0, 0.0, 3.0),
                Vec3::new(3.0, 0.0, -3.0),
            ],
            diffuse(albedo),
        ),
    ];
    // facing down (normal -y)
    let lv = [
        Vec3::new(-0.2, 1.0, -0.1),
        Vec3::new(0.25, 1.0, -0.15),
        Vec3::new(0.05, 1.0, 0.3),
    ];
    let light = Triangle::flat(lv, Material::emitter([emission; 3]));
    assert!(light.geometric_normal().y < 0.0);
    let s = Scene {
        triangles: vec![floor[0], floor[1], light],
        camera: camera([0.0, 0.5, 1.5], [0.1, 0.0, 0.0], 0.5, res),
    };
    (s, lv, albedo, emission)
}

#[test]
fn direct_lighting_matches_analytic_integral() {
    let (s, lv, albedo, emission) = direct_light_scene(8);
    // camera ray through the image center hits the floor at (0.1, 0, 0)
    let target = Vec3::new(0.1, 0.0, 0.0);
    let expected =
        albedo / PI * emission * polygon_irradiance(target, Vec3::new(0.0, 1.0, 0.0), &lv);
    let tracer = Tracer::new(&s).unwrap();
    let cfg = TraceConfig::new(2048, 11);
    let mut mean = [0.0; 3];
    for (px, py) in [(3, 3), (4, 3), (3, 4), (4, 4)] {
        let (m, _) = tracer.pixel(px, py, &cfg);
        for c in 0..3 {
            mean[c] += m[c] / 4.0;
        }
    }
    for m in mean {
        assert!((m - expected).abs() / expected < 0.02, "{m} vs {expected}");
    }
}

#[test]
fn trace_is_seed_deterministic() {
    let (s, ..) = direct_light_scene(8);
    let mut s = s;
    s.camera = camera([0.0, 1.5, 2.0], [0.0, 0.0, 0.0], 60.0, 8);
    let a = path_trace(&s, &TraceConfig::new(8, 3)).unwrap();
    let b = path_trace(&s, &TraceConfig::new(8, 3)).unwrap();
    let c = path_trace(&s, &TraceConfig::new(8, 4)).unwrap();
    assert_eq!(a.image.to_pfm_bytes(), b.image.to_pfm_bytes());
    assert_ne!(a.image.pixels, c.image.pixels);
    assert!(a.image.mean() > 0.0);
}

#[test]
fn sample_seeds_differ() {
    let mut seen = std::collections::HashSet::new();
    for p in 0..50 {
        for s in 0..50 {
            assert!(seen.insert(sample_seed(7, p, s)));
        }
    }
}

#[test]
fn bvh_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tris: Vec<Triangle> = (0..200)
        .map(|_| {
            let c = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let mut v = || {
                c + Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            };
            Triangle::flat([v(), v(), v()], diffuse(0.5))
        })
        .collect();
    let bvh = bvh::Bvh::build(&tris);
    for _ in 0..500 {
        let ray = bvh::Ray {
            origin: Vec3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                4.0,
            ),
            dir: Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                -1.0,
            )
            .normalize(),
        };
        let brute = tris
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                bvh::intersect_triangle(&ray, &t.vertices)
                    .filter(|h| h.0 > 1e-9)
                    .map(|h| (h.0, i))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let fast = bvh
            .intersect(&ray, 1e-9, f64::INFINITY)
            .map(|h| (h.t, h.triangle));
        assert_eq!(brute, fast);
    }
}
