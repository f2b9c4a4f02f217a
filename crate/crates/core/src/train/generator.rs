//! Random training scenes: primitives dropped into one of four wall
//! templates, lit by small emissive triangles.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::scene::{Camera, Mat3, Material, Scene, Triangle, Vec3, MAX_ROUGHNESS, MIN_ROUGHNESS};

pub const TEMPLATE_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Template ids to draw from: 0 ground, 1 ground + back wall,
    /// 2 adds a left wall, 3 adds both side walls.
    pub templates: Vec<usize>,
    pub objects: [usize; 2],
    pub lights: [usize; 2],
    /// Radiant exitance of each light, W/unit^2.
    pub light_intensity: [f64; 2],
    pub camera_distance: [f64; 2],
    pub light_distance: [f64; 2],
    pub fov_deg: [f64; 2],
    pub roughness: [f64; 2],
    /// Range of `max(diffuse) + specular`.
    pub albedo_sum: [f64; 2],
    /// Probability that an object gets one material per triangle.
    pub per_triangle_ratio: f64,
    /// Probability that an object uses per-vertex normals.
    pub smooth_ratio: f64,
    /// Edge length of the equilateral light triangles.
    pub light_size: f64,
    pub max_triangles: usize,
    pub resolution: [u32; 2],
    pub views: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            templates: (0..TEMPLATE_COUNT).collect(),
            objects: [1, 3],
            lights: [1, 8],
            light_intensity: [2500.0, 5000.0],
            camera_distance: [1.5, 2.0],
            light_distance: [2.1, 2.7],
            fov_deg: [30.0, 60.0],
            roughness: [0.01, 1.0],
            albedo_sum: [0.9, 1.0],
            per_triangle_ratio: 0.5,
            smooth_ratio: 0.5,
            light_size: 0.18,
            max_triangles: 64,
            resolution: [32, 32],
            views: 4,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] || r[0] < lo || r[1] > hi {
        return Err(TrainError::Config(format!(
            "{name} range [{}, {}] must be ordered and within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.templates.is_empty() || self.templates.iter().any(|&t| t >= TEMPLATE_COUNT) {
            return fail(format!(
                "templates must be a nonempty subset of 0..{TEMPLATE_COUNT}"
            ));
        }
        if self.objects[0] > self.objects[1] {
            return fail(format!(
                "objects range [{}, {}] is reversed",
                self.objects[0], self.objects[1]
            ));
        }
        if self.lights[0] == 0 || self.lights[0] > self.lights[1] {
            return fail(format!(
                "lights range [{}, {}] must be ordered and start at 1 or more",
                self.lights[0], self.lights[1]
            ));
        }
        check_range("light_intensity", self.light_intensity, 0.0, f64::MAX)?;
        check_range("camera_distance", self.camera_distance, 1.0, f64::MAX)?;
        check_range("light_distance", self.light_distance, 1.0, f64::MAX)?;
        check_range("fov_deg", self.fov_deg, 1.0, 170.0)?;
        check_range("roughness", self.roughness, MIN_ROUGHNESS, MAX_ROUGHNESS)?;
        check_range("albedo_sum", self.albedo_sum, 0.0, 1.0)?;
        for (name, p) in [
            ("per_triangle_ratio", self.per_triangle_ratio),
            ("smooth_ratio", self.smooth_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.light_size > 0.0 && self.light_size < 1.0) {
            return fail(format!("light_size {} outside (0, 1)", self.light_size));
        }
        let min_tris = 2 + self.lights[1] + 2 * self.objects[1];
        if self.max_triangles < min_tris {
            return fail(format!(
                "max_triangles {} cannot fit the largest template, lights and objects ({min_tris})",
                self.max_triangles
            ));
        }
        let [w, h] = self.resolution;
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
            return fail(format!(
                "resolution {w}x{h} must be a positive multiple of 8"
            ));
        }
        if self.views == 0 {
            return fail("views must be at least 1".into());
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    uniform(rng, [r[0].ln(), r[1].ln()]).exp().clamp(r[0], r[1])
}

/// Diffuse color scaled so its largest channel plus the grey specular
/// albedo lands in `albedo_sum`.
pub fn sample_material<R: Rng + ?Sized>(rng: &mut R, gen: &GenConfig) -> Material {
    let total = uniform(rng, gen.albedo_sum);
    let specular = total * rng.random::<f64>();
    let color = [
        rng.random::<f64>(),
        rng.random::<f64>(),
        rng.random::<f64>(),
    ];
    let peak = color.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let scale = (total - specular) / peak;
    let mut diffuse = color.map(|c| c * scale);
    // put the exact peak back so rounding cannot leave the range
    let i = (0..3)
        .max_by(|&a, &b| color[a].total_cmp(&color[b]))
        .unwrap_or(0);
    diffuse[i] = total - specular;
    Material {
        diffuse,
        specular: [specular; 3],
        roughness: log_uniform(rng, gen.roughness),
        emission: [0.0; 3],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Cube,
    Icosphere,
    Pedestal,
    Plane,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Cube,
        Primitive::Icosphere,
        Primitive::Pedestal,
        Primitive::Plane,
    ];

    /// Triangles of the unit-sized primitive centered at the origin, each with
    /// smooth vertex normals.
    pub fn mesh(self) -> Vec<([Vec3; 3], [Vec3; 3])> {
        let faces: Vec<[Vec3; 3]> = match self {
            Primitive::Cube => {
                let c = |i: usize| {
                    Vec3::new(
                        if i & 1 == 0 { -0.5 } else { 0.5 },
                        if i & 2 == 0 { -0.5 } else { 0.5 },
                        if i & 4 == 0 { -0.5 } else { 0.5 },
                    )
                };
                let quads = [
                    [0, 1, 3, 2],
                    [4, 5, 7, 6],
                    [0, 1, 5, 4],
                    [2, 3, 7, 6],
                    [0, 2, 6, 4],
                    [1, 3, 7, 5],
                ];
                quads
                    .iter()
                    .flat_map(|q| [[c(q[0]), c(q[1]), c(q[2])], [c(q[0]), c(q[2]), c(q[3])]])
                    .collect()
            }
            Primitive::Icosphere => {
                let t = (1.0 + 5f64.sqrt()) / 2.0;
                let raw = [
                    (-1.0, t, 0.0),
                    (1.0, t, 0.0),
                    (-1.0, -t, 0.0),
                    (1.0, -t, 0.0),
                    (0.0, -1.0, t),
                    (0.0, 1.0, t),
                    (0.0, -1.0, -t),
                    (0.0, 1.0, -t),
                    (t, 0.0, -1.0),
                    (t, 0.0, 1.0),
                    (-t, 0.0, -1.0),
                    (-t, 0.0, 1.0),
                ];
                let v: Vec<Vec3> = raw
                    .iter()
                    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize() * 0.5)
                    .collect();
                let idx = [
                    [0, 11, 5],
                    [0, 5, 1],
                    [0, 1, 7],
                    [0, 7, 10],
                    [0, 10, 11],
                    [1, 5, 9],
                    [5, 11, 4],
                    [11, 10, 2],
                    [10, 7, 6],
                    [7, 1, 8],
                    [3, 9, 4],
                    [3, 4, 2],
                    [3, 2, 6],
                    [3, 6, 8],
                    [3, 8, 9],
                    [4, 9, 5],
                    [2, 4, 11],
                    [6, 2, 10],
                    [8, 6, 7],
                    [9, 8, 1],
                ];
                idx.iter().map(|f| f.map(|i| v[i])).collect()
            }
            Primitive::Pedestal => {
                let ring = |y: f64| -> Vec<Vec3> {
                    (0..6)
                        .map(|k| {
                            let a = TAU * k as f64 / 6.0;
                            Vec3::new(0.5 * a.cos(), y, 0.5 * a.sin())
                        })
                        .collect()
                };
                let (lo, hi) = (ring(-0.5), ring(0.5));
                let mut f = Vec::new();
                for k in 0..6 {
                    let n = (k + 1) % 6;
                    f.push([lo[k], lo[n], hi[n]]);
                    f.push([lo[k], hi[n], hi[k]]);
                }
                for k in 1..5 {
                    f.push([lo[0], lo[k], lo[k + 1]]);
                    f.push([hi[0], hi[k], hi[k + 1]]);
                }
                f
            }
            Primitive::Plane => vec![
                [
                    Vec3::new(-0.5, 0.0, -0.5),
                    Vec3::new(0.5, 0.0, -0.5),
                    Vec3::new(0.5, 0.0, 0.5),
                ],
                [
                    Vec3::new(-0.5, 0.0, -0.5),
                    Vec3::new(0.5, 0.0, 0.5),
                    Vec3::new(-0.5, 0.0, 0.5),
                ],
            ],
        };
        faces
            .into_iter()
            .map(|mut f| {
                let n = (f[1] - f[0]).cross(f[2] - f[0]);
                let outward = match self {
                    Primitive::Plane => Vec3::new(0.0, 1.0, 0.0),
                    _ => (f[0] + f[1] + f[2]) / 3.0,
                };
                if n.dot(outward) < 0.0 {
                    f.swap(1, 2);
                }
                let normals = match self {
                    Primitive::Plane => [Vec3::new(0.0, 1.0, 0.0); 3],
                    _ => f.map(|v| v.normalize()),
                };
                (f, normals)
            })
            .collect()
    }

    pub fn triangle_count(self) -> usize {
        match self {
            Primitive::Cube => 12,
            Primitive::Icosphere | Primitive::Pedestal => 20,
            Primitive::Plane => 2,
        }
    }
}

/// One wall quad: corner, two edges, and inward normal.
#[derive(Clone, Copy, Debug)]
struct Wall {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Wall {
    fn normal(&self) -> Vec3 {
        self.u.cross(self.v).normalize()
    }

    fn triangles(&self) -> [[Vec3; 3]; 2] {
        let (o, u, v) = (self.origin, self.u, self.v);
        [[o, o + u, o + u + v], [o, o + u + v, o + v]]
    }
}

fn template_walls(id: usize) -> Vec<Wall> {
    let ground = Wall {
        origin: Vec3::new(-0.5, -0.5, 0.5),
        u: Vec3::new(1.0, 0.0, 0.0),
        v: Vec3::new(0.0, 0.0, -1.0),
    };
    let back = Wall {
        origin: Vec3::new(-0.5, -0.5, -0.5),
        u: Vec3::new(1.0, 0.0, 0.0),
        v: Vec3::new(0.0, 1.0, 0.0),
    };
    let left = Wall {
        origin: Vec3::new(-0.5, -0.5, 0.5),
        u: Vec3::new(0.0, 0.0, -1.0),
        v: Vec3::new(0.0, 1.0, 0.0),
    };
    let right = Wall {
        origin: Vec3::new(0.5, -0.5, -0.5),
        u: Vec3::new(0.0, 0.0, 1.0),
        v: Vec3::new(0.0, 1.0, 0.0),
    };
    match id {
        0 => vec![ground],
        1 => vec![ground, back],
        2 => vec![ground, back, left],
        _ => vec![ground, back, left, right],
    }
}

/// Planes (point, normal) that cameras and lights must stay in front of.
#[derive(Clone, Debug)]
pub struct Layout {
    planes: Vec<(Vec3, Vec3)>,
}

impl Layout {
    pub fn in_front(&self, p: Vec3, margin: f64) -> bool {
        self.planes.iter().all(|(o, n)| (p - *o).dot(*n) > margin)
    }
}

const MAX_TRIES: usize = 1000;

fn place_on_sphere<R: Rng + ?Sized>(
    rng: &mut R,
    layout: &Layout,
    dist: [f64; 2],
) -> Result<(Vec3, Vec3)> {
    for _ in 0..MAX_TRIES {
        let z = 2.0 * rng.random::<f64>() - 1.0;
        let phi = TAU * rng.random::<f64>();
        let r = (1.0 - z * z).sqrt();
        let dir = Vec3::new(r * phi.cos(), z, r * phi.sin());
        if dir.y.abs() > 0.98 {
            continue;
        }
        let pos = dir * uniform(rng, dist);
        if !layout.in_front(pos, 0.05) {
            continue;
        }
        let target = Vec3::new(
            uniform(rng, [-0.1, 0.1]),
            uniform(rng, [-0.1, 0.1]),
            uniform(rng, [-0.1, 0.1]),
        );
        return Ok((pos, target));
    }
    Err(TrainError::Placement(format!(
        "no unobstructed position at distance {:?} after {MAX_TRIES} tries",
        dist
    )))
}

/// A camera outside the walls, aimed near the scene center.
pub fn sample_camera<R: Rng + ?Sized>(
    rng: &mut R,
    gen: &GenConfig,
    layout: &Layout,
) -> Result<Camera> {
    let (pos, target) = place_on_sphere(rng, layout, gen.camera_distance)?;
    let fov = uniform(rng, gen.fov_deg);
    Ok(Camera::look_at(
        pos,
        target,
        Vec3::new(0.0, 1.0, 0.0),
        fov,
        gen.resolution[0],
        gen.resolution[1],
    )?)
}

fn sample_light<R: Rng + ?Sized>(
    rng: &mut R,
    gen: &GenConfig,
    layout: &Layout,
) -> Result<Triangle> {
    let (pos, target) = place_on_sphere(rng, layout, gen.light_distance)?;
    let n = (target - pos).normalize();
    let (a, b) = n.frame();
    let spin = TAU * rng.random::<f64>();
    let r = gen.light_size / 3f64.sqrt();
    let corner = |k: f64| {
        let t = spin + k * TAU / 3.0;
        pos + (a * t.cos() + b * t.sin()) * r
    };
    let mut v = [corner(0.0), corner(1.0), corner(2.0)];
    if (v[1] - v[0]).cross(v[2] - v[0]).dot(n) < 0.0 {
        v.swap(1, 2);
    }
    let radiance = uniform(rng, gen.light_intensity) / PI;
    Ok(Triangle::flat(v, Material::emitter([radiance; 3])))
}

/// Non-overlapping footprints `(center, scale)` on the ground square.
fn place_objects<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<(Vec3, f64)>> {
    for _ in 0..MAX_TRIES {
        let mut placed: Vec<(Vec3, f64)> = Vec::with_capacity(n);
        for _ in 0..n {
            let scale = uniform(rng, [0.15, 0.35]);
            let c = Vec3::new(uniform(rng, [-0.3, 0.3]), 0.0, uniform(rng, [-0.3, 0.3]));
            let fits = placed
                .iter()
                .all(|(p, s)| (*p - c).length() >= (s + scale) * std::f64::consts::FRAC_1_SQRT_2);
            if !fits {
                break;
            }
            placed.push((c, scale));
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(TrainError::Placement(format!(
        "{n} objects overlap after {MAX_TRIES} tries"
    )))
}

/// Draws one scene and its primary camera.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, gen: &GenConfig) -> Result<Scene> {
    let (scene, _) = sample_scene_views(rng, gen)?;
    Ok(scene)
}

/// Draws one scene plus `gen.views` cameras; the scene carries the first.
pub fn sample_scene_views<R: Rng + ?Sized>(
    rng: &mut R,
    gen: &GenConfig,
) -> Result<(Scene, Vec<Camera>)> {
    gen.validate()?;
    let template = gen.templates[rng.random_range(0..gen.templates.len())];
    let n_lights = rng.random_range(gen.lights[0]..=gen.lights[1]);

    // walls, jittered along their normals
    let mut walls = template_walls(template);
    for w in &mut walls {
        let n = w.normal();
        w.origin += n * uniform(rng, [-0.1, 0.1]);
    }
    let wall_tris = 2 * walls.len();
    let budget = gen.max_triangles.saturating_sub(wall_tris + n_lights);

    // objects
    let n_objects = rng.random_range(gen.objects[0]..=gen.objects[1]);
    let mut kinds = Vec::new();
    'pick: for _ in 0..MAX_TRIES {
        kinds = (0..n_objects)
            .map(|_| Primitive::ALL[rng.random_range(0..Primitive::ALL.len())])
            .collect();
        if kinds
            .iter()
            .map(|k: &Primitive| k.triangle_count())
            .sum::<usize>()
            <= budget
        {
            break 'pick;
        }
        kinds.clear();
    }
    if kinds.len() != n_objects {
        return Err(TrainError::Placement(format!(
            "{n_objects} objects do not fit in {budget} triangles"
        )));
    }

    let ground_y = walls[0].origin.y;
    let mut tris = Vec::new();
    for w in &walls {
        let m = sample_material(rng, gen);
        tris.extend(w.triangles().map(|v| Triangle::flat(v, m)));
    }
    let spots = place_objects(rng, kinds.len())?;
    for (kind, (center, scale)) in kinds.into_iter().zip(spots) {
        let mut rot = Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), TAU * rng.random::<f64>());
        if kind == Primitive::Plane {
            let tilt =
                Mat3::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), uniform(rng, [0.0, PI / 2.0]));
            rot = rot.mul_mat(&tilt);
        }
        let mesh = kind.mesh();
        let low = mesh
            .iter()
            .flat_map(|(f, _)| f.iter())
            .map(|v| rot.mul_vec(*v * scale).y)
            .fold(f64::INFINITY, f64::min);
        let shift = Vec3::new(center.x, ground_y - low + 1e-3, center.z);
        let per_triangle = rng.random::<f64>() < gen.per_triangle_ratio;
        let smooth = rng.random::<f64>() < gen.smooth_ratio;
        let shared = sample_material(rng, gen);
        for (f, normals) in mesh {
            let material = if per_triangle {
                sample_material(rng, gen)
            } else {
                shared
            };
            let mut t = Triangle::flat(f.map(|v| rot.mul_vec(v * scale) + shift), material);
            if smooth {
                t.normals = normals.map(|n| rot.mul_vec(n));
                t.flat_shaded = false;
            }
            tris.push(t);
        }
    }

    // random yaw and size for the whole arrangement, then normalize so the
    // bounding box is centered at the origin with unit largest side
    let yaw = Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), TAU * rng.random::<f64>());
    let size = uniform(rng, [0.8, 1.2]);
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for t in &mut tris {
        for v in &mut t.vertices {
            *v = yaw.mul_vec(*v * size);
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        for n in &mut t.normals {
            *n = yaw.mul_vec(*n);
        }
    }
    let center = (lo + hi) * 0.5;
    let extent = (hi - lo).max_elem();
    for t in &mut tris {
        for v in &mut t.vertices {
            *v = (*v - center) / extent;
        }
    }
    let planes = walls
        .iter()
        .map(|w| {
            (
                (yaw.mul_vec(w.origin * size) - center) / extent,
                yaw.mul_vec(w.normal()),
            )
        })
        .collect();
    let layout = Layout { planes };

    for _ in 0..n_lights {
        tris.push(sample_light(rng, gen, &layout)?);
    }
    let views = (0..gen.views)
        .map(|_| sample_camera(rng, gen, &layout))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        triangles: tris,
        camera: views[0],
    };
    scene.validate(gen.max_triangles)?;
    Ok((scene, views))
}

/// Uniformly random rotation about the origin, applied to geometry and camera.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    // Shoemake's method
    let (u1, u2, u3) = (
        rng.random::<f64>(),
        rng.random::<f64>(),
        rng.random::<f64>(),
    );
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Mat3::from_quaternion(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    )
}

pub fn rotate_augment<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<Scene> {
    Ok(scene.transform(&random_rotation(rng), Vec3::ZERO)?)
}
