//! Scene representation: triangles with materials, a pinhole camera, rigid
//! transforms, and the JSON/mesh file formats.
//!
//! Camera convention: right-handed, the camera looks down `-z` with `+y` up
//! in camera space, square pixels, and `fov_y` spanning the vertical extent.
//! Pixel row 0 is the top of the image.

mod io;
mod math;

pub use io::{
    load_scene, load_scene_view, parse_mesh, read_scene_file, save_scene, scene_from_file,
    scene_to_json, CameraEntry, MaterialEntry, MeshEntry, SceneFile, TransformEntry,
};
pub use math::{Mat3, Vec3};

use thiserror::Error;

/// Side length of the square pixel patch that one ray-bundle token covers.
pub const PATCH: u32 = 8;
pub const DEFAULT_MAX_TRIANGLES: usize = 4096;
pub const MIN_ROUGHNESS: f64 = 0.01;
pub const MAX_ROUGHNESS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
}

impl SceneError {
    pub fn is_validation(&self) -> bool {
        matches!(self, SceneError::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, SceneError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SceneError::Validation(msg.into()))
}

/// Ten-channel surface description: diffuse RGB, specular RGB, roughness,
/// emitted radiance RGB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    pub roughness: f64,
    pub emission: [f64; 3],
}

impl Default for Material {
    fn default() -> Self {
        Material {
            diffuse: [0.5; 3],
            specular: [0.0; 3],
            roughness: 0.5,
            emission: [0.0; 3],
        }
    }
}

impl Material {
    pub const CHANNELS: usize = 10;

    pub fn emitter(radiance: [f64; 3]) -> Self {
        Material {
            diffuse: [0.0; 3],
            specular: [0.0; 3],
            roughness: 1.0,
            emission: radiance,
        }
    }

    /// Channels in the fixed order (diffuse, specular, roughness, emission).
    pub fn stack(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..3].copy_from_slice(&self.diffuse);
        out[3..6].copy_from_slice(&self.specular);
        out[6] = self.roughness;
        out[7..].copy_from_slice(&self.emission);
        out
    }

    pub fn is_emissive(&self) -> bool {
        self.emission.iter().any(|&e| e > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: &[f64; 3]| v.iter().all(|c| (0.0..=1.0).contains(c));
        if !unit(&self.diffuse) {
            return invalid(format!("diffuse albedo {:?} outside [0, 1]", self.diffuse));
        }
        if !unit(&self.specular) {
            return invalid(format!(
                "specular albedo {:?} outside [0, 1]",
                self.specular
            ));
        }
        if !(MIN_ROUGHNESS..=MAX_ROUGHNESS).contains(&self.roughness) {
            return invalid(format!("roughness {} outside [0.01, 1]", self.roughness));
        }
        if !self.emission.iter().all(|e| e.is_finite() && *e >= 0.0) {
            return invalid(format!(
                "emission {:?} must be finite and >= 0",
                self.emission
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub normals: [Vec3; 3],
    pub material: Material,
    pub flat_shaded: bool,
}

impl Triangle {
    /// Unnormalized geometric normal, `(v1 - v0) x (v2 - v0)`.
    pub fn cross(&self) -> Vec3 {
        let [a, b, c] = self.vertices;
        (b - a).cross(c - a)
    }

    pub fn area(&self) -> f64 {
        0.5 * self.cross().length()
    }

    pub fn geometric_normal(&self) -> Vec3 {
        self.cross().normalize()
    }

    pub fn centroid(&self) -> Vec3 {
        (self.vertices[0] + self.vertices[1] + self.vertices[2]) / 3.0
    }

    /// Builds a flat-shaded triangle.
    pub fn flat(vertices: [Vec3; 3], material: Material) -> Self {
        let mut t = Triangle {
            vertices,
            normals: [Vec3::ZERO; 3],
            material,
            flat_shaded: true,
        };
        let n = t
            .cross()
            .try_normalize()
            .unwrap_or(Vec3::new(0.0, 0.0, 1.0));
        t.normals = [n; 3];
        t
    }

    /// Nine-component anchor: the three vertex positions concatenated.
    pub fn anchor(&self) -> [f64; 9] {
        let mut a = [0.0; 9];
        for (i, v) in self.vertices.iter().enumerate() {
            a[3 * i..3 * i + 3].copy_from_slice(&v.to_array());
        }
        a
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if !self.vertices.iter().all(|v| v.is_finite()) {
            return invalid(format!("triangle {index}: non-finite vertex"));
        }
        if self.area() <= 1e-12 {
            return invalid(format!(
                "degenerate triangle {index} (area {:e})",
                self.area()
            ));
        }
        for n in &self.normals {
            if !n.is_finite() || (n.length() - 1.0).abs() > 1e-4 {
                return invalid(format!("triangle {index}: normal {n:?} is not unit length"));
            }
        }
        self.material
            .validate()
            .map_err(|e| SceneError::Validation(format!("triangle {index}: {e}")))
    }
}

/// Pinhole camera. `orientation` maps world directions to camera space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub orientation: Mat3,
    pub fov_y_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize()
            .ok_or_else(|| SceneError::Validation("camera look_at equals position".into()))?;
        let right = forward.cross(up).try_normalize().ok_or_else(|| {
            SceneError::Validation("camera up is parallel to view direction".into())
        })?;
        let true_up = right.cross(forward);
        let cam = Camera {
            position,
            orientation: Mat3::from_rows(right, true_up, -forward),
            fov_y_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn forward(&self) -> Vec3 {
        -self.orientation.rows[2]
    }

    pub fn up(&self) -> Vec3 {
        self.orientation.rows[1]
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.orientation.mul_vec(p - self.position)
    }

    /// Unit camera-space direction through continuous pixel coordinates
    /// (`px` in `[0, width]`, `py` in `[0, height]`, row 0 at the top).
    pub fn camera_ray(&self, px: f64, py: f64) -> Vec3 {
        let tan = (self.fov_y_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = (2.0 * px / self.width as f64 - 1.0) * tan * aspect;
        let v = (1.0 - 2.0 * py / self.height as f64) * tan;
        Vec3::new(u, v, -1.0).normalize()
    }

    /// World-space direction through continuous pixel coordinates.
    pub fn world_ray(&self, px: f64, py: f64) -> Vec3 {
        self.orientation
            .transpose()
            .mul_vec(self.camera_ray(px, py))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.orientation.is_orthonormal(1e-5) {
            return invalid("camera orientation is not orthonormal");
        }
        if self.width == 0
            || self.height == 0
            || !self.width.is_multiple_of(PATCH)
            || !self.height.is_multiple_of(PATCH)
        {
            return invalid(format!(
                "resolution not divisible by 8: {}x{}",
                self.width, self.height
            ));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return invalid(format!("fov_y {} outside (0, 180)", self.fov_y_deg));
        }
        if !self.position.is_finite() {
            return invalid("camera position is not finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub triangles: Vec<Triangle>,
    pub camera: Camera,
}

impl Scene {
    pub fn validate(&self, max_triangles: usize) -> Result<()> {
        if self.triangles.is_empty() {
            return invalid("scene has no triangles");
        }
        if self.triangles.len() > max_triangles {
            return invalid(format!(
                "scene has {} triangles, maximum is {max_triangles}",
                self.triangles.len()
            ));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            t.validate(i)?;
        }
        self.camera.validate()
    }

    pub fn emitter_count(&self) -> usize {
        self.triangles
            .iter()
            .filter(|t| t.material.is_emissive())
            .count()
    }

    /// Average of all triangle vertices (each triangle contributes three).
    pub fn mean_vertex(&self) -> Vec3 {
        let mut sum = Vec3::ZERO;
        for t in &self.triangles {
            for v in &t.vertices {
                sum += *v;
            }
        }
        sum / (3 * self.triangles.len().max(1)) as f64
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        for t in &self.triangles {
            for v in &t.vertices {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        (lo, hi)
    }

    /// Applies `p -> R p + t` to geometry and camera so that camera-space
    /// content is unchanged.
    pub fn transform(&self, rotation: &Mat3, translation: Vec3) -> Result<Scene> {
        if !rotation.is_orthonormal(1e-5) {
            return invalid("rotation is not orthonormal");
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| Triangle {
                vertices: t.vertices.map(|v| rotation.mul_vec(v) + translation),
                normals: t.normals.map(|n| rotation.mul_vec(n)),
                ..*t
            })
            .collect();
        let camera = Camera {
            position: rotation.mul_vec(self.camera.position) + translation,
            orientation: self.camera.orientation.mul_mat(&rotation.transpose()),
            ..self.camera
        };
        Ok(Scene { triangles, camera })
    }

    /// Re-expresses the scene in the camera frame: the camera moves to the
    /// origin with identity orientation.
    pub fn to_camera_space(&self) -> Scene {
        let cam = &self.camera;
        let triangles = self
            .triangles
            .iter()
            .map(|t| Triangle {
                vertices: t.vertices.map(|v| cam.world_to_camera(v)),
                normals: t.normals.map(|n| cam.orientation.mul_vec(n)),
                ..*t
            })
            .collect();
        Scene {
            triangles,
            camera: Camera {
                position: Vec3::ZERO,
                orientation: Mat3::IDENTITY,
                ..*cam
            },
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
