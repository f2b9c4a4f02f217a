//! Scene JSON wrapper and indexed-triangle mesh text files.
//!
//! Inline mesh indices in JSON are 0-based; `f` lines in mesh files are
//! 1-based as in OBJ.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    Camera, Mat3, Material, Result, Scene, SceneError, Triangle, Vec3, DEFAULT_MAX_TRIANGLES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialEntry {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    pub roughness: f64,
    pub emission: [f64; 3],
}

impl From<MaterialEntry> for Material {
    fn from(m: MaterialEntry) -> Self {
        Material {
            diffuse: m.diffuse,
            specular: m.specular,
            roughness: m.roughness,
            emission: m.emission,
        }
    }
}

impl From<Material> for MaterialEntry {
    fn from(m: Material) -> Self {
        MaterialEntry {
            diffuse: m.diffuse,
            specular: m.specular,
            roughness: m.roughness,
            emission: m.emission,
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformEntry {
    #[serde(default)]
    pub rotation: Mat3,
    #[serde(default)]
    pub translation: Vec3,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<[usize; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Vec<Vec3>>,
    pub material: MaterialEntry,
    /// Optional per-face override of `material`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_materials: Option<Vec<MaterialEntry>>,
    #[serde(default)]
    pub flat_shaded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_y_deg: f64,
    pub resolution: [u32; 2],
}

impl CameraEntry {
    pub fn to_camera(&self) -> Result<Camera> {
        Camera::look_at(
            self.position,
            self.look_at,
            self.up,
            self.fov_y_deg,
            self.resolution[0],
            self.resolution[1],
        )
    }
}

impl From<&Camera> for CameraEntry {
    fn from(c: &Camera) -> Self {
        CameraEntry {
            position: c.position,
            look_at: c.position + c.forward(),
            up: c.up(),
            fov_y_deg: c.fov_y_deg,
            resolution: [c.width, c.height],
        }
    }
}

/// Top-level scene document. `cameras`, when present, lists every view of
/// the scene; `camera` is then its first entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub meshes: Vec<MeshEntry>,
    pub camera: CameraEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<Vec<CameraEntry>>,
}

impl SceneFile {
    /// One inline mesh per run of consecutive triangles sharing material and
    /// shading mode; vertices are unshared so normals round-trip exactly.
    pub fn from_scene(scene: &Scene, views: &[Camera]) -> SceneFile {
        let mut meshes: Vec<MeshEntry> = Vec::new();
        let mut current: Option<(Material, bool)> = None;
        for t in &scene.triangles {
            let key = (t.material, t.flat_shaded);
            if current != Some(key) {
                meshes.push(MeshEntry {
                    file: None,
                    vertices: Some(Vec::new()),
                    indices: Some(Vec::new()),
                    normals: Some(Vec::new()),
                    material: t.material.into(),
                    face_materials: None,
                    flat_shaded: t.flat_shaded,
                    transform: None,
                });
                current = Some(key);
            }
            let m = meshes.last_mut().expect("mesh pushed above");
            let verts = m.vertices.as_mut().expect("inline vertices");
            let base = verts.len();
            verts.extend_from_slice(&t.vertices);
            m.normals
                .as_mut()
                .expect("inline normals")
                .extend_from_slice(&t.normals);
            m.indices
                .as_mut()
                .expect("inline indices")
                .push([base, base + 1, base + 2]);
        }
        SceneFile {
            meshes,
            camera: (&scene.camera).into(),
            cameras: if views.is_empty() {
                None
            } else {
                Some(views.iter().map(CameraEntry::from).collect())
            },
        }
    }

    pub fn views(&self) -> Vec<CameraEntry> {
        match &self.cameras {
            Some(c) if !c.is_empty() => c.clone(),
            _ => vec![self.camera.clone()],
        }
    }
}

pub struct ParsedMesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-corner normal indices when faces use `v//n` syntax.
    pub face_normals: Option<Vec<[usize; 3]>>,
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> SceneError {
    SceneError::Parse {
        path: path.to_string(),
        line,
        column: 0,
        message: message.into(),
    }
}

/// Parses `v`, `vn`, and `f` lines. Other OBJ statements are ignored.
pub fn parse_mesh(text: &str, path: &str) -> Result<ParsedMesh> {
    let mut mesh = ParsedMesh {
        positions: Vec::new(),
        normals: Vec::new(),
        faces: Vec::new(),
        face_normals: None,
    };
    let mut corner_normals: Vec<[usize; 3]> = Vec::new();
    let mut any_corner_normals = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let tag = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        match tag {
            "v" | "vn" => {
                if rest.len() != 3 {
                    return Err(parse_err(path, line, format!("`{tag}` needs 3 numbers")));
                }
                let mut xyz = [0.0; 3];
                for (i, s) in rest.iter().enumerate() {
                    xyz[i] = s
                        .parse()
                        .map_err(|_| parse_err(path, line, format!("bad number `{s}`")))?;
                }
                if tag == "v" {
                    mesh.positions.push(xyz.into());
                } else {
                    mesh.normals.push(xyz.into());
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(parse_err(path, line, "only triangular faces are supported"));
                }
                let mut vi = [0; 3];
                let mut ni = [usize::MAX; 3];
                for (i, corner) in rest.iter().enumerate() {
                    let fields: Vec<&str> = corner.split('/').collect();
                    let idx = |s: &str| -> Result<usize> {
                        let v: usize = s
                            .parse()
                            .map_err(|_| parse_err(path, line, format!("bad index `{s}`")))?;
                        if v == 0 {
                            return Err(parse_err(path, line, "indices are 1-based"));
                        }
                        Ok(v - 1)
                    };
                    vi[i] = idx(fields[0])?;
                    if fields.len() == 3 && !fields[2].is_empty() {
                        ni[i] = idx(fields[2])?;
                        any_corner_normals = true;
                    }
                }
                mesh.faces.push(vi);
                corner_normals.push(ni);
            }
            _ => {}
        }
    }
    for (i, f) in mesh.faces.iter().enumerate() {
        if f.iter().any(|&v| v >= mesh.positions.len()) {
            return Err(parse_err(
                path,
                0,
                format!("face {i} references a missing vertex"),
            ));
        }
    }
    if any_corner_normals {
        for (i, f) in corner_normals.iter().enumerate() {
            if f.iter().any(|&n| n >= mesh.normals.len()) {
                return Err(parse_err(
                    path,
                    0,
                    format!("face {i} references a missing normal"),
                ));
            }
        }
        mesh.face_normals = Some(corner_normals);
    }
    Ok(mesh)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn build_mesh(entry: &MeshEntry, base_dir: &Path, mesh_index: usize) -> Result<Vec<Triangle>> {
    let (positions, faces, corner_normals): (Vec<Vec3>, Vec<[usize; 3]>, Option<Vec<[Vec3; 3]>>) =
        match (&entry.file, &entry.vertices) {
            (Some(file), None) => {
                let p: PathBuf = base_dir.join(file);
                let text = read(&p)?;
                let parsed = parse_mesh(&text, &p.display().to_string())?;
                let corners = if let Some(fnorm) = &parsed.face_normals {
                    Some(fnorm.iter().map(|f| f.map(|i| parsed.normals[i])).collect())
                } else if !parsed.normals.is_empty()
                    && parsed.normals.len() == parsed.positions.len()
                {
                    Some(
                        parsed
                            .faces
                            .iter()
                            .map(|f| f.map(|i| parsed.normals[i]))
                            .collect(),
                    )
                } else {
                    None
                };
                (parsed.positions, parsed.faces, corners)
            }
            (None, Some(verts)) => {
                let faces = entry.indices.clone().ok_or_else(|| {
                    SceneError::Validation(format!(
                        "mesh {mesh_index}: inline vertices need indices"
                    ))
                })?;
                if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= verts.len())) {
                    return Err(SceneError::Validation(format!(
                        "mesh {mesh_index}: face {f:?} references a missing vertex"
                    )));
                }
                let corners = match &entry.normals {
                    Some(n) if n.len() == verts.len() => {
                        Some(faces.iter().map(|f| f.map(|i| n[i])).collect())
                    }
                    Some(n) => {
                        return Err(SceneError::Validation(format!(
                            "mesh {mesh_index}: {} normals for {} vertices",
                            n.len(),
                            verts.len()
                        )))
                    }
                    None => None,
                };
                (verts.clone(), faces, corners)
            }
            _ => {
                return Err(SceneError::Validation(format!(
                    "mesh {mesh_index}: exactly one of `file` or inline `vertices` is required"
                )))
            }
        };

    let (rot, trans, scale) = match &entry.transform {
        Some(t) => {
            if !t.rotation.is_orthonormal(1e-5) {
                return Err(SceneError::Validation(format!(
                    "mesh {mesh_index}: transform rotation is not orthonormal"
                )));
            }
            if !(t.scale > 0.0) {
                return Err(SceneError::Validation(format!(
                    "mesh {mesh_index}: scale must be > 0"
                )));
            }
            (t.rotation, t.translation, t.scale)
        }
        None => (Mat3::IDENTITY, Vec3::ZERO, 1.0),
    };
    let positions: Vec<Vec3> = positions
        .iter()
        .map(|p| rot.mul_vec(*p * scale) + trans)
        .collect();

    if let Some(fm) = &entry.face_materials {
        if fm.len() != faces.len() {
            return Err(SceneError::Validation(format!(
                "mesh {mesh_index}: {} face materials for {} faces",
                fm.len(),
                faces.len()
            )));
        }
    }

    // area-weighted vertex normals for meshes without supplied normals
    let smooth: Option<Vec<Vec3>> = if corner_normals.is_none() && !entry.flat_shaded {
        let mut acc = vec![Vec3::ZERO; positions.len()];
        for f in &faces {
            let c = (positions[f[1]] - positions[f[0]]).cross(positions[f[2]] - positions[f[0]]);
            for &i in f {
                acc[i] += c;
            }
        }
        Some(acc)
    } else {
        None
    };

    let mut out = Vec::with_capacity(faces.len());
    for (fi, f) in faces.iter().enumerate() {
        let material: Material = entry
            .face_materials
            .as_ref()
            .map(|fm| fm[fi].clone())
            .unwrap_or_else(|| entry.material.clone())
            .into();
        let mut tri = Triangle::flat(f.map(|i| positions[i]), material);
        tri.flat_shaded = entry.flat_shaded;
        if !entry.flat_shaded {
            let geometric = tri.normals[0];
            let candidates: [Vec3; 3] = match (&corner_normals, &smooth) {
                (Some(c), _) => c[fi].map(|n| rot.mul_vec(n)),
                (None, Some(s)) => f.map(|i| s[i]),
                (None, None) => [geometric; 3],
            };
            for (k, n) in candidates.iter().enumerate() {
                tri.normals[k] = match n.try_normalize() {
                    Some(u) => u,
                    None => {
                        log::warn!("mesh {mesh_index} face {fi}: zero-length normal replaced by geometric normal");
                        geometric
                    }
                };
            }
        }
        out.push(tri);
    }
    Ok(out)
}

fn json_error(path: &Path, e: serde_json::Error) -> SceneError {
    SceneError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses a scene document and selects one of its views.
pub fn scene_from_file(file: &SceneFile, base_dir: &Path, view: usize) -> Result<Scene> {
    let mut triangles = Vec::new();
    for (i, m) in file.meshes.iter().enumerate() {
        triangles.extend(build_mesh(m, base_dir, i)?);
    }
    let views = file.views();
    let entry = views.get(view).ok_or_else(|| {
        SceneError::Validation(format!("view {view} out of range ({} views)", views.len()))
    })?;
    let scene = Scene {
        triangles,
        camera: entry.to_camera()?,
    };
    scene.validate(DEFAULT_MAX_TRIANGLES)?;
    Ok(scene)
}

pub fn read_scene_file(path: &Path) -> Result<SceneFile> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| json_error(path, e))
}

/// Loads and validates a scene file using its primary camera.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    load_scene_view(path, 0)
}

pub fn load_scene_view(path: impl AsRef<Path>, view: usize) -> Result<Scene> {
    let path = path.as_ref();
    let file = read_scene_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    scene_from_file(&file, base, view)
}

pub fn scene_to_json(scene: &Scene, views: &[Camera]) -> String {
    let file = SceneFile::from_scene(scene, views);
    serde_json::to_string_pretty(&file).expect("scene documents always serialize")
}

/// Writes `scene` (and optional extra views) as a scene document.
pub fn save_scene(scene: &Scene, views: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_json(scene, views)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}
