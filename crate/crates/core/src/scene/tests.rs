use std::fs;

use proptest::prelude::*;

use super::*;

const MINIMAL: &str = r#"{
  "meshes": [{
    "vertices": [[-1, 0, -3], [1, 0, -3], [0, 1, -3]],
    "indices": [[0, 1, 2]],
    "material": {"diffuse": [0, 0, 0], "specular": [0, 0, 0], "roughness": 1.0, "emission": [10, 10, 10]}
  }],
  "camera": {"position": [0, 0, 0], "look_at": [0, 0, -1], "up": [0, 1, 0], "fov_y_deg": 45, "resolution": [16, 8]}
}"#;

fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

pub(crate) fn sample_scene() -> Scene {
    let m = Material {
        diffuse: [0.6, 0.3, 0.2],
        specular: [0.2; 3],
        roughness: 0.3,
        emission: [0.0; 3],
    };
    let mut tris = vec![
        Triangle::flat(
            [
                Vec3::new(-1.0, 0.0, -1.0),
                Vec3::new(1.0, 0.0, 1.0),
                Vec3::new(1.0, 0.0, -1.0),
            ],
            m,
        ),
        Triangle::flat(
            [
                Vec3::new(0.2, 0.5, 0.0),
                Vec3::new(0.4, 0.9, 0.1),
                Vec3::new(-0.3, 0.7, 0.3),
            ],
            m,
        ),
        Triangle::flat(
            [
                Vec3::new(-0.2, 1.5, 0.1),
                Vec3::new(0.2, 1.5, 0.1),
                Vec3::new(0.0, 1.5, -0.2),
            ],
            Material::emitter([50.0; 3]),
        ),
    ];
    tris[1].flat_shaded = false;
    tris[1].normals = [
        Vec3::new(0.1, 0.2, 0.97).normalize(),
        Vec3::new(-0.3, 0.1, 0.9).normalize(),
        Vec3::new(0.0, 0.0, 1.0),
    ];
    let camera = Camera::look_at(
        Vec3::new(0.3, 1.2, 2.5),
        Vec3::new(0.0, 0.4, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        40.0,
        16,
        16,
    )
    .unwrap();
    Scene {
        triangles: tris,
        camera,
    }
}

#[test]
fn minimal_file_loads_one_triangle() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_tmp(&dir, "s.json", MINIMAL);
    let s = load_scene(&p).unwrap();
    assert_eq!(s.triangles.len(), 1);
    assert_eq!(s.emitter_count(), 1);
    // no normals supplied: area-weighted average of one face is its normal
    for n in s.triangles[0].normals {
        assert!((n - Vec3::new(0.0, 0.0, 1.0)).length() < 1e-12);
    }
}

#[test]
fn degenerate_triangle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("[0, 1, -3]", "[0, 0, -3]");
    let p = write_tmp(&dir, "s.json", &text);
    let err = load_scene(&p).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("degenerate triangle"), "{err}");
}

#[test]
fn resolution_must_be_divisible_by_patch() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("[16, 8]", "[100, 100]");
    let p = write_tmp(&dir, "s.json", &text);
    let err = load_scene(&p).unwrap_err();
    assert!(
        err.to_string().contains("resolution not divisible by 8"),
        "{err}"
    );
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("\"roughness\": 1.0", "\"roughness\": oops");
    let p = write_tmp(&dir, "s.json", &text);
    match load_scene(&p).unwrap_err() {
        SceneError::Parse { line, .. } => assert_eq!(line, 5),
        e => panic!("unexpected {e}"),
    }
    let missing = load_scene(dir.path().join("nope.json")).unwrap_err();
    assert!(matches!(missing, SceneError::Io { .. }));
}

#[test]
fn roughness_and_albedo_ranges_are_validated() {
    let mut s = sample_scene();
    s.triangles[0].material.roughness = 0.001;
    assert!(s
        .validate(DEFAULT_MAX_TRIANGLES)
        .unwrap_err()
        .to_string()
        .contains("roughness"));
    let mut s = sample_scene();
    s.triangles[0].material.diffuse[1] = 1.2;
    assert!(s.validate(DEFAULT_MAX_TRIANGLES).is_err());
    let s = sample_scene();
    assert!(s
        .validate(2)
        .unwrap_err()
        .to_string()
        .contains("maximum is 2"));
}

#[test]
fn mesh_file_with_transform_and_flat_shading() {
    let dir = tempfile::tempdir().unwrap();
    write_tmp(
        &dir,
        "quad.mesh",
        "# unit quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\nf 1 3 4\n",
    );
    let text = r#"{
      "meshes": [{"file": "quad.mesh", "flat_shaded": true,
        "material": {"diffuse": [0.5, 0.5, 0.5], "specular": [0, 0, 0], "roughness": 0.5, "emission": [1, 1, 1]},
        "transform": {"rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0, 0, -2], "scale": 2}}],
      "camera": {"position": [0, 0, 1], "look_at": [0, 0, 0], "up": [0, 1, 0], "fov_y_deg": 50, "resolution": [8, 8]}
    }"#;
    let p = write_tmp(&dir, "s.json", text);
    let s = load_scene(&p).unwrap();
    assert_eq!(s.triangles.len(), 2);
    assert_eq!(s.triangles[0].vertices[2], Vec3::new(2.0, 2.0, -2.0));
    assert!(s
        .triangles
        .iter()
        .all(|t| t.flat_shaded && t.normals == [Vec3::new(0.0, 0.0, 1.0); 3]));
}

#[test]
fn smooth_normals_are_area_weighted() {
    // two faces sharing vertex 0: a big one facing +z and a small one facing -x
    let text = "v 0 0 0\nv 2 0 0\nv 0 2 0\nv 0 0 -1\nf 1 2 3\nf 1 3 4\n";
    let mesh = parse_mesh(text, "m").unwrap();
    assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    let entry = MeshEntry {
        file: None,
        vertices: Some(mesh.positions.clone()),
        indices: Some(mesh.faces.clone()),
        normals: None,
        material: Material::default().into(),
        face_materials: None,
        flat_shaded: false,
        transform: None,
    };
    let file = SceneFile {
        meshes: vec![entry],
        camera: CameraEntry {
            position: Vec3::new(3.0, 3.0, 3.0),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_y_deg: 40.0,
            resolution: [8, 8],
        },
        cameras: None,
    };
    let s = io::scene_from_file(&file, std::path::Path::new("."), 0).unwrap();
    // face areas 2 (+z) and 1 (-x): shared vertex normal ~ (-1, 0, 2)/sqrt(5)
    let expected = Vec3::new(-1.0, 0.0, 2.0).normalize();
    assert!((s.triangles[0].normals[0] - expected).length() < 1e-12);
    assert!((s.triangles[0].normals[1] - Vec3::new(0.0, 0.0, 1.0)).length() < 1e-12);
}

#[test]
fn zero_length_normals_fall_back_to_geometric() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "\"indices\": [[0, 1, 2]],",
        "\"indices\": [[0, 1, 2]], \"normals\": [[0, 0, 0], [0, 0, 2], [0, 0, 1]],",
    );
    let p = write_tmp(&dir, "s.json", &text);
    let s = load_scene(&p).unwrap();
    assert_eq!(s.triangles[0].normals, [Vec3::new(0.0, 0.0, 1.0); 3]);
}

#[test]
fn mesh_parse_errors() {
    assert!(parse_mesh("v 0 0\n", "m").is_err());
    assert!(parse_mesh("v 0 0 0\nf 0 1 1\n", "m").is_err());
    assert!(parse_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3 4\n", "m").is_err());
    match parse_mesh("v 0 0 0\nv 1 x 0\n", "m") {
        Err(SceneError::Parse { line, .. }) => assert_eq!(line, 2),
        _ => panic!("expected parse error"),
    }
    let m = parse_mesh(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n",
        "m",
    )
    .unwrap();
    assert_eq!(m.face_normals, Some(vec![[0, 0, 0]]));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample_scene();
    let p = dir.path().join("rt.json");
    save_scene(&s, &[], &p).unwrap();
    let back = load_scene(&p).unwrap();
    assert_eq!(back.triangles.len(), s.triangles.len());
    for (a, b) in s.triangles.iter().zip(&back.triangles) {
        assert_eq!(a.material, b.material);
        assert_eq!(a.flat_shaded, b.flat_shaded);
        for k in 0..3 {
            assert!((a.vertices[k] - b.vertices[k]).length() < 1e-6);
            assert!((a.normals[k] - b.normals[k]).length() < 1e-6);
        }
    }
    assert!((s.camera.position - back.camera.position).length() < 1e-6);
    for r in 0..3 {
        assert!((s.camera.orientation.rows[r] - back.camera.orientation.rows[r]).length() < 1e-6);
    }
    assert_eq!(scene_to_json(&s, &[]), scene_to_json(&s, &[]));
}

#[test]
fn views_select_cameras() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample_scene();
    let mut other = s.camera;
    other.position = Vec3::new(-2.0, 1.0, 2.0);
    let other = Camera::look_at(
        other.position,
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        35.0,
        8,
        8,
    )
    .unwrap();
    let p = dir.path().join("views.json");
    save_scene(&s, &[s.camera, other], &p).unwrap();
    let v1 = load_scene_view(&p, 1).unwrap();
    assert_eq!(v1.camera.width, 8);
    assert!(load_scene_view(&p, 2).is_err());
}

#[test]
fn identity_transform_is_noop() {
    let s = sample_scene();
    let t = s.transform(&Mat3::IDENTITY, Vec3::ZERO).unwrap();
    assert_eq!(s, t);
}

#[test]
fn translation_shifts_everything_and_keeps_rays() {
    let s = sample_scene();
    let shift = Vec3::new(1.5, -0.25, 3.0);
    let t = s.transform(&Mat3::IDENTITY, shift).unwrap();
    for (a, b) in s.triangles.iter().zip(&t.triangles) {
        for k in 0..3 {
            assert_eq!(b.vertices[k], a.vertices[k] + shift);
            assert_eq!(b.normals[k], a.normals[k]);
        }
    }
    assert_eq!(t.camera.position, s.camera.position + shift);
    assert_eq!(t.camera.world_ray(3.5, 2.5), s.camera.world_ray(3.5, 2.5));
}

#[test]
fn non_orthonormal_rotation_is_rejected() {
    let s = sample_scene();
    let bad = Mat3::from_rows(
        Vec3::new(1.1, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
    );
    assert!(s.transform(&bad, Vec3::ZERO).is_err());
}

#[test]
fn camera_space_examples() {
    let s = sample_scene();
    let mut at_origin = s.clone();
    at_origin.camera.position = Vec3::ZERO;
    at_origin.camera.orientation = Mat3::IDENTITY;
    assert_eq!(at_origin.to_camera_space(), at_origin);

    let cam = Camera::look_at(
        Vec3::new(0.0, 0.0, 5.0),
        Vec3::ZERO,
        Vec3::new(0.0, 1.0, 0.0),
        45.0,
        8,
        8,
    )
    .unwrap();
    let origin = cam.world_to_camera(Vec3::ZERO);
    assert!((origin - Vec3::new(0.0, 0.0, -5.0)).length() < 1e-12);
}

#[test]
fn center_pixel_looks_down_negative_z() {
    let cam = Camera::look_at(
        Vec3::ZERO,
        Vec3::new(0.0, 0.0, -1.0),
        Vec3::new(0.0, 1.0, 0.0),
        60.0,
        16,
        16,
    )
    .unwrap();
    let d = cam.camera_ray(8.0, 8.0);
    assert!((d - Vec3::new(0.0, 0.0, -1.0)).length() < 1e-12);
    // row 0 is the top of the image
    assert!(cam.camera_ray(8.0, 0.5).y > 0.0);
    assert!(cam.camera_ray(0.5, 8.0).x < 0.0);
}

fn rotation_strategy() -> impl Strategy<Value = Mat3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero quaternion", |(a, b, c, d)| {
            a * a + b * b + c * c + d * d > 1e-3
        })
        .prop_map(|(a, b, c, d)| Mat3::from_quaternion(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn camera_space_is_rigid_invariant(
        rot in rotation_strategy(),
        tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
    ) {
        let s = sample_scene();
        let moved = s.transform(&rot, Vec3::new(tx, ty, tz)).unwrap();
        let a = s.to_camera_space();
        let b = moved.to_camera_space();
        for (ta, tb) in a.triangles.iter().zip(&b.triangles) {
            for k in 0..3 {
                prop_assert!((ta.vertices[k] - tb.vertices[k]).length() < 1e-5);
                prop_assert!((ta.normals[k] - tb.normals[k]).length() < 1e-5);
            }
        }
    }

    #[test]
    fn save_load_round_trip_on_random_geometry(
        coords in proptest::collection::vec(-3.0f64..3.0, 9),
        rough in 0.01f64..1.0,
    ) {
        let v = [Vec3::new(coords[0], coords[1], coords[2]), Vec3::new(coords[3], coords[4], coords[5]), Vec3::new(coords[6], coords[7], coords[8])];
        let mut s = sample_scene();
        let t = Triangle::flat(v, Material { roughness: rough, ..Material::default() });
        prop_assume!(t.area() > 1e-6);
        s.triangles.push(t);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.json");
        save_scene(&s, &[], &p).unwrap();
        let back = load_scene(&p).unwrap();
        let last = back.triangles.last().unwrap();
        for k in 0..3 {
            prop_assert!((last.vertices[k] - v[k]).length() < 1e-6);
            prop_assert!((last.normals[k] - t.normals[k]).length() < 1e-6);
        }
        prop_assert_eq!(last.material, t.material);
    }
}
