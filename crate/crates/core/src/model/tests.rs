use super::*;
use crate::scene::tests::sample_scene;
use crate::scene::{Mat3, Scene, Vec3};
use crate::tensor::{gradcheck, Tape, Tensor, Var};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        head_dim: 16,
        vi_layers: 2,
        vd_layers: 2,
        ffn_ratio: 2,
        registers: 4,
        dpt_taps: 2,
        dpt_channels: 4,
        rope_pairs: 8,
        ..ModelConfig::desk()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn presets_validate() {
    ModelConfig::large().validate().unwrap();
    ModelConfig::desk().validate().unwrap();
    tiny().validate().unwrap();
    assert_eq!(ModelConfig::preset("desk"), Some(ModelConfig::desk()));
    assert!(ModelConfig::preset("huge").is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny();
    c.head_dim = 8;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.dpt_taps = 3;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.rope_pairs = 9;
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.patch = 16;
    assert!(c.validate().is_err());
}

#[test]
fn first_difference_names_field() {
    let a = tiny();
    let mut b = tiny();
    assert_eq!(a.first_difference(&b), None);
    b.dpt_channels = 8;
    assert_eq!(a.first_difference(&b), Some("dpt_channels"));
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [tiny(), ModelConfig::desk()] {
        let w = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(w.parameter_count(), cfg.parameter_count());
    }
}

#[test]
fn large_parameter_count_is_in_expected_range() {
    // 205M reference; the decoder here is lighter than a full DPT
    let n = ModelConfig::large().parameter_count() as f64;
    assert!((n / 205e6 - 1.0).abs() < 0.15, "{n}");
}

#[test]
fn init_is_seeded() {
    let a = ModelWeights::<f32>::init(&tiny(), 3).unwrap();
    let b = ModelWeights::<f32>::init(&tiny(), 3).unwrap();
    let c = ModelWeights::<f32>::init(&tiny(), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn from_tensors_checks_layout() {
    let cfg = tiny();
    let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
    let ok = ModelWeights::from_tensors(&cfg, w.clone().into_tensors()).unwrap();
    assert_eq!(ok, w);

    let mut t = w.clone().into_tensors();
    t.insert("registers".into(), Tensor::zeros(&[3, 32]));
    assert!(ModelWeights::from_tensors(&cfg, t).is_err());

    let mut t = w.clone().into_tensors();
    t.shift_remove("dpt.head.b");
    assert!(ModelWeights::from_tensors(&cfg, t).is_err());

    let mut t = w.into_tensors();
    t.get_mut("dpt.head.b").unwrap().data_mut()[0] = f32::NAN;
    assert!(ModelWeights::from_tensors(&cfg, t).is_err());
}

#[test]
fn render_has_camera_resolution_and_is_deterministic() {
    let cfg = tiny();
    let w = ModelWeights::<f32>::init(&cfg, 5).unwrap();
    let s = sample_scene();
    let a = render(&s, &cfg, &w).unwrap();
    let b = render(&s, &cfg, &w).unwrap();
    assert_eq!((a.width, a.height), (16, 16));
    assert!(a.pixels.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert_eq!(a.pixels, b.pixels);
}

#[test]
fn log_image_shape_is_three_channel_full_resolution() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 5).unwrap();
    let mut tape = Tape::new();
    let p = Params::bind(&mut tape, &w, false);
    let out = forward(&mut tape, &cfg, &p, &sample_scene()).unwrap();
    assert_eq!(tape.shape(out.log_image), &[3, 16, 16]);
    assert_eq!(out.tokens, 3 + cfg.registers);
    assert_eq!(out.triangles, 3);
    assert_eq!(out.cross_attention.len(), cfg.vd_layers);
}

#[test]
fn single_tap_decoder_works() {
    let mut cfg = tiny();
    cfg.dpt_taps = 1;
    let w = ModelWeights::<f64>::init(&cfg, 2).unwrap();
    let y = render_log(&sample_scene(), &cfg, &w).unwrap();
    assert_eq!(y.len(), 3 * 16 * 16);
}

#[test]
fn zero_head_renders_black() {
    let cfg = tiny();
    let mut w = ModelWeights::<f64>::init(&cfg, 5).unwrap();
    for name in ["dpt.head.w", "dpt.head.b"] {
        w.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let img = render(&sample_scene(), &cfg, &w).unwrap();
    assert!(img.pixels.iter().all(|&v| v == 0.0));
}

#[test]
fn translating_the_scene_leaves_the_image_unchanged() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 9).unwrap();
    let s = sample_scene();
    let moved = s
        .transform(&Mat3::IDENTITY, Vec3::new(3.0, -2.0, 5.0))
        .unwrap();
    let a = render_log(&s, &cfg, &w).unwrap();
    let b = render_log(&moved, &cfg, &w).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-6, "{}", max_abs_diff(&a, &b));
}

#[test]
fn triangle_order_does_not_matter() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 9).unwrap();
    let s = sample_scene();
    let mut p = s.clone();
    p.triangles.reverse();
    let a = render_log(&s, &cfg, &w).unwrap();
    let b = render_log(&p, &cfg, &w).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-9);
}

#[test]
fn registers_affect_the_output() {
    let cfg = tiny();
    let mut w = ModelWeights::<f64>::init(&cfg, 9).unwrap();
    let a = render_log(&sample_scene(), &cfg, &w).unwrap();
    for v in w.get_mut("registers").unwrap().data_mut() {
        *v *= -1.0;
    }
    let b = render_log(&sample_scene(), &cfg, &w).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-6);
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
    let m = attention_maps(&sample_scene(), &cfg, &w, 3).unwrap();
    assert_eq!(m.triangles, 3);
    assert_eq!(m.registers, cfg.registers);
    assert_eq!(m.per_head.len(), cfg.vd_layers * cfg.n_heads);
    for row in &m.per_head {
        assert_eq!(row.len(), 3 + cfg.registers);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let total: f64 = m.total.iter().sum();
    assert!((total - m.per_head.len() as f64).abs() < 1e-9);
}

#[test]
fn single_key_gets_all_attention() {
    let mut cfg = tiny();
    cfg.registers = 0;
    let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
    let mut s = sample_scene();
    s.triangles.truncate(1);
    s.triangles[0].material.emission = [1.0; 3];
    let m = attention_maps(&s, &cfg, &w, 0).unwrap();
    for row in &m.per_head {
        assert_eq!(row.len(), 1);
        assert!((row[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bundle_index_out_of_range() {
    let cfg = tiny();
    let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
    let err = attention_maps(&sample_scene(), &cfg, &w, 4).unwrap_err();
    assert!(matches!(
        err,
        ModelError::BundleIndex { index: 4, count: 4 }
    ));
}

#[test]
fn mismatched_weights_are_rejected_by_forward_binding() {
    let cfg = tiny();
    let mut other = tiny();
    other.dpt_channels = 8;
    let w = ModelWeights::<f64>::init(&other, 1).unwrap();
    assert!(ModelWeights::from_tensors(&cfg, w.into_tensors()).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut cfg = tiny();
    cfg.vd_layers = 1;
    cfg.dpt_taps = 1;
    let w = ModelWeights::<f64>::init(&cfg, 11).unwrap();
    let scene: Scene = sample_scene();
    let checked = [
        "registers",
        "embed.normal.g",
        "vi.0.attn.wq",
        "vi.1.attn.q_gain",
        "vd.0.cross.k_gain",
        "vd.0.self.wv",
        "vd.0.ffn.norm",
        "dpt.0.reassemble.b",
        "dpt.0.fuse.b",
        "dpt.head.w",
    ];
    let inputs: Vec<Tensor<f64>> = checked.iter().map(|n| w.get(n).unwrap().clone()).collect();
    let result = gradcheck::check(&inputs, 1e-5, |tape, vars| {
        let bound: Vec<Var> = w
            .iter()
            .map(|(name, t)| match checked.iter().position(|c| c == name) {
                Some(i) => vars[i],
                None => tape.constant(t.clone()),
            })
            .collect();
        let p = Params::from_vars(w.names(), &bound);
        let out = forward(tape, &cfg, &p, &scene).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let sq = tape.square(out.log_image);
        Ok(tape.mean(sq))
    })
    .unwrap();
    for (name, err) in checked.iter().zip(&result.rel_errors) {
        assert!(*err < 1e-3, "{name}: {err}");
    }
}
