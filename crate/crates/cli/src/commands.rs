use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use tritransport::model::{attention_maps, render as model_render, ModelConfig, ModelWeights};
use tritransport::oracle::{
    composite_lights, mean_abs_log_diff, path_trace, psnr, sample_seed, write_png, HdrImage, Psnr,
    TraceConfig,
};
use tritransport::scene::{load_scene_view, save_scene, Scene, PATCH};
use tritransport::train::{
    load_checkpoint, read_manifest, sample_scene_views, train_loop, write_manifest, Checkpoint,
    Dataset, GenConfig, ManifestRecord, MetricsRow, TrainConfig, TrainHooks, METRICS_HEADER,
};

use crate::error::{CliError, Kind, Result};
use crate::{ComposeArgs, EvalArgs, GenDataArgs, InspectArgs, RenderArgs, TraceArgs, TrainArgs};

const SCENE_STREAM: u64 = 0x5ce7e;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// A preset name or a JSON file.
fn model_config(spec: &str) -> Result<ModelConfig> {
    let cfg = match ModelConfig::preset(spec) {
        Some(c) => c,
        None => {
            let path = Path::new(spec);
            if !path.exists() {
                return Err(CliError::usage(format!(
                    "model `{spec}` is neither a preset (desk, large) nor an existing file"
                )));
            }
            read_json(path)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_image(img: &HdrImage, out: &Path, png: Option<&PathBuf>) -> Result<()> {
    img.write_pfm(out)?;
    if let Some(p) = png {
        write_png(img, p)?;
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let gen: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    gen.validate()?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    if a.spp == 0 {
        return Err(CliError::usage("--spp must be at least 1"));
    }
    create_dir(&a.out)?;
    let mut records = Vec::new();
    for i in 0..a.count {
        let at = |e: CliError| e.context(format!("scene {i}"));
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(a.seed, i as u64, SCENE_STREAM));
        let (scene, views) = sample_scene_views(&mut rng, &gen).map_err(|e| at(e.into()))?;
        let scene_name = format!("scene_{i:05}.json");
        save_scene(&scene, &views, a.out.join(&scene_name)).map_err(|e| at(e.into()))?;
        for (v, camera) in views.iter().enumerate() {
            let view = Scene {
                triangles: scene.triangles.clone(),
                camera: *camera,
            };
            let seed = sample_seed(a.seed, i as u64, v as u64 + 1);
            let out =
                path_trace(&view, &TraceConfig::new(a.spp, seed)).map_err(|e| at(e.into()))?;
            let image_name = format!("scene_{i:05}_view{v}.pfm");
            out.image
                .write_pfm(a.out.join(&image_name))
                .map_err(|e| at(e.into()))?;
            records.push(ManifestRecord {
                scene: scene_name.clone(),
                image: image_name,
                camera_index: v,
                seed,
            });
        }
        log::info!("scene {}/{} done", i + 1, a.count);
    }
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn trace(a: &TraceArgs) -> Result<()> {
    if a.spp == 0 {
        return Err(CliError::usage("--spp must be at least 1"));
    }
    let scene = load_scene_view(&a.scene, a.view)?;
    let mut cfg = TraceConfig::new(a.spp, a.seed);
    if let Some(d) = a.max_depth {
        cfg.max_depth = d;
    }
    let out = path_trace(&scene, &cfg)?;
    write_image(&out.image, &a.out, a.png.as_ref())?;
    if let Some(p) = &a.variance {
        let var = HdrImage::from_pixels(
            out.image.width,
            out.image.height,
            out.variance.iter().map(|&v| v as f32).collect(),
        )?;
        var.write_pfm(p)?;
    }
    Ok(())
}

/// Keeps the header and the rows up to `step`, so a resumed run continues
/// the file where the checkpoint left off.
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut out = format!("{METRICS_HEADER}\n");
    for line in text.lines().skip(1) {
        match MetricsRow::parse(line) {
            Some(r) if r.step <= step => {
                out.push_str(line);
                out.push('\n');
            }
            Some(_) => {}
            None => {
                return Err(CliError::new(
                    Kind::Validation,
                    format!("{}: malformed metrics row `{line}`", path.display()),
                ))
            }
        }
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let model = model_config(&a.model)?;
    let mut cfg: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::load(&a.manifest)?;

    let metrics_path = a
        .metrics
        .clone()
        .unwrap_or_else(|| a.out.with_extension("csv"));
    let (start, prefix) = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p, Some(&model))?;
            if ck.rng.seed != cfg.seed {
                log::warn!(
                    "resuming with the checkpoint's seed {} (config says {})",
                    ck.rng.seed,
                    cfg.seed
                );
            }
            let prefix = truncate_metrics(&metrics_path, ck.step)?;
            (ck, prefix)
        }
        None => (
            Checkpoint::fresh(&model, &cfg)?,
            format!("{METRICS_HEADER}\n"),
        ),
    };
    let mut metrics =
        fs::File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    metrics
        .write_all(prefix.as_bytes())
        .map_err(|e| CliError::io(&metrics_path, e))?;

    let dump_dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let outcome = train_loop(
        start,
        &data,
        &cfg,
        TrainHooks {
            metrics: Some(&mut metrics),
            checkpoint: Some(&a.out),
            dump_dir: Some(&dump_dir),
            stop_after: a.stop_after,
        },
    )?;
    if let Some(last) = outcome.rows.last() {
        println!("step {} psnr {}", last.step, last.psnr_holdout);
    }
    Ok(())
}

fn load_weights(
    ckpt: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelConfig, ModelWeights<f32>)> {
    let ck = load_checkpoint(ckpt, expected)?;
    Ok((ck.config, ck.weights))
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let expected = a.model.as_deref().map(model_config).transpose()?;
    let (cfg, weights) = load_weights(&a.ckpt, expected.as_ref())?;
    let scene = load_scene_view(&a.scene, a.view)?;
    let img = model_render(&scene, &cfg, &weights)?;
    write_image(&img, &a.out, a.png.as_ref())
}

fn fmt_psnr(p: Psnr) -> String {
    p.to_string()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let base = a.sceneset.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = read_manifest(&a.sceneset)?;
    let mut rows: Vec<(ManifestRecord, Psnr, f64)> = Vec::new();
    if let Some(ckpt) = &a.ckpt {
        let (cfg, weights) = load_weights(ckpt, None)?;
        let data = Dataset::load(&a.sceneset)?;
        for s in &data.samples {
            let pred = model_render(&s.scene, &cfg, &weights)?;
            rows.push((
                s.record.clone(),
                psnr(&pred, &s.reference)?,
                mean_abs_log_diff(&pred, &s.reference)?,
            ));
        }
    } else if let Some(pm) = &a.pred_manifest {
        let pbase = pm.parent().unwrap_or(Path::new(".")).to_path_buf();
        let preds = read_manifest(pm)?;
        if preds.len() != records.len() {
            return Err(CliError::new(
                Kind::Validation,
                format!("{} predictions for {} records", preds.len(), records.len()),
            ));
        }
        for (i, (r, p)) in records.iter().zip(&preds).enumerate() {
            let reference = HdrImage::read_pfm(base.join(&r.image))
                .map_err(|e| CliError::from(e).context(format!("record {i}")))?;
            let pred = HdrImage::read_pfm(pbase.join(&p.image))
                .map_err(|e| CliError::from(e).context(format!("record {i}")))?;
            rows.push((
                r.clone(),
                psnr(&pred, &reference)?,
                mean_abs_log_diff(&pred, &reference)?,
            ));
        }
    }

    let mut csv = String::from("scene,camera_index,psnr,l1\n");
    for (r, p, l1) in &rows {
        csv.push_str(&format!(
            "{},{},{},{l1}\n",
            r.scene,
            r.camera_index,
            fmt_psnr(*p)
        ));
    }
    let finite: Vec<f64> = rows
        .iter()
        .filter(|&r| matches!(r.1, Psnr::Finite(_)))
        .map(|r| r.1.value())
        .collect();
    let mean_psnr = if finite.is_empty() {
        Psnr::Infinite
    } else {
        Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let mean_l1 = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
    csv.push_str(&format!("mean,,{},{mean_l1}\n", fmt_psnr(mean_psnr)));
    write_file(&a.out, csv.as_bytes())?;
    println!("mean psnr {} l1 {mean_l1}", fmt_psnr(mean_psnr));
    Ok(())
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::usage(format!("--bundle expects `row,col`, got `{s}`"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn inspect_attn(a: &InspectArgs) -> Result<()> {
    let (row, col) = parse_pair(&a.bundle)?;
    let (cfg, weights) = load_weights(&a.ckpt, None)?;
    let scene = load_scene_view(&a.scene, a.view)?;
    let (rows, cols) = (scene.camera.height / PATCH, scene.camera.width / PATCH);
    if row as u32 >= rows || col as u32 >= cols {
        return Err(CliError::usage(format!(
            "bundle ({row},{col}) outside the {rows}x{cols} bundle grid"
        )));
    }
    let map = attention_maps(&scene, &cfg, &weights, row * cols as usize + col)?;

    let mut csv = String::from("token,kind");
    for l in 0..cfg.vd_layers {
        for h in 0..cfg.n_heads {
            csv.push_str(&format!(",l{l}h{h}"));
        }
    }
    csv.push_str(",total\n");
    for t in 0..map.total.len() {
        let (kind, id) = if t < map.triangles {
            ("triangle", t)
        } else {
            ("register", t - map.triangles)
        };
        csv.push_str(&format!("{id},{kind}"));
        for r in &map.per_head {
            csv.push_str(&format!(",{}", r[t]));
        }
        csv.push_str(&format!(",{}\n", map.total[t]));
    }
    write_file(&a.out, csv.as_bytes())
}

fn parse_weight(s: &str) -> Result<[f64; 3]> {
    let bad = || CliError::usage(format!("--weight expects `r,g,b`, got `{s}`"));
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let w: [f64; 3] = parts.try_into().map_err(|_| bad())?;
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CliError::usage(format!(
            "weight `{s}` must be finite and nonnegative"
        )));
    }
    Ok(w)
}

pub fn compose(a: &ComposeArgs) -> Result<()> {
    let weights: Vec<[f64; 3]> = if a.weights.is_empty() {
        vec![[1.0; 3]; a.images.len()]
    } else {
        a.weights
            .iter()
            .map(|w| parse_weight(w))
            .collect::<Result<_>>()?
    };
    if weights.len() != a.images.len() {
        return Err(CliError::usage(format!(
            "{} --weight values for {} images",
            weights.len(),
            a.images.len()
        )));
    }
    let images: Vec<HdrImage> = a
        .images
        .iter()
        .map(HdrImage::read_pfm)
        .collect::<std::result::Result<_, _>>()?;
    let out = composite_lights(&images, &weights)?;
    out.write_pfm(&a.out)?;
    Ok(())
}
