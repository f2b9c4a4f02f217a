use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::oracle::{HdrImage, Psnr};
use crate::scene::{load_scene_view, Scene};

/// One training view: scene document, reference image, and which of the
/// document's cameras rendered it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub scene: String,
    pub image: String,
    pub camera_index: usize,
    pub seed: u64,
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_string(records)).map_err(|e| TrainError::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| TrainError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(TrainError::Manifest {
            line: 0,
            message: "manifest has no records".into(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ManifestRecord,
    pub scene_path: PathBuf,
    pub scene: Scene,
    pub reference: HdrImage,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every record; relative paths resolve against the manifest's directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::new();
        for (i, record) in read_manifest(manifest)?.into_iter().enumerate() {
            let scene_path = base.join(&record.scene);
            let image_path = base.join(&record.image);
            for p in [&scene_path, &image_path] {
                if !p.is_file() {
                    return Err(TrainError::MissingFile {
                        record: i,
                        path: p.display().to_string(),
                    });
                }
            }
            let scene = load_scene_view(&scene_path, record.camera_index)?;
            let reference = HdrImage::read_pfm(&image_path)?;
            let (w, h) = (scene.camera.width as usize, scene.camera.height as usize);
            if (reference.width, reference.height) != (w, h) {
                return Err(TrainError::Manifest {
                    line: i + 1,
                    message: format!(
                        "image is {}x{} but camera {} renders {w}x{h}",
                        reference.width, reference.height, record.camera_index
                    ),
                });
            }
            samples.push(Sample {
                record,
                scene_path,
                scene,
                reference,
            });
        }
        Ok(Dataset { samples })
    }
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_l1,loss_perc,psnr_holdout";

/// Losses are means over the steps since the previous row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_perc: f64,
    pub psnr_holdout: Psnr,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_l1, self.loss_perc, self.psnr_holdout
        )
        .expect("write to string");
        s
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        Some(MetricsRow {
            step: f[0].parse().ok()?,
            lr: num(f[1])?,
            loss_total: num(f[2])?,
            loss_l1: num(f[3])?,
            loss_perc: num(f[4])?,
            psnr_holdout: if f[5] == "inf" {
                Psnr::Infinite
            } else {
                Psnr::Finite(num(f[5])?)
            },
        })
    }
}
