//! Scene sampling, loss, optimizer, checkpoints and the training loop.

mod checkpoint;
mod data;
mod generator;
mod loss;
mod optim;
mod run;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{
    header_parameter_count, load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION,
    MAGIC,
};
pub use data::{
    manifest_to_string, read_manifest, write_manifest, Dataset, ManifestRecord, MetricsRow, Sample,
    METRICS_HEADER,
};
pub use generator::{
    random_rotation, rotate_augment, sample_camera, sample_material, sample_scene,
    sample_scene_views, GenConfig, Primitive, TEMPLATE_COUNT,
};
pub use loss::{log_chw, loss_fn, tape_loss, LossTerms, LossVars, LossWeights, GRADIENT_LEVELS};
pub use optim::{decays, lr_schedule, AdamW, AdamWConfig};
pub use run::{evaluate_psnr, train_loop, TrainConfig, TrainHooks, TrainOutcome};

use crate::model::ModelError;
use crate::oracle::{ImageError, OracleError};
use crate::scene::SceneError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest record {record}: missing file {path}")]
    MissingFile { record: usize, path: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u64, expected: u32 },
    #[error("checksum mismatch in tensor {0}")]
    Checksum(String),
    #[error("checkpoint config differs from requested config in field `{0}`")]
    ConfigMismatch(String),
    #[error("scene placement failed: {0}")]
    Placement(String),
    #[error("non-finite loss at step {step}, batch records {batch:?}{}", dump.as_ref().map(|d| format!(" (dump: {d})")).unwrap_or_default())]
    NonFinite {
        step: u64,
        batch: Vec<usize>,
        dump: Option<String>,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;
