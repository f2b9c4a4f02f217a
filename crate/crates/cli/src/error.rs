use std::fmt;

use thiserror::Error;
use tritransport::model::ModelError;
use tritransport::oracle::{ImageError, OracleError};
use tritransport::scene::SceneError;
use tritransport::tensor::TensorError;
use tritransport::tokenizer::TokenizerError;
use tritransport::train::TrainError;

/// Exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Io = 2,
    Validation = 3,
    Numerical = 4,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Usage => "usage",
            Kind::Io => "i/o",
            Kind::Validation => "validation",
            Kind::Numerical => "numerical",
        })
    }
}

#[derive(Debug, Error)]
#[error("{kind} error: {message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {e}", path.display()))
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: impl fmt::Display) -> Self {
        CliError {
            kind: self.kind,
            message: format!("{what}: {}", self.message),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

fn scene_kind(e: &SceneError) -> Kind {
    match e {
        SceneError::Io { .. } => Kind::Io,
        SceneError::Parse { .. } | SceneError::Validation(_) => Kind::Validation,
    }
}

fn tokenizer_kind(e: &TokenizerError) -> Kind {
    match e {
        TokenizerError::HeadDimTooSmall { .. } | TokenizerError::TooManyPairs { .. } => Kind::Usage,
        _ => Kind::Validation,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Config(_) | ModelError::BundleIndex { .. } => Kind::Usage,
        ModelError::Scene(s) => scene_kind(s),
        ModelError::Tokenizer(t) => tokenizer_kind(t),
        ModelError::Weights(_) | ModelError::Tensor(_) => Kind::Validation,
    }
}

fn image_kind(e: &ImageError) -> Kind {
    match e {
        ImageError::Io { .. } => Kind::Io,
        ImageError::Png(_) => Kind::Io,
        _ => Kind::Validation,
    }
}

fn oracle_kind(e: &OracleError) -> Kind {
    match e {
        OracleError::Config(_) => Kind::Usage,
        OracleError::NoEmitters => Kind::Validation,
        OracleError::Numerical(_) => Kind::Numerical,
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::Config(_) => Kind::Usage,
        TrainError::Io { .. } | TrainError::MissingFile { .. } => Kind::Io,
        TrainError::NonFinite { .. } | TrainError::Numerical(_) => Kind::Numerical,
        TrainError::Model(m) => model_kind(m),
        TrainError::Scene(s) => scene_kind(s),
        TrainError::Image(i) => image_kind(i),
        TrainError::Oracle(o) => oracle_kind(o),
        _ => Kind::Validation,
    }
}

macro_rules! classify {
    ($($t:ty => $f:expr),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($f(&e), e.to_string())
            }
        }
    )*};
}

classify! {
    SceneError => scene_kind,
    ModelError => model_kind,
    ImageError => image_kind,
    OracleError => oracle_kind,
    TrainError => train_kind,
    TensorError => |_: &TensorError| Kind::Validation,
}

pub type Result<T> = std::result::Result<T, CliError>;
