//! Reference renderer: a GGX path tracer with next-event estimation and
//! MIS, plus the HDR image utilities shared with the network pipeline.

pub mod brdf;
pub mod bvh;
mod image;
mod trace;

pub use brdf::{ggx_brdf, BrdfParams};
pub use image::{
    composite_lights, mean_abs_log_diff, png_bytes, psnr, psnr_log, tone_map, tone_map_value,
    write_png, HdrImage, ImageError, Psnr,
};
pub use trace::{path_trace, sample_seed, TraceConfig, TraceOutput, Tracer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("scene has no emitters")]
    NoEmitters,
    #[error("invalid trace configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

#[cfg(test)]
mod tests;
