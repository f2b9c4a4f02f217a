//! Triangle-token neural renderer with a path-tracing oracle.
//!
//! Scenes are sequences of triangles. A transformer turns them into
//! light-transport tokens in world space, then a second transformer decodes
//! ray bundles against those tokens in camera space to produce HDR images.
//! A GGX path tracer generates supervision and checks the pipeline.

pub mod model;
pub mod oracle;
pub mod scene;
pub mod tensor;
pub mod tokenizer;
pub mod train;
