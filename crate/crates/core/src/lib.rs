//! Trimap-guided matting of transparent objects.
//!
//! The crate provides the full desk-scale stack: data types and PNG I/O, a
//! compositing data pipeline, a hybrid CNN + windowed-transformer encoder
//! with learnable tri-tokens, a multi-scale global-guided fusion decoder, the
//! matting losses and evaluation metrics, and a deterministic training
//! harness with checkpointing and gradient verification.

pub mod attention;
pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod pipeline;
pub mod tri_token;
pub mod types;

pub use error::{Error, Result};
