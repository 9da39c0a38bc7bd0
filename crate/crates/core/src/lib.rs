//! PatchMerger token reduction inside a minimal vision transformer.

pub mod config;
pub mod costmodel;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod merger;
pub mod numcore;
pub mod vit;

pub use error::{Error, Result};
pub use merger::{MergerConfig, MergerParams};
pub use numcore::{Real, Tensor};
pub use vit::{Model, ModelConfig, ModelParams};
