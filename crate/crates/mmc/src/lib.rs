//! Two-phase mixture-of-experts pipeline for multimodal complaint
//! classification, with a synthetic corpus generator, an image-pairing
//! tool, and training/evaluation diagnostics.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod encode;
pub mod error;
pub mod evalkit;
pub mod experts;
pub mod fuse;
pub mod graph;
pub mod metafuse;
pub mod model;
pub mod objective;
pub mod pairing;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod validate;

pub use error::{Error, Result};
