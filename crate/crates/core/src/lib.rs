//! Skin-lesion segmentation with a three-stage linear-attention transformer
//! U-shape and a cross-stage feature fusion module, built on a small
//! reverse-mode tape so the whole network trains without external ML crates.

pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod iscf;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod train_eval;

pub use error::{Error, Result};
pub use numerics::{Element, Tape, TapeId, Tensor};
