//! Compression laboratory for masked-prediction Transformer speech encoders.

pub mod compress;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod numcore;
pub mod pipeline;
pub mod probe;
pub mod profile;

pub use error::{Error, Result};
