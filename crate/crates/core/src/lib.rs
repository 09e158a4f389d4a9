//! Class-conditional autoregressive video generation over grid-frame token
//! sequences.
//!
//! Pipeline: [`synthdata`] clips are arranged into one grid image per clip
//! ([`sgp`]), quantized into patch tokens ([`vq`]), optionally masked by
//! segment variance during training ([`sat`]), modeled by a causal
//! transformer with a class prefix token ([`model`], [`trainer`]), and scored
//! by [`eval`].

pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod model;
pub mod pipeline;
pub mod sat;
pub mod seed;
pub mod sgp;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod video;
pub mod vq;

pub use error::{Error, Result};
