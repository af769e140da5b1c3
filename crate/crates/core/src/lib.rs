//! Rank-based contrastive age regression on synthetic 3D phantoms.

pub mod augment;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod evalstats;
pub mod experiment;
pub mod gradram;
mod error;
pub mod phantom;
pub mod optim;
pub mod rnc;
pub mod train;
pub mod util;

pub use error::{Error, Result};
