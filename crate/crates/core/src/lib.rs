//! Prototype-based interpretable regression: a CNN backbone maps images to
//! a latent grid, each prediction is a similarity-weighted mean of the
//! labels of learned prototypes, and prototypes are projected onto real
//! training patches so every prediction can be explained.

pub mod backbone;
pub mod baseline;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prototype;
pub mod render;
pub mod selfcheck;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
