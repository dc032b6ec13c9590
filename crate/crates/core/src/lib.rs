//! Bidirectional autoregressive diffusion for music-driven dance synthesis.

pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
