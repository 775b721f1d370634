//! Nonstationary spatial field modeling through dimension expansion: learn
//! sparse latent coordinates in which a stationary variogram fits, map them
//! with thin-plate splines, and predict by kriging in the expanded space.

pub mod cli;
pub mod error;
pub mod expansion;
pub mod geo;
mod optim;
pub mod predict;
pub mod sim;
pub mod tps;
pub mod variogram;
pub mod warp;

pub use error::{Error, Result};
