//! Poincaré-ball heterogeneous graph model for next-item recommendation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
