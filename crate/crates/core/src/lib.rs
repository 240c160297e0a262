//! Collaborative (multi-agent) LiDAR 3D detection with decoupled unsupervised
//! sim-to-real domain adaptation.

pub mod error;
pub mod evaluation;
pub mod adapters;
pub mod config;
pub mod detector;
pub mod geometry;
pub mod grl;
pub mod nn;
pub mod rng;
pub mod sample;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
