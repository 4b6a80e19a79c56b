//! Federated split decision transformer laboratory for multi-RAT MEC
//! resource allocation in tiled 360° VR streaming.
//!
//! The crate is organized bottom-up:
//!
//! - [`env`]: channel, compute and QoE models behind a steppable episodic environment
//! - [`gaze`]: gaze traces and Chebyshev tile-quality maps
//! - [`nn`]: tape-based autodiff, layers, AdamW, checkpoints
//! - [`dt`]: the split decision transformer (edge embedding, cloud decoder, edge heads)
//! - [`dataset`]: behavior policies, offline trajectories, dataset files
//! - [`fed`]: two-phase federated split training, baselines, exchange metering
//! - [`harness`]: evaluation, reports, parameter accounting, run configuration

pub mod dataset;
pub mod dt;
pub mod env;
pub mod error;
pub mod fed;
pub mod gaze;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};
