//! Transportation mode detection from smartphone IMU frames.
//!
//! The crate covers the whole pipeline: loading SHL-challenge style frames
//! ([`ingest`]), deriving the smoothed / downsampled / magnitude / jerk feature
//! channels ([`dsp`]), a small reverse-mode autodiff engine ([`nn`]), the
//! feature-pyramid CNN + biLSTM classifier ([`model`]), the training protocol
//! ([`train`]), evaluation ([`metrics`]) and the experiment drivers used by the
//! command line tool ([`experiment`]).

pub mod checkpoint;
pub mod config;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
