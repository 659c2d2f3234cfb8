//! Benchmark toolkit for anomaly detection on multivariate spatio-temporal
//! datacubes: a synthesizer with exact ground-truth masks, a compact
//! quantization-bottleneck detection model, classical baselines, and the
//! shared evaluation machinery.

pub mod baselines;
pub mod cube;
pub mod error;
pub mod events;
pub mod grid;
pub mod lfq;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod sweep;
pub mod rng;
pub mod signal;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
