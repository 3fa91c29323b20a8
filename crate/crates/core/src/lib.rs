//! Calibration of differentiable agent-based epidemic models by generalised
//! variational inference.
//!
//! The pipeline: [`population`] synthesizes agents grouped into households,
//! schools and companies; [`simulator`] runs a stochastic, differentiable
//! epidemic over them; [`flow`] provides a neural spline flow posterior over the
//! three transmission intensities; [`gvi`] trains that flow by minimising an
//! expected scoring rule plus a KL divergence to the prior, with gradients
//! from [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod error;
pub mod flow;
pub mod gvi;
pub mod pipeline;
pub mod population;
pub mod predictive;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
