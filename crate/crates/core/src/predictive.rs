//! Posterior summaries and posterior-predictive simulation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowDraw, FlowModel, Prior, DIM};
use crate::rng::{derive_seed, stream};
use crate::simulator::{Simulator, Trajectory};
use crate::stats;

pub const SAMPLES_HEADER: &str = "beta_household,beta_school,beta_company,log_q";
pub const PREDICTIVE_HEADER: &str = "replicate,day,new_infections,log_new_infections";

/// Where predictive parameter draws come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    Prior,
    Flow,
}

/// Marginal moments and pairwise correlations of a set of draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub samples: usize,
    pub means: [f64; DIM],
    pub stds: [f64; DIM],
    pub corr_household_school: f64,
    pub corr_household_company: f64,
    pub corr_school_company: f64,
}

impl PosteriorSummary {
    pub fn of(betas: &[[f64; DIM]]) -> Result<PosteriorSummary> {
        if betas.len() < 2 {
            return Err(Error::Contract("a summary needs at least two draws".into()));
        }
        let cols: Vec<Vec<f64>> = (0..DIM).map(|j| betas.iter().map(|b| b[j]).collect()).collect();
        Ok(PosteriorSummary {
            samples: betas.len(),
            means: std::array::from_fn(|j| stats::mean(&cols[j])),
            stds: std::array::from_fn(|j| stats::std_dev(&cols[j])),
            corr_household_school: stats::pearson(&cols[0], &cols[1]),
            corr_household_company: stats::pearson(&cols[0], &cols[2]),
            corr_school_company: stats::pearson(&cols[1], &cols[2]),
        })
    }
}

/// `n` draws from the flow under the posterior stream of `seed`.
pub fn posterior_draws(flow: &FlowModel, n: usize, seed: u64) -> Result<Vec<FlowDraw>> {
    flow.sample(n, derive_seed(seed, &[stream::POSTERIOR]))
}

pub fn samples_csv(draws: &[FlowDraw]) -> String {
    let mut out = String::from(SAMPLES_HEADER);
    out.push('\n');
    for d in draws {
        let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.6}", d.beta[0], d.beta[1], d.beta[2], d.log_q);
    }
    out
}

/// `n` parameter draws from `source`; `flow` is required for [`ThetaSource::Flow`].
pub fn draw_thetas(source: ThetaSource, flow: Option<&FlowModel>, prior: &Prior, n: usize, seed: u64) -> Result<Vec<[f64; DIM]>> {
    if n == 0 {
        return Err(Error::Contract("replicate count must be at least 1".into()));
    }
    let seed = derive_seed(seed, &[stream::PREDICTIVE]);
    match (source, flow) {
        (ThetaSource::Prior, _) => Ok(prior.sample(n, seed)),
        (ThetaSource::Flow, Some(flow)) => Ok(flow.sample(n, seed)?.into_iter().map(|d| d.beta).collect()),
        (ThetaSource::Flow, None) => Err(Error::Contract("flow draws need a checkpoint".into())),
    }
}

/// One simulation per parameter draw; replicate `r` uses its own noise stream.
pub fn simulate(simulator: &Simulator, thetas: &[[f64; DIM]], seed: u64) -> Result<Vec<Trajectory>> {
    thetas
        .par_iter()
        .enumerate()
        .map(|(r, beta)| {
            let s = derive_seed(seed, &[stream::PREDICTIVE, 1, r as u64]);
            Ok(simulator.run_values(*beta, s)?.trajectory())
        })
        .collect()
}

pub fn trajectories_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from(PREDICTIVE_HEADER);
    out.push('\n');
    for (r, t) in trajectories.iter().enumerate() {
        for (d, (c, x)) in t.new_infections.iter().zip(&t.log_series).enumerate() {
            let _ = writeln!(out, "{r},{},{c:.6},{x:.6}", d + 1);
        }
    }
    out
}

/// Pointwise quantile band of the log-series.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    pub fn of(trajectories: &[Trajectory], lower_q: f64, upper_q: f64) -> Result<Band> {
        let horizon = match trajectories.first() {
            Some(t) => t.horizon(),
            None => return Err(Error::Contract("a band needs at least one trajectory".into())),
        };
        if trajectories.iter().any(|t| t.horizon() != horizon) {
            return Err(Error::Contract("trajectories differ in length".into()));
        }
        let column = |d: usize| -> Vec<f64> { trajectories.iter().map(|t| t.log_series[d]).collect() };
        Ok(Band {
            lower: (0..horizon).map(|d| stats::quantile(&column(d), lower_q)).collect(),
            upper: (0..horizon).map(|d| stats::quantile(&column(d), upper_q)).collect(),
        })
    }

    /// Fraction of days on which `series` lies inside the band (inclusive).
    pub fn coverage(&self, series: &[f64]) -> f64 {
        let inside = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(series)
            .filter(|((lo, hi), x)| *lo <= *x && *x <= *hi)
            .count();
        inside as f64 / self.lower.len() as f64
    }

    pub fn mean_width(&self) -> f64 {
        let total: f64 = self.upper.iter().zip(&self.lower).map(|(h, l)| h - l).sum();
        total / self.lower.len() as f64
    }
}
