//! Generalised variational objective
//! `L(φ) = E_{q_φ}[ℓ(x, θ)] + D(q_φ ‖ π)` and its minimisation.
//!
//! The score is a `w`-scaled squared error between observed and simulated
//! log-series. Simulations for the `B` parameter draws run on their own tapes
//! (in parallel); each draw's score and its gradient w.r.t. `β` are spliced
//! back into the flow's tape so a single backward pass yields `∂L/∂φ`.

mod optim;
mod train;


use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualTensor, Tape};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Prior, DIM};
use crate::simulator::{Simulator, Trajectory};

pub use optim::{clip_global_norm, Adam};
pub use train::{train, EpochLog, StopReason, TrainConfig, TrainOutcome, LOG_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringRuleConfig {
    /// `w` in `Σ_t (x_t − x̃_t)² / w`.
    pub weight: f64,
    /// Score only the first `window` days; `None` scores the full horizon.
    pub window: Option<usize>,
    /// Simulations per parameter draw (`M`).
    pub replicates: usize,
}

impl Default for ScoringRuleConfig {
    fn default() -> Self {
        ScoringRuleConfig {
            weight: 1e-2,
            window: None,
            replicates: 1,
        }
    }
}

impl ScoringRuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::config("scoring.weight", format!("must be positive, got {}", self.weight)));
        }
        if self.window == Some(0) {
            return Err(Error::config("scoring.window", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::config("scoring.replicates", "must be at least 1"));
        }
        Ok(())
    }

    /// Days scored for a series of length `horizon`.
    pub fn days(&self, horizon: usize) -> Result<usize> {
        match self.window {
            None => Ok(horizon),
            Some(w) if w <= horizon => Ok(w),
            Some(w) => Err(Error::Contract(format!("scoring window {w} exceeds horizon {horizon}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlEstimatorConfig {
    /// Monte-Carlo sample count `R`.
    pub samples: usize,
}

impl Default for KlEstimatorConfig {
    fn default() -> Self {
        KlEstimatorConfig { samples: 10_000 }
    }
}

impl KlEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("kl.samples", "must be at least 1"));
        }
        Ok(())
    }
}

/// `Σ_{t ≤ days} (x_t − x̃_t)² / w` on the tape.
pub fn score_series(tape: &Tape, observed: &[f64], simulated: &DualTensor, days: usize, weight: f64) -> Result<DualTensor> {
    if observed.len() < days || simulated.len() < days {
        return Err(Error::Contract(format!(
            "scoring {days} days needs both series that long, got {} observed and {} simulated",
            observed.len(),
            simulated.len()
        )));
    }
    let sim = tape.slice(simulated, 0, vec![days])?;
    let obs = DualTensor::vector(observed[..days].to_vec());
    let diff = tape.sub(&sim, &obs)?;
    Ok(tape.mul_scalar(&tape.sum(&tape.mul(&diff, &diff)?), 1.0 / weight))
}

/// `(1/M) Σ_m score(x, simulate(β, seed_m))` for constrained `beta` (`[3]`).
pub fn score(
    tape: &Tape,
    simulator: &Simulator,
    observed: &Trajectory,
    beta: &DualTensor,
    cfg: &ScoringRuleConfig,
    seeds: &[u64],
) -> Result<DualTensor> {
    let horizon = simulator.config().horizon;
    if observed.horizon() != horizon {
        return Err(Error::Contract(format!(
            "observed series has {} days but the simulator runs {horizon}",
            observed.horizon()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Contract("score needs at least one simulator seed".into()));
    }
    let days = cfg.days(horizon)?;
    let mut total: Option<DualTensor> = None;
    for &seed in seeds {
        let out = simulator.run(tape, beta, seed)?;
        let s = score_series(tape, &observed.log_series, &out.log_series, days, cfg.weight)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(&acc, &s)?,
        });
    }
    Ok(tape.mul_scalar(&total.expect("non-empty seeds"), 1.0 / seeds.len() as f64))
}

/// Monte-Carlo divergence estimate with its standard error.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub value: DualTensor,
    pub std_error: f64,
}

/// `(1/R) Σ_r (log q(θ_r) − log π(θ_r))` for draws `θ_r ~ q`.
pub fn kl_monte_carlo(tape: &Tape, log_q: &DualTensor, log_pi: &[f64]) -> Result<Estimate> {
    if log_q.len() != log_pi.len() || log_pi.is_empty() {
        return Err(Error::Shape {
            op: "kl",
            detail: format!("{} log q values vs {} log π values", log_q.len(), log_pi.len()),
        });
    }
    if let Some(r) = log_pi.iter().position(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::SupportViolation(format!("draw {r} has zero prior density")));
    }
    let diff = tape.sub(log_q, &DualTensor::vector(log_pi.to_vec()))?;
    let std_error = crate::stats::std_error(diff.values());
    Ok(Estimate {
        value: tape.mean(&diff)?,
        std_error,
    })
}

/// Divergence between the flow and the prior; the trainer only sees this
/// interface.
pub trait Divergence: Sync {
    fn name(&self) -> &'static str;

    /// Differentiable estimate from `n` draws under base-noise `seed`.
    fn estimate(&self, tape: &Tape, flow: &FlowModel, params: &[DualTensor], n: usize, seed: u64) -> Result<Estimate>;
}

/// Reverse KL `D_KL(q_φ ‖ π)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct KlDivergence {
    pub prior: Prior,
}

impl Divergence for KlDivergence {
    fn name(&self) -> &'static str {
        "kl"
    }

    fn estimate(&self, tape: &Tape, flow: &FlowModel, params: &[DualTensor], n: usize, seed: u64) -> Result<Estimate> {
        let pass = flow.pass(tape, params, &FlowModel::base_noise(n, seed))?;
        let log_pi: Vec<f64> = pass
            .beta
            .values()
            .chunks_exact(DIM)
            .map(|b| self.prior.log_density(b))
            .collect();
        if let Some(r) = log_pi.iter().position(|v| *v == f64::NEG_INFINITY) {
            let b = &pass.beta.values()[r * DIM..(r + 1) * DIM];
            return Err(Error::SupportViolation(format!("draw {r} at beta = {b:?}")));
        }
        kl_monte_carlo(tape, &pass.log_q, &log_pi)
    }
}

/// Noise streams for one evaluation of the loss.
#[derive(Clone, Debug)]
pub struct LossSeeds {
    /// Base noise for the `B` parameter draws.
    pub theta: u64,
    /// `sims[b][m]`: simulator seed for draw `b`, replicate `m`.
    pub sims: Vec<Vec<u64>>,
    /// Base noise for the divergence estimate.
    pub divergence: u64,
}

/// Loss value with its parts.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: DualTensor,
    pub score_term: f64,
    pub divergence_term: f64,
    pub divergence_std_error: f64,
    pub simulations: usize,
    /// Constrained parameter draws used for the score term.
    pub thetas: Vec<[f64; DIM]>,
}

/// Everything the loss needs besides the flow parameters.
pub struct Objective<'a> {
    pub simulator: &'a Simulator,
    pub observed: &'a Trajectory,
    pub scoring: &'a ScoringRuleConfig,
    pub kl: &'a KlEstimatorConfig,
    pub divergence: &'a dyn Divergence,
}

impl Objective<'_> {
    /// `(1/B) Σ_b score(x, θ_b) + D`, with `B = seeds.sims.len()`. When
    /// `params` are constants nothing is recorded for backward.
    pub fn loss(&self, tape: &Tape, flow: &FlowModel, params: &[DualTensor], seeds: &LossSeeds) -> Result<LossBreakdown> {
        let batch = seeds.sims.len();
        if batch == 0 {
            return Err(Error::Contract("loss needs at least one parameter draw".into()));
        }
        let pass = flow.pass(tape, params, &FlowModel::base_noise(batch, seeds.theta))?;
        let thetas: Vec<[f64; DIM]> = pass
            .beta
            .values()
            .chunks_exact(DIM)
            .map(|b| [b[0], b[1], b[2]])
            .collect();
        let track = !pass.beta.is_constant();

        let scored: Vec<(f64, Vec<f64>)> = thetas
            .par_iter()
            .zip(&seeds.sims)
            .map(|(theta, sim_seeds)| {
                let local = Tape::new();
                let beta = if track {
                    local.var(vec![DIM], theta.to_vec())?
                } else {
                    DualTensor::vector(theta.to_vec())
                };
                let s = score(&local, self.simulator, self.observed, &beta, self.scoring, sim_seeds)?;
                let grad = if track { local.backward(&s)?.wrt(&beta) } else { Vec::new() };
                if !s.item().is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite score at beta = {theta:?}")));
                }
                Ok((s.item(), grad))
            })
            .collect::<Result<_>>()?;

        let mut score_sum: Option<DualTensor> = None;
        for (b, (value, grad)) in scored.into_iter().enumerate() {
            let s = if track {
                let beta_b = tape.index_select(&pass.beta, &Arc::new((b * DIM..(b + 1) * DIM).collect()), vec![DIM])?;
                tape.splice(&beta_b, value, grad)?
            } else {
                DualTensor::scalar(value)
            };
            score_sum = Some(match score_sum {
                None => s,
                Some(acc) => tape.add(&acc, &s)?,
            });
        }
        let score_term = tape.mul_scalar(&score_sum.expect("batch >= 1"), 1.0 / batch as f64);
        let div = self.divergence.estimate(tape, flow, params, self.kl.samples, seeds.divergence)?;
        let total = tape.add(&score_term, &div.value)?;
        Ok(LossBreakdown {
            score_term: score_term.item(),
            divergence_term: div.value.item(),
            divergence_std_error: div.std_error,
            total,
            simulations: seeds.sims.iter().map(Vec::len).sum(),
            thetas,
        })
    }
}
