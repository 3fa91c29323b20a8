//! End-to-end steps shared by the command-line driver and the acceptance
//! suite: every step is a pure function of a [`RunConfig`] and its inputs.

use std::sync::Arc;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, DIM};
use crate::gvi::{train, EpochLog, KlDivergence, Objective, StopReason, TrainOutcome};
use crate::population::Population;
use crate::predictive::{posterior_draws, PosteriorSummary};
use crate::rng::{derive_seed, stream};
use crate::simulator::{Simulator, ThetaVector, Trajectory};

/// Draws behind every posterior summary.
pub const SUMMARY_SAMPLES: usize = 10_000;

pub fn population(cfg: &RunConfig) -> Result<Arc<Population>> {
    Ok(Arc::new(Population::synthesize(&cfg.population, cfg.seed)?))
}

pub fn simulator(cfg: &RunConfig, population: Arc<Population>) -> Result<Simulator> {
    Simulator::new(population, cfg.simulator.clone())
}

/// One simulation at `beta` on the run's ground-truth noise stream.
pub fn generate_truth(cfg: &RunConfig, simulator: &Simulator, beta: [f64; DIM]) -> Result<Trajectory> {
    ThetaVector::from_constrained(beta)?;
    Ok(simulator.run_values(beta, derive_seed(cfg.seed, &[stream::TRUTH]))?.trajectory())
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationSummary {
    pub stop_reason: StopReason,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub sims_used: usize,
    pub budget: usize,
    /// Moments of the best-validation checkpoint.
    pub posterior: PosteriorSummary,
    pub final_posterior: PosteriorSummary,
}

pub struct Calibration {
    pub outcome: TrainOutcome,
    pub summary: CalibrationSummary,
}

/// Train a fresh flow against `observed` and summarize the result.
pub fn calibrate(
    cfg: &RunConfig,
    population: Arc<Population>,
    observed: &Trajectory,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Calibration> {
    cfg.validate()?;
    if observed.horizon() != cfg.simulator.horizon {
        return Err(Error::Contract(format!(
            "observed series has {} days but simulator.horizon = {}",
            observed.horizon(),
            cfg.simulator.horizon
        )));
    }
    let sim = Simulator::new(population, cfg.training_simulator())?;
    let divergence = KlDivergence::default();
    let objective = Objective {
        simulator: &sim,
        observed,
        scoring: &cfg.scoring,
        kl: &cfg.kl,
        divergence: &divergence,
    };
    let flow = FlowModel::new(cfg.flow.clone(), cfg.seed)?;
    let outcome = train(flow, &objective, &cfg.train_config(), on_epoch)?;
    let moments = |flow: &FlowModel| -> Result<PosteriorSummary> {
        let draws = posterior_draws(flow, SUMMARY_SAMPLES, cfg.seed)?;
        PosteriorSummary::of(&draws.iter().map(|d| d.beta).collect::<Vec<_>>())
    };
    let summary = CalibrationSummary {
        stop_reason: outcome.stop,
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss(),
        sims_used: outcome.sims_used(),
        budget: cfg.train.budget,
        posterior: moments(&outcome.best)?,
        final_posterior: moments(&outcome.final_flow)?,
    };
    Ok(Calibration { outcome, summary })
}
