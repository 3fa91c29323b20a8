use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{clip_global_norm, Adam, LossSeeds, Objective};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng::{derive_seed, stream};
use crate::simulator::Relaxation;

pub const LOG_HEADER: &str = "epoch,score_term,kl_term,total_loss,val_loss,sims_used";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Parameter draws per epoch (`B`).
    pub batch_size: usize,
    pub validation_batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub early_stop_window: usize,
    pub early_stop_tolerance: f64,
    /// Total simulations allowed, training and validation together.
    pub budget: usize,
    /// Relaxation of the simulations behind the loss; `None` keeps the
    /// simulator's own setting.
    pub relaxation: Option<Relaxation>,
    /// Set from the run's global seed, never from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            validation_batch_size: 10,
            max_epochs: 125,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            early_stop_window: 10,
            early_stop_tolerance: 0.01,
            budget: 2500,
            relaxation: Some(Relaxation::Soft),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.validation_batch_size", self.validation_batch_size),
            ("train.max_epochs", self.max_epochs),
            ("train.early_stop_window", self.early_stop_window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.budget < self.batch_size {
            return Err(Error::config(
                "train.budget",
                format!("must be at least batch_size = {}, got {}", self.batch_size, self.budget),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        if !(self.early_stop_tolerance.is_finite() && self.early_stop_tolerance > 0.0) {
            return Err(Error::config("train.early_stop_tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub score_term: f64,
    pub kl_term: f64,
    pub total_loss: f64,
    pub val_loss: f64,
    /// Simulations consumed by this epoch (training and validation).
    pub sims_used: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
    BudgetExhausted,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub best: FlowModel,
    pub best_epoch: usize,
    pub final_flow: FlowModel,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn sims_used(&self) -> usize {
        self.log.iter().map(|r| r.sims_used).sum()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.log.iter().find(|r| r.epoch == self.best_epoch).map(|r| r.val_loss)
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.log {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                r.epoch, r.score_term, r.kl_term, r.total_loss, r.val_loss, r.sims_used
            );
        }
        out
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.log_csv()).map_err(|e| Error::io(path, e))
    }
}

fn loss_seeds(base: u64, epoch: usize, batch: usize, replicates: usize, validation: bool) -> LossSeeds {
    let (theta, sim, div) = if validation {
        (stream::THETA_VALID, stream::SIM_VALID, stream::KL_VALID)
    } else {
        (stream::THETA_TRAIN, stream::SIM_TRAIN, stream::KL_TRAIN)
    };
    let e = epoch as u64;
    LossSeeds {
        theta: derive_seed(base, &[theta, e]),
        sims: (0..batch as u64)
            .map(|b| (0..replicates as u64).map(|m| derive_seed(base, &[sim, e, b, m])).collect())
            .collect(),
        divergence: derive_seed(base, &[div, e]),
    }
}

/// Windowed-mean relative change of the validation loss has dropped below
/// tolerance.
fn converged(val: &[f64], window: usize, tolerance: f64) -> bool {
    if val.len() < 2 * window {
        return false;
    }
    let n = val.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let current = mean(&val[n - window..]);
    let previous = mean(&val[n - 2 * window..n - window]);
    (current - previous).abs() <= tolerance * previous.abs()
}

/// Minimise the objective over the flow parameters. Each epoch draws fresh
/// parameter samples and simulator seeds for both the update and the
/// validation loss, and charges their simulations against the budget.
pub fn train(
    flow: FlowModel,
    objective: &Objective,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    objective.scoring.validate()?;
    objective.kl.validate()?;
    let m = objective.scoring.replicates;
    let per_epoch = (cfg.batch_size + cfg.validation_batch_size) * m;

    let mut flow = flow;
    let mut adam = Adam::new(cfg.learning_rate, flow.params());
    let mut best = (flow.clone(), 0, f64::INFINITY);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut val_history = Vec::new();
    let mut used = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        if used + per_epoch > cfg.budget {
            stop = StopReason::BudgetExhausted;
            break;
        }
        let tape = Tape::new();
        let params = flow.bind(&tape);
        let seeds = loss_seeds(cfg.seed, epoch, cfg.batch_size, m, false);
        let parts = objective
            .loss(&tape, &flow, &params, &seeds)
            .map_err(|e| at_epoch(epoch, e))?;
        if !parts.total.item().is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite training loss")));
        }
        let grads = tape.backward(&parts.total)?;
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| grads.wrt(p)).collect();
        drop(params);
        drop(tape);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite gradient")));
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.update(flow.params_mut(), &grads);

        let val_tape = Tape::new();
        let val_seeds = loss_seeds(cfg.seed, epoch, cfg.validation_batch_size, m, true);
        let val = objective
            .loss(&val_tape, &flow, &flow.param_tensors(), &val_seeds)
            .map_err(|e| at_epoch(epoch, e))?;
        let val_loss = val.total.item();
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite validation loss")));
        }
        used += parts.simulations + val.simulations;

        let row = EpochLog {
            epoch,
            score_term: parts.score_term,
            kl_term: parts.divergence_term,
            total_loss: parts.total.item(),
            val_loss,
            sims_used: parts.simulations + val.simulations,
        };
        on_epoch(&row);
        log.push(row);
        if val_loss < best.2 {
            best = (flow.clone(), epoch, val_loss);
        }
        val_history.push(val_loss);
        if converged(&val_history, cfg.early_stop_window, cfg.early_stop_tolerance) {
            stop = StopReason::Converged;
            break;
        }
    }

    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        final_flow: flow,
        log,
        stop,
    })
}

fn at_epoch(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
        Error::SupportViolation(msg) => Error::SupportViolation(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}
