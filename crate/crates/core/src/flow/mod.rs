//! Neural spline flow over the three unconstrained transmission parameters.
//!
//! `z₀ ~ N(0, I₃)` passes through autoregressive rational-quadratic spline
//! transforms (each conditioned by a masked network on its own input, so
//! sampling is a single pass). Coordinates rotate by one after every
//! transform. A fixed squash `β = β_max · sigmoid(z)` maps onto the prior's
//! support.

mod made;
mod spline;

#[cfg(test)]
mod tests;

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softplus, DualTensor, Tape};
use crate::error::{Error, Result};
use crate::rng;
use crate::simulator::{ThetaVector, BETA_MAX};

pub use made::Made;
pub use spline::{Knots, SplineSpec};

pub const DIM: usize = 3;

const CHECKPOINT_FORMAT: &str = "gvi-abm-flow";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub transforms: usize,
    pub hidden: Vec<usize>,
    pub spline: SplineSpec,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            transforms: 3,
            hidden: vec![128, 128, 128],
            spline: SplineSpec::default(),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.transforms == 0 {
            return Err(Error::config("flow.transforms", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("flow.hidden", "needs at least one layer, all widths positive"));
        }
        self.spline.validate()
    }

    /// Hex sha256 over every hyperparameter that fixes the parameter layout
    /// or the meaning of the parameters.
    pub fn architecture_hash(&self) -> String {
        #[derive(Serialize)]
        struct Arch<'a> {
            dim: usize,
            beta_max: f64,
            config: &'a FlowConfig,
        }
        let text = serde_json::to_string(&Arch {
            dim: DIM,
            beta_max: BETA_MAX,
            config: self,
        })
        .expect("architecture serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Independent uniform prior on `[0, β_max]³`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub beta_max: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Prior { beta_max: BETA_MAX }
    }
}

impl Prior {
    pub fn log_density(&self, beta: &[f64]) -> f64 {
        if beta.iter().all(|&b| (0.0..=self.beta_max).contains(&b)) {
            -(beta.len() as f64) * self.beta_max.ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Draws strictly inside the support.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<[f64; DIM]> {
        let mut rng = rng::rng_from(seed, &[]);
        (0..n)
            .map(|_| std::array::from_fn(|_| self.beta_max * rng.sample::<f64, _>(Open01)))
            .collect()
    }
}

/// One posterior draw with its log-density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowDraw {
    pub theta: ThetaVector,
    pub beta: [f64; DIM],
    pub log_q: f64,
}

/// A batch pushed through the flow on a tape.
#[derive(Clone, Debug)]
pub struct FlowPass {
    /// `[n, 3]` pre-squash values.
    pub z: DualTensor,
    /// `[n, 3]` constrained intensities.
    pub beta: DualTensor,
    /// `[n]` log-densities under the flow.
    pub log_q: DualTensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: FlowConfig,
    architecture_hash: String,
    metadata: CheckpointMeta,
    params: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    made: Made,
    /// Conditioner tensors, transform after transform.
    params: Vec<Vec<f64>>,
}

impl FlowModel {
    /// Identity-initialized flow (every conditioner's output layer is zero).
    pub fn new(config: FlowConfig, seed: u64) -> Result<FlowModel> {
        config.validate()?;
        let made = Made::new(DIM, &config.hidden, config.spline.n_params());
        let mut rng = rng::rng_from(seed, &[rng::stream::FLOW_INIT]);
        let params = (0..config.transforms).flat_map(|_| made.init(&mut rng)).collect();
        Ok(FlowModel { config, made, params })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    /// Shapes of the tensors in [`FlowModel::params`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        (0..self.config.transforms).flat_map(|_| self.made.param_shapes()).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    fn per_transform(&self) -> usize {
        self.params.len() / self.config.transforms
    }

    /// Parameters as tape leaves, for gradients w.r.t. φ.
    pub fn bind(&self, tape: &Tape) -> Vec<DualTensor> {
        self.param_tensors().iter().map(|p| tape.leaf(p)).collect()
    }

    /// Parameters as constants (no gradient bookkeeping).
    pub fn param_tensors(&self) -> Vec<DualTensor> {
        self.param_shapes()
            .into_iter()
            .zip(&self.params)
            .map(|(shape, v)| DualTensor::constant(shape, v.clone()).expect("stored shapes match"))
            .collect()
    }

    /// Push base draws `eps` (row-major `[n, 3]`) through the flow.
    pub fn pass(&self, tape: &Tape, params: &[DualTensor], eps: &[f64]) -> Result<FlowPass> {
        if eps.is_empty() || eps.len() % DIM != 0 {
            return Err(Error::Shape {
                op: "flow",
                detail: format!("{} base values is not a positive multiple of {DIM}", eps.len()),
            });
        }
        let n = eps.len() / DIM;
        let spec = &self.config.spline;
        let p = spec.n_params();
        let base: Vec<f64> = eps
            .chunks_exact(DIM)
            .map(|row| -0.5 * DIM as f64 * (2.0 * PI).ln() - 0.5 * row.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let mut log_q = DualTensor::vector(base);
        let mut z = DualTensor::constant(vec![n, DIM], eps.to_vec())?;

        // rotated[i][j] = y_{(j + 1) % 3}[i] with y concatenated column-wise
        let rotate: Arc<Vec<usize>> =
            Arc::new((0..n).flat_map(|i| (0..DIM).map(move |j| ((j + 1) % DIM) * n + i)).collect());
        let per = self.per_transform();
        for t in 0..self.config.transforms {
            let raw = self.made.forward_tape(tape, &z, &params[t * per..(t + 1) * per])?;
            let mut ys = Vec::with_capacity(DIM);
            for j in 0..DIM {
                let col = tape.index_select(&z, &Arc::new((0..n).map(|i| i * DIM + j).collect()), vec![n])?;
                let idx = (0..n).flat_map(|i| (0..p).map(move |r| i * DIM * p + j * p + r)).collect();
                let raw_j = tape.index_select(&raw, &Arc::new(idx), vec![n, p])?;
                let (y, logdet) = spec.forward_tape(tape, &col, &raw_j)?;
                log_q = tape.sub(&log_q, &logdet)?;
                ys.push(y);
            }
            let stacked = tape.concat(&ys.iter().collect::<Vec<_>>());
            z = tape.index_select(&stacked, &rotate, vec![n, DIM])?;
        }

        // squash log-Jacobian: log β_max − softplus(−z) − softplus(z)
        let squash = tape.add(&tape.softplus(&tape.neg(&z)), &tape.softplus(&z))?;
        let squash = tape.matmul(&squash, &DualTensor::constant(vec![DIM, 1], vec![1.0; DIM])?)?;
        let squash = tape.reshape(&squash, vec![n])?;
        log_q = tape.add_scalar(&tape.add(&log_q, &squash)?, -(DIM as f64) * BETA_MAX.ln());
        let beta = tape.mul_scalar(&tape.sigmoid(&z), BETA_MAX);
        Ok(FlowPass { z, beta, log_q })
    }

    /// Standard-normal base draws, row-major `[n, 3]`.
    pub fn base_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::rng_from(seed, &[]);
        (0..n * DIM).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<FlowDraw>> {
        if n == 0 {
            return Err(Error::Contract("sample count must be at least 1".into()));
        }
        let tape = Tape::new();
        let pass = self.pass(&tape, &self.param_tensors(), &Self::base_noise(n, seed))?;
        Ok(pass
            .z
            .values()
            .chunks_exact(DIM)
            .zip(pass.beta.values().chunks_exact(DIM))
            .zip(pass.log_q.values())
            .map(|((z, b), &log_q)| FlowDraw {
                theta: ThetaVector::from_unconstrained([z[0], z[1], z[2]]),
                beta: [b[0], b[1], b[2]],
                log_q,
            })
            .collect())
    }

    pub fn log_prob(&self, beta: [f64; DIM]) -> Result<f64> {
        Ok(self.log_prob_batch(&[beta])?[0])
    }

    pub fn log_prob_batch(&self, betas: &[[f64; DIM]]) -> Result<Vec<f64>> {
        Ok(self.invert(betas)?.1)
    }

    /// Exact inverse pass (squash, then transforms in reverse order): base
    /// points `z₀` (row-major `[n, 3]`) and log-densities.
    pub fn invert(&self, betas: &[[f64; DIM]]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = betas.len();
        let mut log_q = vec![-(DIM as f64) * BETA_MAX.ln(); n];
        let mut z = Vec::with_capacity(n * DIM);
        for (row, beta) in betas.iter().enumerate() {
            for &b in beta {
                if !(b > 0.0 && b < BETA_MAX) {
                    return Err(Error::Domain {
                        op: "log_prob",
                        detail: format!("beta {beta:?} not strictly inside (0, {BETA_MAX})^3"),
                    });
                }
                let v = b.ln() - (BETA_MAX - b).ln();
                log_q[row] += softplus(-v) + softplus(v);
                z.push(v);
            }
        }
        let spec = &self.config.spline;
        let p = spec.n_params();
        let per = self.per_transform();
        for t in (0..self.config.transforms).rev() {
            let params = &self.params[t * per..(t + 1) * per];
            // undo the rotation: y_c = rotated_{(c + 2) % 3}
            let y: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let row = &z[i * DIM..(i + 1) * DIM];
                    (0..DIM).map(move |c| row[(c + DIM - 1) % DIM])
                })
                .collect();
            let mut x = vec![0.0; n * DIM];
            let first = self.made.forward(&[0.0; DIM], 1, params);
            for j in 0..DIM {
                let raw = if j == 0 { None } else { Some(self.made.forward(&x, n, params)) };
                for i in 0..n {
                    let r = match &raw {
                        None => &first[j * p..(j + 1) * p],
                        Some(raw) => &raw[i * DIM * p + j * p..i * DIM * p + (j + 1) * p],
                    };
                    let knots = spec.knots(r)?;
                    let (xv, logdet) = spec.inverse(&knots, y[i * DIM + j]);
                    x[i * DIM + j] = xv;
                    log_q[i] -= logdet;
                }
            }
            z = x;
        }
        for (row, lq) in z.chunks_exact(DIM).zip(log_q.iter_mut()) {
            *lq += -0.5 * DIM as f64 * (2.0 * PI).ln() - 0.5 * row.iter().map(|v| v * v).sum::<f64>();
        }
        Ok((z, log_q))
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: CheckpointMeta) -> Result<()> {
        let path = path.as_ref();
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.config.clone(),
            architecture_hash: self.config.architecture_hash(),
            metadata,
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&checkpoint).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint; with `expected` set, its architecture hash must match.
    pub fn load(path: impl AsRef<Path>, expected: Option<&FlowConfig>) -> Result<(FlowModel, CheckpointMeta)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::parse(e.line(), format!("checkpoint {}: {e}", path.display())))?;
        if checkpoint.format != CHECKPOINT_FORMAT || checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                1,
                format!("unsupported checkpoint {} v{}", checkpoint.format, checkpoint.version),
            ));
        }
        let stored = checkpoint.architecture.architecture_hash();
        if stored != checkpoint.architecture_hash {
            return Err(Error::ArchitectureMismatch {
                expected: stored,
                found: checkpoint.architecture_hash,
            });
        }
        if let Some(cfg) = expected {
            let want = cfg.architecture_hash();
            if want != stored {
                return Err(Error::ArchitectureMismatch {
                    expected: want,
                    found: stored,
                });
            }
        }
        let mut model = FlowModel::new(checkpoint.architecture, 0)?;
        let shapes = model.param_shapes();
        let lengths_ok = shapes.len() == checkpoint.params.len()
            && shapes
                .iter()
                .zip(&checkpoint.params)
                .all(|(s, v)| s.iter().product::<usize>() == v.len());
        if !lengths_ok {
            return Err(Error::parse(1, "checkpoint parameter tensors do not match the architecture"));
        }
        if checkpoint.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        model.params = checkpoint.params;
        Ok((model, checkpoint.metadata))
    }
}

/// `log β_max + log σ(z) + log(1 − σ(z))`.
pub fn squash_log_jacobian(z: f64) -> f64 {
    BETA_MAX.ln() - softplus(-z) - softplus(z)
}
