//! Differentiable stochastic epidemic dynamics on a [`Population`].
//!
//! Each day every susceptible agent accumulates a hazard from the infectious
//! members of each group it belongs to,
//! `λ = Σ_L ψ β_L Δt_L Σ_{i ∈ g_L} I(t − t_i)`, and is infected with
//! probability `1 − exp(−λ)`. The Bernoulli draw is a logistic-noise relaxation
//! so the trajectory is differentiable in `β`: forward values stay binary while
//! gradients flow through the relaxed sample (straight-through).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualTensor, Tape};
use crate::error::{Error, Result};
use crate::population::{LocationKind, Population};
use crate::rng::{self, stream};

/// Upper end of the transmission-intensity support.
pub const BETA_MAX: f64 = 2.0;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logits.
pub const PROB_EPS: f64 = 1e-7;

/// Transmission intensities `(β_household, β_school, β_company)` stored by
/// their unconstrained pre-image `u`, with `β = BETA_MAX · sigmoid(u)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaVector {
    unconstrained: [f64; 3],
}

impl ThetaVector {
    pub fn from_unconstrained(unconstrained: [f64; 3]) -> Self {
        ThetaVector { unconstrained }
    }

    pub fn from_constrained(beta: [f64; 3]) -> Result<Self> {
        for (kind, b) in LocationKind::ALL.iter().zip(beta) {
            if !(b > 0.0 && b < BETA_MAX) {
                return Err(Error::Domain {
                    op: "theta",
                    detail: format!("beta_{kind} = {b} outside (0, {BETA_MAX})"),
                });
            }
        }
        let logit = |b: f64| {
            let p = b / BETA_MAX;
            p.ln() - (-p).ln_1p()
        };
        Ok(ThetaVector {
            unconstrained: beta.map(logit),
        })
    }

    pub fn unconstrained(&self) -> [f64; 3] {
        self.unconstrained
    }

    pub fn constrained(&self) -> [f64; 3] {
        self.unconstrained.map(|u| BETA_MAX * crate::autodiff::sigmoid(u))
    }

    /// Differentiable squash of an unconstrained `[3]` tensor.
    pub fn constrain(tape: &Tape, unconstrained: &DualTensor) -> DualTensor {
        tape.mul_scalar(&tape.sigmoid(unconstrained), BETA_MAX)
    }
}

/// How infection draws carry gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Binary forward values, gradients of the relaxed sample.
    #[default]
    StraightThrough,
    /// Relaxed samples in both directions; smooth in every input.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Interaction duration per day, as a fraction of a day.
    pub dt_household: f64,
    pub dt_school: f64,
    pub dt_company: f64,
    /// Days from infection to peak infectiousness.
    pub peak_day: f64,
    /// Days after infection beyond which an agent is no longer infectious.
    pub infectious_days: f64,
    pub temperature: f64,
    pub seed_fraction: f64,
    pub horizon: usize,
    pub relaxation: Relaxation,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_household: 0.5,
            dt_school: 0.33,
            dt_company: 0.33,
            peak_day: 2.0,
            infectious_days: 14.0,
            temperature: 0.1,
            seed_fraction: 0.001,
            horizon: 30,
            relaxation: Relaxation::StraightThrough,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("simulator.dt_household", self.dt_household),
            ("simulator.dt_school", self.dt_school),
            ("simulator.dt_company", self.dt_company),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.peak_day > 0.0 && self.peak_day <= self.infectious_days && self.infectious_days.is_finite()) {
            return Err(Error::config(
                "simulator.peak_day",
                format!(
                    "need 0 < peak_day <= infectious_days, got {} and {}",
                    self.peak_day, self.infectious_days
                ),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("simulator.temperature", "must be positive"));
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction < 1.0) {
            return Err(Error::config("simulator.seed_fraction", "must lie in (0, 1)"));
        }
        if self.horizon < 1 {
            return Err(Error::config("simulator.horizon", "must be at least 1"));
        }
        Ok(())
    }

    pub fn dt(&self, kind: LocationKind) -> f64 {
        match kind {
            LocationKind::Household => self.dt_household,
            LocationKind::School => self.dt_school,
            LocationKind::Company => self.dt_company,
        }
    }

    pub fn profile(&self, days_since_infection: f64) -> f64 {
        infectious_profile(days_since_infection, self.peak_day, self.infectious_days)
    }
}

/// Relative infectiousness `s` days after infection: `(s/a)·exp(1 − s/a)` on
/// `(0, duration]`, zero elsewhere. Peaks at 1 when `s = a`.
pub fn infectious_profile(s: f64, peak: f64, duration: f64) -> f64 {
    if s > 0.0 && s <= duration {
        let r = s / peak;
        r * (1.0 - r).exp()
    } else {
        0.0
    }
}

/// `1 − exp(−ψ·β·Δt·Λ)`.
pub fn infection_probability(susceptibility: f64, beta: f64, dt: f64, load: f64) -> Result<f64> {
    for (name, v) in [("susceptibility", susceptibility), ("beta", beta), ("dt", dt), ("load", load)] {
        if !(v >= 0.0) {
            return Err(Error::Domain {
                op: "infection_probability",
                detail: format!("{name} = {v} must be >= 0"),
            });
        }
    }
    Ok(-(-susceptibility * beta * dt * load).exp_m1())
}

/// A relaxed Bernoulli sample: `soft = sigmoid((logit p + logit u) / τ)`
/// and `hard = [soft > 0.5]`.
#[derive(Clone, Debug)]
pub struct RelaxedDraw {
    pub soft: DualTensor,
    pub hard: Vec<f64>,
}

impl RelaxedDraw {
    /// Differentiable carrier for the draw under `mode`.
    pub fn carrier(&self, tape: &Tape, mode: Relaxation) -> Result<DualTensor> {
        match mode {
            Relaxation::StraightThrough => tape.straight_through(&self.soft, self.hard.clone()),
            Relaxation::Soft => Ok(self.soft.clone()),
        }
    }
}

/// Logistic-noise relaxation of `Bernoulli(p)` driven by uniforms `u ∈ (0, 1)`.
///
/// `P(hard = 1) = p` exactly: `logit p + logit u > 0 ⇔ u > 1 − p`.
pub fn relaxed_bernoulli(tape: &Tape, p: &DualTensor, u: &[f64], temperature: f64) -> Result<RelaxedDraw> {
    if !(temperature > 0.0) {
        return Err(Error::config("simulator.temperature", format!("must be positive, got {temperature}")));
    }
    if u.len() != p.len() {
        return Err(Error::Shape {
            op: "relaxed_bernoulli",
            detail: format!("{} probabilities, {} uniforms", p.len(), u.len()),
        });
    }
    let p = tape.clamp_max(&tape.clamp_min(p, PROB_EPS), 1.0 - PROB_EPS);
    let logit_p = tape.sub(&tape.log(&p)?, &tape.log(&tape.rsub_scalar(1.0, &p))?)?;
    let logit_u = DualTensor::constant(p.shape().to_vec(), u.iter().map(|&v| v.ln() - (-v).ln_1p()).collect())?;
    let z = tape.mul_scalar(&tape.add(&logit_p, &logit_u)?, 1.0 / temperature);
    let soft = tape.sigmoid(&z);
    let hard = soft.values().iter().map(|&y| if y > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(RelaxedDraw { soft, hard })
}

/// Observed or simulated daily series for days `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub new_infections: Vec<f64>,
    /// `x_t = log(c_t + 1)`.
    pub log_series: Vec<f64>,
}

pub const TRAJECTORY_HEADER: &str = "day,new_infections,log_new_infections";

/// `log(c + 1)`; the offset keeps days without infections finite.
pub fn log_transform(count: f64) -> f64 {
    count.ln_1p()
}

impl Trajectory {
    pub fn from_counts(new_infections: Vec<f64>) -> Trajectory {
        let log_series = new_infections.iter().map(|&c| log_transform(c)).collect();
        Trajectory {
            new_infections,
            log_series,
        }
    }

    pub fn horizon(&self) -> usize {
        self.new_infections.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for (t, (c, x)) in self.new_infections.iter().zip(&self.log_series).enumerate() {
            writeln!(out, "{},{:.6},{:.6}", t + 1, c, x).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TRAJECTORY_HEADER => {}
            Some(h) => return Err(Error::parse(1, format!("expected header `{TRAJECTORY_HEADER}`, found `{h}`"))),
            None => return Err(Error::parse(1, "empty trajectory file")),
        }
        let mut counts = Vec::new();
        let mut logs = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = i + 2;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::parse(row, format!("expected 3 fields, found {}", cols.len())));
            }
            let day: usize = cols[0]
                .parse()
                .map_err(|_| Error::parse(row, format!("day `{}` is not an integer", cols[0])))?;
            if day != counts.len() + 1 {
                return Err(Error::parse(row, format!("expected day {}, found {day}", counts.len() + 1)));
            }
            let num = |s: &str, name: &str| -> Result<f64> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::parse(row, format!("{name} `{s}` is not a number")))?;
                if v.is_finite() && v >= 0.0 {
                    Ok(v)
                } else {
                    Err(Error::parse(row, format!("{name} `{s}` must be finite and >= 0")))
                }
            };
            counts.push(num(cols[1], "new_infections")?);
            logs.push(num(cols[2], "log_new_infections")?);
        }
        if counts.is_empty() {
            return Err(Error::parse(2, "trajectory has no rows"));
        }
        Ok(Trajectory {
            new_infections: counts,
            log_series: logs,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Trajectory::parse_csv(&text)
    }
}

/// Hard infection state at the end of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpidemicState {
    /// Day of infection per agent (`0` for initial seeds), `None` if never infected.
    pub infection_day: Vec<Option<usize>>,
    pub day: usize,
}

impl EpidemicState {
    pub fn infected_count(&self) -> usize {
        self.infection_day.iter().filter(|d| d.is_some()).count()
    }
}

/// Output of one differentiable simulation.
#[derive(Clone, Debug)]
pub struct SimOutput {
    /// Differentiable daily new infections `c_t`, shape `[T]`.
    pub counts: DualTensor,
    /// Differentiable `x̃_t = log(c_t + 1)`, shape `[T]`.
    pub log_series: DualTensor,
    /// Hard susceptible count at the end of each day `1..=T`.
    pub susceptible: Vec<usize>,
    pub seeds: usize,
    pub state: EpidemicState,
}

impl SimOutput {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            new_infections: self.counts.values().to_vec(),
            log_series: self.log_series.values().to_vec(),
        }
    }
}

/// Group-membership indices for one location kind; agents outside the kind
/// point at a trailing dummy group and carry a zero coefficient.
#[derive(Debug)]
struct KindIndex {
    group_of: Arc<Vec<usize>>,
    n_groups: usize,
    /// `ψ_i · Δt_L` for members, 0 otherwise.
    coef: DualTensor,
}

/// A population prepared for repeated simulation under one configuration.
#[derive(Debug)]
pub struct Simulator {
    population: Arc<Population>,
    config: SimConfig,
    kinds: Vec<KindIndex>,
    n_seeds: usize,
}

impl Simulator {
    pub fn new(population: Arc<Population>, config: SimConfig) -> Result<Simulator> {
        config.validate()?;
        let n = population.len();
        let kinds = LocationKind::ALL
            .into_iter()
            .map(|kind| {
                let n_groups = population.group_count(kind);
                let mut group_of = Vec::with_capacity(n);
                let mut coef = Vec::with_capacity(n);
                for agent in population.agents() {
                    match agent.group(kind) {
                        Some(g) => {
                            group_of.push(g);
                            coef.push(agent.susceptibility * config.dt(kind));
                        }
                        None => {
                            group_of.push(n_groups);
                            coef.push(0.0);
                        }
                    }
                }
                KindIndex {
                    group_of: Arc::new(group_of),
                    n_groups: n_groups + 1,
                    coef: DualTensor::vector(coef),
                }
            })
            .collect();
        let n_seeds = ((config.seed_fraction * n as f64).ceil() as usize).clamp(1, n);
        Ok(Simulator {
            population,
            config,
            kinds,
            n_seeds,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    /// Number of agents infected at day 0.
    pub fn n_seeds(&self) -> usize {
        self.n_seeds
    }

    /// Agents infected at day 0 under noise `seed`.
    pub fn seed_agents(&self, seed: u64) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.population.len()).collect();
        ids.shuffle(&mut rng::rng_from(seed, &[stream::SEEDING]));
        ids.truncate(self.n_seeds);
        ids.sort_unstable();
        ids
    }

    /// Uniform noise `u[t][i]` for days `1..=T`; shared by every run with the
    /// same seed so runs at different `β` use common random numbers.
    pub fn noise(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::rng_from(seed, &[stream::SIM_NOISE]);
        let n = self.population.len();
        (0..self.config.horizon)
            .map(|_| (0..n).map(|_| rng.sample(Open01)).collect())
            .collect()
    }

    /// Run with constant intensities (no gradient bookkeeping).
    pub fn run_values(&self, beta: [f64; 3], seed: u64) -> Result<SimOutput> {
        let tape = Tape::new();
        self.run(&tape, &DualTensor::vector(beta.to_vec()), seed)
    }

    /// Run the epidemic for `T` days with intensities `beta` (shape `[3]`,
    /// constrained values) recorded on `tape`.
    pub fn run(&self, tape: &Tape, beta: &DualTensor, seed: u64) -> Result<SimOutput> {
        if beta.len() != 3 {
            return Err(Error::Shape {
                op: "simulate",
                detail: format!("beta must have 3 entries, got {:?}", beta.shape()),
            });
        }
        for (kind, &b) in LocationKind::ALL.iter().zip(beta.values()) {
            if !(b > 0.0 && b <= BETA_MAX) {
                return Err(Error::Domain {
                    op: "simulate",
                    detail: format!("beta_{kind} = {b} outside (0, {BETA_MAX}]"),
                });
            }
        }
        let cfg = &self.config;
        let n = self.population.len();
        let horizon = cfg.horizon;
        let max_lag = cfg.infectious_days.floor() as usize;
        let noise = self.noise(seed);

        let betas: Vec<DualTensor> = (0..3)
            .map(|k| tape.index_select(beta, &Arc::new(vec![k]), vec![]))
            .collect::<Result<_>>()?;

        let mut infection_day: Vec<Option<usize>> = vec![None; n];
        let mut seed_vec = vec![0.0; n];
        for id in self.seed_agents(seed) {
            seed_vec[id] = 1.0;
            infection_day[id] = Some(0);
        }
        // new_by_day[s] = differentiable new infections on day s (day 0 = seeds)
        let mut new_by_day = vec![DualTensor::vector(seed_vec)];
        let mut cumulative = new_by_day[0].clone();
        let mut counts = Vec::with_capacity(horizon);
        let mut susceptible = Vec::with_capacity(horizon);

        for t in 1..=horizon {
            let mut load: Option<DualTensor> = None;
            for s in t.saturating_sub(max_lag)..t {
                let weight = cfg.profile((t - s) as f64);
                if weight == 0.0 {
                    continue;
                }
                let term = tape.mul_scalar(&new_by_day[s], weight);
                load = Some(match load {
                    None => term,
                    Some(acc) => tape.add(&acc, &term)?,
                });
            }
            let load = load.unwrap_or_else(|| DualTensor::zeros(vec![n]));

            let mut hazard: Option<DualTensor> = None;
            for (k, index) in self.kinds.iter().enumerate() {
                let group_load = tape.segment_sum(&load, &index.group_of, index.n_groups)?;
                let exposure = tape.index_select(&group_load, &index.group_of, vec![n])?;
                let weighted = tape.mul(&tape.mul(&exposure, &index.coef)?, &betas[k])?;
                hazard = Some(match hazard {
                    None => weighted,
                    Some(acc) => tape.add(&acc, &weighted)?,
                });
            }
            let hazard = hazard.expect("three location kinds");
            if let Some(i) = hazard.values().iter().position(|v| !v.is_finite()) {
                return Err(self.hazard_error(t, i, hazard.values()[i]));
            }

            let prob = tape.rsub_scalar(1.0, &tape.exp(&tape.neg(&hazard)));
            let draw = relaxed_bernoulli(tape, &prob, &noise[t - 1], cfg.temperature)?;
            let carrier = draw.carrier(tape, cfg.relaxation)?;
            let at_risk = tape.rsub_scalar(1.0, &cumulative);
            let new = tape.mul(&at_risk, &carrier)?;

            let mut n_susceptible = 0;
            for (i, &h) in draw.hard.iter().enumerate() {
                if infection_day[i].is_none() {
                    if h > 0.5 {
                        infection_day[i] = Some(t);
                    } else {
                        n_susceptible += 1;
                    }
                }
            }
            susceptible.push(n_susceptible);

            cumulative = tape.add(&cumulative, &new)?;
            counts.push(tape.sum(&new));
            new_by_day.push(new);
        }

        let count_refs: Vec<&DualTensor> = counts.iter().collect();
        let counts = tape.concat(&count_refs);
        let log_series = tape.log(&tape.add_scalar(&counts, 1.0))?;
        Ok(SimOutput {
            counts,
            log_series,
            susceptible,
            seeds: self.n_seeds,
            state: EpidemicState {
                infection_day,
                day: horizon,
            },
        })
    }

    fn hazard_error(&self, day: usize, agent: usize, value: f64) -> Error {
        let a = &self.population.agents()[agent];
        let groups: Vec<String> = LocationKind::ALL
            .iter()
            .filter_map(|&k| a.group(k).map(|g| format!("{k} {g}")))
            .collect();
        Error::Numeric(format!(
            "non-finite hazard {value} on day {day} for agent {agent} ({})",
            groups.join(", ")
        ))
    }
}

#[cfg(test)]
mod tests;
