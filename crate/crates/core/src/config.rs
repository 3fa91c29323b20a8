//! Run configuration: one TOML document with a section per module.
//!
//! Unknown keys anywhere are rejected; errors name the offending field as a
//! dotted path such as `population.child_share`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::gvi::{KlEstimatorConfig, ScoringRuleConfig, TrainConfig};
use crate::population::PopulationConfig;
use crate::simulator::SimConfig;

pub const DEFAULT_SEED: u64 = 20_240_611;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub population: PopulationConfig,
    pub simulator: SimConfig,
    pub flow: FlowConfig,
    pub scoring: ScoringRuleConfig,
    pub kl: KlEstimatorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            out_dir: PathBuf::from("out"),
            population: PopulationConfig::default(),
            simulator: SimConfig::default(),
            flow: FlowConfig::default(),
            scoring: ScoringRuleConfig::default(),
            kl: KlEstimatorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML document.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", one_line(&e)))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            Error::config(field, one_line(e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.simulator.validate()?;
        self.flow.validate()?;
        self.scoring.validate()?;
        self.scoring.days(self.simulator.horizon).map_err(|_| {
            Error::config(
                "scoring.window",
                format!("exceeds simulator.horizon = {}", self.simulator.horizon),
            )
        })?;
        self.kl.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Simulator settings used for the training and validation losses.
    pub fn training_simulator(&self) -> SimConfig {
        SimConfig {
            relaxation: self.train.relaxation.unwrap_or(self.simulator.relaxation),
            ..self.simulator.clone()
        }
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

fn one_line(e: &toml::de::Error) -> String {
    let mut msg = e.message().trim().to_string();
    if let Some(span) = e.span() {
        msg.push_str(&format!(" (byte offset {})", span.start));
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.scoring.window = Some(10);
        cfg.flow.hidden = vec![32, 32];
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("seed = 3\n[train]\nlearning_rate = 0.01\n[flow.spline]\nbins = 6\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.flow.spline.bins, 6);
        assert_eq!(cfg.flow.spline.tail_bound, 5.0);
        assert_eq!(cfg.train_config().seed, 3);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("[population]\nchild_share = 1.5\n"), "population.child_share");
        assert_eq!(field_of("[train]\nbatch_size = \"ten\"\n"), "train.batch_size");
        assert_eq!(field_of("[scoring]\nweight = -1.0\n"), "scoring.weight");
        assert_eq!(field_of("[scoring]\nwindow = 31\n"), "scoring.window");
        assert_eq!(field_of("[flow.spline]\nbins = 1\n"), "flow.spline.bins");
        assert_eq!(field_of("[kl]\nsamples = 0\n"), "kl.samples");
        assert_eq!(field_of("[simulator]\ntemperature = 0.0\n"), "simulator.temperature");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(field_of("[population]\nchildren = 0.2\n").starts_with("population"));
        assert!(matches!(RunConfig::parse("colour = 1\n"), Err(Error::Config { .. })));
        assert!(matches!(RunConfig::parse("[train]\nseed = 4\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn malformed_toml_is_a_config_error() {
        assert!(matches!(RunConfig::parse("[population\n"), Err(Error::Config { .. })));
    }
}
