//! Scenario configuration.
//!
//! A scenario is a single JSON document. Every field except `seed` has a
//! default, unknown fields are rejected, and [`ScenarioConfig::validate`]
//! checks ranges after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::TreeParams;
use crate::datagen::PopulationSpec;
use crate::domain::ObjectiveWeights;
use crate::error::{Error, Result};
use crate::flsim::malicious::MaliciousRoster;
use crate::flsim::model::TrainHyper;
use crate::optimizer::{GaParams, Thresholds};
use crate::trust::TrustConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Genetic algorithm over all five objectives.
    Ga,
    /// Genetic algorithm with every trust value pinned to the same constant.
    GaNoTrust,
    /// Uniformly random subset of the individually feasible devices.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialTrust {
    /// Regression tree over the orchestrators' logs, 0.5 before any log exists.
    Bootstrap,
    Fixed(f64),
    /// Uniform in `[0, 1]`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlParams {
    pub rounds: u32,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Width of the optional tanh hidden layer.
    pub hidden: Option<usize>,
    /// Probability that an honest client silently drops a round.
    pub straggler_prob: f64,
}

impl Default for FlParams {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            rounds: 40,
            learning_rate: h.learning_rate,
            local_epochs: h.local_epochs,
            batch_size: h.batch_size,
            hidden: None,
            straggler_prob: 0.05,
        }
    }
}

impl FlParams {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper { learning_rate: self.learning_rate, local_epochs: self.local_epochs, batch_size: self.batch_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationSpec,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_dismissal")]
    pub dismissal_fraction: f64,
    #[serde(default)]
    pub trust: TrustConfig,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default)]
    pub fl: FlParams,
    #[serde(default)]
    pub malicious: MaliciousRoster,
    #[serde(default = "default_selection")]
    pub selection: SelectionPolicy,
    /// Share of feasible devices drawn by the random policy.
    #[serde(default = "default_random_fraction")]
    pub random_fraction: f64,
    #[serde(default = "default_initial_trust")]
    pub initial_trust: InitialTrust,
    #[serde(default)]
    pub tree: TreeParams,
    /// Areas with fewer highly trusted clients than this are requested.
    #[serde(default = "default_min_trusted")]
    pub min_trusted_per_area: usize,
    /// Clusters over last reported accuracy used for the coverage objective.
    #[serde(default = "default_accuracy_clusters")]
    pub accuracy_clusters: usize,
    /// Cap on probes per round as a share of the selected clients.
    #[serde(default = "default_probe_share")]
    pub probe_share: f64,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_dismissal() -> f64 {
    0.5
}
fn default_selection() -> SelectionPolicy {
    SelectionPolicy::Ga
}
fn default_random_fraction() -> f64 {
    0.2
}
fn default_initial_trust() -> InitialTrust {
    InitialTrust::Bootstrap
}
fn default_min_trusted() -> usize {
    2
}
fn default_accuracy_clusters() -> usize {
    4
}
fn default_probe_share() -> f64 {
    0.25
}

impl ScenarioConfig {
    /// Defaults everywhere, with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults parse")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::InvalidConfig { field: field.into(), message });
        self.population.validate()?;
        self.thresholds.validate()?;
        self.ga.validate()?;
        self.malicious.validate()?;
        for (field, v) in [
            ("dismissal_fraction", self.dismissal_fraction),
            ("random_fraction", self.random_fraction),
            ("probe_share", self.probe_share),
            ("fl.straggler_prob", self.fl.straggler_prob),
            ("trust.beta", self.trust.beta),
            ("trust.probe_cutoff", self.trust.probe_cutoff),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("{v} outside [0, 1]"));
            }
        }
        if !(self.trust.epsilon > 0.0) {
            return bad("trust.epsilon", "must be positive".into());
        }
        let a = self.trust.alphas;
        if [a.success, a.abnormal, a.group, a.contradiction].iter().any(|x| !(*x >= 0.0)) {
            return bad("trust.alphas", "must be non-negative".into());
        }
        if self.fl.batch_size == 0 {
            return bad("fl.batch_size", "must be positive".into());
        }
        if !(self.fl.learning_rate > 0.0) {
            return bad("fl.learning_rate", "must be positive".into());
        }
        if self.accuracy_clusters == 0 {
            return bad("accuracy_clusters", "must be positive".into());
        }
        if let InitialTrust::Fixed(v) = self.initial_trust {
            if !(0.0..=1.0).contains(&v) {
                return bad("initial_trust", format!("{v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let err = ScenarioConfig::from_json("{}").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn defaults_fill_everything_else() {
        let cfg = ScenarioConfig::from_json(r#"{"seed": 3}"#).unwrap();
        assert_eq!(cfg, ScenarioConfig::with_seed(3));
        assert_eq!(cfg.fl.rounds, 40);
        assert_eq!(cfg.population.clients, 50);
        assert_eq!(cfg.trust.epsilon, 3.5);
        assert_eq!(cfg.ga.population, 50);
    }

    #[test]
    fn ranges_are_checked() {
        assert!(ScenarioConfig::from_json(r#"{"seed": 1, "dismissal_fraction": 1.5}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"seed": 1, "weights": [0.5, 0.5, 0.5, 0, 0]}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"seed": 1, "thresholds": {"high_trust": 2}}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"seed": 1, "bogus": 1}"#).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ScenarioConfig::from_json(
            r#"{"seed": 9, "initial_trust": {"fixed": 0.0}, "selection": "random",
                "malicious": {"fraction": 0.3, "behavior": {"tag": "label_flip", "intensity": 0.8}},
                "fl": {"rounds": 5, "learning_rate": 0.2, "hidden": 32}}"#,
        )
        .unwrap();
        let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.fl.hidden, Some(32));
        assert_eq!(cfg.fl.learning_rate, 0.2);
    }
}
