//! Adversarial client behaviours.
//!
//! A behaviour acts at up to two points of a client's round: on the records
//! it trains on (label flipping, data hiding) and on what it reports back
//! (random weights, falsified context, manipulated timing).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelParams, Sample};
use crate::domain::ClientId;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::trust::{Context, ContextValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BehaviorTag {
    LabelFlip,
    RandomWeights,
    DataHiding,
    ContextFalsify,
    TimingManipulation,
}

impl BehaviorTag {
    pub const ALL: [BehaviorTag; 5] = [
        BehaviorTag::LabelFlip,
        BehaviorTag::RandomWeights,
        BehaviorTag::DataHiding,
        BehaviorTag::ContextFalsify,
        BehaviorTag::TimingManipulation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorTag::LabelFlip => "label_flip",
            BehaviorTag::RandomWeights => "random_weights",
            BehaviorTag::DataHiding => "data_hiding",
            BehaviorTag::ContextFalsify => "context_falsify",
            BehaviorTag::TimingManipulation => "timing_manipulation",
        }
    }
}

impl FromStr for BehaviorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BehaviorTag::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::UnknownBehavior(s.to_string()))
    }
}

impl TryFrom<String> for BehaviorTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BehaviorTag> for String {
    fn from(t: BehaviorTag) -> String {
        t.as_str().to_string()
    }
}

impl fmt::Display for BehaviorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_onset() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaliciousBehavior {
    pub tag: BehaviorTag,
    pub intensity: f64,
    /// First round in which the behaviour is active.
    #[serde(default = "default_onset")]
    pub onset: u32,
}

impl MaliciousBehavior {
    pub fn new(tag: BehaviorTag, intensity: f64) -> Result<Self> {
        let b = Self { tag, intensity, onset: 1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::InvalidConfig { field: "malicious.intensity".into(), message: format!("{} outside [0, 1]", self.intensity) });
        }
        Ok(())
    }

    pub fn active(&self, round: u32) -> bool {
        round >= self.onset
    }
}

/// Which clients misbehave. Explicit assignments take precedence over the
/// randomly drawn share.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaliciousRoster {
    pub assign: BTreeMap<u32, MaliciousBehavior>,
    /// Share of the population drawn at random to carry `behavior`.
    pub fraction: f64,
    pub behavior: Option<MaliciousBehavior>,
}

impl MaliciousRoster {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidConfig { field: "malicious.fraction".into(), message: "must lie in [0, 1]".into() });
        }
        if self.fraction > 0.0 && self.behavior.is_none() {
            return Err(Error::InvalidConfig { field: "malicious.behavior".into(), message: "required when fraction > 0".into() });
        }
        self.assign.values().chain(self.behavior.iter()).try_for_each(|b| b.validate())
    }

    pub fn resolve(&self, clients: &[ClientId], seed: u64) -> BTreeMap<ClientId, MaliciousBehavior> {
        let mut out = BTreeMap::new();
        if let Some(b) = self.behavior {
            let k = (clients.len() as f64 * self.fraction).round() as usize;
            let mut rng = stream(seed, Purpose::Roster, &[]);
            let picked: BTreeSet<usize> = sample(&mut rng, clients.len(), k.min(clients.len())).into_iter().collect();
            for i in picked {
                out.insert(clients[i], b);
            }
        }
        for (id, b) in &self.assign {
            if clients.contains(&ClientId(*id)) {
                out.insert(ClientId(*id), *b);
            }
        }
        out
    }
}

/// Records the client actually trains on. Label flipping shifts a share of
/// the labels cyclically by one; data hiding keeps only the most frequent
/// labels. Other behaviours leave the records alone.
pub fn poison_training_set<R: Rng + ?Sized>(
    behavior: &MaliciousBehavior,
    train: &[&Sample],
    classes: usize,
    rng: &mut R,
) -> Vec<Sample> {
    let mut out: Vec<Sample> = train.iter().map(|s| (*s).clone()).collect();
    match behavior.tag {
        BehaviorTag::LabelFlip => {
            let k = (out.len() as f64 * behavior.intensity).round() as usize;
            for i in sample(rng, out.len(), k.min(out.len())) {
                out[i].label = (out[i].label + 1) % classes.max(1);
            }
        }
        BehaviorTag::DataHiding => {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for s in &out {
                *counts.entry(s.label).or_default() += 1;
            }
            let keep_n = ((1.0 - behavior.intensity) * counts.len() as f64).ceil().max(1.0) as usize;
            let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let keep: BTreeSet<usize> = ranked.iter().take(keep_n).map(|(l, _)| *l).collect();
            out.retain(|s| keep.contains(&s.label));
        }
        _ => {}
    }
    out
}

/// What a client sends back after its local round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub params: ModelParams,
    pub context: Context,
    /// Reported round finish time, seconds.
    pub finish_time: f64,
}

/// Applies report-level behaviours: random weights replace the update with
/// values in `[-1, 1]` (a share `intensity` of coordinates), falsified
/// context corrupts a share `intensity` of the context values, and timing
/// manipulation scales the reported finish time by `1 ± intensity`.
pub fn perturb_report<R: Rng + ?Sized>(behavior: &MaliciousBehavior, mut report: ClientReport, rng: &mut R) -> ClientReport {
    let x = behavior.intensity;
    match behavior.tag {
        BehaviorTag::RandomWeights => {
            let n = report.params.weights.len();
            let k = (n as f64 * x).round() as usize;
            for i in sample(rng, n, k.min(n)) {
                report.params.weights[i] = rng.random_range(-1.0..=1.0);
            }
        }
        BehaviorTag::ContextFalsify => {
            let keys: Vec<String> = report.context.keys().cloned().collect();
            let k = (keys.len() as f64 * x).round() as usize;
            for i in sample(rng, keys.len(), k.min(keys.len())) {
                let v = report.context.get_mut(&keys[i]).expect("key listed above");
                *v = match v {
                    ContextValue::Num(n) => ContextValue::Num(*n + rng.random_range(1..=5) as f64),
                    ContextValue::Cat(s) => ContextValue::Cat(format!("{s}~")),
                };
            }
        }
        BehaviorTag::TimingManipulation => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            report.finish_time *= 1.0 + sign * x;
        }
        _ => {}
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flsim::model::{train_on, ModelShape, TrainHyper};
    use crate::trust::tr4_contradictions;

    fn toy() -> Vec<Sample> {
        (0..60)
            .map(|i| {
                let label = i % 2;
                let x = if label == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64 / 60.0;
                Sample { features: vec![x, 1.0], label }
            })
            .collect()
    }

    fn report() -> ClientReport {
        let mut context = Context::new();
        context.insert("area".into(), ContextValue::Cat("2".into()));
        context.insert("finish_time_bucket".into(), ContextValue::Num(4.0));
        context.insert("record_count_bucket".into(), ContextValue::Num(7.0));
        ClientReport {
            params: ModelParams::zeros(ModelShape { inputs: 2, hidden: None, classes: 2 }),
            context,
            finish_time: 40.0,
        }
    }

    #[test]
    fn zero_intensity_is_identity() {
        let data = toy();
        let refs: Vec<&Sample> = data.iter().collect();
        for tag in BehaviorTag::ALL {
            let b = MaliciousBehavior::new(tag, 0.0).unwrap();
            let mut rng = stream(1, Purpose::Malicious, &[]);
            let out = poison_training_set(&b, &refs, 2, &mut rng);
            // data hiding at intensity 0 keeps every label
            assert_eq!(out, data, "{tag}");
            assert_eq!(perturb_report(&b, report(), &mut rng), report(), "{tag}");
        }
    }

    #[test]
    fn full_label_flip_ruins_held_out_accuracy() {
        let data = toy();
        let (train, test): (Vec<_>, Vec<_>) = data.iter().enumerate().partition(|(i, _)| i % 5 != 0);
        let train: Vec<&Sample> = train.into_iter().map(|(_, s)| s).collect();
        let test: Vec<&Sample> = test.into_iter().map(|(_, s)| s).collect();
        let b = MaliciousBehavior::new(BehaviorTag::LabelFlip, 1.0).unwrap();
        let flipped = poison_training_set(&b, &train, 2, &mut stream(2, Purpose::Malicious, &[]));
        assert!(flipped.iter().zip(&train).all(|(f, o)| f.label != o.label));
        let refs: Vec<&Sample> = flipped.iter().collect();
        let hyper = TrainHyper { learning_rate: 0.5, local_epochs: 20, batch_size: 8 };
        let g = ModelParams::zeros(ModelShape { inputs: 2, hidden: None, classes: 2 });
        let honest = train_on(&train, &test, &g, &hyper, 1).unwrap();
        let poisoned = train_on(&refs, &test, &g, &hyper, 1).unwrap();
        assert!(honest.accuracy >= 0.95);
        assert!(poisoned.accuracy <= 0.5);
    }

    #[test]
    fn full_context_falsification_contradicts_every_key() {
        let honest = report();
        let b = MaliciousBehavior::new(BehaviorTag::ContextFalsify, 1.0).unwrap();
        let bad = perturb_report(&b, honest.clone(), &mut stream(3, Purpose::Malicious, &[]));
        assert_eq!(tr4_contradictions(&bad.context, &honest.context).unwrap(), 3);
    }

    #[test]
    fn data_hiding_keeps_frequent_labels() {
        let data: Vec<Sample> = [0, 0, 0, 1, 1, 2].iter().map(|&l| Sample { features: vec![0.0], label: l }).collect();
        let refs: Vec<&Sample> = data.iter().collect();
        let b = MaliciousBehavior::new(BehaviorTag::DataHiding, 0.6).unwrap();
        let kept = poison_training_set(&b, &refs, 3, &mut stream(4, Purpose::Malicious, &[]));
        assert_eq!(kept.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let err = serde_json::from_str::<MaliciousBehavior>(r#"{"tag":"sybil","intensity":0.5}"#).unwrap_err();
        assert!(err.to_string().contains("unknown-behavior"), "{err}");
        assert!(matches!("sybil".parse::<BehaviorTag>(), Err(Error::UnknownBehavior(_))));
    }

    #[test]
    fn roster_resolution_is_seeded() {
        let ids: Vec<ClientId> = (0..50).map(ClientId).collect();
        let roster = MaliciousRoster {
            fraction: 0.3,
            behavior: Some(MaliciousBehavior::new(BehaviorTag::LabelFlip, 0.8).unwrap()),
            ..Default::default()
        };
        let a = roster.resolve(&ids, 5);
        assert_eq!(a.len(), 15);
        assert_eq!(a, roster.resolve(&ids, 5));
    }
}
