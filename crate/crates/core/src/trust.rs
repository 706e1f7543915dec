//! Per-round trust measurements and their aggregation.
//!
//! Four measurements feed a client's trust:
//!
//! * `Tr1`: share of deployed tasks that were served successfully;
//! * `Tr2`: accuracy reports that are outliers under the modified z-score,
//!   either against the client's own history or, for probed clients,
//!   against what other clients reported for the same (stale) global model;
//! * `Tr3`: how many of the client's previous behaviour-cluster neighbours
//!   it still shares a cluster with;
//! * `Tr4`: contradictions between the context a client reports and what
//!   its neighbours observed.
//!
//! Raw counts are scaled to `[0, 1]`, combined with the alpha weights and
//! folded into the stored trust with an exponential moving average.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::analytics::{modified_z_score, FeatureRow, DEFAULT_EPSILON};
use crate::domain::{ClientId, DeviceProfile, DeviceType, TrustRecord, DEFAULT_HISTORY_WINDOW};
use crate::error::{Error, Result};

/// Tolerance for numeric context comparisons.
pub const CONTEXT_TOLERANCE: f64 = 1e-9;

/// Alpha weights for (Tr1, Tr2, Tr3, Tr4). With the defaults a client with
/// no violations aggregates to exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Alphas {
    pub success: f64,
    pub abnormal: f64,
    pub group: f64,
    pub contradiction: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Self { success: 2.0, abnormal: 1.0, group: 2.0, contradiction: 1.0 }
    }
}

impl From<[f64; 4]> for Alphas {
    fn from(a: [f64; 4]) -> Self {
        Self { success: a[0], abnormal: a[1], group: a[2], contradiction: a[3] }
    }
}

impl From<Alphas> for [f64; 4] {
    fn from(a: Alphas) -> Self {
        [a.success, a.abnormal, a.group, a.contradiction]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustConfig {
    pub alphas: Alphas,
    pub epsilon: f64,
    /// EMA step toward the round's aggregate.
    pub beta: f64,
    /// Deployed rounds during which Tr2 (own history) and Tr3 stay neutral.
    pub warmup_rounds: u64,
    pub history_window: usize,
    /// Rounds of lag of the stale global model sent to probed clients.
    pub probe_lag: u32,
    /// Clients below this trust are probed.
    pub probe_cutoff: f64,
    /// Also probe clients that have never passed a probe.
    pub probe_unverified: bool,
    /// Deployments after which a passed probe expires and the client is
    /// probed again; `None` keeps verification forever.
    pub reverify_after: Option<u64>,
    /// Failed probes after which a client is expelled; `None` never expels.
    pub expel_after: Option<u64>,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            alphas: Alphas::default(),
            epsilon: DEFAULT_EPSILON,
            beta: 0.5,
            warmup_rounds: 3,
            history_window: DEFAULT_HISTORY_WINDOW,
            probe_lag: 3,
            probe_cutoff: 0.4,
            probe_unverified: true,
            reverify_after: Some(5),
            expel_after: Some(2),
        }
    }
}

/// A context metric as reported by a client or observed by its neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextValue {
    Num(f64),
    Cat(String),
}

impl ContextValue {
    fn agrees(&self, other: &ContextValue) -> bool {
        match (self, other) {
            (ContextValue::Num(a), ContextValue::Num(b)) => (a - b).abs() <= CONTEXT_TOLERANCE,
            (ContextValue::Cat(a), ContextValue::Cat(b)) => a == b,
            _ => false,
        }
    }
}

pub type Context = BTreeMap<String, ContextValue>;

/// Result of a stale-weights probe: the accuracy the client reached after
/// training from the global model of `model_round`, and the accuracies
/// regular participants reported from the same or neighbouring models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model_round: u32,
    pub accuracy: f64,
    pub reference: Vec<f64>,
}

/// Everything the orchestrator learned about one client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundObservation {
    pub client: ClientId,
    pub deployed: bool,
    pub completed_ok: bool,
    pub reported_accuracy: Option<f64>,
    pub probe: Option<ProbeReport>,
    pub reported_context: Context,
    pub observed_context: Context,
    pub behavior_features: Option<FeatureRow>,
    /// Other members of the client's behaviour cluster this round.
    pub cluster_members: Option<BTreeSet<ClientId>>,
}

impl RoundObservation {
    pub fn idle(client: ClientId) -> Self {
        Self {
            client,
            deployed: false,
            completed_ok: false,
            reported_accuracy: None,
            probe: None,
            reported_context: Context::new(),
            observed_context: Context::new(),
            behavior_features: None,
            cluster_members: None,
        }
    }
}

/// Scaled measurements of one deployed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustComponents {
    pub tr1: f64,
    pub tr2_raw: u64,
    pub tr2_points: u64,
    pub tr2_norm: f64,
    pub abnormal_average: f64,
    pub tr3_common: u64,
    pub tr3_group: u64,
    pub tr3_norm: f64,
    pub tr4_raw: u64,
    pub tr4_keys: u64,
    pub tr4_norm: f64,
    pub aggregate: f64,
    pub warmup: bool,
}

impl TrustComponents {
    pub fn flagged(&self) -> bool {
        self.tr2_raw > 0 || self.tr4_raw > 0
    }
}

/// Share of deployed tasks served successfully; 0 before any deployment.
pub fn tr1_success_ratio(success: u64, deployed: u64) -> Result<f64> {
    if success > deployed {
        return Err(Error::InconsistentCounters { success, deployed });
    }
    if deployed >= 1 {
        Ok(success as f64 / deployed as f64)
    } else {
        Ok(0.0)
    }
}

/// Counts the new accuracy points whose modified z-score against `history`
/// reaches `epsilon` in absolute value. Returns the count and the mean of
/// the flagged points (0 when none are flagged).
pub fn tr2_two_step(history: &[f64], new_points: &[f64], epsilon: f64) -> Result<(u64, f64)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    if new_points.is_empty() {
        return Ok((0, 0.0));
    }
    let mut count = 0u64;
    let mut sum = 0.0;
    for &x in new_points {
        let z = modified_z_score(history, x, epsilon)?;
        if z.abs() >= epsilon {
            count += 1;
            sum += x;
        }
    }
    let avg = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok((count, avg))
}

/// Number of previous neighbours still in the client's cluster, and the
/// current cluster size (both excluding the client itself).
pub fn tr3_group_deviation(previous: &BTreeSet<ClientId>, current: &BTreeSet<ClientId>) -> (u64, u64) {
    (previous.intersection(current).count() as u64, current.len() as u64)
}

/// Number of context metrics where the client's report disagrees with the
/// observation.
pub fn tr4_contradictions(reported: &Context, observed: &Context) -> Result<u64> {
    if reported.len() != observed.len() || reported.keys().zip(observed.keys()).any(|(a, b)| a != b) {
        let r: Vec<&String> = reported.keys().collect();
        let o: Vec<&String> = observed.keys().collect();
        return Err(Error::ContextSchemaMismatch(format!("reported keys {r:?} vs observed keys {o:?}")));
    }
    Ok(reported.iter().filter(|(k, v)| !v.agrees(&observed[*k])).count() as u64)
}

/// Weighted combination of the scaled measurements, clamped to `[0, 1]`.
pub fn aggregate_trust(tr1: f64, tr2_norm: f64, tr3_norm: f64, tr4_norm: f64, alphas: &Alphas) -> f64 {
    let raw = (tr1 * alphas.success - tr2_norm * alphas.abnormal + tr3_norm * alphas.group
        - tr4_norm * alphas.contradiction)
        / 4.0;
    raw.clamp(0.0, 1.0)
}

/// Output of [`update_trust_record`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrustUpdate {
    pub record: TrustRecord,
    /// `None` for rounds where the client was not deployed.
    pub components: Option<TrustComponents>,
}

/// Applies one round's observation to a client's record.
pub fn update_trust_record(record: &TrustRecord, obs: &RoundObservation, cfg: &TrustConfig) -> Result<TrustUpdate> {
    if !obs.deployed {
        return Ok(TrustUpdate { record: record.clone(), components: None });
    }
    let mut next = record.clone();
    next.deployed_count += 1;
    let warmup = next.deployed_count <= cfg.warmup_rounds;

    // Tr2
    let mut flagged = 0u64;
    let mut points = 0u64;
    let mut flagged_sum = 0.0;
    if let Some(acc) = obs.reported_accuracy {
        if !warmup {
            match tr2_two_step(&record.history(), &[acc], cfg.epsilon) {
                Ok((c, avg)) => {
                    points += 1;
                    flagged += c;
                    flagged_sum += avg * c as f64;
                }
                Err(Error::InsufficientHistory { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        next.push_accuracy(acc);
    }
    let mut probe_failed = false;
    if let Some(probe) = &obs.probe {
        match tr2_two_step(&probe.reference, &[probe.accuracy], cfg.epsilon) {
            Ok((c, avg)) => {
                if c == 0 {
                    next.verified = true;
                    next.verified_at = next.deployed_count;
                }
                probe_failed = c > 0;
                next.probe_failures += c;
                points += 1;
                flagged += c;
                flagged_sum += avg * c as f64;
            }
            Err(Error::InsufficientHistory { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    // A task that fails verification was not served successfully.
    if obs.completed_ok && !probe_failed {
        next.success_count += 1;
    }
    let tr1 = tr1_success_ratio(next.success_count, next.deployed_count)?;
    let tr2_norm = if points > 0 { flagged as f64 / points as f64 } else { 0.0 };
    let abnormal_average = if flagged > 0 { flagged_sum / flagged as f64 } else { 0.0 };

    // Tr3
    let (tr3_common, tr3_group, tr3_norm) = match &obs.cluster_members {
        Some(current) => {
            let mut current = current.clone();
            current.remove(&obs.client);
            let (common, size) = tr3_group_deviation(&record.neighbors, &current);
            let norm = if warmup || record.neighbors.is_empty() || size == 0 {
                1.0
            } else {
                common as f64 / size as f64
            };
            next.neighbors = current;
            (common, size, norm)
        }
        None => (0, 0, 1.0),
    };

    // Tr4
    let tr4_raw = tr4_contradictions(&obs.reported_context, &obs.observed_context)?;
    let tr4_keys = obs.reported_context.len() as u64;
    let tr4_norm = if tr4_keys > 0 { tr4_raw as f64 / tr4_keys as f64 } else { 0.0 };

    let aggregate = aggregate_trust(tr1, tr2_norm, tr3_norm, tr4_norm, &cfg.alphas);
    next.trust = ((1.0 - cfg.beta) * record.trust + cfg.beta * aggregate).clamp(0.0, 1.0);
    next.abnormal_count_window = flagged;
    next.abnormal_average = abnormal_average;
    next.group_common_neighbors = tr3_common;
    next.group_size = tr3_group;
    next.contradiction_count = tr4_raw;

    Ok(TrustUpdate {
        record: next,
        components: Some(TrustComponents {
            tr1,
            tr2_raw: flagged,
            tr2_points: points,
            tr2_norm,
            abnormal_average,
            tr3_common,
            tr3_group,
            tr3_norm,
            tr4_raw,
            tr4_keys,
            tr4_norm,
            aggregate,
            warmup,
        }),
    })
}

/// One line of an orchestrator's trust log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustLogRecord {
    pub round: u32,
    pub orchestrator: usize,
    pub client: ClientId,
    pub area: usize,
    pub device_type: DeviceType,
    pub cpu: f64,
    pub memory: f64,
    pub avg_movements: f64,
    #[serde(flatten)]
    pub components: TrustComponents,
    pub trust: f64,
}

impl TrustLogRecord {
    pub fn new(round: u32, orchestrator: usize, profile: &DeviceProfile, components: TrustComponents, trust: f64) -> Self {
        Self {
            round,
            orchestrator,
            client: profile.id,
            area: profile.area,
            device_type: profile.device_type,
            cpu: profile.cpu,
            memory: profile.memory,
            avg_movements: profile.avg_movements,
            components,
            trust,
        }
    }
}
