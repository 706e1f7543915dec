//! Multi-objective client deployment.
//!
//! Five objectives are all expressed as "higher is better" on `[0, 1]`:
//! fewer deployed clients, mean trust, accuracy-cluster coverage, area and
//! mobility coverage, and the share of clients in requested areas. A genetic
//! algorithm keeps a Pareto archive of repaired, constraint-satisfying
//! selections and deploys the archive member with the best weighted sum.

mod constraints;
mod ga;
mod instance;
mod repair;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{DeviceProfile, LearningUtility, ObjectiveWeights, SelectionVector};
use crate::error::{Error, Result};

pub use constraints::{check_constraints, device_feasible, Resource, Violation};
pub use ga::{ga_optimize, ArchiveEntry, GaParams, GaResult, SurvivorPolicy};
pub use instance::{exhaustive_optimum, random_context, Instance, MAX_EXHAUSTIVE};
pub use repair::{repair, RepairOutcome};

/// Selection thresholds set by the server and orchestrators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum remaining stay time in the area, seconds.
    #[serde(alias = "st")]
    pub min_availability: f64,
    /// Trust at or above which a client counts as highly trusted.
    #[serde(alias = "max_t")]
    pub high_trust: f64,
    /// Cap on highly trusted clients per selection.
    #[serde(alias = "mt")]
    pub max_high_trust: usize,
    /// Movement rate at or above which a client counts as a frequent mover.
    #[serde(alias = "max_m")]
    pub high_movement: f64,
    /// Cap on frequent movers per selection.
    #[serde(alias = "mm")]
    pub max_high_movers: usize,
    /// Extra constraint: selections smaller than this are infeasible.
    pub min_selected: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_availability: 120.0,
            high_trust: 0.9,
            max_high_trust: 15,
            high_movement: 2.0,
            max_high_movers: 5,
            min_selected: 0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::InvalidConfig { field: format!("thresholds.{field}"), message: message.into() })
        };
        if !(self.min_availability >= 0.0) {
            return bad("min_availability", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.high_trust) {
            return bad("high_trust", "must lie in [0, 1]");
        }
        if !(self.high_movement >= 0.0) {
            return bad("high_movement", "must be >= 0");
        }
        Ok(())
    }
}

/// Everything the deployment decision needs, aligned by device index.
#[derive(Debug, Clone)]
pub struct DeploymentContext {
    pub devices: Vec<DeviceProfile>,
    pub utilities: Vec<LearningUtility>,
    pub trust: Vec<f64>,
    pub accuracy_clusters: Vec<usize>,
    pub requested_areas: BTreeSet<usize>,
    pub weights: ObjectiveWeights,
    pub thresholds: Thresholds,
    /// Number of configured areas.
    pub areas: usize,
    max_movement: f64,
    cluster_count: usize,
}

impl DeploymentContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        devices: Vec<DeviceProfile>,
        utilities: Vec<LearningUtility>,
        trust: Vec<f64>,
        accuracy_clusters: Vec<usize>,
        requested_areas: BTreeSet<usize>,
        weights: ObjectiveWeights,
        thresholds: Thresholds,
        areas: usize,
    ) -> Result<Self> {
        let n = devices.len();
        for (name, len) in [("utilities", utilities.len()), ("trust", trust.len()), ("accuracy_clusters", accuracy_clusters.len())] {
            if len != n {
                return Err(Error::InvalidInput(format!("{name} has {len} entries for {n} devices")));
            }
        }
        if areas == 0 {
            return Err(Error::InvalidInput("area count must be positive".into()));
        }
        if let Some(d) = devices.iter().find(|d| d.area >= areas) {
            return Err(Error::InvalidInput(format!("device {} in area {} of {areas}", d.id, d.area)));
        }
        if let Some(a) = requested_areas.iter().find(|&&a| a >= areas) {
            return Err(Error::InvalidInput(format!("requested area {a} of {areas}")));
        }
        if trust.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidInput("trust values must lie in [0, 1]".into()));
        }
        thresholds.validate()?;
        let max_movement = devices.iter().map(|d| d.avg_movements).fold(0.0, f64::max);
        let cluster_count = accuracy_clusters.iter().collect::<BTreeSet<_>>().len();
        Ok(Self {
            devices,
            utilities,
            trust,
            accuracy_clusters,
            requested_areas,
            weights,
            thresholds,
            areas,
            max_movement,
            cluster_count,
        })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn is_high_trust(&self, i: usize) -> bool {
        self.trust[i] >= self.thresholds.high_trust
    }

    pub fn is_high_mover(&self, i: usize) -> bool {
        self.devices[i].avg_movements >= self.thresholds.high_movement
    }

    pub fn areas_of(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.area).collect()
    }

    pub fn movements(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.avg_movements).collect()
    }
}

/// Objective values, each in `[0, 1]`, higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector(pub [f64; 5]);

impl ObjectiveVector {
    pub fn as_array(&self) -> [f64; 5] {
        self.0
    }
}

/// Share of accuracy clusters represented in the selection.
pub fn compute_rr(selection: &SelectionVector, clusters: &[usize]) -> f64 {
    let total = clusters.iter().collect::<BTreeSet<_>>().len();
    let covered = selection.selected().map(|i| clusters[i]).collect::<BTreeSet<_>>().len();
    if total == 0 || covered == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Half area coverage, half mean mobility relative to the most mobile device.
pub fn compute_r(selection: &SelectionVector, areas: &[usize], movements: &[f64], total_areas: usize) -> f64 {
    let max_movement = movements.iter().copied().fold(0.0, f64::max);
    r_with_max(selection, areas, movements, total_areas, max_movement)
}

fn r_with_max(selection: &SelectionVector, areas: &[usize], movements: &[f64], total_areas: usize, max_movement: f64) -> f64 {
    let count = selection.count();
    if count == 0 || total_areas == 0 {
        return 0.0;
    }
    let covered = selection.selected().map(|i| areas[i]).collect::<BTreeSet<_>>().len();
    let area_term = covered as f64 / total_areas as f64;
    let move_term = if max_movement > 0.0 {
        selection.selected().map(|i| movements[i]).sum::<f64>() / count as f64 / max_movement
    } else {
        0.0
    };
    0.5 * area_term + 0.5 * move_term
}

/// Share of selected clients located in a requested area.
pub fn compute_rt(selection: &SelectionVector, areas: &[usize], requested: &BTreeSet<usize>) -> f64 {
    if requested.is_empty() {
        return 1.0;
    }
    let count = selection.count();
    if count == 0 {
        return 0.0;
    }
    selection.selected().filter(|&i| requested.contains(&areas[i])).count() as f64 / count as f64
}

pub fn evaluate_objectives(selection: &SelectionVector, ctx: &DeploymentContext) -> ObjectiveVector {
    debug_assert_eq!(selection.len(), ctx.len());
    let n = ctx.len();
    let count = selection.count();
    let f1 = if n == 0 { 1.0 } else { 1.0 - count as f64 / n as f64 };
    let f2 = if count == 0 { 0.0 } else { selection.selected().map(|i| ctx.trust[i]).sum::<f64>() / count as f64 };
    let f3 = if ctx.cluster_count == 0 || count == 0 {
        0.0
    } else {
        selection.selected().map(|i| ctx.accuracy_clusters[i]).collect::<BTreeSet<_>>().len() as f64 / ctx.cluster_count as f64
    };
    let areas = ctx.areas_of();
    let f4 = r_with_max(selection, &areas, &ctx.movements(), ctx.areas, ctx.max_movement);
    let f5 = compute_rt(selection, &areas, &ctx.requested_areas);
    ObjectiveVector([f1, f2, f3, f4, f5])
}

pub fn scalarize(f: &ObjectiveVector, w: &ObjectiveWeights) -> f64 {
    f.0.iter().zip(w.as_array()).map(|(f, w)| f * w).sum()
}

/// Pareto dominance for maximisation.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    a.0.iter().zip(&b.0).all(|(x, y)| x >= y) && a.0.iter().zip(&b.0).any(|(x, y)| x > y)
}
