use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_constraints, evaluate_objectives, scalarize, DeploymentContext, Thresholds};
use crate::domain::{
    read_population_csv, read_utilities_csv, ClientId, DeviceProfile, DeviceType, LearningUtility, ObjectiveWeights,
    SelectionVector,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Largest population the exhaustive search accepts.
pub const MAX_EXHAUSTIVE: usize = 20;

/// JSON header of a standalone optimisation instance. Device and utility
/// tables live in CSV files referenced relative to the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub devices: PathBuf,
    pub utilities: PathBuf,
    pub areas: usize,
    /// Per-device trust, in device-file order.
    pub trust: Vec<f64>,
    pub accuracy_clusters: Vec<usize>,
    #[serde(default)]
    pub requested_areas: BTreeSet<usize>,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl Instance {
    pub fn load(path: &Path) -> Result<DeploymentContext> {
        let header: Instance = serde_json::from_reader(File::open(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let devices = read_population_csv(File::open(base.join(&header.devices))?)?;
        let utilities: BTreeMap<ClientId, LearningUtility> =
            read_utilities_csv(File::open(base.join(&header.utilities))?)?.into_iter().collect();
        let utilities = devices
            .iter()
            .map(|d| utilities.get(&d.id).copied().ok_or_else(|| Error::InvalidInput(format!("no utility row for device {}", d.id))))
            .collect::<Result<Vec<_>>>()?;
        DeploymentContext::new(
            devices,
            utilities,
            header.trust,
            header.accuracy_clusters,
            header.requested_areas,
            header.weights,
            header.thresholds,
            header.areas,
        )
    }
}

/// Exhaustive search over every selection that satisfies the constraints.
/// Ties resolve like the genetic algorithm's choice.
pub fn exhaustive_optimum(ctx: &DeploymentContext) -> Result<(SelectionVector, f64)> {
    let n = ctx.len();
    if n > MAX_EXHAUSTIVE {
        return Err(Error::InvalidInput(format!("exhaustive search supports at most {MAX_EXHAUSTIVE} devices, got {n}")));
    }
    let mut best: Option<(SelectionVector, f64)> = None;
    for mask in 0u32..(1u32 << n) {
        let s = SelectionVector::from_bits((0..n).map(|i| mask & (1 << i) != 0).collect());
        if !check_constraints(&s, ctx).is_empty() {
            continue;
        }
        let f = scalarize(&evaluate_objectives(&s, ctx), &ctx.weights);
        let better = match &best {
            None => true,
            Some((b, bf)) => f > *bf || (f == *bf && (s.count(), &s) < (b.count(), b)),
        };
        if better {
            best = Some((s, f));
        }
    }
    best.ok_or(Error::NoFeasibleSolution)
}

/// A random instance with mixed feasibility, for tests and benchmarks.
pub fn random_context(n: usize, areas: usize, seed: u64) -> DeploymentContext {
    let mut rng = stream(seed, Purpose::Probe, &[n as u64, areas as u64]);
    let devices: Vec<DeviceProfile> = (0..n)
        .map(|i| DeviceProfile {
            id: ClientId(i as u32),
            device_type: DeviceType::ALL[rng.random_range(0..3)],
            cpu: rng.random_range(0.5..4.0),
            memory: rng.random_range(512.0..8192.0),
            diskspace: rng.random_range(200.0..4000.0),
            battery: rng.random_range(5.0..100.0),
            availability: rng.random_range(30.0..1200.0),
            area: rng.random_range(0..areas),
            avg_movements: rng.random_range(0.0..4.0),
            avg_finish_time: rng.random_range(10.0..120.0),
            joined_round: 0,
        })
        .collect();
    let utilities = (0..n)
        .map(|_| LearningUtility {
            cpu_cost: rng.random_range(0.2..1.5),
            memory_cost: rng.random_range(256.0..2048.0),
            battery_cost: rng.random_range(2.0..25.0),
            diskspace_cost: rng.random_range(50.0..500.0),
        })
        .collect();
    let trust = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let clusters = (0..n).map(|_| rng.random_range(0..4)).collect();
    let requested = (0..areas).filter(|_| rng.random_bool(0.3)).collect();
    let mut raw = [0.0; 5];
    for w in raw.iter_mut() {
        *w = rng.random_range(0.05..1.0);
    }
    let total: f64 = raw.iter().sum();
    let mut w = raw.map(|x| x / total);
    w[4] = 1.0 - w[..4].iter().sum::<f64>();
    let thresholds = Thresholds {
        min_availability: 120.0,
        high_trust: 0.8,
        max_high_trust: (n / 4).max(1),
        high_movement: 2.5,
        max_high_movers: (n / 5).max(1),
        min_selected: 0,
    };
    DeploymentContext::new(
        devices,
        utilities,
        trust,
        clusters,
        requested,
        ObjectiveWeights::new(w).expect("normalised weights"),
        thresholds,
        areas,
    )
    .expect("generated context is consistent")
}
