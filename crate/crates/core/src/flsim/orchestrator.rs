//! Per-area orchestrators: behaviour clustering, trust bookkeeping, area
//! requests and probe assignment.

use std::collections::{BTreeMap, BTreeSet};

use crate::analytics::{agglomerative_cluster, standardize, FeatureRow};
use crate::domain::{ClientId, DeviceProfile, DeviceType, TrustRecord};
use crate::error::Result;
use crate::optimizer::Thresholds;
use crate::trust::{update_trust_record, RoundObservation, TrustComponents, TrustConfig, TrustLogRecord};

/// Device type one-hot, movement rate, finish time, CPU and memory.
pub fn behavior_features(p: &DeviceProfile) -> FeatureRow {
    let mut v = vec![0.0; DeviceType::ALL.len()];
    v[p.device_type.index()] = 1.0;
    v.extend([p.avg_movements, p.avg_finish_time, p.cpu, p.memory]);
    FeatureRow::new(p.id, v)
}

/// Members of every client's behaviour cluster (including the client),
/// with `⌈√n⌉` clusters over standardised features.
pub fn behavior_clusters(profiles: &[DeviceProfile]) -> Result<BTreeMap<ClientId, BTreeSet<ClientId>>> {
    if profiles.is_empty() {
        return Ok(BTreeMap::new());
    }
    let rows: Vec<FeatureRow> = profiles.iter().map(behavior_features).collect();
    let rows = if rows.len() >= 2 { standardize(&rows) } else { rows };
    let k = (rows.len() as f64).sqrt().ceil() as usize;
    let labels = agglomerative_cluster(&rows, k.clamp(1, rows.len()))?;
    let mut groups: BTreeMap<usize, BTreeSet<ClientId>> = BTreeMap::new();
    for (id, l) in &labels {
        groups.entry(*l).or_default().insert(*id);
    }
    Ok(labels.iter().map(|(id, l)| (*id, groups[l].clone())).collect())
}

/// Areas holding fewer than `min_trusted` clients at or above the
/// high-trust cutoff.
pub fn requested_areas(
    profiles: &[DeviceProfile],
    records: &BTreeMap<ClientId, TrustRecord>,
    thresholds: &Thresholds,
    areas: usize,
    min_trusted: usize,
) -> BTreeSet<usize> {
    let mut trusted = vec![0usize; areas];
    for p in profiles {
        if records.get(&p.id).is_some_and(|r| r.trust >= thresholds.high_trust) {
            trusted[p.area] += 1;
        }
    }
    (0..areas).filter(|&a| trusted[a] < min_trusted).collect()
}

/// Whether a client currently counts as verified: it passed a probe and
/// the pass has not expired.
pub fn is_verified(r: &TrustRecord, cfg: &TrustConfig) -> bool {
    r.verified && cfg.reverify_after.is_none_or(|n| r.deployed_count - r.verified_at < n)
}

/// Clients due for a stale-weights probe, lowest trust first.
pub fn probe_candidates(records: &BTreeMap<ClientId, TrustRecord>, cfg: &TrustConfig) -> Vec<ClientId> {
    let mut out: Vec<(f64, ClientId)> = records
        .iter()
        .filter(|(_, r)| r.trust < cfg.probe_cutoff || (cfg.probe_unverified && !is_verified(r, cfg)))
        .map(|(id, r)| (r.trust, *id))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    out.into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorRound {
    pub records: BTreeMap<ClientId, TrustRecord>,
    pub components: BTreeMap<ClientId, TrustComponents>,
    pub logs: Vec<TrustLogRecord>,
    pub requested_areas: BTreeSet<usize>,
    pub probes: Vec<ClientId>,
    /// Clients expelled this round for failing too many probes. Their trust
    /// is set to 0 and they are absent from `requested_areas` and `probes`.
    pub expelled: Vec<ClientId>,
}

pub struct OrchestratorSettings<'a> {
    pub trust: &'a TrustConfig,
    pub thresholds: &'a Thresholds,
    pub areas: usize,
    pub min_trusted_per_area: usize,
}

/// Closes a round: clusters the active clients by behaviour, updates every
/// record from its observation (idle when absent), logs deployed clients
/// under their area's orchestrator, expels repeat probe failures, and
/// derives the next requests.
pub fn orchestrator_round(
    round: u32,
    profiles: &[DeviceProfile],
    records: &BTreeMap<ClientId, TrustRecord>,
    mut observations: BTreeMap<ClientId, RoundObservation>,
    settings: &OrchestratorSettings<'_>,
) -> Result<OrchestratorRound> {
    let clusters = behavior_clusters(profiles)?;
    let mut next = BTreeMap::new();
    let mut components = BTreeMap::new();
    let mut logs = Vec::new();
    let mut expelled = Vec::new();
    for p in profiles {
        let record = records.get(&p.id).cloned().unwrap_or_else(|| TrustRecord::with_window(0.5, settings.trust.history_window));
        let mut obs = observations.remove(&p.id).unwrap_or_else(|| RoundObservation::idle(p.id));
        if obs.deployed {
            obs.behavior_features = Some(behavior_features(p));
            obs.cluster_members = clusters.get(&p.id).cloned();
        }
        let mut update = update_trust_record(&record, &obs, settings.trust)?;
        if settings.trust.expel_after.is_some_and(|n| update.record.probe_failures >= n) {
            update.record.trust = 0.0;
            expelled.push(p.id);
        }
        if let Some(c) = update.components {
            logs.push(TrustLogRecord::new(round, p.area, p, c.clone(), update.record.trust));
            components.insert(p.id, c);
        }
        next.insert(p.id, update.record);
    }
    let staying: Vec<DeviceProfile> = profiles.iter().filter(|p| !expelled.contains(&p.id)).cloned().collect();
    let requested = requested_areas(&staying, &next, settings.thresholds, settings.areas, settings.min_trusted_per_area);
    let mut probes = probe_candidates(&next, settings.trust);
    probes.retain(|id| !expelled.contains(id));
    Ok(OrchestratorRound { records: next, components, logs, requested_areas: requested, probes, expelled })
}
