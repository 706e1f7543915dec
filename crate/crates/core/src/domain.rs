//! Core data model: devices, their learning costs, trust records,
//! selection vectors and objective weights.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default length of the bounded per-client histories.
pub const DEFAULT_HISTORY_WINDOW: usize = 20;

/// Smoothing factor for `avg_movements` and `avg_finish_time`.
pub const BEHAVIOR_SMOOTHING: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceType {
    Phone,
    Tablet,
    Laptop,
}

impl DeviceType {
    pub const ALL: [DeviceType; 3] = [DeviceType::Phone, DeviceType::Tablet, DeviceType::Laptop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceType::Phone => "phone",
            DeviceType::Tablet => "tablet",
            DeviceType::Laptop => "laptop",
        }
    }
}

impl FromStr for DeviceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "phone" => Ok(DeviceType::Phone),
            "tablet" => Ok(DeviceType::Tablet),
            "laptop" => Ok(DeviceType::Laptop),
            other => Err(Error::InvalidInput(format!("unknown device type {other:?}"))),
        }
    }
}

impl fmt::Display for DeviceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One volunteer device as seen by its orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: ClientId,
    #[serde(rename = "type")]
    pub device_type: DeviceType,
    pub cpu: f64,
    pub memory: f64,
    pub diskspace: f64,
    /// Percentage in `[0, 100]`.
    pub battery: f64,
    /// Remaining staying time in the current area, seconds.
    pub availability: f64,
    pub area: usize,
    /// Area transitions per simulated hour.
    pub avg_movements: f64,
    /// Historical mean round-completion time, seconds.
    pub avg_finish_time: f64,
    #[serde(default)]
    pub joined_round: u32,
}

impl DeviceProfile {
    /// Folds one observed round into the smoothed behaviour averages.
    pub fn observe_behavior(&mut self, movements: f64, finish_time: f64) {
        let a = BEHAVIOR_SMOOTHING;
        self.avg_movements = (1.0 - a) * self.avg_movements + a * movements;
        self.avg_finish_time = (1.0 - a) * self.avg_finish_time + a * finish_time;
    }
}

/// Resource cost of running the learning container on one device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningUtility {
    pub cpu_cost: f64,
    pub memory_cost: f64,
    pub battery_cost: f64,
    pub diskspace_cost: f64,
}

impl LearningUtility {
    pub fn fits(&self, d: &DeviceProfile) -> bool {
        self.cpu_cost <= d.cpu
            && self.memory_cost <= d.memory
            && self.diskspace_cost <= d.diskspace
            && self.battery_cost <= d.battery
    }
}

/// Per-client trust state kept by the orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRecord {
    pub success_count: u64,
    pub deployed_count: u64,
    /// Reported local accuracies, oldest first, bounded by `window`.
    pub accuracy_history: VecDeque<f64>,
    /// Tr2 raw count from the last deployed round.
    pub abnormal_count_window: u64,
    /// Mean of the accuracies flagged in the last deployed round (0 if none).
    pub abnormal_average: f64,
    /// Tr3 raw count from the last deployed round.
    pub group_common_neighbors: u64,
    pub group_size: u64,
    /// Cluster neighbours seen at the last deployed round.
    pub neighbors: BTreeSet<ClientId>,
    /// Tr4 raw count from the last deployed round.
    pub contradiction_count: u64,
    pub trust: f64,
    /// Set once the client has passed a stale-weights probe.
    #[serde(default)]
    pub verified: bool,
    /// `deployed_count` when the client last passed a probe.
    #[serde(default)]
    pub verified_at: u64,
    /// Stale-weights probes failed so far.
    #[serde(default)]
    pub probe_failures: u64,
    pub window: usize,
}

impl TrustRecord {
    pub fn new(initial_trust: f64) -> Self {
        Self::with_window(initial_trust, DEFAULT_HISTORY_WINDOW)
    }

    pub fn with_window(initial_trust: f64, window: usize) -> Self {
        Self {
            success_count: 0,
            deployed_count: 0,
            accuracy_history: VecDeque::new(),
            abnormal_count_window: 0,
            abnormal_average: 0.0,
            group_common_neighbors: 0,
            group_size: 0,
            neighbors: BTreeSet::new(),
            contradiction_count: 0,
            trust: initial_trust.clamp(0.0, 1.0),
            verified: false,
            verified_at: 0,
            probe_failures: 0,
            window: window.max(1),
        }
    }

    pub fn push_accuracy(&mut self, acc: f64) {
        self.accuracy_history.push_back(acc);
        while self.accuracy_history.len() > self.window {
            self.accuracy_history.pop_front();
        }
    }

    pub fn history(&self) -> Vec<f64> {
        self.accuracy_history.iter().copied().collect()
    }
}

/// Binary deployment decision over the whole population.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionVector(Vec<bool>);

impl SelectionVector {
    pub fn empty(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in indices {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] = !self.0[i];
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Weights of the five deployment objectives. They always sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 5]")]
pub struct ObjectiveWeights([f64; 5]);

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

impl ObjectiveWeights {
    pub fn new(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(Error::InvalidInput(format!("objective weights must lie in [0,1]: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights { sum });
        }
        Ok(Self(w))
    }

    pub fn uniform() -> Self {
        Self([0.2; 5])
    }

    pub fn as_array(&self) -> [f64; 5] {
        self.0
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl From<ObjectiveWeights> for [f64; 5] {
    fn from(w: ObjectiveWeights) -> Self {
        w.0
    }
}

impl<'de> Deserialize<'de> for ObjectiveWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = <[f64; 5]>::deserialize(d)?;
        ObjectiveWeights::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileViolation {
    NegativeResource { id: ClientId, field: &'static str },
    BatteryRange { id: ClientId },
    AreaRange { id: ClientId, area: usize },
    DuplicateId { id: ClientId },
}

impl ProfileViolation {
    pub fn code(&self) -> &'static str {
        match self {
            ProfileViolation::NegativeResource { .. } => "negative-resource",
            ProfileViolation::BatteryRange { .. } => "battery-range",
            ProfileViolation::AreaRange { .. } => "area-range",
            ProfileViolation::DuplicateId { .. } => "duplicate-id",
        }
    }
}

/// Checks one device/utility pair. Violations are returned as data.
pub fn validate_profile(
    profile: &DeviceProfile,
    utility: &LearningUtility,
    areas: Option<usize>,
) -> Vec<ProfileViolation> {
    let id = profile.id;
    let mut out = Vec::new();
    let fields = [
        ("cpu", profile.cpu),
        ("memory", profile.memory),
        ("diskspace", profile.diskspace),
        ("availability", profile.availability),
        ("avg_movements", profile.avg_movements),
        ("avg_finish_time", profile.avg_finish_time),
        ("cpu_cost", utility.cpu_cost),
        ("memory_cost", utility.memory_cost),
        ("battery_cost", utility.battery_cost),
        ("diskspace_cost", utility.diskspace_cost),
    ];
    for (field, v) in fields {
        if !(v >= 0.0) {
            out.push(ProfileViolation::NegativeResource { id, field });
        }
    }
    if !(0.0..=100.0).contains(&profile.battery) {
        out.push(ProfileViolation::BatteryRange { id });
    }
    if let Some(a) = areas {
        if profile.area >= a {
            out.push(ProfileViolation::AreaRange { id, area: profile.area });
        }
    }
    out
}

/// Validates a whole population, including id uniqueness.
pub fn validate_population(
    profiles: &[DeviceProfile],
    utilities: &[LearningUtility],
    areas: Option<usize>,
) -> Vec<ProfileViolation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (p, u) in profiles.iter().zip(utilities) {
        out.extend(validate_profile(p, u, areas));
        if !seen.insert(p.id) {
            out.push(ProfileViolation::DuplicateId { id: p.id });
        }
    }
    out
}

/// Id registry that enforces uniqueness and forbids evicted ids from
/// coming back.
#[derive(Debug, Default, Clone)]
pub struct IdRegistry {
    active: BTreeSet<ClientId>,
    evicted: BTreeSet<ClientId>,
}

impl IdRegistry {
    pub fn admit(&mut self, id: ClientId) -> Result<()> {
        if self.evicted.contains(&id) {
            return Err(Error::EvictedId(id.0));
        }
        if !self.active.insert(id) {
            return Err(Error::DuplicateId(id.0));
        }
        Ok(())
    }

    pub fn evict(&mut self, id: ClientId) -> bool {
        if self.active.remove(&id) {
            self.evicted.insert(id);
            true
        } else {
            false
        }
    }

    pub fn is_active(&self, id: ClientId) -> bool {
        self.active.contains(&id)
    }

    pub fn is_evicted(&self, id: ClientId) -> bool {
        self.evicted.contains(&id)
    }
}

pub const POPULATION_HEADER: [&str; 10] = [
    "id",
    "type",
    "cpu",
    "memory",
    "diskspace",
    "battery",
    "availability",
    "area",
    "avg_movements",
    "avg_finish_time",
];

#[derive(Debug, Serialize, Deserialize)]
struct PopulationRow {
    id: u32,
    #[serde(rename = "type")]
    device_type: String,
    cpu: f64,
    memory: f64,
    diskspace: f64,
    battery: f64,
    availability: f64,
    area: usize,
    avg_movements: f64,
    avg_finish_time: f64,
}

pub fn write_population_csv<W: Write>(w: W, profiles: &[DeviceProfile]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in profiles {
        wtr.serialize(PopulationRow {
            id: p.id.0,
            device_type: p.device_type.to_string(),
            cpu: p.cpu,
            memory: p.memory,
            diskspace: p.diskspace,
            battery: p.battery,
            availability: p.availability,
            area: p.area,
            avg_movements: p.avg_movements,
            avg_finish_time: p.avg_finish_time,
        })?;
    }
    if profiles.is_empty() {
        wtr.write_record(POPULATION_HEADER)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_population_csv<R: Read>(r: R) -> Result<Vec<DeviceProfile>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != POPULATION_HEADER {
        return Err(Error::InvalidInput(format!(
            "population header must be {}, got {}",
            POPULATION_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<PopulationRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow { line, message: e.to_string() }
        })?;
        out.push(DeviceProfile {
            id: ClientId(row.id),
            device_type: row.device_type.parse()?,
            cpu: row.cpu,
            memory: row.memory,
            diskspace: row.diskspace,
            battery: row.battery,
            availability: row.availability,
            area: row.area,
            avg_movements: row.avg_movements,
            avg_finish_time: row.avg_finish_time,
            joined_round: 0,
        });
    }
    Ok(out)
}

pub const UTILITY_HEADER: [&str; 5] = ["id", "cpu_cost", "memory_cost", "battery_cost", "diskspace_cost"];

#[derive(Debug, Serialize, Deserialize)]
struct UtilityRow {
    id: u32,
    cpu_cost: f64,
    memory_cost: f64,
    battery_cost: f64,
    diskspace_cost: f64,
}

pub fn write_utilities_csv<W: Write>(w: W, ids: &[ClientId], utilities: &[LearningUtility]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for (id, u) in ids.iter().zip(utilities) {
        wtr.serialize(UtilityRow {
            id: id.0,
            cpu_cost: u.cpu_cost,
            memory_cost: u.memory_cost,
            battery_cost: u.battery_cost,
            diskspace_cost: u.diskspace_cost,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_utilities_csv<R: Read>(r: R) -> Result<Vec<(ClientId, LearningUtility)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize::<UtilityRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::MalformedRow { line, message: e.to_string() }
        })?;
        out.push((
            ClientId(row.id),
            LearningUtility {
                cpu_cost: row.cpu_cost,
                memory_cost: row.memory_cost,
                battery_cost: row.battery_cost,
                diskspace_cost: row.diskspace_cost,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn sample_profile(id: u32) -> DeviceProfile {
        DeviceProfile {
            id: ClientId(id),
            device_type: DeviceType::Phone,
            cpu: 4.0,
            memory: 4096.0,
            diskspace: 2048.0,
            battery: 80.0,
            availability: 600.0,
            area: 1,
            avg_movements: 0.5,
            avg_finish_time: 90.0,
            joined_round: 0,
        }
    }

    fn sample_utility() -> LearningUtility {
        LearningUtility { cpu_cost: 1.0, memory_cost: 512.0, battery_cost: 5.0, diskspace_cost: 100.0 }
    }

    #[test]
    fn battery_out_of_range_is_reported() {
        let mut p = sample_profile(1);
        p.battery = 101.0;
        let v = validate_profile(&p, &sample_utility(), Some(6));
        assert_eq!(v.iter().map(|v| v.code()).collect::<Vec<_>>(), vec!["battery-range"]);
    }

    #[test]
    fn valid_profile_has_no_violations() {
        assert!(validate_profile(&sample_profile(1), &sample_utility(), Some(6)).is_empty());
    }

    #[test]
    fn negative_cpu_is_reported() {
        let mut p = sample_profile(1);
        p.cpu = -1.0;
        let v = validate_profile(&p, &sample_utility(), None);
        assert_eq!(v, vec![ProfileViolation::NegativeResource { id: ClientId(1), field: "cpu" }]);
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let ps = vec![sample_profile(3), sample_profile(3)];
        let us = vec![sample_utility(); 2];
        let v = validate_population(&ps, &us, Some(6));
        assert_eq!(v, vec![ProfileViolation::DuplicateId { id: ClientId(3) }]);
    }

    #[test]
    fn evicted_ids_cannot_rejoin() {
        let mut reg = IdRegistry::default();
        reg.admit(ClientId(4)).unwrap();
        assert!(matches!(reg.admit(ClientId(4)), Err(Error::DuplicateId(4))));
        assert!(reg.evict(ClientId(4)));
        assert!(matches!(reg.admit(ClientId(4)), Err(Error::EvictedId(4))));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(ObjectiveWeights::new([0.2; 5]).is_ok());
        assert!(ObjectiveWeights::new([0.2, 0.2, 0.2, 0.2, 0.2 + 2e-9]).is_err());
        assert!(ObjectiveWeights::new([0.2, 0.2, 0.2, 0.2, 0.2 + 5e-10]).is_ok());
        assert!(ObjectiveWeights::new([0.5, 0.5, 0.0, 0.0, 0.0]).is_ok());
        assert!(serde_json::from_str::<ObjectiveWeights>("[0.5,0.5,0.5,0,0]").is_err());
    }

    #[test]
    fn history_window_is_bounded() {
        let mut r = TrustRecord::with_window(0.5, 3);
        for i in 0..5 {
            r.push_accuracy(i as f64);
        }
        assert_eq!(r.history(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn population_csv_has_documented_header() {
        let mut buf = Vec::new();
        write_population_csv(&mut buf, &[sample_profile(1)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,type,cpu,memory,diskspace,battery,availability,area,avg_movements,avg_finish_time\n"));
        let back = read_population_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![sample_profile(1)]);
    }

    fn arb_profile() -> impl Strategy<Value = DeviceProfile> {
        (
            any::<u32>(),
            0usize..3,
            0.0f64..1e3,
            0.0f64..1e9,
            0.0f64..1e6,
            0.0f64..=100.0,
            0.0f64..1e5,
            0usize..6,
            0.0f64..10.0,
            0.0f64..1e4,
        )
            .prop_map(|(id, t, cpu, memory, disk, battery, avail, area, mv, ft)| DeviceProfile {
                id: ClientId(id),
                device_type: DeviceType::ALL[t],
                cpu,
                memory,
                diskspace: disk,
                battery,
                availability: avail,
                area,
                avg_movements: mv,
                avg_finish_time: ft,
                joined_round: 0,
            })
    }

    proptest! {
        #[test]
        fn profile_roundtrips_through_json_and_csv(p in arb_profile()) {
            let json = serde_json::to_string(&p).unwrap();
            prop_assert_eq!(&serde_json::from_str::<DeviceProfile>(&json).unwrap(), &p);
            let mut buf = Vec::new();
            write_population_csv(&mut buf, std::slice::from_ref(&p)).unwrap();
            prop_assert_eq!(&read_population_csv(&buf[..]).unwrap()[0], &p);
        }

        #[test]
        fn trust_record_roundtrips(trust in 0.0f64..=1.0, accs in proptest::collection::vec(0.0f64..=1.0, 0..25),
                                   deployed in 0u64..100, nb in proptest::collection::btree_set(0u32..50, 0..6)) {
            let mut r = TrustRecord::new(trust);
            for a in accs { r.push_accuracy(a); }
            r.deployed_count = deployed;
            r.success_count = deployed / 2;
            r.neighbors = nb.into_iter().map(ClientId).collect();
            let json = serde_json::to_string(&r).unwrap();
            prop_assert_eq!(serde_json::from_str::<TrustRecord>(&json).unwrap(), r);
        }
    }
}
