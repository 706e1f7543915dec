//! Synthetic mobility population.
//!
//! Each location has a visit prototype (time of day, weekday bias, stay
//! duration, visit frequency). Clients draw visits from a skewed personal
//! mix of locations, so label sets differ between clients. Locations are
//! grouped contiguously into areas. Device resources come from three
//! archetypes, and clients that move a lot also produce more records.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ClientId, DeviceProfile, DeviceType, LearningUtility};
use crate::error::{Error, Result};
use crate::flsim::model::{ClientDataset, Sample};
use crate::rng::{stream, Purpose, Stream};

/// Smallest accepted label-concentration parameter.
pub const MIN_SKEW: f64 = 0.01;
/// Weight of the normalised movement rate in a client's record count; the
/// rest is uniform noise. 0.6 gives a movement/volume correlation near 0.8.
pub const VOLUME_COUPLING: f64 = 0.6;
/// Movement rates span `[0, MAX_MOVEMENT)` transitions per hour.
pub const MAX_MOVEMENT: f64 = 4.0;
pub const TRACE_HEADER: [&str; 7] = ["client_id", "timestamp", "location", "area", "day_of_week", "duration", "frequency"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub clients: usize,
    pub areas: usize,
    pub locations: usize,
    pub records: (usize, usize),
    /// Dirichlet concentration of each client's location mix; smaller is
    /// more skewed.
    pub skew: f64,
    pub mover_fraction: f64,
    /// Share of clients present from round 0; the rest join later.
    pub initial_fraction: f64,
    /// Late joiners arrive uniformly over rounds `1..=join_window`.
    pub join_window: u32,
    /// Size of the server's balanced evaluation set.
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            clients: 50,
            areas: 6,
            locations: 20,
            records: (200, 1500),
            skew: 0.3,
            mover_fraction: 0.3,
            initial_fraction: 1.0,
            join_window: 0,
            eval_size: 1000,
            seed: 0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.clients == 0 {
            return bad("clients must be positive".into());
        }
        if self.areas == 0 || self.locations < self.areas {
            return bad(format!("need locations >= areas >= 1, got {} locations, {} areas", self.locations, self.areas));
        }
        if self.records.0 == 0 || self.records.0 > self.records.1 {
            return bad(format!("record range {:?} must be ordered and positive", self.records));
        }
        if !(self.skew >= MIN_SKEW) || !self.skew.is_finite() {
            return bad(format!("skew must be finite and >= {MIN_SKEW}, got {}", self.skew));
        }
        for (name, v) in [("mover_fraction", self.mover_fraction), ("initial_fraction", self.initial_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.initial_fraction < 1.0 && self.join_window == 0 {
            return bad("late joiners need a join_window of at least 1".into());
        }
        Ok(())
    }

    /// Width of a featurised record.
    pub fn feature_width(&self) -> usize {
        feature_width(self.areas)
    }
}

pub fn feature_width(areas: usize) -> usize {
    areas + 6
}

/// Contiguous, nearly equal grouping of locations into areas.
pub fn location_areas(locations: usize, areas: usize) -> Vec<usize> {
    (0..locations).map(|l| l * areas / locations).collect()
}

/// One visit, in the external trace schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub client_id: u32,
    /// Seconds since the start of the observation period.
    pub timestamp: u64,
    pub location: usize,
    pub area: usize,
    pub day_of_week: u8,
    /// Minutes.
    pub duration: f64,
    /// Visits per week.
    pub frequency: f64,
}

pub fn featurize(row: &TraceRow, areas: usize) -> Vec<f64> {
    let mut x = vec![0.0; feature_width(areas)];
    x[row.area] = 1.0;
    let hour = (row.timestamp % 86_400) as f64 / 3600.0;
    let day = row.day_of_week as f64;
    x[areas] = (TAU * day / 7.0).sin();
    x[areas + 1] = (TAU * day / 7.0).cos();
    x[areas + 2] = (TAU * hour / 24.0).sin();
    x[areas + 3] = (TAU * hour / 24.0).cos();
    x[areas + 4] = row.duration / 60.0;
    x[areas + 5] = row.frequency / 5.0;
    x
}

#[derive(Debug, Clone, Copy)]
struct Prototype {
    hour: f64,
    weekend: f64,
    duration: f64,
    frequency: f64,
}

fn prototypes(spec: &PopulationSpec) -> Vec<Prototype> {
    let mut rng = stream(spec.seed, Purpose::Population, &[0]);
    (0..spec.locations)
        .map(|_| Prototype {
            hour: rng.random_range(0.0..24.0),
            weekend: rng.random_range(0.0..1.0),
            duration: rng.random_range(10.0..180.0),
            frequency: rng.random_range(0.5..10.0),
        })
        .collect()
}

fn visit(p: &Prototype, location: usize, area: usize, client: u32, rng: &mut Stream) -> TraceRow {
    let week: u64 = rng.random_range(0..52);
    let day: u8 = if rng.random_bool(p.weekend) { rng.random_range(5..7) } else { rng.random_range(0..5) };
    let hour = (p.hour + Normal::new(0.0, 1.5).unwrap().sample(rng)).rem_euclid(24.0);
    let duration = (p.duration * (1.0 + Normal::new(0.0, 0.25).unwrap().sample(rng))).max(1.0);
    let frequency = (p.frequency + Normal::new(0.0, 0.8).unwrap().sample(rng)).max(0.1);
    TraceRow {
        client_id: client,
        timestamp: (week * 7 + day as u64) * 86_400 + (hour * 3600.0) as u64,
        location,
        area,
        day_of_week: day,
        duration,
        frequency,
    }
}

/// Location proportions from a symmetric Dirichlet, drawn coordinate-wise
/// from Gamma variates. When every variate underflows the client gets a
/// single random location.
fn label_mix(skew: f64, locations: usize, rng: &mut Stream) -> Vec<f64> {
    let gamma = Gamma::new(skew, 1.0).expect("skew validated");
    let mut g: Vec<f64> = (0..locations).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        g = vec![0.0; locations];
        g[rng.random_range(0..locations)] = 1.0;
        return g;
    }
    g.iter_mut().for_each(|v| *v /= total);
    g
}

fn pick(weights: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn device(id: u32, area: usize, movements: f64, records: usize, rng: &mut Stream) -> (DeviceProfile, LearningUtility) {
    let kind = DeviceType::ALL[rng.random_range(0..3)];
    let (cpu, memory, diskspace) = match kind {
        DeviceType::Phone => (rng.random_range(0.8..2.0), rng.random_range(1024.0..4096.0), rng.random_range(1000.0..8000.0)),
        DeviceType::Tablet => (rng.random_range(1.5..3.0), rng.random_range(2048.0..6144.0), rng.random_range(2000.0..16000.0)),
        DeviceType::Laptop => (rng.random_range(2.0..8.0), rng.random_range(4096.0..16384.0), rng.random_range(8000.0..64000.0)),
    };
    let profile = DeviceProfile {
        id: ClientId(id),
        device_type: kind,
        cpu,
        memory,
        diskspace,
        battery: rng.random_range(10.0..100.0),
        availability: rng.random_range(60.0..1800.0),
        area,
        avg_movements: movements,
        avg_finish_time: nominal_finish_time(records, cpu),
        joined_round: 0,
    };
    let utility = LearningUtility {
        cpu_cost: rng.random_range(0.3..1.2),
        memory_cost: rng.random_range(256.0..1536.0),
        battery_cost: rng.random_range(2.0..15.0),
        diskspace_cost: rng.random_range(100.0..800.0),
    };
    (profile, utility)
}

/// Seconds a device needs for one round of local training.
pub fn nominal_finish_time(records: usize, cpu: f64) -> f64 {
    5.0 + 0.04 * records as f64 / cpu.max(0.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub profiles: Vec<DeviceProfile>,
    pub utilities: Vec<LearningUtility>,
    pub datasets: Vec<ClientDataset>,
    pub traces: Vec<Vec<TraceRow>>,
    /// Balanced server-side evaluation set.
    pub eval_set: Vec<Sample>,
    pub location_area: Vec<usize>,
}

pub fn generate_population(spec: &PopulationSpec) -> Result<Population> {
    spec.validate()?;
    let protos = prototypes(spec);
    let loc_area = location_areas(spec.locations, spec.areas);
    let tercile = MAX_MOVEMENT * 2.0 / 3.0;
    let initial = ((spec.clients as f64 * spec.initial_fraction).round() as usize).clamp(1, spec.clients);

    let mut out = Population {
        profiles: Vec::with_capacity(spec.clients),
        utilities: Vec::with_capacity(spec.clients),
        datasets: Vec::with_capacity(spec.clients),
        traces: Vec::with_capacity(spec.clients),
        eval_set: Vec::new(),
        location_area: loc_area.clone(),
    };
    for c in 0..spec.clients {
        let id = c as u32;
        let mut rng = stream(spec.seed, Purpose::Population, &[1, c as u64]);
        let movements =
            if rng.random_bool(spec.mover_fraction) { rng.random_range(tercile..MAX_MOVEMENT) } else { rng.random_range(0.0..tercile) };
        let (lo, hi) = spec.records;
        let u: f64 = rng.random_range(0.0..1.0);
        let share = VOLUME_COUPLING * movements / MAX_MOVEMENT + (1.0 - VOLUME_COUPLING) * u;
        let records = lo + ((hi - lo) as f64 * share).round() as usize;
        let area = rng.random_range(0..spec.areas);
        let (mut profile, utility) = device(id, area, movements, records, &mut rng);
        if c >= initial {
            profile.joined_round = rng.random_range(1..=spec.join_window);
        }

        let mix = label_mix(spec.skew, spec.locations, &mut rng);
        let rows: Vec<TraceRow> = (0..records)
            .map(|_| {
                let l = pick(&mix, &mut rng);
                visit(&protos[l], l, loc_area[l], id, &mut rng)
            })
            .collect();
        let mut sorted = rows;
        sorted.sort_by_key(|r| r.timestamp);
        let samples = sorted.iter().map(|r| Sample { features: featurize(r, spec.areas), label: r.location }).collect();
        out.profiles.push(profile);
        out.utilities.push(utility);
        out.datasets.push(ClientDataset { owner: ClientId(id), records: samples });
        out.traces.push(sorted);
    }

    let mut rng = stream(spec.seed, Purpose::EvalSet, &[]);
    out.eval_set = (0..spec.eval_size)
        .map(|i| {
            let l = i % spec.locations;
            let r = visit(&protos[l], l, loc_area[l], u32::MAX, &mut rng);
            Sample { features: featurize(&r, spec.areas), label: l }
        })
        .collect();
    Ok(out)
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(TRACE_HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads visits in the trace schema and groups them into per-client
/// datasets ordered by client id, each sorted by timestamp.
pub fn ingest_trace_csv<R: Read>(r: R, areas: usize, locations: usize) -> Result<Vec<ClientDataset>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(Error::MalformedRow { line: 1, message: format!("expected header {}", TRACE_HEADER.join(",")) });
    }
    let mut by_client: BTreeMap<u32, Vec<TraceRow>> = BTreeMap::new();
    for (i, rec) in rd.deserialize::<TraceRow>().enumerate() {
        let line = i as u64 + 2;
        let row = rec.map_err(|e| Error::MalformedRow { line, message: e.to_string() })?;
        if row.location >= locations {
            return Err(Error::MalformedRow { line, message: format!("location {} outside 0..{locations}", row.location) });
        }
        if row.area >= areas {
            return Err(Error::MalformedRow { line, message: format!("area {} outside 0..{areas}", row.area) });
        }
        if row.day_of_week > 6 {
            return Err(Error::MalformedRow { line, message: format!("day_of_week {} outside 0..7", row.day_of_week) });
        }
        by_client.entry(row.client_id).or_default().push(row);
    }
    Ok(by_client
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by_key(|r| r.timestamp);
            ClientDataset {
                owner: ClientId(id),
                records: rows.iter().map(|r| Sample { features: featurize(r, areas), label: r.location }).collect(),
            }
        })
        .collect())
}
