//! Round loop of the simulated federation.
//!
//! Each round: admit newcomers, advance device dynamics, select clients,
//! run local training in parallel, aggregate, then let the orchestrators
//! update trust. All randomness comes from counter-keyed streams so a run is
//! a pure function of its config.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::analytics::{agglomerative_cluster, FeatureRow};
use crate::bootstrap::{collect_bootstrap_dataset, fit_sdr_tree, predict_initial_trust, BootstrapFeatures, NEUTRAL_INITIAL_TRUST};
use crate::config::{InitialTrust, ScenarioConfig, SelectionPolicy};
use crate::datagen::{generate_population, nominal_finish_time, Population, MAX_MOVEMENT};
use crate::domain::{ClientId, DeviceProfile, IdRegistry, LearningUtility, TrustRecord};
use crate::error::{Error, Result};
use crate::optimizer::{device_feasible, ga_optimize, DeploymentContext};
use crate::rng::{derive_key, stream, Purpose};
use crate::trust::{tr4_contradictions, Context, ContextValue, ProbeReport, RoundObservation, TrustComponents, TrustConfig, TrustLogRecord};

use super::malicious::{perturb_report, poison_training_set, BehaviorTag, ClientReport, MaliciousBehavior};
use super::model::{aggregate_fedavg, should_dismiss_round, train_on, ClientDataset, ModelParams, ModelShape, Sample};
use super::orchestrator::{is_verified, orchestrator_round, probe_candidates, requested_areas, OrchestratorSettings};
use super::trace::{ClientTrace, RoundTrace};

/// Reference accuracies needed before a probe result is judged.
pub const MIN_PROBE_REFERENCE: usize = 5;
/// Rounds on either side of the stale model's round whose reports are
/// pooled into the probe reference. Local accuracy moves slowly between
/// neighbouring global models, and a wider pool keeps a few attackers from
/// inflating the MAD.
pub const PROBE_REFERENCE_SPAN: u32 = 1;
/// Records per step of the reported record-count context value.
pub const RECORD_BUCKET: usize = 50;
/// Seconds per step of the reported finish-time context value.
pub const FINISH_BUCKET: f64 = 5.0;
/// Per-round chance that a client moves, at the maximum movement rate.
const AREA_CHANGE_AT_MAX: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub traces: Vec<RoundTrace>,
    pub trust_log: Vec<TrustLogRecord>,
    pub malicious: BTreeMap<ClientId, MaliciousBehavior>,
    /// Final trust of every client admitted during the run.
    pub final_trust: BTreeMap<ClientId, f64>,
}

struct Client {
    profile: DeviceProfile,
    utility: LearningUtility,
    dataset: ClientDataset,
    /// Movement rate the device was generated with.
    movement_rate: f64,
    last_round: u32,
    last_accuracy: Option<f64>,
}

/// What came back from one selected client.
struct LocalResult {
    id: ClientId,
    delivered: bool,
    probed: bool,
    accuracy: Option<f64>,
    update: Option<(ModelParams, usize)>,
    reported_context: Context,
    observed_context: Context,
    reported_finish: f64,
}

fn bucket(x: f64, step: f64) -> ContextValue {
    ContextValue::Num((x / step).floor())
}

fn context(records: usize, area: usize, finish: f64, last_round: u32) -> Context {
    Context::from([
        ("area".to_string(), ContextValue::Cat(area.to_string())),
        ("finish_time_bucket".to_string(), bucket(finish, FINISH_BUCKET)),
        ("last_round_participated".to_string(), ContextValue::Num(last_round as f64)),
        ("record_count_bucket".to_string(), bucket(records as f64, RECORD_BUCKET as f64)),
    ])
}

/// Labels every client by its last reported accuracy; clients that never
/// reported share one extra label.
fn accuracy_labels(clients: &[&Client], k: usize) -> Result<Vec<usize>> {
    let rows: Vec<FeatureRow> =
        clients.iter().filter_map(|c| c.last_accuracy.map(|a| FeatureRow::new(c.profile.id, vec![a]))).collect();
    let distinct = rows.iter().map(|r| r.values[0].to_bits()).collect::<BTreeSet<_>>().len();
    let k = k.min(distinct);
    let labels = if k == 0 { BTreeMap::new() } else { agglomerative_cluster(&rows, k)? };
    Ok(clients.iter().map(|c| labels.get(&c.profile.id).copied().unwrap_or(k)).collect())
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    population: Population,
    shape: ModelShape,
    malicious: BTreeMap<ClientId, MaliciousBehavior>,
    clients: BTreeMap<ClientId, Client>,
    registry: IdRegistry,
    records: BTreeMap<ClientId, TrustRecord>,
    /// Final records of expelled clients.
    expelled: BTreeMap<ClientId, TrustRecord>,
    trust_log: Vec<TrustLogRecord>,
    /// `history[r]` is the global model after round `r`.
    history: Vec<ModelParams>,
    /// Accuracies reported by unprobed participants per round, each with
    /// whether the reporter was verified at the time.
    references: Vec<Vec<(f64, bool)>>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut spec = cfg.population.clone();
        spec.seed = cfg.seed;
        let population = generate_population(&spec)?;
        let shape = ModelShape { inputs: spec.feature_width(), hidden: cfg.fl.hidden, classes: spec.locations };
        let ids: Vec<ClientId> = population.profiles.iter().map(|p| p.id).collect();
        let malicious = cfg.malicious.resolve(&ids, cfg.seed);
        let global = ModelParams::init(shape, cfg.seed);
        Ok(Self {
            cfg,
            population,
            shape,
            malicious,
            clients: BTreeMap::new(),
            registry: IdRegistry::default(),
            records: BTreeMap::new(),
            expelled: BTreeMap::new(),
            trust_log: Vec::new(),
            history: vec![global],
            references: vec![Vec::new()],
        })
    }

    /// Clients whose join round has passed enter with an initial trust value.
    fn admit(&mut self, round: u32) -> Result<()> {
        let joining: Vec<usize> = (0..self.population.profiles.len())
            .filter(|&i| self.population.profiles[i].joined_round + 1 == round)
            .collect();
        if joining.is_empty() {
            return Ok(());
        }
        let tree = match self.cfg.initial_trust {
            InitialTrust::Bootstrap if !self.trust_log.is_empty() => {
                Some(fit_sdr_tree(&collect_bootstrap_dataset(&self.trust_log), &self.cfg.tree)?)
            }
            _ => None,
        };
        for i in joining {
            let profile = self.population.profiles[i].clone();
            self.registry.admit(profile.id)?;
            let initial = match self.cfg.initial_trust {
                InitialTrust::Bootstrap => match &tree {
                    Some(t) => predict_initial_trust(t, &BootstrapFeatures::of(&profile)),
                    None => NEUTRAL_INITIAL_TRUST,
                },
                InitialTrust::Fixed(v) => v,
                InitialTrust::Random => stream(self.cfg.seed, Purpose::InitialTrust, &[profile.id.0 as u64]).random_range(0.0..=1.0),
            };
            debug!("round {round}: admit client {} with trust {initial:.3}", profile.id);
            self.records.insert(profile.id, TrustRecord::with_window(initial, self.cfg.trust.history_window));
            self.clients.insert(
                profile.id,
                Client {
                    movement_rate: profile.avg_movements,
                    utility: self.population.utilities[i],
                    dataset: self.population.datasets[i].clone(),
                    profile,
                    last_round: 0,
                    last_accuracy: None,
                },
            );
        }
        Ok(())
    }

    /// Availability, battery, movement and area drift between rounds.
    fn advance_dynamics(&mut self, round: u32) {
        let areas = self.cfg.population.areas;
        let seed = self.cfg.seed;
        for c in self.clients.values_mut() {
            let mut rng = stream(seed, Purpose::Dynamics, &[round as u64, c.profile.id.0 as u64]);
            let p = &mut c.profile;
            p.availability = rng.random_range(60.0..1800.0);
            p.battery = (p.battery + rng.random_range(-10.0..10.0)).clamp(5.0, 100.0);
            let move_prob = (c.movement_rate / MAX_MOVEMENT * AREA_CHANGE_AT_MAX).clamp(0.0, 1.0);
            if areas > 1 && rng.random_bool(move_prob) {
                p.area = (p.area + rng.random_range(1..areas)) % areas;
            }
            let observed = c.movement_rate * rng.random_range(0.9..1.1);
            let finish = p.avg_finish_time;
            p.observe_behavior(observed, finish);
        }
    }

    fn select(&self, round: u32, ctx: &DeploymentContext) -> Result<Vec<usize>> {
        match self.cfg.selection {
            SelectionPolicy::Ga | SelectionPolicy::GaNoTrust => {
                let out = ga_optimize(ctx, &self.cfg.ga, derive_key(self.cfg.seed, Purpose::Selection, &[round as u64]))?;
                Ok(out.chosen.selection.selected().collect())
            }
            SelectionPolicy::Random => {
                let feasible: Vec<usize> = (0..ctx.len()).filter(|&i| device_feasible(ctx, i)).collect();
                let k = ((feasible.len() as f64) * self.cfg.random_fraction).ceil() as usize;
                let mut rng = stream(self.cfg.seed, Purpose::Selection, &[round as u64]);
                let mut picked: Vec<usize> = sample(&mut rng, feasible.len(), k.min(feasible.len())).into_iter().map(|j| feasible[j]).collect();
                picked.sort_unstable();
                Ok(picked)
            }
        }
    }

    /// One client's local round. Probed clients start from a stale global
    /// model and report only the accuracy they reach from it.
    fn local_round(&self, round: u32, id: ClientId, probe_base: Option<&ModelParams>) -> Result<LocalResult> {
        let cfg = self.cfg;
        let c = &self.clients[&id];
        let mut rng = stream(cfg.seed, Purpose::LocalTrain, &[round as u64, id.0 as u64]);
        let behavior = self.malicious.get(&id).filter(|b| b.active(round));
        let (train, test) = c.dataset.split();
        let used: Vec<Sample> = match behavior {
            Some(b) => poison_training_set(b, &train, self.shape.classes, &mut rng),
            None => train.iter().map(|s| (*s).clone()).collect(),
        };
        let finish = nominal_finish_time(used.len(), c.profile.cpu) * rng.random_range(0.8..1.2);
        let dropped = rng.random_bool(cfg.fl.straggler_prob) || finish > c.profile.availability;
        if dropped || used.is_empty() {
            return Ok(LocalResult {
                id,
                delivered: false,
                probed: probe_base.is_some(),
                accuracy: None,
                update: None,
                reported_context: Context::new(),
                observed_context: Context::new(),
                reported_finish: finish,
            });
        }
        let start = probe_base.unwrap_or_else(|| self.history.last().expect("history starts non-empty"));
        let refs: Vec<&Sample> = used.iter().collect();
        let outcome = train_on(&refs, &test, start, &cfg.fl.hyper(), derive_key(cfg.seed, Purpose::LocalTrain, &[round as u64, id.0 as u64, 1]))?;

        let observed = context(used.len(), c.profile.area, finish, c.last_round);
        let honest = context(train.len(), c.profile.area, finish, c.last_round);
        let mut report = ClientReport { params: outcome.params, context: honest, finish_time: finish };
        if let Some(b) = behavior {
            report = perturb_report(b, report, &mut rng);
            if b.tag == BehaviorTag::TimingManipulation {
                report.context.insert("finish_time_bucket".into(), bucket(report.finish_time, FINISH_BUCKET));
            }
        }
        let update = (probe_base.is_none() && report.params.is_finite()).then_some((report.params, used.len()));
        Ok(LocalResult {
            id,
            delivered: true,
            probed: probe_base.is_some(),
            accuracy: Some(outcome.accuracy),
            update,
            reported_context: report.context,
            observed_context: observed,
            reported_finish: report.finish_time,
        })
    }

    /// Random selection is the trust-blind baseline: orchestrators still
    /// score clients, but send no probes and expel nobody.
    fn defended(&self) -> bool {
        self.cfg.selection != SelectionPolicy::Random
    }

    /// Unprobed accuracy reports around `model_round`, from rounds already
    /// closed. Reports from verified clients are used alone once there are
    /// enough of them.
    fn probe_reference(&self, model_round: u32, round: u32) -> Vec<f64> {
        let lo = model_round.saturating_sub(PROBE_REFERENCE_SPAN).max(1);
        let hi = (model_round + PROBE_REFERENCE_SPAN).min(round - 1);
        let pool: Vec<(f64, bool)> = (lo..=hi).flat_map(|r| self.references[r as usize].iter().copied()).collect();
        let verified: Vec<f64> = pool.iter().filter(|p| p.1).map(|p| p.0).collect();
        if verified.len() >= MIN_PROBE_REFERENCE {
            verified
        } else {
            pool.into_iter().map(|p| p.0).collect()
        }
    }

    fn round(&mut self, round: u32) -> Result<RoundTrace> {
        let cfg = self.cfg;
        self.admit(round)?;
        self.advance_dynamics(round);

        let active: Vec<&Client> = self.clients.values().collect();
        let profiles: Vec<DeviceProfile> = active.iter().map(|c| c.profile.clone()).collect();
        let requested = requested_areas(&profiles, &self.records, &cfg.thresholds, cfg.population.areas, cfg.min_trusted_per_area);
        let trust: Vec<f64> = match cfg.selection {
            SelectionPolicy::GaNoTrust => vec![NEUTRAL_INITIAL_TRUST; active.len()],
            _ => active.iter().map(|c| self.records[&c.profile.id].trust).collect(),
        };
        let ctx = DeploymentContext::new(
            profiles.clone(),
            active.iter().map(|c| c.utility).collect(),
            trust,
            accuracy_labels(&active, cfg.accuracy_clusters)?,
            requested.clone(),
            cfg.weights,
            cfg.thresholds,
            cfg.population.areas,
        )?;
        let selected: Vec<ClientId> = match self.select(round, &ctx) {
            Ok(idx) => idx.into_iter().map(|i| profiles[i].id).collect(),
            Err(Error::NoFeasibleSolution) => return self.dismissed_round(round, requested, "no-feasible-solution"),
            Err(e) => return Err(e),
        };
        drop(active);

        // Stale-weights probes
        let lag = cfg.trust.probe_lag;
        let probe_round = round
            .checked_sub(lag)
            .filter(|&r| self.defended() && r >= 1 && self.probe_reference(r, round).len() >= MIN_PROBE_REFERENCE);
        let mut probed: BTreeSet<ClientId> = BTreeSet::new();
        if let Some(r) = probe_round {
            let cap = (cfg.probe_share * selected.len() as f64).ceil() as usize;
            let chosen: BTreeSet<ClientId> = selected.iter().copied().collect();
            probed = probe_candidates(&self.records, &cfg.trust).into_iter().filter(|id| chosen.contains(id)).take(cap).collect();
            debug!("round {round}: probing {probed:?} against round {r}");
        }
        let base = probe_round.map(|r| &self.history[r as usize - 1]);

        let results: Vec<LocalResult> = selected
            .par_iter()
            .map(|&id| self.local_round(round, id, if probed.contains(&id) { base } else { None }))
            .collect::<Result<_>>()?;

        let received = results.iter().filter(|r| r.delivered).count();
        let dismissed = should_dismiss_round(received, selected.len(), cfg.dismissal_fraction);
        let updates: Vec<(ModelParams, usize)> = results.iter().filter_map(|r| r.update.clone()).collect();
        let mut global = self.history.last().expect("history starts non-empty").clone();
        if !dismissed && !updates.is_empty() {
            global = aggregate_fedavg(&updates)?;
        }
        let global_accuracy = global.accuracy(&self.population.eval_set);
        self.history.push(global);
        let reports = results
            .iter()
            .filter(|r| !r.probed)
            .filter_map(|r| r.accuracy.map(|a| (a, is_verified(&self.records[&r.id], &cfg.trust))))
            .collect();
        self.references.push(reports);

        let reference = probe_round.map(|pr| (pr, self.probe_reference(pr, round)));
        let mut observations = BTreeMap::new();
        for r in &results {
            let c = self.clients.get_mut(&r.id).expect("selected clients are active");
            let mut obs = RoundObservation::idle(r.id);
            obs.deployed = true;
            if r.delivered {
                obs.completed_ok = tr4_contradictions(&r.reported_context, &r.observed_context)? == 0;
                if r.probed {
                    let (pr, reference) = reference.clone().expect("probed clients imply a probe round");
                    obs.probe = Some(ProbeReport { model_round: pr, accuracy: r.accuracy.unwrap_or(0.0), reference });
                } else {
                    obs.reported_accuracy = r.accuracy;
                    c.last_accuracy = r.accuracy;
                }
                obs.reported_context = r.reported_context.clone();
                obs.observed_context = r.observed_context.clone();
                let movements = c.profile.avg_movements;
                c.profile.observe_behavior(movements, r.reported_finish);
                c.last_round = round;
            }
            observations.insert(r.id, obs);
        }

        let profiles: Vec<DeviceProfile> = self.clients.values().map(|c| c.profile.clone()).collect();
        let passive = TrustConfig { expel_after: None, ..cfg.trust.clone() };
        let settings = OrchestratorSettings {
            trust: if self.defended() { &cfg.trust } else { &passive },
            thresholds: &cfg.thresholds,
            areas: cfg.population.areas,
            min_trusted_per_area: cfg.min_trusted_per_area,
        };
        let closed = orchestrator_round(round, &profiles, &self.records, observations, &settings)?;
        self.records = closed.records;
        self.trust_log.extend(closed.logs);
        for id in &closed.expelled {
            info!("round {round}: expelling client {id}");
            self.registry.evict(*id);
            self.clients.remove(id);
            let record = self.records.remove(id).expect("expelled clients have records");
            self.expelled.insert(*id, record);
        }

        let by_id: BTreeMap<ClientId, &LocalResult> = results.iter().map(|r| (r.id, r)).collect();
        let per_client = self.client_traces(|id| {
            let local = by_id.get(&id);
            (local.map(|r| (r.delivered, r.probed, r.accuracy)), closed.components.get(&id))
        });
        info!("round {round}: {} selected, {received} received, accuracy {global_accuracy:.4}{}", selected.len(), if dismissed { ", dismissed" } else { "" });
        Ok(RoundTrace {
            round,
            received,
            dismissed,
            dismiss_cause: dismissed.then(|| "too-few-updates".to_string()),
            selected_ids: selected,
            global_accuracy,
            requested_areas: requested.into_iter().collect(),
            per_client,
        })
    }

    /// One trace entry per admitted client, expelled ones included. `round_of`
    /// gives what happened to a client this round: `(delivered, probed,
    /// accuracy)` when deployed, and its trust components.
    fn client_traces<'b, F>(&self, round_of: F) -> Vec<ClientTrace>
    where
        F: Fn(ClientId) -> (Option<(bool, bool, Option<f64>)>, Option<&'b TrustComponents>),
    {
        let mut all: Vec<(ClientId, f64, bool)> = self.records.iter().map(|(id, r)| (*id, r.trust, false)).collect();
        all.extend(self.expelled.iter().map(|(id, r)| (*id, r.trust, true)));
        all.sort_by_key(|e| e.0);
        all.into_iter()
            .map(|(id, trust, expelled)| {
                let (local, comp) = round_of(id);
                ClientTrace {
                    id,
                    trust,
                    expelled,
                    deployed: local.is_some(),
                    delivered: local.is_some_and(|l| l.0),
                    probed: local.is_some_and(|l| l.1),
                    malicious: self.malicious.contains_key(&id),
                    tr1: comp.map(|c| c.tr1),
                    tr2_norm: comp.map(|c| c.tr2_norm),
                    tr3_norm: comp.map(|c| c.tr3_norm),
                    tr4_norm: comp.map(|c| c.tr4_norm),
                    local_accuracy: local.and_then(|l| l.2),
                    flagged: comp.is_some_and(|c| c.flagged()),
                }
            })
            .collect()
    }

    /// A round where nothing was deployed: the model and trust stand still.
    fn dismissed_round(&mut self, round: u32, requested: BTreeSet<usize>, cause: &str) -> Result<RoundTrace> {
        let global = self.history.last().expect("history starts non-empty").clone();
        let global_accuracy = global.accuracy(&self.population.eval_set);
        self.history.push(global);
        self.references.push(Vec::new());
        info!("round {round}: dismissed ({cause})");
        Ok(RoundTrace {
            round,
            selected_ids: Vec::new(),
            received: 0,
            dismissed: true,
            dismiss_cause: Some(cause.to_string()),
            global_accuracy,
            requested_areas: requested.into_iter().collect(),
            per_client: self.client_traces(|_| (None, None)),
        })
    }
}

/// Runs a whole scenario. The result depends only on `cfg`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let mut engine = Engine::new(cfg)?;
    let mut traces = Vec::with_capacity(cfg.fl.rounds as usize);
    for r in 1..=cfg.fl.rounds {
        traces.push(engine.round(r)?);
    }
    Ok(ScenarioRun {
        traces,
        final_trust: engine.records.iter().chain(&engine.expelled).map(|(id, r)| (*id, r.trust)).collect(),
        trust_log: engine.trust_log,
        malicious: engine.malicious,
    })
}
