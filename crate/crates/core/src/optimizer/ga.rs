use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::repair::repair;
use super::{dominates, evaluate_objectives, scalarize, DeploymentContext, ObjectiveVector};
use crate::domain::SelectionVector;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivorPolicy {
    /// Keep the best `population` of parents and offspring by weighted sum.
    Truncation,
    /// Offspring replace parents outright; only the archive carries elites.
    Generational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    /// Stop after this many generations without an archive change.
    pub patience: usize,
    pub survivor: SurvivorPolicy,
    /// Initial chromosomes draw their selection density from this range.
    pub init_density: (f64, f64),
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            crossover_prob: 0.9,
            patience: 20,
            survivor: SurvivorPolicy::Truncation,
            init_density: (0.05, 0.5),
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::InvalidConfig { field: format!("ga.{field}"), message: message.into() });
        if self.population < 2 {
            return bad("population", "must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) {
            return bad("crossover_prob", "must lie in [0, 1]");
        }
        let (lo, hi) = self.init_density;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("init_density", "must be an ordered pair within [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub selection: SelectionVector,
    pub objectives: ObjectiveVector,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub pareto: Vec<ArchiveEntry>,
    pub chosen: ArchiveEntry,
    pub generations_run: usize,
    /// Best archive fitness after initialisation and after each generation.
    pub best_history: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Candidate {
    selection: SelectionVector,
    objectives: ObjectiveVector,
    fitness: f64,
    feasible: bool,
}

/// Higher fitness, then fewer selected clients, then lowest bit pattern.
fn preference(a: &ArchiveEntry, b: &ArchiveEntry) -> Ordering {
    a.fitness
        .total_cmp(&b.fitness)
        .then_with(|| b.selection.count().cmp(&a.selection.count()))
        .then_with(|| b.selection.cmp(&a.selection))
}

fn evaluate(selection: SelectionVector, feasible: bool, ctx: &DeploymentContext) -> Candidate {
    let objectives = evaluate_objectives(&selection, ctx);
    let fitness = scalarize(&objectives, &ctx.weights);
    Candidate { selection, objectives, fitness, feasible }
}

/// Inserts a feasible candidate; returns whether the archive changed.
fn archive_insert(archive: &mut Vec<ArchiveEntry>, c: &Candidate) -> bool {
    if !c.feasible || archive.iter().any(|e| e.selection == c.selection || dominates(&e.objectives, &c.objectives)) {
        return false;
    }
    archive.retain(|e| !dominates(&c.objectives, &e.objectives));
    archive.push(ArchiveEntry { selection: c.selection.clone(), objectives: c.objectives, fitness: c.fitness });
    true
}

fn best_fitness(archive: &[ArchiveEntry]) -> f64 {
    archive.iter().map(|e| e.fitness).fold(f64::NEG_INFINITY, f64::max)
}

fn tournament<'a, R: Rng + ?Sized>(pool: &[&'a SelectionVector], fitness: &[f64], rng: &mut R) -> &'a SelectionVector {
    let a = rng.random_range(0..pool.len());
    let b = rng.random_range(0..pool.len());
    if fitness[b] > fitness[a] || (fitness[b] == fitness[a] && b < a) {
        pool[b]
    } else {
        pool[a]
    }
}

/// Evolves selections with binary tournament, one-point crossover and
/// bit-flip mutation, repairing every offspring and keeping a Pareto archive
/// of the feasible ones.
pub fn ga_optimize(ctx: &DeploymentContext, params: &GaParams, seed: u64) -> Result<GaResult> {
    params.validate()?;
    let n = ctx.len();

    let probe = repair(&SelectionVector::empty(n), ctx, &mut stream(seed, Purpose::Repair, &[u64::MAX]));
    if !probe.feasible {
        return Err(Error::NoFeasibleSolution);
    }

    let init: Vec<Candidate> = (0..params.population)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, Purpose::Ga, &[0, k as u64]);
            let (lo, hi) = params.init_density;
            let density = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let bits = SelectionVector::from_bits((0..n).map(|_| rng.random_bool(density)).collect());
            let out = repair(&bits, ctx, &mut rng);
            evaluate(out.selection, out.feasible, ctx)
        })
        .collect();

    let mut archive: Vec<ArchiveEntry> = Vec::new();
    archive_insert(&mut archive, &evaluate(probe.selection, true, ctx));
    for c in &init {
        archive_insert(&mut archive, c);
    }
    let mut population = init;
    let mut best_history = vec![best_fitness(&archive)];
    let mut stale = 0;
    let mut generations_run = 0;
    let mutation_prob = if n > 0 { 1.0 / n as f64 } else { 0.0 };

    for g in 1..=params.generations {
        generations_run = g;
        let pool: Vec<&SelectionVector> =
            population.iter().map(|c| &c.selection).chain(archive.iter().map(|e| &e.selection)).collect();
        let fitness: Vec<f64> = population.iter().map(|c| c.fitness).chain(archive.iter().map(|e| e.fitness)).collect();

        let pairs = params.population.div_ceil(2);
        let offspring: Vec<Candidate> = (0..pairs)
            .into_par_iter()
            .flat_map_iter(|k| {
                let mut rng = stream(seed, Purpose::Ga, &[g as u64, k as u64]);
                let p1 = tournament(&pool, &fitness, &mut rng).bits().to_vec();
                let p2 = tournament(&pool, &fitness, &mut rng).bits().to_vec();
                let (mut c1, mut c2) = (p1.clone(), p2.clone());
                if n > 1 && rng.random_bool(params.crossover_prob) {
                    let cut = rng.random_range(1..n);
                    c1 = p1[..cut].iter().chain(&p2[cut..]).copied().collect();
                    c2 = p2[..cut].iter().chain(&p1[cut..]).copied().collect();
                }
                [c1, c2]
                    .into_iter()
                    .map(|mut bits| {
                        for b in bits.iter_mut() {
                            if rng.random_bool(mutation_prob) {
                                *b = !*b;
                            }
                        }
                        let out = repair(&SelectionVector::from_bits(bits), ctx, &mut rng);
                        evaluate(out.selection, out.feasible, ctx)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut changed = false;
        for c in &offspring {
            changed |= archive_insert(&mut archive, c);
        }

        population = match params.survivor {
            SurvivorPolicy::Truncation => {
                let mut merged: Vec<Candidate> = population.into_iter().chain(offspring).collect();
                // stable sort keeps parents ahead of equally fit offspring
                merged.sort_by(|a, b| (b.feasible, b.fitness).partial_cmp(&(a.feasible, a.fitness)).unwrap_or(Ordering::Equal));
                merged.truncate(params.population);
                merged
            }
            SurvivorPolicy::Generational => offspring.into_iter().take(params.population).collect(),
        };

        best_history.push(best_fitness(&archive));
        stale = if changed { 0 } else { stale + 1 };
        if stale >= params.patience {
            break;
        }
    }

    archive.sort_by(|a, b| a.selection.cmp(&b.selection));
    let chosen = archive.iter().max_by(|a, b| preference(a, b)).cloned().ok_or(Error::NoFeasibleSolution)?;
    Ok(GaResult { pareto: archive, chosen, generations_run, best_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClientId, DeviceProfile, DeviceType, LearningUtility, ObjectiveWeights};
    use crate::optimizer::{check_constraints, random_context, Thresholds};
    use std::collections::BTreeSet;

    fn quick() -> GaParams {
        GaParams { population: 30, generations: 40, ..Default::default() }
    }

    #[test]
    fn archive_is_feasible_and_non_dominated() {
        let ctx = random_context(16, 4, 11);
        let r = ga_optimize(&ctx, &quick(), 5).unwrap();
        for e in &r.pareto {
            assert!(check_constraints(&e.selection, &ctx).is_empty());
        }
        for a in &r.pareto {
            for b in &r.pareto {
                assert!(!dominates(&a.objectives, &b.objectives));
            }
        }
        assert!(r.pareto.contains(&r.chosen));
        assert!(r.best_history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn matches_exhaustive_search_on_small_instances() {
        for seed in 0..10 {
            let ctx = random_context(10, 4, 100 + seed);
            let (_, opt) = crate::optimizer::exhaustive_optimum(&ctx).unwrap();
            let r = ga_optimize(&ctx, &GaParams::default(), seed).unwrap();
            assert!(r.chosen.fitness >= 0.99 * opt, "seed {seed}: {} vs {opt}", r.chosen.fitness);
        }
    }

    #[test]
    fn same_seed_same_result() {
        let ctx = random_context(20, 6, 3);
        let a = ga_optimize(&ctx, &quick(), 9).unwrap();
        let b = ga_optimize(&ctx, &quick(), 9).unwrap();
        assert_eq!(a, b);
    }

    fn lone_device_ctx(all_infeasible: bool) -> DeploymentContext {
        let n = 4;
        let devices: Vec<DeviceProfile> = (0..n)
            .map(|i| DeviceProfile {
                id: ClientId(i as u32),
                device_type: DeviceType::Phone,
                cpu: if i == 0 && !all_infeasible { 4.0 } else { 0.5 },
                memory: 4096.0,
                diskspace: 1000.0,
                battery: 80.0,
                availability: 600.0,
                area: i % 2,
                avg_movements: 1.0,
                avg_finish_time: 20.0,
                joined_round: 0,
            })
            .collect();
        let u = LearningUtility { cpu_cost: 1.0, ..Default::default() };
        DeploymentContext::new(
            devices,
            vec![u; n],
            vec![0.9, 0.5, 0.5, 0.5],
            vec![0; n],
            BTreeSet::new(),
            ObjectiveWeights::uniform(),
            Thresholds::default(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn single_feasible_device_picks_best_of_two_candidates() {
        let ctx = lone_device_ctx(false);
        let r = ga_optimize(&ctx, &quick(), 1).unwrap();
        let empty = scalarize(&evaluate_objectives(&SelectionVector::empty(4), &ctx), &ctx.weights);
        let single = SelectionVector::from_indices(4, &[0]);
        let one = scalarize(&evaluate_objectives(&single, &ctx), &ctx.weights);
        // f = (0.75, 0.9, 1, 0.5*0.5 + 0.5*1, 1) beats the empty (1, 0, 0, 0, 1)
        assert!(one > empty);
        assert_eq!(r.chosen.selection, single);
    }

    #[test]
    fn all_infeasible_devices_give_empty_selection() {
        let ctx = lone_device_ctx(true);
        let r = ga_optimize(&ctx, &quick(), 1).unwrap();
        assert_eq!(r.chosen.selection, SelectionVector::empty(4));
        assert!((r.chosen.fitness - 0.4).abs() < 1e-12);
        // with an area requested the empty selection scores f1 alone
        let mut requested = ctx.clone();
        requested.requested_areas.insert(0);
        let r = ga_optimize(&requested, &quick(), 1).unwrap();
        assert_eq!(r.chosen.selection, SelectionVector::empty(4));
        assert!((r.chosen.fitness - 0.2).abs() < 1e-12);
    }

    #[test]
    fn unmeetable_minimum_is_reported() {
        let mut ctx = lone_device_ctx(true);
        ctx.thresholds.min_selected = 1;
        assert!(matches!(ga_optimize(&ctx, &quick(), 1), Err(Error::NoFeasibleSolution)));
    }
}
