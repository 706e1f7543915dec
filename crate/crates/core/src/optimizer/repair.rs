use std::cmp::Ordering;

use rand::Rng;

use super::constraints::{check_constraints, device_feasible, Violation};
use super::DeploymentContext;
use crate::domain::SelectionVector;

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub selection: SelectionVector,
    /// False when violations remain after the pass.
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

/// Picks the best unselected, individually feasible device accepted by
/// `allow`, ordered by `better` and then by lowest index.
fn best_candidate<F, C>(ctx: &DeploymentContext, s: &SelectionVector, allow: F, better: C) -> Option<usize>
where
    F: Fn(usize) -> bool,
    C: Fn(usize, usize) -> Ordering,
{
    let mut best: Option<usize> = None;
    for j in 0..ctx.len() {
        if s.get(j) || !device_feasible(ctx, j) || !allow(j) {
            continue;
        }
        if best.is_none_or(|b| better(j, b) == Ordering::Greater) {
            best = Some(j);
        }
    }
    best
}

fn by_trust(ctx: &DeploymentContext) -> impl Fn(usize, usize) -> Ordering + '_ {
    |a, b| ctx.trust[a].total_cmp(&ctx.trust[b])
}

/// Same area as `home` first, then higher trust.
fn near_then_trust(ctx: &DeploymentContext, home: usize) -> impl Fn(usize, usize) -> Ordering + '_ {
    move |a, b| {
        let area = ctx.devices[home].area;
        (ctx.devices[a].area == area)
            .cmp(&(ctx.devices[b].area == area))
            .then(ctx.trust[a].total_cmp(&ctx.trust[b]))
    }
}

fn count_where(s: &SelectionVector, pred: impl Fn(usize) -> bool) -> usize {
    s.selected().filter(|&i| pred(i)).count()
}

fn pick<R: Rng + ?Sized>(s: &SelectionVector, pred: impl Fn(usize) -> bool, rng: &mut R) -> usize {
    let pool: Vec<usize> = s.selected().filter(|&i| pred(i)).collect();
    pool[rng.random_range(0..pool.len())]
}

/// One pass of the reparation procedure.
///
/// Overloaded devices are replaced within their area, devices about to leave
/// are replaced by mobile devices, and the mover and high-trust caps are
/// enforced by swapping randomly chosen members for capped-out alternatives.
/// Every replacement is itself individually feasible, so only an unmet
/// minimum selection size can leave the result infeasible.
pub fn repair<R: Rng + ?Sized>(selection: &SelectionVector, ctx: &DeploymentContext, rng: &mut R) -> RepairOutcome {
    let th = ctx.thresholds;
    let mut s = selection.clone();
    let originally: Vec<usize> = s.selected().collect();

    for i in originally {
        let d = &ctx.devices[i];
        if !ctx.utilities[i].fits(d) {
            s.set(i, false);
            let area = d.area;
            if let Some(j) = best_candidate(ctx, &s, |j| j != i && ctx.devices[j].area == area, by_trust(ctx)) {
                s.set(j, true);
            }
        } else if d.availability < th.min_availability {
            s.set(i, false);
            let by_movement = |a: usize, b: usize| ctx.devices[a].avg_movements.total_cmp(&ctx.devices[b].avg_movements);
            if let Some(j) = best_candidate(ctx, &s, |j| j != i, by_movement) {
                s.set(j, true);
            }
        }
    }

    while count_where(&s, |i| ctx.is_high_mover(i)) > th.max_high_movers {
        let out = pick(&s, |i| ctx.is_high_mover(i), rng);
        s.set(out, false);
        if let Some(j) = best_candidate(ctx, &s, |j| j != out && !ctx.is_high_mover(j), near_then_trust(ctx, out)) {
            s.set(j, true);
        }
    }

    while count_where(&s, |i| ctx.is_high_trust(i)) > th.max_high_trust {
        let out = pick(&s, |i| ctx.is_high_trust(i), rng);
        s.set(out, false);
        let movers = count_where(&s, |i| ctx.is_high_mover(i));
        let allow = |j: usize| j != out && !ctx.is_high_trust(j) && (!ctx.is_high_mover(j) || movers < th.max_high_movers);
        if let Some(j) = best_candidate(ctx, &s, allow, near_then_trust(ctx, out)) {
            s.set(j, true);
        }
    }

    while s.count() < th.min_selected {
        let trusted = count_where(&s, |i| ctx.is_high_trust(i));
        let movers = count_where(&s, |i| ctx.is_high_mover(i));
        let allow = |j: usize| {
            (!ctx.is_high_trust(j) || trusted < th.max_high_trust) && (!ctx.is_high_mover(j) || movers < th.max_high_movers)
        };
        match best_candidate(ctx, &s, allow, by_trust(ctx)) {
            Some(j) => s.set(j, true),
            None => break,
        }
    }

    let violations = check_constraints(&s, ctx);
    RepairOutcome { feasible: violations.is_empty(), selection: s, violations }
}
