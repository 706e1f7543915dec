use serde::{Deserialize, Serialize};

use super::DeploymentContext;
use crate::domain::{ClientId, DeviceProfile, LearningUtility, SelectionVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Cpu,
    Memory,
    Diskspace,
    Battery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    Resource { device: ClientId, resource: Resource },
    Availability { device: ClientId },
    TrustCap { count: usize, cap: usize },
    MovementCap { count: usize, cap: usize },
    MinSelected { count: usize, needed: usize },
}

pub(crate) fn overloads(u: &LearningUtility, d: &DeviceProfile) -> impl Iterator<Item = Resource> {
    [
        (u.cpu_cost > d.cpu, Resource::Cpu),
        (u.memory_cost > d.memory, Resource::Memory),
        (u.diskspace_cost > d.diskspace, Resource::Diskspace),
        (u.battery_cost > d.battery, Resource::Battery),
    ]
    .into_iter()
    .filter_map(|(over, r)| over.then_some(r))
}

/// Whether device `i` could be selected on its own: the container fits and
/// the device stays long enough.
pub fn device_feasible(ctx: &DeploymentContext, i: usize) -> bool {
    ctx.utilities[i].fits(&ctx.devices[i]) && ctx.devices[i].availability >= ctx.thresholds.min_availability
}

/// All constraint violations of a selection; empty means feasible.
pub fn check_constraints(selection: &SelectionVector, ctx: &DeploymentContext) -> Vec<Violation> {
    let th = &ctx.thresholds;
    let mut out = Vec::new();
    let mut high_trust = 0;
    let mut movers = 0;
    for i in selection.selected() {
        let d = &ctx.devices[i];
        out.extend(overloads(&ctx.utilities[i], d).map(|resource| Violation::Resource { device: d.id, resource }));
        if d.availability < th.min_availability {
            out.push(Violation::Availability { device: d.id });
        }
        high_trust += ctx.is_high_trust(i) as usize;
        movers += ctx.is_high_mover(i) as usize;
    }
    if high_trust > th.max_high_trust {
        out.push(Violation::TrustCap { count: high_trust, cap: th.max_high_trust });
    }
    if movers > th.max_high_movers {
        out.push(Violation::MovementCap { count: movers, cap: th.max_high_movers });
    }
    if selection.count() < th.min_selected {
        out.push(Violation::MinSelected { count: selection.count(), needed: th.min_selected });
    }
    out
}
