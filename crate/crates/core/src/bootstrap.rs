//! Initial trust for newcomers.
//!
//! Orchestrator trust logs are turned into training examples (device
//! attributes → trust earned) and a regression tree is grown with the
//! standard-deviation-reduction split criterion. A newly joined device gets
//! the tree's prediction as its starting trust.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{ClientId, DeviceProfile, DeviceType};
use crate::error::{Error, Result};
use crate::trust::TrustLogRecord;

/// Initial trust when no orchestrator has any logs yet.
pub const NEUTRAL_INITIAL_TRUST: f64 = 0.5;

/// Upper edges of the movement bins (area transitions per hour).
pub const MOVEMENT_BIN_EDGES: [f64; 3] = [0.5, 1.0, 2.0];

pub fn movement_bin(avg_movements: f64) -> u32 {
    MOVEMENT_BIN_EDGES.iter().take_while(|&&e| avg_movements >= e).count() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Cat(u32),
}

impl FeatureValue {
    fn num(self) -> f64 {
        match self {
            FeatureValue::Num(v) => v,
            FeatureValue::Cat(c) => c as f64,
        }
    }

    fn cat(self) -> u32 {
        match self {
            FeatureValue::Cat(c) => c,
            FeatureValue::Num(v) => v as u32,
        }
    }
}

/// Attributes an orchestrator logs for each participating device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapFeatures {
    pub area: usize,
    pub device_type: DeviceType,
    pub cpu: f64,
    pub memory: f64,
    pub movement_bin: u32,
}

impl BootstrapFeatures {
    pub const NAMES: [&'static str; 5] = ["area", "type", "cpu", "memory", "movement_bin"];
    pub const KINDS: [FeatureKind; 5] = [
        FeatureKind::Categorical,
        FeatureKind::Categorical,
        FeatureKind::Numeric,
        FeatureKind::Numeric,
        FeatureKind::Categorical,
    ];

    pub fn of(profile: &DeviceProfile) -> Self {
        Self {
            area: profile.area,
            device_type: profile.device_type,
            cpu: profile.cpu,
            memory: profile.memory,
            movement_bin: movement_bin(profile.avg_movements),
        }
    }

    pub fn values(&self) -> Vec<FeatureValue> {
        vec![
            FeatureValue::Cat(self.area as u32),
            FeatureValue::Cat(self.device_type.index() as u32),
            FeatureValue::Num(self.cpu),
            FeatureValue::Num(self.memory),
            FeatureValue::Cat(self.movement_bin),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapExample {
    pub features: BootstrapFeatures,
    /// Trust earned, in `[0, 1]`.
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples: usize,
    /// Stop splitting once σ/mean of the node targets falls below this.
    pub cv_stop: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 6, min_samples: 4, cv_stop: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        mean: f64,
        count: usize,
    },
    Threshold {
        feature: usize,
        threshold: f64,
        mean: f64,
        count: usize,
        left: Box<Node>,
        right: Box<Node>,
    },
    Category {
        feature: usize,
        mean: f64,
        count: usize,
        branches: Vec<(u32, Node)>,
    },
}

impl Node {
    pub fn mean(&self) -> f64 {
        match self {
            Node::Leaf { mean, .. } | Node::Threshold { mean, .. } | Node::Category { mean, .. } => *mean,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            Node::Leaf { count, .. } | Node::Threshold { count, .. } | Node::Category { count, .. } => *count,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Threshold { left, right, .. } => 1 + left.depth().max(right.depth()),
            Node::Category { branches, .. } => 1 + branches.iter().map(|(_, n)| n.depth()).max().unwrap_or(0),
        }
    }
}

/// A regression tree over an arbitrary feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub kinds: Vec<FeatureKind>,
    pub names: Vec<String>,
    pub root: Node,
}

/// A candidate split and its standard deviation reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    /// `None` for a multiway categorical split.
    pub threshold: Option<f64>,
    pub sdr: f64,
}

fn mean(ys: &[f64]) -> f64 {
    ys.iter().sum::<f64>() / ys.len() as f64
}

fn std_dev(ys: &[f64]) -> f64 {
    let m = mean(ys);
    (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt()
}

fn weighted_child_sd(groups: &[Vec<f64>], total: usize) -> f64 {
    groups.iter().filter(|g| !g.is_empty()).map(|g| g.len() as f64 / total as f64 * std_dev(g)).sum()
}

/// Every admissible split at a node, in (feature, threshold) order.
pub fn candidate_splits(kinds: &[FeatureKind], xs: &[&[FeatureValue]], ys: &[f64]) -> Vec<SplitChoice> {
    let parent_sd = std_dev(ys);
    let n = ys.len();
    let mut out = Vec::new();
    for (f, kind) in kinds.iter().enumerate() {
        match kind {
            FeatureKind::Numeric => {
                let mut vals: Vec<f64> = xs.iter().map(|x| x[f].num()).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = (w[0] + w[1]) / 2.0;
                    let mut left = Vec::new();
                    let mut right = Vec::new();
                    for (x, &y) in xs.iter().zip(ys) {
                        if x[f].num() <= thr {
                            left.push(y);
                        } else {
                            right.push(y);
                        }
                    }
                    let sdr = parent_sd - weighted_child_sd(&[left, right], n);
                    out.push(SplitChoice { feature: f, threshold: Some(thr), sdr });
                }
            }
            FeatureKind::Categorical => {
                let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
                for (x, &y) in xs.iter().zip(ys) {
                    groups.entry(x[f].cat()).or_default().push(y);
                }
                if groups.len() >= 2 {
                    let groups: Vec<Vec<f64>> = groups.into_values().collect();
                    let sdr = parent_sd - weighted_child_sd(&groups, n);
                    out.push(SplitChoice { feature: f, threshold: None, sdr });
                }
            }
        }
    }
    out
}

/// The split with the largest reduction; ties go to the lowest feature index
/// and then the lowest threshold.
pub fn best_split(kinds: &[FeatureKind], xs: &[&[FeatureValue]], ys: &[f64]) -> Option<SplitChoice> {
    let mut best: Option<SplitChoice> = None;
    for c in candidate_splits(kinds, xs, ys) {
        if best.is_none_or(|b| c.sdr > b.sdr) {
            best = Some(c);
        }
    }
    best
}

fn grow(kinds: &[FeatureKind], xs: &[&[FeatureValue]], ys: &[f64], depth: usize, params: &TreeParams) -> Node {
    let m = mean(ys);
    let count = ys.len();
    let leaf = Node::Leaf { mean: m, count };
    if depth >= params.max_depth || count < params.min_samples {
        return leaf;
    }
    let sd = std_dev(ys);
    if sd <= 1e-12 || (m > 0.0 && sd / m < params.cv_stop) {
        return leaf;
    }
    let Some(split) = best_split(kinds, xs, ys) else {
        return leaf;
    };
    if split.sdr <= 0.0 {
        return leaf;
    }
    let f = split.feature;
    match split.threshold {
        Some(thr) => {
            let (mut lx, mut ly, mut rx, mut ry) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (x, &y) in xs.iter().zip(ys) {
                if x[f].num() <= thr {
                    lx.push(*x);
                    ly.push(y);
                } else {
                    rx.push(*x);
                    ry.push(y);
                }
            }
            Node::Threshold {
                feature: f,
                threshold: thr,
                mean: m,
                count,
                left: Box::new(grow(kinds, &lx, &ly, depth + 1, params)),
                right: Box::new(grow(kinds, &rx, &ry, depth + 1, params)),
            }
        }
        None => {
            let mut groups: BTreeMap<u32, (Vec<&[FeatureValue]>, Vec<f64>)> = BTreeMap::new();
            for (x, &y) in xs.iter().zip(ys) {
                let e = groups.entry(x[f].cat()).or_default();
                e.0.push(*x);
                e.1.push(y);
            }
            let branches = groups
                .into_iter()
                .map(|(c, (gx, gy))| (c, grow(kinds, &gx, &gy, depth + 1, params)))
                .collect();
            Node::Category { feature: f, mean: m, count, branches }
        }
    }
}

impl RegressionTree {
    /// Grows a tree over generic rows.
    pub fn fit_rows(
        kinds: Vec<FeatureKind>,
        names: Vec<String>,
        rows: &[Vec<FeatureValue>],
        targets: &[f64],
        params: &TreeParams,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if rows.len() != targets.len() || rows.iter().any(|r| r.len() != kinds.len()) {
            return Err(Error::InvalidInput("tree rows and schema disagree".into()));
        }
        let xs: Vec<&[FeatureValue]> = rows.iter().map(|r| r.as_slice()).collect();
        let root = grow(&kinds, &xs, targets, 0, params);
        Ok(Self { kinds, names, root })
    }

    pub fn predict_row(&self, x: &[FeatureValue]) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { mean, .. } => return *mean,
                Node::Threshold { feature, threshold, left, right, .. } => {
                    node = if x[*feature].num() <= *threshold { left } else { right };
                }
                Node::Category { feature, mean, branches, .. } => {
                    let c = x[*feature].cat();
                    if let Some((_, child)) = branches.iter().find(|(k, _)| *k == c) {
                        node = child;
                    } else {
                        let top = branches.iter().map(|(_, n)| n.count()).max().unwrap_or(0);
                        let mut largest = branches.iter().filter(|(_, n)| n.count() == top);
                        match (largest.next(), largest.next()) {
                            (Some((_, child)), None) => node = child,
                            _ => return *mean,
                        }
                    }
                }
            }
        }
    }

    /// Indented text rendering, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_node(&self.root, 0, "root", &mut out);
        out
    }

    fn dump_node(&self, node: &Node, indent: usize, label: &str, out: &mut String) {
        let pad = "  ".repeat(indent);
        match node {
            Node::Leaf { mean, count } => {
                let _ = writeln!(out, "{pad}{label}: leaf mean={mean:.6} count={count}");
            }
            Node::Threshold { feature, threshold, mean, count, left, right } => {
                let name = &self.names[*feature];
                let _ = writeln!(out, "{pad}{label}: split {name} <= {threshold:.6} mean={mean:.6} count={count}");
                self.dump_node(left, indent + 1, &format!("{name} <= {threshold:.6}"), out);
                self.dump_node(right, indent + 1, &format!("{name} > {threshold:.6}"), out);
            }
            Node::Category { feature, mean, count, branches } => {
                let name = &self.names[*feature];
                let _ = writeln!(out, "{pad}{label}: split {name} mean={mean:.6} count={count}");
                for (c, child) in branches {
                    self.dump_node(child, indent + 1, &format!("{name} = {c}"), out);
                }
            }
        }
    }
}

/// Fits the initial-trust tree on bootstrap examples.
pub fn fit_sdr_tree(examples: &[BootstrapExample], params: &TreeParams) -> Result<RegressionTree> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let rows: Vec<Vec<FeatureValue>> = examples.iter().map(|e| e.features.values()).collect();
    let targets: Vec<f64> = examples.iter().map(|e| e.target.clamp(0.0, 1.0)).collect();
    RegressionTree::fit_rows(
        BootstrapFeatures::KINDS.to_vec(),
        BootstrapFeatures::NAMES.iter().map(|s| s.to_string()).collect(),
        &rows,
        &targets,
        params,
    )
}

pub fn predict_initial_trust(tree: &RegressionTree, features: &BootstrapFeatures) -> f64 {
    tree.predict_row(&features.values()).clamp(0.0, 1.0)
}

/// One example per client, taken from its most recent logged round across
/// all orchestrators. Output is ordered by client id.
pub fn collect_bootstrap_dataset<'a, I>(logs: I) -> Vec<BootstrapExample>
where
    I: IntoIterator<Item = &'a TrustLogRecord>,
{
    let mut latest: BTreeMap<ClientId, &TrustLogRecord> = BTreeMap::new();
    for rec in logs {
        match latest.get(&rec.client) {
            Some(prev) if prev.round > rec.round => {}
            _ => {
                latest.insert(rec.client, rec);
            }
        }
    }
    latest
        .into_values()
        .map(|r| BootstrapExample {
            features: BootstrapFeatures {
                area: r.area,
                device_type: r.device_type,
                cpu: r.cpu,
                memory: r.memory,
                movement_bin: movement_bin(r.avg_movements),
            },
            target: r.trust.clamp(0.0, 1.0),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trust::TrustComponents;
    use proptest::prelude::*;

    fn feats(area: usize, t: DeviceType) -> BootstrapFeatures {
        BootstrapFeatures { area, device_type: t, cpu: 2.0, memory: 2048.0, movement_bin: 0 }
    }

    fn ex(area: usize, t: DeviceType, target: f64) -> BootstrapExample {
        BootstrapExample { features: feats(area, t), target }
    }

    fn components() -> TrustComponents {
        TrustComponents {
            tr1: 1.0,
            tr2_raw: 0,
            tr2_points: 0,
            tr2_norm: 0.0,
            abnormal_average: 0.0,
            tr3_common: 0,
            tr3_group: 0,
            tr3_norm: 1.0,
            tr4_raw: 0,
            tr4_keys: 0,
            tr4_norm: 0.0,
            aggregate: 1.0,
            warmup: false,
        }
    }

    fn log(client: u32, round: u32, orchestrator: usize, trust: f64) -> TrustLogRecord {
        TrustLogRecord {
            round,
            orchestrator,
            client: ClientId(client),
            area: orchestrator,
            device_type: DeviceType::Phone,
            cpu: 2.0,
            memory: 1024.0,
            avg_movements: 0.2,
            components: components(),
            trust,
        }
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let data: Vec<_> = (0..10).map(|i| ex(i % 3, DeviceType::ALL[i % 3], 0.7)).collect();
        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        assert!(matches!(tree.root, Node::Leaf { count: 10, .. }));
        assert!((tree.root.mean() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn single_example_is_a_leaf() {
        let tree = fit_sdr_tree(&[ex(1, DeviceType::Tablet, 0.42)], &TreeParams::default()).unwrap();
        assert_eq!(tree.root, Node::Leaf { mean: 0.42, count: 1 });
        assert_eq!(predict_initial_trust(&tree, &feats(5, DeviceType::Laptop)), 0.42);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(matches!(fit_sdr_tree(&[], &TreeParams::default()), Err(Error::EmptyTrainingSet)));
    }

    /// Independent SDR of a multiway split: σ(all) − Σ |g|/n σ(g).
    fn oracle_sdr(groups: &[&[f64]]) -> f64 {
        fn sd(v: &[f64]) -> f64 {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        }
        let all: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        let n = all.len() as f64;
        sd(&all) - groups.iter().map(|g| g.len() as f64 / n * sd(g)).sum::<f64>()
    }

    #[test]
    fn root_splits_on_area_when_area_reduces_more() {
        use DeviceType::{Laptop as L, Phone as P};
        let targets = [0.89, 0.49, 0.83, 0.53, 0.36, 0.37, 0.37, 0.38];
        let areas = [0, 0, 0, 0, 1, 1, 1, 1];
        let types = [P, L, P, L, P, L, P, L];
        let data: Vec<_> = (0..8).map(|i| ex(areas[i], types[i], targets[i])).collect();

        let area_sdr = oracle_sdr(&[&targets[..4], &targets[4..]]);
        let phone: Vec<f64> = (0..8).step_by(2).map(|i| targets[i]).collect();
        let laptop: Vec<f64> = (1..8).step_by(2).map(|i| targets[i]).collect();
        let type_sdr = oracle_sdr(&[&phone, &laptop]);
        assert!((area_sdr - 0.109209).abs() < 1e-6, "{area_sdr}");
        assert!((type_sdr - 0.042424).abs() < 1e-6, "{type_sdr}");

        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        match &tree.root {
            Node::Category { feature, .. } => assert_eq!(BootstrapFeatures::NAMES[*feature], "area"),
            other => panic!("expected categorical root, got {other:?}"),
        }
    }

    #[test]
    fn unseen_category_routes_to_largest_child() {
        // area 0: 3 rows at 0.9, area 1: 1 row at 0.1
        let data = vec![
            ex(0, DeviceType::Phone, 0.9),
            ex(0, DeviceType::Phone, 0.9),
            ex(0, DeviceType::Phone, 0.9),
            ex(1, DeviceType::Phone, 0.1),
        ];
        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        assert!(matches!(tree.root, Node::Category { feature: 0, .. }));
        assert_eq!(predict_initial_trust(&tree, &feats(0, DeviceType::Phone)), 0.9);
        assert_eq!(predict_initial_trust(&tree, &feats(1, DeviceType::Phone)), 0.1);
        assert_eq!(predict_initial_trust(&tree, &feats(4, DeviceType::Phone)), 0.9);
    }

    #[test]
    fn unseen_category_with_tied_children_uses_parent_mean() {
        let data = vec![
            ex(0, DeviceType::Phone, 0.8),
            ex(0, DeviceType::Phone, 0.8),
            ex(1, DeviceType::Phone, 0.2),
            ex(1, DeviceType::Phone, 0.2),
        ];
        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        assert!((predict_initial_trust(&tree, &feats(3, DeviceType::Phone)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pure_leaf_predicts_its_mean() {
        let data: Vec<_> = (0..6).map(|i| ex(2, DeviceType::ALL[i % 2], 0.6)).collect();
        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        assert_eq!(predict_initial_trust(&tree, &feats(2, DeviceType::Phone)), 0.6);
    }

    #[test]
    fn dataset_keeps_latest_round_per_client() {
        let logs = vec![log(1, 3, 0, 0.2), log(1, 7, 1, 0.8)];
        let data = collect_bootstrap_dataset(&logs);
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].target, 0.8);
        assert_eq!(data[0].features.area, 1);
        assert!(collect_bootstrap_dataset(&Vec::new()).is_empty());
        let many: Vec<_> = (0..3).flat_map(|o| (0..10).map(move |c| log(o * 10 + c, 1, o as usize, 0.5))).collect();
        assert_eq!(collect_bootstrap_dataset(&many).len(), 30);
    }

    #[test]
    fn dump_lists_every_node() {
        let data = vec![ex(0, DeviceType::Phone, 0.9), ex(0, DeviceType::Phone, 0.9), ex(1, DeviceType::Phone, 0.1), ex(1, DeviceType::Phone, 0.1)];
        let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
        let text = tree.dump();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("split area"));
        assert!(text.contains("  area = 1: leaf mean=0.100000 count=2"));
    }

    #[test]
    fn movement_bins() {
        assert_eq!(movement_bin(0.0), 0);
        assert_eq!(movement_bin(0.5), 1);
        assert_eq!(movement_bin(1.5), 2);
        assert_eq!(movement_bin(9.0), 3);
    }

    fn arb_example() -> impl Strategy<Value = BootstrapExample> {
        (0usize..4, 0usize..3, 1u32..5, 0u32..4, 0u32..4, 0.0f64..=1.0).prop_map(|(a, t, cpu, mem, mv, y)| BootstrapExample {
            features: BootstrapFeatures {
                area: a,
                device_type: DeviceType::ALL[t],
                cpu: cpu as f64,
                memory: 1024.0 * mem as f64,
                movement_bin: mv,
            },
            target: y,
        })
    }

    proptest! {
        #[test]
        fn predictions_stay_within_target_range(data in proptest::collection::vec(arb_example(), 1..60), probe in arb_example()) {
            let tree = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
            let lo = data.iter().map(|e| e.target).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|e| e.target).fold(f64::NEG_INFINITY, f64::max);
            let p = predict_initial_trust(&tree, &probe.features);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
            prop_assert!(tree.root.depth() <= TreeParams::default().max_depth);
            let again = fit_sdr_tree(&data, &TreeParams::default()).unwrap();
            prop_assert_eq!(tree, again);
        }
    }
}
