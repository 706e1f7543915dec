//! Robust outlier statistics and agglomerative clustering used by the trust
//! engine and the optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::ClientId;
use crate::error::{Error, Result};

/// Scale constant of the modified z-score (the 0.75 quantile of N(0,1)).
pub const MODIFIED_Z_SCALE: f64 = 0.6745;

/// Default outlier cutoff for `|z|`.
pub const DEFAULT_EPSILON: f64 = 3.5;

pub const MIN_HISTORY: usize = 3;

/// Deviations at or below this are treated as "no deviation" when MAD is 0.
const ZERO_DEVIATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: ClientId,
    pub values: Vec<f64>,
}

impl FeatureRow {
    pub fn new(id: ClientId, values: Vec<f64>) -> Self {
        Self { id, values }
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation around the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
    median(&dev)
}

/// Modified z-score of `point` against `history`.
///
/// When the history has zero MAD the score is 0 for a point sitting on the
/// median and `±(epsilon + 1)` otherwise, so any deviation from a constant
/// history is flagged.
pub fn modified_z_score(history: &[f64], point: f64, epsilon: f64) -> Result<f64> {
    if history.len() < MIN_HISTORY {
        return Err(Error::InsufficientHistory { needed: MIN_HISTORY, got: history.len() });
    }
    let m = median(history);
    let spread = mad(history);
    let dev = point - m;
    if spread == 0.0 {
        if dev.abs() <= ZERO_DEVIATION {
            return Ok(0.0);
        }
        return Ok((epsilon + 1.0).copysign(dev));
    }
    Ok(MODIFIED_Z_SCALE * dev / spread)
}

/// Column-wise z-normalisation with the population standard deviation.
/// Constant columns become all zeros.
pub fn standardize(rows: &[FeatureRow]) -> Vec<FeatureRow> {
    if rows.is_empty() {
        return Vec::new();
    }
    let width = rows[0].values.len();
    let n = rows.len() as f64;
    let mut out: Vec<FeatureRow> = rows.to_vec();
    for c in 0..width {
        let mean = rows.iter().map(|r| r.values[c]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.values[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let constant = sd <= 1e-12 * (1.0 + mean.abs());
        for r in out.iter_mut() {
            r.values[c] = if constant { 0.0 } else { (r.values[c] - mean) / sd };
        }
    }
    out
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Bottom-up average-linkage clustering into exactly `k` clusters.
///
/// Rows are processed in id order, ties between candidate merges go to the
/// pair with the lowest member ids, and labels are numbered by each
/// cluster's smallest id. The result therefore does not depend on the order
/// of `rows`.
pub fn agglomerative_cluster(rows: &[FeatureRow], k: usize) -> Result<BTreeMap<ClientId, usize>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot cluster an empty set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("cluster count must be at least 1".into()));
    }
    if k > rows.len() {
        return Err(Error::TooManyClusters { k, rows: rows.len() });
    }
    let width = rows[0].values.len();
    for r in rows {
        if r.values.len() != width {
            return Err(Error::InvalidInput(format!("row {} has {} features, expected {width}", r.id, r.values.len())));
        }
        if r.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("row {} has non-finite features", r.id)));
        }
    }

    let mut sorted: Vec<&FeatureRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.id);
    if sorted.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidInput("duplicate entity id in clustering input".into()));
    }

    let n = sorted.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&sorted[i].values, &sorted[j].values);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    // Slot i holds the cluster whose smallest member is row i.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut active = n;
    while active > k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        let size_i = members[i].as_ref().unwrap().len() as f64;
        let size_j = members[j].as_ref().unwrap().len() as f64;
        for m in 0..n {
            if m == i || m == j || members[m].is_none() {
                continue;
            }
            let d = (size_i * dist[i][m] + size_j * dist[j][m]) / (size_i + size_j);
            dist[i][m] = d;
            dist[m][i] = d;
        }
        let moved = members[j].take().unwrap();
        members[i].as_mut().unwrap().extend(moved);
        active -= 1;
    }

    let mut labels = BTreeMap::new();
    for (label, group) in members.iter().flatten().enumerate() {
        for &row in group {
            labels.insert(sorted[row].id, label);
        }
    }
    Ok(labels)
}

/// Groups a label map into member sets, indexed by label.
pub fn cluster_members(labels: &BTreeMap<ClientId, usize>) -> Vec<Vec<ClientId>> {
    let k = labels.values().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (&id, &l) in labels {
        out[l].push(id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn rows_1d(values: &[f64]) -> Vec<FeatureRow> {
        values.iter().enumerate().map(|(i, &v)| FeatureRow::new(ClientId(i as u32), vec![v])).collect()
    }

    fn partition(labels: &BTreeMap<ClientId, usize>) -> BTreeSet<BTreeSet<ClientId>> {
        cluster_members(labels).into_iter().map(|g| g.into_iter().collect()).collect()
    }

    #[test]
    fn modified_z_of_low_outlier() {
        let z = modified_z_score(&[0.50, 0.52, 0.48, 0.51, 0.30], 0.30, 3.5).unwrap();
        assert!((z - -6.745).abs() < 1e-9, "{z}");
    }

    #[test]
    fn modified_z_zero_mad() {
        assert_eq!(modified_z_score(&[0.4, 0.4, 0.4], 0.4, 3.5).unwrap(), 0.0);
        assert_eq!(modified_z_score(&[0.4, 0.4, 0.4], 0.9, 3.5).unwrap(), 4.5);
        assert_eq!(modified_z_score(&[0.4, 0.4, 0.4], 0.1, 3.5).unwrap(), -4.5);
    }

    #[test]
    fn modified_z_needs_three_points() {
        let err = modified_z_score(&[0.4, 0.5], 0.4, 3.5).unwrap_err();
        assert!(err.to_string().starts_with("insufficient-history"));
    }

    #[test]
    fn standardize_two_points() {
        let out = standardize(&rows_1d(&[1.0, 3.0]));
        assert_eq!(out[0].values, vec![-1.0]);
        assert_eq!(out[1].values, vec![1.0]);
    }

    #[test]
    fn standardize_constant_column() {
        let out = standardize(&rows_1d(&[5.0, 5.0, 5.0]));
        assert!(out.iter().all(|r| r.values == vec![0.0]));
    }

    #[test]
    fn standardize_is_idempotent_on_normalized_input() {
        let once = standardize(&rows_1d(&[0.3, 1.7, -2.0, 4.4, 0.0]));
        let twice = standardize(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a.values[0] - b.values[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_groups_split_cleanly() {
        let rows = rows_1d(&[0.0, 0.1, 10.0, 10.1]);
        // within-group distances are all below every between-group distance
        let max_within = [(0, 1), (2, 3)].iter().map(|&(a, b)| (rows[a].values[0] - rows[b].values[0]).abs()).fold(0.0, f64::max);
        let min_between = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .map(|&(a, b)| (rows[a].values[0] - rows[b].values[0]).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(max_within < min_between);
        let labels = agglomerative_cluster(&rows, 2).unwrap();
        let got: Vec<usize> = labels.values().copied().collect();
        assert_eq!(got, vec![0, 0, 1, 1]);
    }

    #[test]
    fn k_equal_rows_is_identity_and_k_one_is_single() {
        let rows = rows_1d(&[3.0, 1.0, 2.0, 7.0]);
        let all = agglomerative_cluster(&rows, 4).unwrap();
        assert_eq!(all.values().copied().collect::<BTreeSet<_>>().len(), 4);
        let one = agglomerative_cluster(&rows, 1).unwrap();
        assert!(one.values().all(|&l| l == 0));
    }

    #[test]
    fn too_many_clusters() {
        let err = agglomerative_cluster(&rows_1d(&[1.0, 2.0]), 3).unwrap_err();
        assert!(err.to_string().starts_with("too-many-clusters"));
    }

    /// Naive average linkage: recomputes every cluster distance from scratch.
    fn naive_average_linkage(rows: &[FeatureRow], k: usize) -> BTreeSet<BTreeSet<ClientId>> {
        let mut clusters: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
        while clusters.len() > k {
            let mut best = (0, 1, f64::INFINITY);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let mut total = 0.0;
                    for &x in &clusters[a] {
                        for &y in &clusters[b] {
                            total += euclidean(&rows[x].values, &rows[y].values);
                        }
                    }
                    let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                    if d < best.2 - 1e-12 {
                        best = (a, b, d);
                    }
                }
            }
            let moved = clusters.remove(best.1);
            clusters[best.0].extend(moved);
        }
        clusters.into_iter().map(|c| c.into_iter().map(|i| rows[i].id).collect()).collect()
    }

    #[test]
    fn average_linkage_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let rows: Vec<FeatureRow> = (0..n)
                .map(|i| FeatureRow::new(ClientId(i), vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]))
                .collect();
            let k = rng.random_range(1..=n as usize);
            let labels = agglomerative_cluster(&rows, k).unwrap();
            assert_eq!(partition(&labels), naive_average_linkage(&rows, k));
        }
    }

    proptest! {
        #[test]
        fn z_translation_invariant(hist in proptest::collection::vec(-10.0f64..10.0, 3..30), p in -10.0f64..10.0, c in -100.0f64..100.0) {
            let a = modified_z_score(&hist, p, 3.5).unwrap();
            let shifted: Vec<f64> = hist.iter().map(|x| x + c).collect();
            let b = modified_z_score(&shifted, p + c, 3.5).unwrap();
            if mad(&hist) > 1e-6 {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()) + 1e-9, "{} vs {}", a, b);
            }
        }

        #[test]
        fn z_antisymmetric(hist in proptest::collection::vec(-10.0f64..10.0, 3..30), d in 0.0f64..10.0) {
            let m = median(&hist);
            prop_assume!(mad(&hist) > 1e-6);
            let up = modified_z_score(&hist, m + d, 3.5).unwrap();
            let down = modified_z_score(&hist, m - d, 3.5).unwrap();
            prop_assert!((up + down).abs() < 1e-9);
        }

        #[test]
        fn standardize_moments(cols in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..40)) {
            let rows: Vec<FeatureRow> = cols.into_iter().enumerate().map(|(i, v)| FeatureRow::new(ClientId(i as u32), v)).collect();
            let out = standardize(&rows);
            let n = out.len() as f64;
            for c in 0..3 {
                let raw_sd = {
                    let m = rows.iter().map(|r| r.values[c]).sum::<f64>() / n;
                    (rows.iter().map(|r| (r.values[c] - m).powi(2)).sum::<f64>() / n).sqrt()
                };
                if raw_sd < 1e-6 { continue; }
                let mean = out.iter().map(|r| r.values[c]).sum::<f64>() / n;
                let sd = (out.iter().map(|r| (r.values[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn clustering_is_permutation_invariant(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..25),
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rows: Vec<FeatureRow> = pts.iter().enumerate().map(|(i, &(a, b))| FeatureRow::new(ClientId(i as u32 * 3 + 1), vec![a, b])).collect();
            let k = 1 + ((rows.len() - 1) as f64 * k_frac) as usize;
            let base = agglomerative_cluster(&rows, k).unwrap();
            prop_assert_eq!(base.len(), rows.len());
            prop_assert_eq!(base.values().copied().collect::<BTreeSet<_>>().len(), k);
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let again = agglomerative_cluster(&shuffled, k).unwrap();
            prop_assert_eq!(partition(&base), partition(&again));
        }
    }
}
