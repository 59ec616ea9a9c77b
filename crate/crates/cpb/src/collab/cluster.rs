//! The three clustering algorithms the STA can run on the O2O matrix.
//!
//! All of them are deterministic: k-means seeds from an explicit RNG seed
//! and every tie anywhere breaks toward the lowest index, so a fixed
//! `(matrix, spec)` pair always produces the same assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{normalized_distance, CollabError, SimilarityMatrix};
use crate::ingest::OrgId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterAlgo {
    KMeans,
    Knn,
    Agglomerative,
}

impl ClusterAlgo {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterAlgo::KMeans => "kmeans",
            ClusterAlgo::Knn => "knn",
            ClusterAlgo::Agglomerative => "agglomerative",
        }
    }
}

impl std::str::FromStr for ClusterAlgo {
    type Err = CollabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" | "k-means" => Ok(ClusterAlgo::KMeans),
            "knn" | "k-nn" => Ok(ClusterAlgo::Knn),
            "agglomerative" | "agglo" => Ok(ClusterAlgo::Agglomerative),
            other => Err(CollabError::UnknownAlgorithm(other.to_string())),
        }
    }
}

/// Everything the STA needs to run clustering reproducibly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringSpec {
    pub algo: ClusterAlgo,
    /// k-means cluster count, k-NN neighborhood size, or agglomerative
    /// target cluster count.
    pub k: usize,
    /// Outlier threshold percentile (k-means and k-NN only). 100 keeps
    /// everyone.
    pub threshold_pct: f64,
    pub seed: u64,
}

impl Default for ClusteringSpec {
    fn default() -> Self {
        ClusteringSpec { algo: ClusterAlgo::KMeans, k: 5, threshold_pct: 40.0, seed: 0 }
    }
}

/// Result of clustering: either a partition (k-means, agglomerative) or a
/// per-org neighborhood (k-NN).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClusterAssignment {
    Partition {
        /// Retained members per cluster; positions are cluster ids.
        clusters: Vec<BTreeSet<OrgId>>,
        /// Organizations cut by the distance threshold. They neither share
        /// nor receive.
        outliers: BTreeSet<OrgId>,
    },
    Neighborhoods {
        /// Post-threshold neighbor set per org (never contains the org
        /// itself). Organizations may appear in many neighborhoods.
        neighbors: BTreeMap<OrgId, BTreeSet<OrgId>>,
        /// Organizations whose whole neighborhood was thresholded away.
        outliers: BTreeSet<OrgId>,
    },
}

impl ClusterAssignment {
    /// The organizations `org` shares with and receives from.
    pub fn co_members(&self, org: &OrgId) -> BTreeSet<OrgId> {
        match self {
            ClusterAssignment::Partition { clusters, outliers } => {
                if outliers.contains(org) {
                    return BTreeSet::new();
                }
                clusters
                    .iter()
                    .find(|c| c.contains(org))
                    .map(|c| c.iter().filter(|m| *m != org).cloned().collect())
                    .unwrap_or_default()
            }
            ClusterAssignment::Neighborhoods { neighbors, .. } => {
                neighbors.get(org).cloned().unwrap_or_default()
            }
        }
    }

    /// The group that computes cluster-wide statistics for `org` (IP2IP):
    /// its cluster, or itself plus its neighborhood.
    pub fn sharing_group(&self, org: &OrgId) -> BTreeSet<OrgId> {
        let mut group = self.co_members(org);
        if !group.is_empty() {
            group.insert(org.clone());
        }
        group
    }

    pub fn outliers(&self) -> &BTreeSet<OrgId> {
        match self {
            ClusterAssignment::Partition { outliers, .. } => outliers,
            ClusterAssignment::Neighborhoods { outliers, .. } => outliers,
        }
    }

    /// Mean sharing-group size: cluster sizes for partitions, neighborhood
    /// size plus one for k-NN.
    pub fn avg_group_size(&self) -> f64 {
        match self {
            ClusterAssignment::Partition { clusters, .. } => {
                let sizes: Vec<usize> =
                    clusters.iter().map(BTreeSet::len).filter(|&s| s > 0).collect();
                if sizes.is_empty() {
                    0.0
                } else {
                    sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
                }
            }
            ClusterAssignment::Neighborhoods { neighbors, .. } => {
                if neighbors.is_empty() {
                    0.0
                } else {
                    neighbors.values().map(|n| n.len() + 1).sum::<usize>() as f64
                        / neighbors.len() as f64
                }
            }
        }
    }

    /// Organizations with at least one co-member.
    pub fn collaborators(&self, orgs: &[OrgId]) -> usize {
        orgs.iter().filter(|o| !self.co_members(o).is_empty()).count()
    }

    /// Canonical per-org dump: `org,mode,cluster,outlier,co-members`.
    pub fn to_csv(&self, orgs: &[OrgId]) -> String {
        let mut out = String::from("org,mode,cluster,outlier,members\n");
        for org in orgs {
            let (mode, cluster) = match self {
                ClusterAssignment::Partition { clusters, .. } => {
                    let id = clusters
                        .iter()
                        .position(|c| c.contains(org))
                        .map(|i| i.to_string())
                        .unwrap_or_else(|| "-".into());
                    ("partition", id)
                }
                ClusterAssignment::Neighborhoods { .. } => ("knn", "-".to_string()),
            };
            let peers: Vec<String> =
                self.co_members(org).iter().map(|o| o.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                org,
                mode,
                cluster,
                u8::from(self.outliers().contains(org)),
                peers.join(";")
            );
        }
        out
    }
}

/// Dispatches to the configured algorithm.
pub fn cluster(m: &SimilarityMatrix, spec: &ClusteringSpec) -> Result<ClusterAssignment, CollabError> {
    match spec.algo {
        ClusterAlgo::KMeans => cluster_kmeans(m, spec.k, spec.threshold_pct, spec.seed),
        ClusterAlgo::Knn => cluster_knn(m, spec.k, spec.threshold_pct),
        ClusterAlgo::Agglomerative => cluster_agglomerative(m, spec.k),
    }
}

/// Nearest-rank percentile: the smallest value with at least `pct`% of the
/// sample at or below it.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pct = pct.clamp(0.0, 100.0);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-means over the rows of the O2O matrix (self-cell included), with
/// farthest-point seeding from `seed` and a post-hoc outlier threshold:
/// organizations farther from their centroid than the `threshold_pct`-th
/// percentile of all member distances are moved to the outlier set.
pub fn cluster_kmeans(
    m: &SimilarityMatrix,
    k: usize,
    threshold_pct: f64,
    seed: u64,
) -> Result<ClusterAssignment, CollabError> {
    let n = m.n();
    if k == 0 || k > n {
        return Err(CollabError::InvalidK { algo: "k-means", k, n });
    }
    let points: Vec<Vec<f64>> =
        (0..n).map(|i| m.row(i).iter().map(|&v| v as f64).collect()).collect();

    // Farthest-point seeding: random first centroid, then repeatedly the
    // point farthest from all chosen ones (lowest index on ties).
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centroid_idx = vec![rng.gen_range(0..n)];
    while centroid_idx.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..n {
            if centroid_idx.contains(&i) {
                continue;
            }
            let d = centroid_idx
                .iter()
                .map(|&c| euclidean(&points[i], &points[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        centroid_idx.push(best.1);
    }
    let mut centroids: Vec<Vec<f64>> = centroid_idx.iter().map(|&i| points[i].clone()).collect();

    let mut assigned = vec![usize::MAX; n];
    for _ in 0..100 {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (c, centroid) in centroids.iter().enumerate() {
                    let d = euclidean(p, centroid);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect();
        if next == assigned {
            break;
        }
        assigned = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assigned).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue; // empty cluster keeps its previous centroid
            }
            for (dim, slot) in centroid.iter_mut().enumerate() {
                *slot = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let distances: Vec<f64> =
        (0..n).map(|i| euclidean(&points[i], &centroids[assigned[i]])).collect();
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = nearest_rank(&sorted, threshold_pct);

    let mut clusters = vec![BTreeSet::new(); k];
    let mut outliers = BTreeSet::new();
    for i in 0..n {
        let org = m.orgs()[i].clone();
        if distances[i] <= threshold {
            clusters[assigned[i]].insert(org);
        } else {
            outliers.insert(org);
        }
    }
    Ok(ClusterAssignment::Partition { clusters, outliers })
}

/// k-NN neighborhoods: each org's `k` most similar peers, then links whose
/// normalized distance exceeds the global `threshold_pct`-th percentile
/// are dropped.
pub fn cluster_knn(
    m: &SimilarityMatrix,
    k: usize,
    threshold_pct: f64,
) -> Result<ClusterAssignment, CollabError> {
    let n = m.n();
    if k == 0 || k >= n {
        return Err(CollabError::InvalidK { algo: "k-NN", k, n });
    }

    let mut links: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut all_distances = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut ranked: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        ranked.sort_by(|&a, &b| m.cell(i, b).cmp(&m.cell(i, a)).then(a.cmp(&b)));
        ranked.truncate(k);
        let with_d: Vec<(usize, f64)> =
            ranked.into_iter().map(|j| (j, normalized_distance(m, i, j))).collect();
        all_distances.extend(with_d.iter().map(|&(_, d)| d));
        links.push(with_d);
    }
    all_distances.sort_by(f64::total_cmp);
    let threshold = nearest_rank(&all_distances, threshold_pct);

    let mut neighbors = BTreeMap::new();
    let mut outliers = BTreeSet::new();
    for (i, ranked) in links.into_iter().enumerate() {
        let org = m.orgs()[i].clone();
        let kept: BTreeSet<OrgId> = ranked
            .into_iter()
            .filter(|&(_, d)| d <= threshold)
            .map(|(j, _)| m.orgs()[j].clone())
            .collect();
        if kept.is_empty() {
            outliers.insert(org.clone());
        }
        neighbors.insert(org, kept);
    }
    Ok(ClusterAssignment::Neighborhoods { neighbors, outliers })
}

/// Average-linkage agglomerative clustering on the normalized distance
/// transform, merging until `target` clusters remain. No outlier
/// threshold. Ties merge the pair with the lowest representative indices.
pub fn cluster_agglomerative(
    m: &SimilarityMatrix,
    target: usize,
) -> Result<ClusterAssignment, CollabError> {
    let n = m.n();
    if target == 0 || target > n {
        return Err(CollabError::InvalidTarget { target, n });
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = normalized_distance(m, i, j);
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();

    let mut active = n;
    while active > target {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in a + 1..n {
                if members[b].is_none() {
                    continue;
                }
                let d = dist[a * n + b];
                if best.map_or(true, |(bd, ba, bb)| {
                    d < bd || (d == bd && (a, b) < (ba, bb))
                }) {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("more than `target` active clusters");

        // Lance-Williams average-linkage update, then fold b into a.
        let (sa, sb) = (members[a].as_ref().unwrap().len(), members[b].as_ref().unwrap().len());
        for c in 0..n {
            if members[c].is_none() || c == a || c == b {
                continue;
            }
            let merged = (sa as f64 * dist[a * n + c] + sb as f64 * dist[b * n + c])
                / (sa + sb) as f64;
            dist[a * n + c] = merged;
            dist[c * n + a] = merged;
        }
        let moved = members[b].take().unwrap();
        members[a].as_mut().unwrap().extend(moved);
        active -= 1;
    }

    let clusters: Vec<BTreeSet<OrgId>> = members
        .into_iter()
        .flatten()
        .map(|idxs| idxs.into_iter().map(|i| m.orgs()[i].clone()).collect())
        .collect();
    Ok(ClusterAssignment::Partition { clusters, outliers: BTreeSet::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::o2o_plain;
    use crate::ingest::synth::{synthesize_logs, SynthConfig};
    use crate::ingest::{build_windows, CountMode, OrgDataset, Prefix24};
    use std::collections::BTreeMap;

    fn matrix(orgs: &[&str], cells: &[&[u64]]) -> SimilarityMatrix {
        let mut m = SimilarityMatrix::zeroed(orgs.iter().map(|o| OrgId::new(o)).collect());
        for (i, row) in cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set_sym(i, j, v);
            }
        }
        m
    }

    /// Two planted victim groups with zero noise, clustered from a real
    /// window's O2O matrix.
    fn planted_matrix(seed: u64) -> (SimilarityMatrix, Vec<BTreeSet<OrgId>>) {
        let cfg = SynthConfig {
            orgs: 10,
            days: 7,
            events_per_day: 60,
            unique_per_day: 30,
            planted_groups: 2,
            group_attackers: 12,
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        let events = synthesize_logs(&cfg, seed).unwrap();
        let windows = build_windows(&events, 5, 1).unwrap();
        let m = o2o_plain(&windows[0].train, CountMode::Presence);
        let truth: Vec<BTreeSet<OrgId>> = cfg
            .planted_clusters()
            .into_iter()
            .map(|c| c.into_iter().collect())
            .collect();
        (m, truth)
    }

    fn partition_of(assignment: &ClusterAssignment) -> Vec<BTreeSet<OrgId>> {
        match assignment {
            ClusterAssignment::Partition { clusters, outliers } => {
                assert!(outliers.is_empty());
                let mut nonempty: Vec<BTreeSet<OrgId>> =
                    clusters.iter().filter(|c| !c.is_empty()).cloned().collect();
                nonempty.sort();
                nonempty
            }
            _ => panic!("expected a partition"),
        }
    }

    #[test]
    fn identical_rows_form_one_tight_cluster() {
        let m = matrix(
            &["a", "b", "c"],
            &[&[4, 4, 4], &[4, 4, 4], &[4, 4, 4]],
        );
        let got = cluster_kmeans(&m, 1, 40.0, 7).unwrap();
        match got {
            ClusterAssignment::Partition { clusters, outliers } => {
                assert!(outliers.is_empty(), "all distances are zero");
                assert_eq!(clusters[0].len(), 3);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn kmeans_recovers_planted_groups() {
        let (m, mut truth) = planted_matrix(5);
        let got = cluster_kmeans(&m, 2, 100.0, 1).unwrap();
        truth.sort();
        assert_eq!(partition_of(&got), truth);
    }

    #[test]
    fn k_equals_n_degenerates_to_singletons() {
        let m = matrix(&["a", "b", "c"], &[&[3, 0, 0], &[0, 3, 0], &[0, 0, 3]]);
        let got = cluster_kmeans(&m, 3, 40.0, 0).unwrap();
        match &got {
            ClusterAssignment::Partition { clusters, outliers } => {
                assert!(outliers.is_empty());
                assert!(clusters.iter().all(|c| c.len() == 1));
            }
            _ => unreachable!(),
        }
        for org in m.orgs() {
            assert!(got.co_members(org).is_empty());
        }
    }

    #[test]
    fn invalid_k_is_rejected() {
        let m = matrix(&["a", "b"], &[&[1, 0], &[0, 1]]);
        assert!(cluster_kmeans(&m, 3, 40.0, 0).is_err());
        assert!(cluster_kmeans(&m, 0, 40.0, 0).is_err());
        assert!(cluster_knn(&m, 2, 40.0).is_err());
        assert!(cluster_agglomerative(&m, 3).is_err());
    }

    #[test]
    fn knn_picks_the_most_similar_neighbor() {
        let m = matrix(&["o1", "o2", "o3"], &[&[20, 10, 1], &[10, 20, 1], &[1, 1, 20]]);
        let got = cluster_knn(&m, 1, 100.0).unwrap();
        assert_eq!(got.co_members(&OrgId::new("o1")), [OrgId::new("o2")].into());
    }

    #[test]
    fn knn_neighborhoods_are_not_symmetric() {
        // o3's best neighbor is o1, but o1 prefers o2.
        let m = matrix(&["o1", "o2", "o3"], &[&[20, 9, 5], &[9, 20, 1], &[5, 1, 20]]);
        let got = cluster_knn(&m, 1, 100.0).unwrap();
        assert_eq!(got.co_members(&OrgId::new("o3")), [OrgId::new("o1")].into());
        assert_eq!(got.co_members(&OrgId::new("o1")), [OrgId::new("o2")].into());
    }

    #[test]
    fn knn_neighborhoods_stay_inside_planted_groups() {
        let (m, truth) = planted_matrix(11);
        let group_size = truth[0].len();
        let got = cluster_knn(&m, group_size - 1, 100.0).unwrap();
        for org in m.orgs() {
            let own = truth.iter().find(|g| g.contains(org)).unwrap();
            let mut expected = own.clone();
            expected.remove(org);
            assert_eq!(got.co_members(org), expected);
        }
    }

    #[test]
    fn agglomerative_tie_break_merges_lowest_ids_first() {
        // All-zero similarity: every distance is 1.0, so merges are driven
        // purely by the documented lowest-pair tie-break.
        let m = matrix(
            &["a", "b", "c", "d"],
            &[&[1, 0, 0, 0], &[0, 1, 0, 0], &[0, 0, 1, 0], &[0, 0, 0, 1]],
        );
        let got = cluster_agglomerative(&m, 2).unwrap();
        match got {
            ClusterAssignment::Partition { clusters, .. } => {
                let sets: Vec<Vec<&str>> = clusters
                    .iter()
                    .map(|c| c.iter().map(OrgId::as_str).collect())
                    .collect();
                assert_eq!(sets, vec![vec!["a", "b", "c"], vec!["d"]]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn agglomerative_recovers_planted_groups() {
        let (m, mut truth) = planted_matrix(23);
        let got = cluster_agglomerative(&m, 2).unwrap();
        truth.sort();
        assert_eq!(partition_of(&got), truth);
    }

    #[test]
    fn agglomerative_target_n_is_singletons() {
        let m = matrix(&["a", "b"], &[&[1, 1], &[1, 1]]);
        let got = cluster_agglomerative(&m, 2).unwrap();
        assert_eq!(partition_of(&got).len(), 2);
    }

    #[test]
    fn clustering_is_deterministic() {
        let (m, _) = planted_matrix(3);
        for spec in [
            ClusteringSpec { algo: ClusterAlgo::KMeans, k: 2, threshold_pct: 40.0, seed: 9 },
            ClusteringSpec { algo: ClusterAlgo::Knn, k: 3, threshold_pct: 40.0, seed: 9 },
            ClusteringSpec { algo: ClusterAlgo::Agglomerative, k: 2, threshold_pct: 40.0, seed: 9 },
        ] {
            assert_eq!(cluster(&m, &spec).unwrap(), cluster(&m, &spec).unwrap());
        }
    }

    #[test]
    fn kmeans_threshold_cuts_the_farthest_orgs() {
        // Nine tightly similar orgs and one clearly different one; with a
        // 90th-percentile threshold only the odd one drops out.
        let mut datasets = BTreeMap::new();
        for i in 0..9u32 {
            let mut d = OrgDataset::new(OrgId::new(&format!("o{i}")));
            for v in 0..20 {
                d.record(Prefix24::from_value(v).unwrap(), 0, 1);
            }
            d.record(Prefix24::from_value(100 + i).unwrap(), 0, 1);
            datasets.insert(d.org().clone(), d);
        }
        let mut odd = OrgDataset::new(OrgId::new("odd"));
        for v in 200..240 {
            odd.record(Prefix24::from_value(v).unwrap(), 0, 1);
        }
        datasets.insert(odd.org().clone(), odd);

        let m = o2o_plain(&datasets, CountMode::Presence);
        let got = cluster_kmeans(&m, 1, 90.0, 4).unwrap();
        match got {
            ClusterAssignment::Partition { outliers, .. } => {
                assert_eq!(outliers, [OrgId::new("odd")].into());
            }
            _ => unreachable!(),
        }
    }
}
