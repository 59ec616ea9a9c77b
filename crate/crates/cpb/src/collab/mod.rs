//! Collaboration machinery: pairwise similarity, clustering, and the
//! data-sharing strategies that build each organization's shared pool.
//!
//! Similarity between two organizations is the cardinality of the multiset
//! intersection of their training-window alert sets -- the number of common
//! attacks. The semi-trusted authority clusters on that matrix and
//! organizations inside a cluster exchange data according to a strategy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::ingest::{CountMode, DayIndex, OrgDataset, OrgId, Prefix24};

mod cluster;
mod ip2ip;
mod share;

pub use cluster::{
    cluster, cluster_agglomerative, cluster_kmeans, cluster_knn, ClusterAlgo, ClusterAssignment,
    ClusteringSpec,
};
pub use ip2ip::{correlate_attackers, Ip2IpParams};
pub use share::{element_intersection_pools, share, ShareSpec, ShareStrategy};

/// One cluster holding every organization, nobody an outlier. The
/// degenerate assignment used by protocol oracles and pair strategies.
pub fn cluster_all_in_one(orgs: BTreeSet<OrgId>) -> ClusterAssignment {
    ClusterAssignment::Partition { clusters: vec![orgs], outliers: BTreeSet::new() }
}

#[derive(Debug, Error, PartialEq)]
pub enum CollabError {
    #[error("{algo}: k = {k} is invalid for {n} organizations")]
    InvalidK { algo: &'static str, k: usize, n: usize },
    #[error("agglomerative: target cluster count {target} is invalid for {n} organizations")]
    InvalidTarget { target: usize, n: usize },
    #[error("unknown clustering algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("unknown sharing strategy {0:?}")]
    UnknownStrategy(String),
    #[error("pair-global percentage {0} is outside [0, 100]")]
    PairPercent(f64),
    #[error("pair-local: x = {x} is invalid for {n} organizations")]
    PairCount { x: usize, n: usize },
}

// ---------------------------------------------------------------------------
// O2O similarity
// ---------------------------------------------------------------------------

/// Symmetric organization-to-organization similarity matrix.
///
/// `cell(i, j)` is the multiset-intersection cardinality of organizations
/// `i` and `j`; the diagonal holds each organization's own multiset size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    orgs: Vec<OrgId>,
    cells: Vec<u64>,
}

impl SimilarityMatrix {
    /// Creates a zeroed matrix over a sorted, deduplicated org list.
    pub fn zeroed(orgs: Vec<OrgId>) -> Self {
        debug_assert!(orgs.windows(2).all(|w| w[0] < w[1]), "orgs must be sorted and unique");
        let n = orgs.len();
        SimilarityMatrix { orgs, cells: vec![0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.orgs.len()
    }

    pub fn orgs(&self) -> &[OrgId] {
        &self.orgs
    }

    pub fn index_of(&self, org: &OrgId) -> Option<usize> {
        self.orgs.binary_search(org).ok()
    }

    pub fn cell(&self, i: usize, j: usize) -> u64 {
        self.cells[i * self.n() + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, value: u64) {
        let n = self.n();
        self.cells[i * n + j] = value;
        self.cells[j * n + i] = value;
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let n = self.n();
        &self.cells[i * n..(i + 1) * n]
    }

    /// Canonical CSV dump (header of org ids, one row per org).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "org,{}",
            self.orgs.iter().map(OrgId::as_str).collect::<Vec<_>>().join(",")
        );
        for (i, org) in self.orgs.iter().enumerate() {
            let row: Vec<String> = self.row(i).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{},{}", org, row.join(","));
        }
        out
    }
}

/// Multiset intersection cardinality of two datasets under `mode`:
/// the sum over `(prefix, day)` elements of the smaller multiplicity.
pub fn multiset_intersection(a: &OrgDataset, b: &OrgDataset, mode: CountMode) -> u64 {
    let mut ia = a.effective(mode).peekable();
    let mut ib = b.effective(mode).peekable();
    let mut total = 0;
    while let (Some(&(ea, ca)), Some(&(eb, cb))) = (ia.peek(), ib.peek()) {
        match ea.cmp(&eb) {
            std::cmp::Ordering::Less => {
                ia.next();
            }
            std::cmp::Ordering::Greater => {
                ib.next();
            }
            std::cmp::Ordering::Equal => {
                total += ca.min(cb);
                ia.next();
                ib.next();
            }
        }
    }
    total
}

/// Computes the full O2O matrix from plaintext datasets.
///
/// This is also the correctness oracle for the privacy module: the PRP
/// protocol must reproduce these values exactly.
pub fn o2o_plain(datasets: &BTreeMap<OrgId, OrgDataset>, mode: CountMode) -> SimilarityMatrix {
    let orgs: Vec<OrgId> = datasets.keys().cloned().collect();
    let mut m = SimilarityMatrix::zeroed(orgs);
    let list: Vec<&OrgDataset> = datasets.values().collect();
    for i in 0..list.len() {
        m.set_sym(i, i, list[i].multiset_size(mode));
        for j in i + 1..list.len() {
            m.set_sym(i, j, multiset_intersection(list[i], list[j], mode));
        }
    }
    m
}

/// Distance between two organizations derived from the similarity matrix:
/// `1 - cell / min(|D_i|, |D_j|)`, or 1.0 when either multiset is empty.
pub fn normalized_distance(m: &SimilarityMatrix, i: usize, j: usize) -> f64 {
    let smaller = m.cell(i, i).min(m.cell(j, j));
    if smaller == 0 {
        return 1.0;
    }
    (1.0 - m.cell(i, j) as f64 / smaller as f64).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Shared pools
// ---------------------------------------------------------------------------

/// The alerts an organization receives from collaborators: a multiset of
/// `(prefix, day, source org)` entries, all inside the training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedPool {
    org: OrgId,
    entries: BTreeMap<(Prefix24, DayIndex, OrgId), u64>,
}

impl SharedPool {
    pub fn new(org: OrgId) -> Self {
        SharedPool { org, entries: BTreeMap::new() }
    }

    pub fn org(&self) -> &OrgId {
        &self.org
    }

    /// Adds `count` shared events. An organization never shares with
    /// itself.
    pub fn insert(&mut self, prefix: Prefix24, day: DayIndex, source: OrgId, count: u64) {
        assert_ne!(source, self.org, "an organization cannot source its own pool");
        if count == 0 {
            return;
        }
        *self.entries.entry((prefix, day, source)).or_insert(0) += count;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(Prefix24, DayIndex, OrgId), &u64)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct prefixes present in the pool.
    pub fn prefixes(&self) -> BTreeSet<Prefix24> {
        self.entries.keys().map(|&(p, _, _)| p).collect()
    }

    /// Canonical dump: one `org,prefix,day,source,count` line per entry,
    /// sorted. Byte-identical pools mean identical content.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for ((prefix, day, source), count) in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{}", self.org, prefix, day, source, count);
        }
        out
    }
}
