//! Data-sharing strategies: what cluster co-members actually exchange.
//!
//! * `local` / `global` -- the share-nothing and share-everything baselines.
//! * `intersection` -- each pair exchanges only the events of attacker
//!   prefixes both have already observed.
//! * `element-intersection` -- the exact `(prefix, day)` elements common to
//!   the pair; this mirrors what the encrypted protocol delivers and serves
//!   as its plaintext oracle.
//! * `ip2ip` -- events of attackers correlated with what the receiver has
//!   seen, and `ip2ip+intersection` the union of the two.
//! * `pair-global:<pct>` / `pair-local:<x>` -- clusterless pairwise
//!   partnering by similarity rank, exchanging intersection events.

use std::collections::{BTreeMap, BTreeSet};

use super::{
    correlate_attackers, ClusterAssignment, CollabError, Ip2IpParams, SharedPool,
    SimilarityMatrix,
};
use crate::ingest::{CountMode, OrgDataset, OrgId, Prefix24, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShareStrategy {
    Local,
    Global,
    Intersection,
    ElementIntersection,
    Ip2Ip,
    Ip2IpIntersection,
    PairGlobal,
    PairLocal,
}

/// A strategy plus its pairing parameters, parsed from strings like
/// `intersection`, `pair-global:3`, or `pair-local:5:mutual`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareSpec {
    pub strategy: ShareStrategy,
    /// pair-global: top percentage of all pairs to select.
    pub pair_pct: f64,
    /// pair-local: partners per organization.
    pub pair_x: usize,
    /// pair-local: require both sides to have picked each other.
    pub pair_mutual: bool,
}

impl Default for ShareSpec {
    fn default() -> Self {
        ShareSpec {
            strategy: ShareStrategy::Local,
            pair_pct: 3.0,
            pair_x: 5,
            pair_mutual: false,
        }
    }
}

impl ShareSpec {
    pub fn parse(s: &str) -> Result<Self, CollabError> {
        let mut spec = ShareSpec::default();
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        spec.strategy = match head {
            "local" => ShareStrategy::Local,
            "global" => ShareStrategy::Global,
            "intersection" => ShareStrategy::Intersection,
            "element-intersection" => ShareStrategy::ElementIntersection,
            "ip2ip" => ShareStrategy::Ip2Ip,
            "ip2ip+intersection" => ShareStrategy::Ip2IpIntersection,
            "pair-global" => ShareStrategy::PairGlobal,
            "pair-local" => ShareStrategy::PairLocal,
            _ => return Err(CollabError::UnknownStrategy(s.to_string())),
        };
        match spec.strategy {
            ShareStrategy::PairGlobal => {
                if let Some(pct) = parts.next() {
                    spec.pair_pct = pct
                        .parse()
                        .map_err(|_| CollabError::UnknownStrategy(s.to_string()))?;
                }
            }
            ShareStrategy::PairLocal => {
                if let Some(x) = parts.next() {
                    spec.pair_x = x
                        .parse()
                        .map_err(|_| CollabError::UnknownStrategy(s.to_string()))?;
                }
                match parts.next() {
                    None => {}
                    Some("mutual") => spec.pair_mutual = true,
                    Some(_) => return Err(CollabError::UnknownStrategy(s.to_string())),
                }
            }
            _ => {}
        }
        if parts.next().is_some() {
            return Err(CollabError::UnknownStrategy(s.to_string()));
        }
        if !(0.0..=100.0).contains(&spec.pair_pct) {
            return Err(CollabError::PairPercent(spec.pair_pct));
        }
        Ok(spec)
    }

    /// Canonical string form; `parse(label())` round-trips.
    pub fn label(&self) -> String {
        match self.strategy {
            ShareStrategy::Local => "local".into(),
            ShareStrategy::Global => "global".into(),
            ShareStrategy::Intersection => "intersection".into(),
            ShareStrategy::ElementIntersection => "element-intersection".into(),
            ShareStrategy::Ip2Ip => "ip2ip".into(),
            ShareStrategy::Ip2IpIntersection => "ip2ip+intersection".into(),
            ShareStrategy::PairGlobal => format!("pair-global:{}", self.pair_pct),
            ShareStrategy::PairLocal => {
                if self.pair_mutual {
                    format!("pair-local:{}:mutual", self.pair_x)
                } else {
                    format!("pair-local:{}", self.pair_x)
                }
            }
        }
    }
}

fn add_all(pool: &mut SharedPool, source: &OrgDataset, mode: CountMode) {
    for ((prefix, day), count) in source.effective(mode) {
        pool.insert(prefix, day, source.org().clone(), count);
    }
}

/// Source events whose prefix both sides have observed.
fn add_prefix_intersection(
    pool: &mut SharedPool,
    receiver_prefixes: &BTreeSet<Prefix24>,
    source: &OrgDataset,
    mode: CountMode,
) {
    for ((prefix, day), count) in source.effective(mode) {
        if receiver_prefixes.contains(&prefix) {
            pool.insert(prefix, day, source.org().clone(), count);
        }
    }
}

/// Exactly the `(prefix, day)` elements present on both sides, with the
/// smaller multiplicity -- what the PRP buffers decrypt to.
fn add_element_intersection(
    pool: &mut SharedPool,
    receiver: &OrgDataset,
    source: &OrgDataset,
    mode: CountMode,
) {
    for ((prefix, day), count) in source.effective(mode) {
        let own = receiver.effective_count(prefix, day, mode);
        if own > 0 {
            pool.insert(prefix, day, source.org().clone(), count.min(own));
        }
    }
}

/// Builds every organization's shared pool under the given strategy.
///
/// Cluster-scoped strategies draw from `assignment`; the pair strategies
/// ignore it and rank pairs directly on the similarity matrix.
pub fn share(
    spec: &ShareSpec,
    assignment: &ClusterAssignment,
    datasets: &BTreeMap<OrgId, OrgDataset>,
    similarity: &SimilarityMatrix,
    ip2ip: &Ip2IpParams,
    window: &WindowSpec,
    mode: CountMode,
) -> Result<BTreeMap<OrgId, SharedPool>, CollabError> {
    let mut pools: BTreeMap<OrgId, SharedPool> =
        datasets.keys().map(|org| (org.clone(), SharedPool::new(org.clone()))).collect();

    let prefix_sets = || -> BTreeMap<&OrgId, BTreeSet<Prefix24>> {
        datasets.iter().map(|(org, ds)| (org, ds.prefix_set())).collect()
    };

    match spec.strategy {
        ShareStrategy::Local => {}
        ShareStrategy::Global => {
            for (org, pool) in pools.iter_mut() {
                for peer in assignment.co_members(org) {
                    if let Some(ds) = datasets.get(&peer) {
                        add_all(pool, ds, mode);
                    }
                }
            }
        }
        ShareStrategy::Intersection => {
            let prefixes = prefix_sets();
            for (org, pool) in pools.iter_mut() {
                for peer in assignment.co_members(org) {
                    if let Some(ds) = datasets.get(&peer) {
                        add_prefix_intersection(pool, &prefixes[org], ds, mode);
                    }
                }
            }
        }
        ShareStrategy::ElementIntersection => {
            for (org, pool) in pools.iter_mut() {
                let receiver = &datasets[org];
                for peer in assignment.co_members(org) {
                    if let Some(ds) = datasets.get(&peer) {
                        add_element_intersection(pool, receiver, ds, mode);
                    }
                }
            }
        }
        ShareStrategy::Ip2Ip | ShareStrategy::Ip2IpIntersection => {
            let prefixes = prefix_sets();
            // Recommendation sets are computed once per distinct group.
            let mut rec_cache: BTreeMap<BTreeSet<OrgId>, BTreeMap<OrgId, BTreeSet<Prefix24>>> =
                BTreeMap::new();
            for (org, pool) in pools.iter_mut() {
                let group = assignment.sharing_group(org);
                if group.len() < 2 {
                    continue;
                }
                let recs = rec_cache
                    .entry(group.clone())
                    .or_insert_with(|| correlate_attackers(&group, datasets, window, ip2ip));
                let recommended = recs.get(org).cloned().unwrap_or_default();
                for peer in assignment.co_members(org) {
                    let Some(ds) = datasets.get(&peer) else { continue };
                    for ((prefix, day), count) in ds.effective(mode) {
                        if recommended.contains(&prefix) {
                            pool.insert(prefix, day, peer.clone(), count);
                        }
                    }
                    if spec.strategy == ShareStrategy::Ip2IpIntersection {
                        add_prefix_intersection(pool, &prefixes[org], ds, mode);
                    }
                }
            }
        }
        ShareStrategy::PairGlobal => {
            let n = similarity.n();
            let mut pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            pairs.sort_by(|&(a1, b1), &(a2, b2)| {
                similarity
                    .cell(a2, b2)
                    .cmp(&similarity.cell(a1, b1))
                    .then((a1, b1).cmp(&(a2, b2)))
            });
            let take = ((spec.pair_pct / 100.0) * pairs.len() as f64).round() as usize;
            let prefixes = prefix_sets();
            for &(i, j) in pairs.iter().take(take.min(pairs.len())) {
                let (a, b) = (&similarity.orgs()[i], &similarity.orgs()[j]);
                let (Some(da), Some(db)) = (datasets.get(a), datasets.get(b)) else { continue };
                if let Some(pool) = pools.get_mut(a) {
                    add_prefix_intersection(pool, &prefixes[a], db, mode);
                }
                if let Some(pool) = pools.get_mut(b) {
                    add_prefix_intersection(pool, &prefixes[b], da, mode);
                }
            }
        }
        ShareStrategy::PairLocal => {
            let n = similarity.n();
            if spec.pair_x == 0 || spec.pair_x >= n {
                return Err(CollabError::PairCount { x: spec.pair_x, n });
            }
            let partners: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut ranked: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    ranked.sort_by(|&a, &b| {
                        similarity.cell(i, b).cmp(&similarity.cell(i, a)).then(a.cmp(&b))
                    });
                    ranked.truncate(spec.pair_x);
                    ranked
                })
                .collect();
            let prefixes = prefix_sets();
            for i in 0..n {
                let org = &similarity.orgs()[i];
                let Some(receiver) = prefixes.get(org) else { continue };
                for &j in &partners[i] {
                    if spec.pair_mutual && !partners[j].contains(&i) {
                        continue;
                    }
                    let peer = &similarity.orgs()[j];
                    let (Some(ds), Some(pool)) = (datasets.get(peer), pools.get_mut(org)) else {
                        continue;
                    };
                    add_prefix_intersection(pool, receiver, ds, mode);
                }
            }
        }
    }
    Ok(pools)
}

/// Element-level intersection pools over an assignment; the expected
/// plaintext outcome of running the PRP protocol and decrypting the
/// returned buffers.
pub fn element_intersection_pools(
    assignment: &ClusterAssignment,
    datasets: &BTreeMap<OrgId, OrgDataset>,
    mode: CountMode,
) -> BTreeMap<OrgId, SharedPool> {
    let mut pools: BTreeMap<OrgId, SharedPool> =
        datasets.keys().map(|org| (org.clone(), SharedPool::new(org.clone()))).collect();
    for (org, pool) in pools.iter_mut() {
        let receiver = &datasets[org];
        for peer in assignment.co_members(org) {
            if let Some(ds) = datasets.get(&peer) {
                add_element_intersection(pool, receiver, ds, mode);
            }
        }
    }
    pools
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::{cluster_all_in_one, o2o_plain};
    use crate::ingest::DayIndex;

    fn p(v: u32) -> Prefix24 {
        Prefix24::from_value(v).unwrap()
    }

    fn ds(org: &str, elems: &[(u32, DayIndex, u64)]) -> (OrgId, OrgDataset) {
        let id = OrgId::new(org);
        let mut d = OrgDataset::new(id.clone());
        for &(v, day, n) in elems {
            d.record(p(v), day, n);
        }
        (id, d)
    }

    fn fixture() -> (BTreeMap<OrgId, OrgDataset>, SimilarityMatrix, WindowSpec) {
        let mut datasets = BTreeMap::new();
        for (org, elems) in [
            ("a", vec![(1u32, 0u16, 1u64), (2, 1, 2), (3, 3, 1)]),
            ("b", vec![(1, 2, 1), (4, 0, 1), (2, 1, 1)]),
            ("c", vec![(9, 4, 3)]),
        ] {
            let (id, d) = ds(org, &elems);
            datasets.insert(id, d);
        }
        let m = o2o_plain(&datasets, CountMode::Raw);
        (datasets, m, WindowSpec::new(0, 5))
    }

    fn one_cluster(datasets: &BTreeMap<OrgId, OrgDataset>) -> ClusterAssignment {
        cluster_all_in_one(datasets.keys().cloned().collect())
    }

    fn run(
        spec: &ShareSpec,
        assignment: &ClusterAssignment,
        datasets: &BTreeMap<OrgId, OrgDataset>,
        m: &SimilarityMatrix,
        window: &WindowSpec,
    ) -> BTreeMap<OrgId, SharedPool> {
        share(spec, assignment, datasets, m, &Ip2IpParams::default(), window, CountMode::Raw)
            .unwrap()
    }

    #[test]
    fn local_and_singleton_clusters_share_nothing() {
        let (datasets, m, window) = fixture();
        let singletons = ClusterAssignment::Partition {
            clusters: datasets.keys().map(|o| [o.clone()].into()).collect(),
            outliers: BTreeSet::new(),
        };
        for label in ["local", "global", "intersection", "element-intersection", "ip2ip"] {
            let spec = ShareSpec::parse(label).unwrap();
            let assignment = if label == "local" { one_cluster(&datasets) } else { singletons.clone() };
            let pools = run(&spec, &assignment, &datasets, &m, &window);
            assert!(pools.values().all(SharedPool::is_empty), "{label}");
        }
    }

    #[test]
    fn intersection_is_contained_in_global() {
        let (datasets, m, window) = fixture();
        let assignment = one_cluster(&datasets);
        let global = run(&ShareSpec::parse("global").unwrap(), &assignment, &datasets, &m, &window);
        let inter =
            run(&ShareSpec::parse("intersection").unwrap(), &assignment, &datasets, &m, &window);
        for (org, pool) in &inter {
            for (key, count) in pool.entries() {
                let in_global = global[org]
                    .entries()
                    .find(|(k, _)| *k == key)
                    .map(|(_, c)| *c);
                assert_eq!(in_global, Some(*count));
            }
        }
        // and element-intersection is contained in intersection
        let elems = run(
            &ShareSpec::parse("element-intersection").unwrap(),
            &assignment,
            &datasets,
            &m,
            &window,
        );
        for (org, pool) in &elems {
            let prefixes = inter[org].prefixes();
            for ((prefix, _, _), _) in pool.entries() {
                assert!(prefixes.contains(prefix));
            }
        }
    }

    #[test]
    fn common_prefix_events_flow_both_ways() {
        // Orgs a and b share only prefix 1, which b saw on day 3.
        let mut datasets = BTreeMap::new();
        for (org, elems) in [
            ("a", vec![(1u32, 0u16, 1u64), (7, 2, 1)]),
            ("b", vec![(1, 3, 2), (8, 4, 1)]),
        ] {
            let (id, d) = ds(org, &elems);
            datasets.insert(id, d);
        }
        let m = o2o_plain(&datasets, CountMode::Raw);
        let assignment = one_cluster(&datasets);
        let pools = run(
            &ShareSpec::parse("intersection").unwrap(),
            &assignment,
            &datasets,
            &m,
            &WindowSpec::new(0, 5),
        );
        let a_pool: Vec<_> = pools[&OrgId::new("a")].entries().collect();
        assert_eq!(a_pool, vec![(&(p(1), 3, OrgId::new("b")), &2)]);
        let b_pool: Vec<_> = pools[&OrgId::new("b")].entries().collect();
        assert_eq!(b_pool, vec![(&(p(1), 0, OrgId::new("a")), &1)]);
    }

    #[test]
    fn pair_global_at_full_percentage_equals_one_big_intersection_cluster() {
        let (datasets, m, window) = fixture();
        let clustered = run(
            &ShareSpec::parse("intersection").unwrap(),
            &one_cluster(&datasets),
            &datasets,
            &m,
            &window,
        );
        let paired =
            run(&ShareSpec::parse("pair-global:100").unwrap(), &one_cluster(&datasets), &datasets, &m, &window);
        assert_eq!(clustered, paired);
    }

    #[test]
    fn pair_local_mutual_mode_requires_consent() {
        // Similarities: o1-o2 = 2 but o2-o3 = 3. With x=1, o1 picks o2
        // while o2 picks o3, so mutual mode gives o1 nothing although
        // unilateral mode lets o1 pull from o2.
        let mut datasets = BTreeMap::new();
        for (org, elems) in [
            ("o1", vec![(1u32, 0u16, 1u64), (2, 0, 1)]),
            ("o2", vec![(1, 0, 1), (2, 0, 1), (3, 1, 1), (4, 1, 1), (5, 2, 1)]),
            ("o3", vec![(3, 1, 1), (4, 1, 1), (5, 2, 1)]),
        ] {
            let (id, d) = ds(org, &elems);
            datasets.insert(id, d);
        }
        let m = o2o_plain(&datasets, CountMode::Raw);
        let window = WindowSpec::new(0, 5);
        let assignment = one_cluster(&datasets);

        let uni = run(&ShareSpec::parse("pair-local:1").unwrap(), &assignment, &datasets, &m, &window);
        assert!(!uni[&OrgId::new("o1")].is_empty());

        let mutual = run(
            &ShareSpec::parse("pair-local:1:mutual").unwrap(),
            &assignment,
            &datasets,
            &m,
            &window,
        );
        assert!(mutual[&OrgId::new("o1")].is_empty());
        // o2 and o3 picked each other
        assert!(!mutual[&OrgId::new("o2")].is_empty());
        assert!(!mutual[&OrgId::new("o3")].is_empty());
    }

    #[test]
    fn ip2ip_delivers_only_recommended_prefixes() {
        // Attackers 1 and 2 have identical victim-day patterns across b
        // and c; org a saw attacker 1 only, so it receives 2's events.
        let mut datasets = BTreeMap::new();
        for (org, elems) in [
            ("a", vec![(1u32, 0u16, 1u64)]),
            ("b", vec![(1, 1, 1), (2, 1, 1)]),
            ("c", vec![(1, 2, 1), (2, 2, 1)]),
        ] {
            let (id, d) = ds(org, &elems);
            datasets.insert(id, d);
        }
        let m = o2o_plain(&datasets, CountMode::Raw);
        let assignment = one_cluster(&datasets);
        let pools = run(
            &ShareSpec::parse("ip2ip").unwrap(),
            &assignment,
            &datasets,
            &m,
            &WindowSpec::new(0, 5),
        );
        let a_prefixes = pools[&OrgId::new("a")].prefixes();
        assert_eq!(a_prefixes, [p(2)].into());
    }

    #[test]
    fn unknown_strategies_are_rejected_and_labels_round_trip() {
        assert!(matches!(
            ShareSpec::parse("gossip"),
            Err(CollabError::UnknownStrategy(_))
        ));
        assert!(ShareSpec::parse("pair-global:1000").is_err());
        for label in [
            "local",
            "global",
            "intersection",
            "element-intersection",
            "ip2ip",
            "ip2ip+intersection",
            "pair-global:2.5",
            "pair-local:7",
            "pair-local:7:mutual",
        ] {
            let spec = ShareSpec::parse(label).unwrap();
            assert_eq!(spec.label(), label);
            assert_eq!(ShareSpec::parse(&spec.label()).unwrap(), spec);
        }
    }

    #[test]
    fn pools_never_contain_self_sourced_events() {
        let (datasets, m, window) = fixture();
        let assignment = one_cluster(&datasets);
        for label in ["global", "intersection", "ip2ip+intersection", "pair-global:100"] {
            let pools = run(&ShareSpec::parse(label).unwrap(), &assignment, &datasets, &m, &window);
            for (org, pool) in &pools {
                assert!(pool.entries().all(|((_, _, source), _)| source != org));
            }
        }
    }
}
