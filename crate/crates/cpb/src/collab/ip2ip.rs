//! IP2IP: recommending correlated attacker prefixes within a cluster.
//!
//! Within a sharing group, the most prolific attacker prefixes (heavy
//! hitters) each get a victim-day incidence vector over the group's
//! members and training days. Attackers that hit the same victims on the
//! same days have high cosine similarity, and an organization is
//! recommended the near neighbors of attackers it has already seen --
//! excluding everything it already observed itself.

use std::collections::{BTreeMap, BTreeSet};

use crate::ingest::{OrgDataset, OrgId, Prefix24, WindowSpec};

/// IP2IP tuning: heavy-hitter cutoff and recommendation neighborhood size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ip2IpParams {
    pub heavy_hitters: usize,
    pub k_rec: usize,
}

impl Default for Ip2IpParams {
    fn default() -> Self {
        Ip2IpParams { heavy_hitters: 1000, k_rec: 50 }
    }
}

/// Cosine similarity of two sorted binary index vectors.
fn cosine(a: &[u32], b: &[u32]) -> f64 {
    let mut dot = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if dot == 0 {
        return 0.0;
    }
    dot as f64 / ((a.len() as f64).sqrt() * (b.len() as f64).sqrt())
}

/// Computes per-org recommended prefixes for one sharing group.
///
/// Returns an empty map for groups of fewer than two members. Fewer than
/// `heavy_hitters` distinct attackers simply uses them all.
pub fn correlate_attackers(
    group: &BTreeSet<OrgId>,
    datasets: &BTreeMap<OrgId, OrgDataset>,
    window: &WindowSpec,
    params: &Ip2IpParams,
) -> BTreeMap<OrgId, BTreeSet<Prefix24>> {
    if group.len() < 2 {
        return BTreeMap::new();
    }
    let members: Vec<&OrgId> = group.iter().collect();
    let train_len = window.train_len() as u32;

    // Heavy hitters by total event count, with their incidence vectors
    // over (member, train day). Member-major iteration keeps the dim
    // lists sorted as built.
    let mut stats: BTreeMap<Prefix24, (u64, Vec<u32>)> = BTreeMap::new();
    for (m_idx, member) in members.iter().enumerate() {
        let Some(ds) = datasets.get(*member) else { continue };
        for (&(prefix, day), &count) in ds.elements() {
            if let Some(pos) = window.train_position(day) {
                let entry = stats.entry(prefix).or_default();
                entry.0 += count;
                entry.1.push(m_idx as u32 * train_len + pos as u32);
            }
        }
    }
    let mut ranked: Vec<(&Prefix24, &(u64, Vec<u32>))> = stats.iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.0.cmp(b.0)));
    ranked.truncate(params.heavy_hitters);
    let hitters: Vec<Prefix24> = ranked.iter().map(|(p, _)| **p).collect();
    let vectors: Vec<&Vec<u32>> = ranked.iter().map(|(_, (_, v))| v).collect();
    let hitter_index: BTreeMap<Prefix24, usize> =
        hitters.iter().enumerate().map(|(i, &p)| (p, i)).collect();

    // k nearest neighbors per hitter, positive similarity only.
    let mut sims: Vec<Vec<(f64, Prefix24)>> = vec![Vec::new(); hitters.len()];
    for i in 0..hitters.len() {
        for j in i + 1..hitters.len() {
            let c = cosine(vectors[i], vectors[j]);
            if c > 0.0 {
                sims[i].push((c, hitters[j]));
                sims[j].push((c, hitters[i]));
            }
        }
    }
    let neighbors: Vec<Vec<Prefix24>> = sims
        .into_iter()
        .map(|mut row| {
            row.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            row.truncate(params.k_rec);
            row.into_iter().map(|(_, p)| p).collect()
        })
        .collect();

    let mut out = BTreeMap::new();
    for member in &members {
        let Some(ds) = datasets.get(*member) else {
            out.insert((*member).clone(), BTreeSet::new());
            continue;
        };
        let observed = ds.prefix_set();
        let mut recommended = BTreeSet::new();
        for prefix in &observed {
            if let Some(&idx) = hitter_index.get(prefix) {
                recommended.extend(neighbors[idx].iter().copied());
            }
        }
        let recommended: BTreeSet<Prefix24> =
            recommended.difference(&observed).copied().collect();
        out.insert((*member).clone(), recommended);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::OrgDataset;

    fn p(v: u32) -> Prefix24 {
        Prefix24::from_value(v).unwrap()
    }

    fn setup(elems: &[(&str, u32, u16)]) -> (BTreeSet<OrgId>, BTreeMap<OrgId, OrgDataset>) {
        let mut datasets: BTreeMap<OrgId, OrgDataset> = BTreeMap::new();
        for &(org, v, day) in elems {
            datasets
                .entry(OrgId::new(org))
                .or_insert_with(|| OrgDataset::new(OrgId::new(org)))
                .record(p(v), day, 1);
        }
        (datasets.keys().cloned().collect(), datasets)
    }

    #[test]
    fn identical_attack_patterns_are_recommended() {
        // Attackers 1 and 2 hit the same victims on the same days; org a
        // saw only attacker 1, so attacker 2 is recommended to it.
        let (group, datasets) = setup(&[
            ("a", 1, 0),
            ("b", 1, 0),
            ("b", 2, 0),
            ("c", 1, 0),
            ("c", 2, 0),
        ]);
        let window = WindowSpec::new(0, 5);
        let recs = correlate_attackers(&group, &datasets, &window, &Ip2IpParams::default());
        assert!(recs[&OrgId::new("a")].contains(&p(2)));
    }

    #[test]
    fn observed_prefixes_are_never_recommended_back() {
        let (group, datasets) = setup(&[
            ("a", 1, 0),
            ("a", 2, 0),
            ("b", 1, 0),
            ("b", 2, 0),
        ]);
        let window = WindowSpec::new(0, 5);
        let recs = correlate_attackers(&group, &datasets, &window, &Ip2IpParams::default());
        // Both orgs already saw everything there is.
        assert!(recs[&OrgId::new("a")].is_empty());
        assert!(recs[&OrgId::new("b")].is_empty());
    }

    #[test]
    fn singleton_groups_recommend_nothing() {
        let (_, datasets) = setup(&[("a", 1, 0)]);
        let group: BTreeSet<OrgId> = [OrgId::new("a")].into();
        let window = WindowSpec::new(0, 5);
        assert!(correlate_attackers(&group, &datasets, &window, &Ip2IpParams::default())
            .is_empty());
    }

    #[test]
    fn heavy_hitter_cutoff_uses_totals_with_low_prefix_ties_first() {
        // Three attackers; cutoff 2 keeps the two busiest. 5 and 7 tie on
        // count so the lower prefix value wins.
        let (group, mut datasets) = setup(&[
            ("a", 5, 0),
            ("a", 7, 0),
            ("b", 5, 1),
            ("b", 7, 1),
            ("b", 3, 1),
        ]);
        // bump attacker 3 below the tie
        datasets.get_mut(&OrgId::new("a")).unwrap();
        let window = WindowSpec::new(0, 5);
        let params = Ip2IpParams { heavy_hitters: 2, k_rec: 50 };
        let recs = correlate_attackers(&group, &datasets, &window, &params);
        // attacker 3 fell below the cutoff, so it can never be recommended
        assert!(!recs.values().any(|r| r.contains(&p(3))));
    }

    #[test]
    fn disjoint_patterns_yield_no_recommendations() {
        // Attackers hit different (victim, day) cells: cosine 0 everywhere.
        let (group, datasets) = setup(&[("a", 1, 0), ("b", 2, 1), ("c", 3, 2)]);
        let window = WindowSpec::new(0, 5);
        let recs = correlate_attackers(&group, &datasets, &window, &Ip2IpParams::default());
        assert!(recs.values().all(BTreeSet::is_empty));
    }
}
