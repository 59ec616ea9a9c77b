//! Cross-module invariants, property-tested.

use std::collections::BTreeMap;

use proptest::collection::{btree_map, vec};
use proptest::prelude::*;

use cpb::collab::{
    cluster_all_in_one, multiset_intersection, o2o_plain, share, Ip2IpParams, ShareSpec,
};
use cpb::forecast::{ewma_score, predict, ForecastParams};
use cpb::ingest::{CountMode, DayIndex, OrgDataset, OrgId, Prefix24, WindowSpec};
use cpb::metrics::{aggregate, QualityReport};
use cpb::net::{decode_record, encode_record, Record, WireValue};

fn dataset_strategy() -> impl Strategy<Value = BTreeMap<(Prefix24, DayIndex), u64>> {
    btree_map(
        ((0u32..80).prop_map(|v| Prefix24::from_value(v).unwrap()), 0u16..5),
        1u64..4,
        0..60,
    )
}

fn org_dataset(name: &str, elements: BTreeMap<(Prefix24, DayIndex), u64>) -> OrgDataset {
    OrgDataset::from_elements(OrgId::new(name), elements)
}

proptest! {
    /// Any two addresses inside one /24 map to the same prefix.
    #[test]
    fn prefix_ignores_the_last_octet(ip: u32, other_octet: u8) {
        let octets = ip.to_be_bytes();
        let sibling = [octets[0], octets[1], octets[2], other_octet];
        prop_assert_eq!(Prefix24::of_octets(octets), Prefix24::of_octets(sibling));
    }

    /// Raising any observation never lowers the EWMA score.
    #[test]
    fn ewma_is_monotone_in_the_signal(
        signal in vec(0.0f64..4.0, 1..20),
        bump in 0.0f64..4.0,
        alpha in 0.05f64..0.95,
        idx: prop::sample::Index,
    ) {
        let at = idx.index(signal.len());
        let mut raised = signal.clone();
        raised[at] += bump;
        prop_assert!(
            ewma_score(&raised, alpha).unwrap() >= ewma_score(&signal, alpha).unwrap()
        );
    }

    /// Blacklist and whitelist partition the candidate universe.
    #[test]
    fn prediction_lists_partition_the_universe(
        elements in dataset_strategy(),
        tau in 0.0f64..1.0,
    ) {
        let train = org_dataset("a", elements);
        let window = WindowSpec::new(0, 5);
        let params = ForecastParams { alpha: 0.9, tau, mode: CountMode::Presence };
        let pred = predict(&train, None, &window, &params).unwrap();
        prop_assert_eq!(pred.blacklist.intersection(&pred.whitelist).count(), 0);
        prop_assert_eq!(pred.blacklist.len() + pred.whitelist.len(), pred.scores.len());
        let universe: std::collections::BTreeSet<_> =
            pred.scores.keys().copied().collect();
        let union: std::collections::BTreeSet<_> =
            pred.blacklist.union(&pred.whitelist).copied().collect();
        prop_assert_eq!(universe, union);
    }

    /// O2O is symmetric, bounded by the smaller multiset, and sized on the
    /// diagonal.
    #[test]
    fn o2o_matrix_invariants(
        a in dataset_strategy(),
        b in dataset_strategy(),
        c in dataset_strategy(),
        raw: bool,
    ) {
        let mode = if raw { CountMode::Raw } else { CountMode::Presence };
        let mut datasets = BTreeMap::new();
        for (name, elements) in [("a", a), ("b", b), ("c", c)] {
            datasets.insert(OrgId::new(name), org_dataset(name, elements));
        }
        let m = o2o_plain(&datasets, mode);
        for i in 0..3 {
            prop_assert_eq!(
                m.cell(i, i),
                datasets[&m.orgs()[i]].multiset_size(mode)
            );
            for j in 0..3 {
                prop_assert_eq!(m.cell(i, j), m.cell(j, i));
                prop_assert!(m.cell(i, j) <= m.cell(i, i).min(m.cell(j, j)));
            }
        }
        // pairwise cells equal the direct multiset intersection
        let (da, db) = (&datasets[&m.orgs()[0]], &datasets[&m.orgs()[1]]);
        prop_assert_eq!(m.cell(0, 1), multiset_intersection(da, db, mode));
    }

    /// Intersection pools are contained in global pools entry for entry,
    /// and no pool sources its own organization.
    #[test]
    fn intersection_pools_are_contained_in_global(
        a in dataset_strategy(),
        b in dataset_strategy(),
        c in dataset_strategy(),
    ) {
        let mut datasets = BTreeMap::new();
        for (name, elements) in [("a", a), ("b", b), ("c", c)] {
            datasets.insert(OrgId::new(name), org_dataset(name, elements));
        }
        let m = o2o_plain(&datasets, CountMode::Raw);
        let assignment = cluster_all_in_one(datasets.keys().cloned().collect());
        let window = WindowSpec::new(0, 5);
        let run = |label: &str| {
            share(
                &ShareSpec::parse(label).unwrap(),
                &assignment,
                &datasets,
                &m,
                &Ip2IpParams::default(),
                &window,
                CountMode::Raw,
            )
            .unwrap()
        };
        let global = run("global");
        let inter = run("intersection");
        for (org, pool) in &inter {
            let global_entries: BTreeMap<_, _> =
                global[org].entries().map(|(k, v)| (k.clone(), *v)).collect();
            for (key, count) in pool.entries() {
                prop_assert_eq!(global_entries.get(key), Some(count));
            }
        }
        for pools in [&global, &inter] {
            for (org, pool) in pools.iter() {
                prop_assert!(pool.entries().all(|((_, _, src), _)| src != org));
            }
        }
    }

    /// Aggregation is independent of report order.
    #[test]
    fn aggregate_is_permutation_invariant(
        values in vec(prop::option::of(-5.0f64..5.0), 1..40),
        seed: u64,
    ) {
        let reports: Vec<QualityReport> = values
            .iter()
            .map(|v| QualityReport { tp_impr: *v, ..Default::default() })
            .collect();
        let mut shuffled = reports.clone();
        // cheap deterministic shuffle
        let mut state = seed | 1;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = aggregate(&reports);
        let b = aggregate(&shuffled);
        prop_assert_eq!(a.tp_impr.map(|s| (s.mean.to_bits(), s.std.to_bits())),
                        b.tp_impr.map(|s| (s.mean.to_bits(), s.std.to_bits())));
    }

    /// Wire records decode back to themselves.
    #[test]
    fn wire_records_round_trip(
        keys in vec("[a-z]{1,8}", 0..6),
        ints in vec(any::<u64>(), 6),
        blobs in vec(vec(any::<u8>(), 0..40), 6),
        pick in vec(0u8..3, 6),
    ) {
        let record: Record = keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let value = match pick[i] {
                    0 => WireValue::U64(ints[i]),
                    1 => WireValue::Bytes(blobs[i].clone()),
                    _ => WireValue::List(vec![
                        WireValue::U64(ints[i]),
                        WireValue::Bytes(blobs[i].clone()),
                    ]),
                };
                (k.clone(), value)
            })
            .collect();
        let encoded = encode_record(&record);
        prop_assert_eq!(decode_record(&encoded).unwrap(), record);
    }
}
