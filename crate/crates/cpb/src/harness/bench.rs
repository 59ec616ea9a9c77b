//! Protocol micro-benchmarks.
//!
//! The point being measured: per-organization cost is independent of how
//! many organizations participate. An org's upload is a pure function of
//! its own set, so at a fixed set size the upload byte count is identical
//! whether 10 or 1,000 orgs joined; only the STA's aggregate work grows.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::CpbError;
use crate::ingest::{CountMode, OrgDataset, OrgId, Prefix24};
use crate::net::WireMessage;
use crate::privacy::{encrypt_dataset, sta_compute, SharedKey, StaUpload};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Org counts to measure, e.g. `[10, 100]`.
    pub org_counts: Vec<usize>,
    /// Distinct elements per org's set.
    pub set_size: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { org_counts: vec![10, 100], set_size: 4000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub orgs: usize,
    pub set_size: usize,
    /// Mean wall time to encrypt one org's set, milliseconds.
    pub encrypt_ms_per_org: f64,
    /// Framed UPLOAD size of one org, bytes. Identical across orgs and
    /// independent of the org count.
    pub upload_bytes_per_org: u64,
    /// Total bytes the STA receives (n uploads).
    pub sta_received_bytes: u64,
    /// Wall time of the STA intersection pass, milliseconds.
    pub sta_compute_ms: f64,
    /// Total framed size of all buffer deliveries.
    pub buffer_bytes_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "orgs,set_size,encrypt_ms_per_org,upload_bytes_per_org,sta_received_bytes,\
             sta_compute_ms,buffer_bytes_total\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.3},{},{},{:.3},{}",
                r.orgs,
                r.set_size,
                r.encrypt_ms_per_org,
                r.upload_bytes_per_org,
                r.sta_received_bytes,
                r.sta_compute_ms,
                r.buffer_bytes_total
            );
        }
        out
    }
}

/// Random dataset of exactly `set_size` distinct elements. Fixed-width org
/// names keep upload framing identical across orgs.
fn random_set(rng: &mut ChaCha12Rng, org: OrgId, set_size: usize) -> OrgDataset {
    let mut d = OrgDataset::new(org);
    let mut have = 0usize;
    while have < set_size {
        let prefix = Prefix24::from_value(rng.gen_range(0..1 << 24)).unwrap();
        let day = rng.gen_range(0..365u16);
        if d.raw_count(prefix, day) == 0 {
            d.record(prefix, day, 1);
            have += 1;
        }
    }
    d
}

fn framed_len(msg: &WireMessage) -> u64 {
    msg.encode().len() as u64 + 4
}

/// Measures encrypt time, upload volume, and STA-side cost at each org
/// count.
pub fn bench_protocol(cfg: &BenchConfig) -> Result<BenchReport, CpbError> {
    let mut rows = Vec::new();
    for &n in &cfg.org_counts {
        if n < 2 {
            return Err(CpbError::Config(format!("bench needs at least 2 orgs, got {n}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let kappa = SharedKey::generate();

        let datasets: Vec<OrgDataset> = (0..n)
            .map(|i| random_set(&mut rng, OrgId::new(&format!("b{i:05}")), cfg.set_size))
            .collect();

        let start = Instant::now();
        let encrypted: Vec<_> = datasets
            .iter()
            .map(|d| encrypt_dataset(d, &kappa, CountMode::Raw))
            .collect::<Result<_, _>>()?;
        let encrypt_ms_per_org = start.elapsed().as_secs_f64() * 1000.0 / n as f64;

        let uploads: Vec<StaUpload> = encrypted.iter().map(|e| e.upload()).collect();
        let upload_sizes: Vec<u64> = uploads
            .iter()
            .map(|u| framed_len(&WireMessage::Upload { round: 0, upload: u.clone() }))
            .collect();
        let upload_bytes_per_org = upload_sizes[0];
        debug_assert!(upload_sizes.iter().all(|&s| s == upload_bytes_per_org));

        let start = Instant::now();
        let (o2o, buffers) = sta_compute(&uploads)?;
        let sta_compute_ms = start.elapsed().as_secs_f64() * 1000.0;

        let buffer_bytes_total: u64 = o2o
            .orgs()
            .iter()
            .map(|org| {
                let mine: Vec<_> =
                    buffers.iter().filter(|b| &b.receiver == org).cloned().collect();
                framed_len(&WireMessage::Buffers { round: 0, buffers: mine })
            })
            .sum();

        rows.push(BenchRow {
            orgs: n,
            set_size: cfg.set_size,
            encrypt_ms_per_org,
            upload_bytes_per_org,
            sta_received_bytes: upload_sizes.iter().sum(),
            sta_compute_ms,
            buffer_bytes_total,
        });
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upload_bytes_are_identical_across_org_counts() {
        let cfg = BenchConfig { org_counts: vec![3, 7], set_size: 200, seed: 5 };
        let report = bench_protocol(&cfg).unwrap();
        assert_eq!(
            report.rows[0].upload_bytes_per_org,
            report.rows[1].upload_bytes_per_org
        );
        // STA receive volume scales exactly with n at a fixed set size.
        let per = report.rows[0].upload_bytes_per_org;
        assert_eq!(report.rows[0].sta_received_bytes, 3 * per);
        assert_eq!(report.rows[1].sta_received_bytes, 7 * per);
    }

    #[test]
    fn doubling_the_set_size_doubles_upload_bytes_within_framing_overhead() {
        let small = bench_protocol(&BenchConfig { org_counts: vec![2], set_size: 500, seed: 9 })
            .unwrap();
        let large = bench_protocol(&BenchConfig { org_counts: vec![2], set_size: 1000, seed: 9 })
            .unwrap();
        let ratio =
            large.rows[0].upload_bytes_per_org as f64 / small.rows[0].upload_bytes_per_org as f64;
        assert!((ratio - 2.0).abs() < 0.02, "ratio {ratio}");
    }
}
