//! End-to-end experiment execution.
//!
//! One run walks every sliding window: build per-org datasets, compute the
//! O2O similarity through the configured privacy mode, cluster, share,
//! predict with and without the shared pool, and score against the test
//! day. The local baseline is recomputed per (org, window) inside the same
//! run, so `strategy = local` rows carry deltas of exactly zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::time::Duration;

use rayon::prelude::*;

use super::{
    subseed, Aggregation, CpbError, DataSource, ExperimentConfig, FileFormat,
    PrivacyMode,
};
use crate::collab::{
    cluster, o2o_plain, share, ClusterAssignment, ClusteringSpec, ShareStrategy,
    SharedPool, SimilarityMatrix,
};
use crate::forecast::{predict, ForecastParams};
use crate::ingest::synth::synthesize_logs;
use crate::ingest::{
    build_windows, read_canonical, select_contributors, AlertEvent, CountMode, DayIndex, OrgDataset,
    OrgId, SelectionRule, Window,
};
use crate::metrics::{aggregate, confusion, derive, unreachable_positives, Confusion, QualityReport};
use crate::net::{run_org, serve_sta, KeySource, OrgConfig, StaConfig};
use crate::privacy::{simulate_round, SharedKey};

/// One (org, window) outcome.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub org: OrgId,
    pub window: usize,
    pub test_day: DayIndex,
    pub universe: u64,
    pub pool_entries: u64,
    pub unreachable: u64,
    pub conf: Confusion,
    pub baseline: Confusion,
    pub report: QualityReport,
}

/// The Table-2-shaped summary of a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub clustering: String,
    pub k: usize,
    pub avg_size: f64,
    pub collaborators: u64,
    pub tpr: Option<f64>,
    pub ppv: Option<f64>,
    pub tp_impr: Option<(f64, f64)>,
    pub fp_incr: Option<(f64, f64)>,
    pub fn_incr: Option<f64>,
    pub f1: Option<f64>,
}

impl SummaryRow {
    pub const COLUMNS: [&'static str; 12] = [
        "clustering",
        "k",
        "avg_size",
        "collaborators",
        "tpr",
        "ppv",
        "tp_impr",
        "tp_impr_std",
        "fp_incr",
        "fp_incr_std",
        "fn_incr",
        "f1",
    ];

    pub fn csv_row(&self) -> String {
        let one = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let two = |v: Option<(f64, f64)>| match v {
            Some((m, s)) => format!("{m},{s}"),
            None => ",".into(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.clustering,
            self.k,
            self.avg_size,
            self.collaborators,
            one(self.tpr),
            one(self.ppv),
            two(self.tp_impr),
            two(self.fp_incr),
            one(self.fn_incr),
            one(self.f1),
        )
    }
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub orgs: Vec<OrgId>,
    pub windows: usize,
    pub rows: Vec<ResultRow>,
    pub summary: SummaryRow,
    config_echo: ConfigEcho,
}

/// The config fields echoed into every result row.
#[derive(Debug, Clone)]
struct ConfigEcho {
    strategy: String,
    clustering: String,
    k: usize,
    threshold_pct: f64,
    alpha: f64,
    tau: f64,
    count_mode: &'static str,
    privacy: &'static str,
    seed: u64,
}

impl ExperimentOutput {
    pub fn results_csv(&self) -> String {
        let mut out = String::from(
            "strategy,clustering,k,threshold_pct,alpha,tau,count_mode,privacy,seed,\
             org,window,test_day,universe,pool_entries,tp,fp,fn,tn,unreachable,\
             base_tp,base_fp,base_fn,base_tn,tpr,fpr,ppv,f1,tp_impr,fp_incr,fn_incr\n",
        );
        let e = &self.config_echo;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.strategy,
                e.clustering,
                e.k,
                e.threshold_pct,
                e.alpha,
                e.tau,
                e.count_mode,
                e.privacy,
                e.seed,
                r.org,
                r.window,
                r.test_day,
                r.universe,
                r.pool_entries,
                r.conf.tp,
                r.conf.fp,
                r.conf.fn_,
                r.conf.tn,
                r.unreachable,
                r.baseline.tp,
                r.baseline.fp,
                r.baseline.fn_,
                r.baseline.tn,
                opt(r.report.tpr),
                opt(r.report.fpr),
                opt(r.report.ppv),
                opt(r.report.f1),
                opt(r.report.tp_impr),
                opt(r.report.fp_incr),
                opt(r.report.fn_incr),
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!("{}\n{}\n", SummaryRow::COLUMNS.join(","), self.summary.csv_row())
    }
}

/// Loads the configured data source into an event list.
pub fn load_events(cfg: &ExperimentConfig) -> Result<Vec<AlertEvent>, CpbError> {
    match cfg.source {
        DataSource::Synth => {
            Ok(synthesize_logs(&cfg.synth, subseed(cfg.seed, "synth", 0))?)
        }
        DataSource::File => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| CpbError::Config("source = file requires a path".into()))?;
            let file = std::fs::File::open(path)?;
            let reader = BufReader::new(file);
            match cfg.format {
                FileFormat::Dshield => {
                    let (events, stats) =
                        crate::ingest::parse_dshield_reader(reader, cfg.separator)?;
                    log::info!(
                        "ingested {} events ({} invalid, {} non-routable, {} malformed)",
                        stats.events,
                        stats.skipped_invalid,
                        stats.skipped_non_routable,
                        stats.malformed
                    );
                    Ok(events)
                }
                FileFormat::Canonical => Ok(read_canonical(reader)?),
            }
        }
    }
}

/// Runs the full experiment: ingestion plus [`run_experiment_on`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, CpbError> {
    cfg.validate()?;
    let events = load_events(cfg)?;
    run_experiment_on(cfg, &events)
}

/// Runs an experiment over already-loaded events (shared by sweeps).
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    events: &[AlertEvent],
) -> Result<ExperimentOutput, CpbError> {
    cfg.validate()?;
    let orgs: Vec<OrgId> = if cfg.selection_active() {
        let (lo, hi) = events
            .iter()
            .map(|e| e.day)
            .fold(None, |acc: Option<(DayIndex, DayIndex)>, d| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
            .ok_or(crate::ingest::IngestError::NoEvents)?;
        let rule = SelectionRule {
            top: cfg.select_top,
            drop_top: cfg.select_drop_top,
            drop_bottom: cfg.select_drop_bottom,
        };
        let mut picked = select_contributors(events, lo..=hi, rule)?;
        picked.sort();
        picked
    } else {
        let set: std::collections::BTreeSet<OrgId> =
            events.iter().map(|e| e.org.clone()).collect();
        set.into_iter().collect()
    };
    let org_set: std::collections::BTreeSet<&OrgId> = orgs.iter().collect();
    let filtered: Vec<AlertEvent> =
        events.iter().filter(|e| org_set.contains(&e.org)).cloned().collect();
    let windows = build_windows(&filtered, cfg.train_len, cfg.test_len)?;

    let per_window: Result<Vec<(Vec<ResultRow>, WindowStats)>, CpbError> = if cfg.privacy
        == PrivacyMode::Networked
    {
        // networked rounds bind real sockets; keep them sequential
        windows
            .iter()
            .enumerate()
            .map(|(idx, w)| process_window(cfg, &orgs, idx, w))
            .collect()
    } else {
        windows
            .par_iter()
            .enumerate()
            .map(|(idx, w)| process_window(cfg, &orgs, idx, w))
            .collect()
    };
    let per_window = per_window?;

    let summary = summarize(cfg, &per_window);
    let rows: Vec<ResultRow> = per_window.into_iter().flat_map(|(rows, _)| rows).collect();
    Ok(ExperimentOutput {
        orgs,
        windows: windows.len(),
        rows,
        summary,
        config_echo: ConfigEcho {
            strategy: cfg.strategy.label(),
            clustering: cfg.clustering.as_str().into(),
            k: cfg.k,
            threshold_pct: cfg.threshold_pct,
            alpha: cfg.alpha,
            tau: cfg.tau,
            count_mode: cfg.count_mode.as_str(),
            privacy: cfg.privacy.as_str(),
            seed: cfg.seed,
        },
    })
}

fn singleton_assignment(orgs: &[OrgId]) -> ClusterAssignment {
    ClusterAssignment::Partition {
        clusters: orgs.iter().map(|o| [o.clone()].into()).collect(),
        outliers: Default::default(),
    }
}

/// Collaboration structure of one window, for the summary columns.
#[derive(Debug, Clone, Copy, Default)]
struct WindowStats {
    avg_size: f64,
    collaborators: u64,
}

fn process_window(
    cfg: &ExperimentConfig,
    orgs: &[OrgId],
    w_idx: usize,
    window: &Window,
) -> Result<(Vec<ResultRow>, WindowStats), CpbError> {
    let datasets: BTreeMap<OrgId, OrgDataset> = orgs
        .iter()
        .map(|o| {
            let ds = window.train.get(o).cloned().unwrap_or_else(|| OrgDataset::new(o.clone()));
            (o.clone(), ds)
        })
        .collect();
    let cspec = ClusteringSpec {
        algo: cfg.clustering,
        k: cfg.k,
        threshold_pct: cfg.threshold_pct,
        seed: subseed(cfg.seed, "cluster", w_idx as u64),
    };

    let local_only =
        cfg.strategy.strategy == ShareStrategy::Local && cfg.privacy == PrivacyMode::PlaintextOracle;
    let (o2o, assignment) = if local_only {
        (o2o_plain(&datasets, cfg.count_mode), singleton_assignment(orgs))
    } else {
        match cfg.privacy {
            PrivacyMode::PlaintextOracle => {
                let o2o = o2o_plain(&datasets, cfg.count_mode);
                let assignment = cluster(&o2o, &cspec)
                    .map_err(|e| CpbError::Config(format!("window {w_idx}: {e}")))?;
                (o2o, assignment)
            }
            PrivacyMode::PrpSim => {
                let round = simulate_round(&datasets, &cspec, cfg.count_mode)
                    .map_err(|e| CpbError::Config(format!("window {w_idx}: {e}")))?;
                (round.o2o, round.assignment)
            }
            PrivacyMode::Networked => {
                let round =
                    run_networked_round(&datasets, &cspec, cfg.count_mode, cfg.round_timeout)?;
                (round.o2o, round.assignment)
            }
        }
    };

    let pools = share(
        &cfg.strategy,
        &assignment,
        &datasets,
        &o2o,
        &cfg.ip2ip_params(),
        &window.spec,
        cfg.count_mode,
    )
    .map_err(|e| CpbError::Config(format!("window {w_idx}: {e}")))?;

    let params = ForecastParams { alpha: cfg.alpha, tau: cfg.tau, mode: cfg.count_mode };
    let mut rows = Vec::with_capacity(orgs.len());
    for org in orgs {
        let train = &datasets[org];
        let base_pred = predict(train, None, &window.spec, &params)?;
        let pool = &pools[org];
        let pred = if pool.is_empty() {
            base_pred.clone()
        } else {
            predict(train, Some(pool), &window.spec, &params)?
        };
        let test = window.test_prefixes(org);
        let conf = confusion(&pred, &test);
        let baseline = confusion(&base_pred, &test);
        rows.push(ResultRow {
            org: org.clone(),
            window: w_idx,
            test_day: window.spec.test_day(),
            universe: pred.universe_len() as u64,
            pool_entries: pool.len() as u64,
            unreachable: unreachable_positives(&pred, &test),
            conf,
            baseline,
            report: derive(&conf, &baseline),
        });
    }

    let stats = window_stats(cfg, orgs, &assignment, &pools);
    Ok((rows, stats))
}

/// Collaborator counts follow the strategy's structure: cluster-scoped
/// strategies count assignment membership (an org in a shareable group
/// collaborates even if its pool happens to be empty); pair strategies
/// count orgs that actually received data; local counts nobody.
fn window_stats(
    cfg: &ExperimentConfig,
    orgs: &[OrgId],
    assignment: &ClusterAssignment,
    pools: &BTreeMap<OrgId, SharedPool>,
) -> WindowStats {
    match cfg.strategy.strategy {
        ShareStrategy::Local => WindowStats::default(),
        ShareStrategy::PairGlobal | ShareStrategy::PairLocal => {
            let active: Vec<&SharedPool> = pools.values().filter(|p| !p.is_empty()).collect();
            let collaborators = active.len() as u64;
            let avg_size = if active.is_empty() {
                0.0
            } else {
                let total: usize = active
                    .iter()
                    .map(|p| {
                        let sources: std::collections::BTreeSet<&OrgId> =
                            p.entries().map(|((_, _, src), _)| src).collect();
                        sources.len() + 1
                    })
                    .sum();
                total as f64 / active.len() as f64
            };
            WindowStats { avg_size, collaborators }
        }
        _ => WindowStats {
            avg_size: assignment.avg_group_size(),
            collaborators: assignment.collaborators(orgs) as u64,
        },
    }
}

fn summarize(cfg: &ExperimentConfig, per_window: &[(Vec<ResultRow>, WindowStats)]) -> SummaryRow {
    let reports: Vec<QualityReport> =
        per_window.iter().flat_map(|(rows, _)| rows).map(|r| r.report).collect();
    let agg = match cfg.aggregation {
        Aggregation::Pooled => aggregate(&reports),
        Aggregation::PerWindow => {
            let window_means: Vec<QualityReport> = per_window
                .iter()
                .map(|(rows, _)| {
                    let reports: Vec<QualityReport> = rows.iter().map(|r| r.report).collect();
                    let a = aggregate(&reports);
                    QualityReport {
                        tpr: a.tpr.map(|s| s.mean),
                        fpr: a.fpr.map(|s| s.mean),
                        ppv: a.ppv.map(|s| s.mean),
                        f1: a.f1.map(|s| s.mean),
                        tp_impr: a.tp_impr.map(|s| s.mean),
                        fp_incr: a.fp_incr.map(|s| s.mean),
                        fn_incr: a.fn_incr.map(|s| s.mean),
                    }
                })
                .collect();
            aggregate(&window_means)
        }
    };

    let collaborators: u64 = per_window.iter().map(|(_, s)| s.collaborators).sum();
    let sized: Vec<f64> = per_window
        .iter()
        .map(|(_, s)| s.avg_size)
        .filter(|&s| s > 0.0)
        .collect();
    let avg_size =
        if sized.is_empty() { 0.0 } else { sized.iter().sum::<f64>() / sized.len() as f64 };

    SummaryRow {
        clustering: cfg.clustering.as_str().into(),
        k: cfg.k,
        avg_size,
        collaborators,
        tpr: agg.tpr.map(|s| s.mean),
        ppv: agg.ppv.map(|s| s.mean),
        tp_impr: agg.tp_impr.map(|s| (s.mean, s.std)),
        fp_incr: agg.fp_incr.map(|s| (s.mean, s.std)),
        fn_incr: agg.fn_incr.map(|s| s.mean),
        f1: agg.f1.map(|s| s.mean),
    }
}

// ---------------------------------------------------------------------------
// Networked rounds over loopback
// ---------------------------------------------------------------------------

/// Outcome of one protocol round run over real sockets.
#[derive(Debug)]
pub struct NetworkedRound {
    pub o2o: SimilarityMatrix,
    pub assignment: ClusterAssignment,
    pub pools: BTreeMap<OrgId, SharedPool>,
    /// Concatenated bytes of every frame the STA received.
    pub sta_received: Vec<u8>,
    pub kappa: SharedKey,
}

/// Spins up an STA on an ephemeral loopback port, runs every org as a
/// client thread, and collects the round.
pub fn run_networked_round(
    datasets: &BTreeMap<OrgId, OrgDataset>,
    cspec: &ClusteringSpec,
    mode: CountMode,
    timeout: Duration,
) -> Result<NetworkedRound, CpbError> {
    let orgs: Vec<OrgId> = datasets.keys().cloned().collect();
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let sta_cfg = StaConfig {
        expected: orgs.clone(),
        clustering: *cspec,
        round: 0,
        timeout,
        transcript_path: None,
    };
    let sta = std::thread::spawn(move || serve_sta(listener, sta_cfg));

    let kappa = SharedKey::generate();
    let clients: Vec<_> = orgs
        .iter()
        .map(|org| {
            let mut cfg = OrgConfig::new(&addr, org.clone(), KeySource::Inline(kappa.clone()));
            cfg.mode = mode;
            cfg.result_timeout = timeout + Duration::from_secs(10);
            let ds = datasets[org].clone();
            std::thread::spawn(move || run_org(&cfg, &ds))
        })
        .collect();

    let mut pools = BTreeMap::new();
    for (org, client) in orgs.iter().zip(clients) {
        let outcome = client
            .join()
            .map_err(|_| CpbError::Config("org client thread panicked".into()))?;
        pools.insert(org.clone(), outcome.map_err(CpbError::from)?.pool);
    }
    let sta = sta.join().map_err(|_| CpbError::Config("sta thread panicked".into()))??;
    if let Some(reason) = sta.aborted {
        return Err(crate::net::NetError::Aborted(reason).into());
    }
    let received = sta.received_frames.concat();
    Ok(NetworkedRound {
        o2o: sta.o2o.expect("round completed"),
        assignment: sta.assignment.expect("round completed"),
        pools,
        sta_received: received,
        kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collab::ShareSpec;
    use crate::harness::ExperimentConfig;
    use crate::ingest::synth::SynthConfig;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SynthConfig {
            orgs: 9,
            days: 8,
            events_per_day: 90,
            unique_per_day: 30,
            planted_groups: 3,
            group_attackers: 10,
            ..SynthConfig::default()
        };
        cfg.clustering = crate::collab::ClusterAlgo::Agglomerative;
        cfg.k = 3;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn local_strategy_rows_have_exactly_zero_deltas() {
        let cfg = small_cfg(); // default strategy is local
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.windows, 3);
        assert_eq!(out.rows.len(), 9 * 3);
        for row in &out.rows {
            assert_eq!(row.conf, row.baseline);
            if row.baseline.tp > 0 {
                assert_eq!(row.report.tp_impr, Some(0.0));
            } else {
                assert_eq!(row.report.tp_impr, None);
            }
            if row.baseline.fp > 0 {
                assert_eq!(row.report.fp_incr, Some(0.0));
            }
        }
        assert_eq!(out.summary.collaborators, 0);
    }

    #[test]
    fn prp_sim_and_plaintext_modes_agree_row_for_row() {
        let mut plain = small_cfg();
        plain.strategy = ShareSpec::parse("intersection").unwrap();
        let mut sim = plain.clone();
        sim.privacy = PrivacyMode::PrpSim;

        let a = run_experiment(&plain).unwrap();
        let b = run_experiment(&sim).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!((ra.org.clone(), ra.window, ra.conf), (rb.org.clone(), rb.window, rb.conf));
            assert_eq!(ra.baseline, rb.baseline);
        }
        // only the echoed privacy column differs
        assert_eq!(
            a.results_csv().replace("plaintext-oracle", "prp-sim"),
            b.results_csv()
        );
    }

    #[test]
    fn runs_are_deterministic_given_config_and_seed() {
        let mut cfg = small_cfg();
        cfg.strategy = ShareSpec::parse("global").unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.results_csv(), b.results_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
    }

    #[test]
    fn strategy_run_baselines_equal_a_local_run() {
        let local = small_cfg();
        let mut inter = small_cfg();
        inter.strategy = ShareSpec::parse("intersection").unwrap();
        let a = run_experiment(&local).unwrap();
        let b = run_experiment(&inter).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!((&ra.org, ra.window), (&rb.org, rb.window));
            assert_eq!(ra.conf, rb.baseline, "baseline drifted for {}", ra.org);
        }
    }

    #[test]
    fn summary_csv_carries_the_table_shape() {
        let mut cfg = small_cfg();
        cfg.strategy = ShareSpec::parse("intersection").unwrap();
        let out = run_experiment(&cfg).unwrap();
        let csv = out.summary_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "clustering,k,avg_size,collaborators,tpr,ppv,tp_impr,tp_impr_std,fp_incr,fp_incr_std,fn_incr,f1"
        );
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), SummaryRow::COLUMNS.len());
        assert!(row.starts_with("agglomerative,3,"));
    }
}
