//! Experiment orchestration: configuration, end-to-end runs, parameter
//! sweeps, protocol benchmarks, and CSV emission.

use std::path::PathBuf;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collab::{ClusterAlgo, CollabError, Ip2IpParams, ShareSpec};
use crate::forecast::ForecastError;
use crate::ingest::synth::SynthConfig;
use crate::ingest::{CountMode, IngestError, Separator};
use crate::net::NetError;
use crate::privacy::PrivacyError;

mod bench;
mod experiment;
mod sweep;

pub use bench::{bench_protocol, BenchConfig, BenchReport, BenchRow};
pub use experiment::{
    load_events, run_experiment, run_experiment_on, run_networked_round, ExperimentOutput,
    NetworkedRound, ResultRow, SummaryRow,
};
pub use sweep::{sweep, SweepCell, SweepConfig, SweepOutput};

/// Process exit codes of the `cpb` binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 1,
    Data = 2,
    Protocol = 3,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Umbrella error: everything the harness and CLI can fail with, each
/// mapped to its exit code class.
#[derive(Debug, Error)]
pub enum CpbError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CpbError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CpbError::Config(_) | CpbError::Forecast(_) | CpbError::Collab(_) => ExitCode::Config,
            CpbError::Ingest(_) | CpbError::Io(_) => ExitCode::Data,
            CpbError::Privacy(_) | CpbError::Net(_) => ExitCode::Protocol,
        }
    }
}

/// Deterministic fan-out from one master seed to named sub-seeds, so the
/// synthesizer, clustering, and any future consumer draw from independent
/// streams. Nonces stay cryptographically random and are excluded from
/// determinism claims.
pub fn subseed(master: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_be_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_be_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Dshield,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContributorRule {
    /// File sources select, synthetic sources keep everyone.
    Auto,
    All,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivacyMode {
    /// O2O straight from plaintext datasets (testing oracle).
    PlaintextOracle,
    /// Full PRP protocol, in process.
    PrpSim,
    /// Full PRP protocol over loopback TCP.
    Networked,
}

impl PrivacyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyMode::PlaintextOracle => "plaintext-oracle",
            PrivacyMode::PrpSim => "prp-sim",
            PrivacyMode::Networked => "networked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean over all (org, window) rows at once.
    Pooled,
    /// Mean within each window first, then across windows.
    PerWindow,
}

/// One experiment, fully specified. Parses from and serializes to a flat
/// `key = value` text format, losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub format: FileFormat,
    pub separator: Separator,
    pub contributors: ContributorRule,
    pub select_top: usize,
    pub select_drop_top: usize,
    pub select_drop_bottom: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub alpha: f64,
    pub tau: f64,
    pub strategy: ShareSpec,
    pub clustering: ClusterAlgo,
    pub k: usize,
    pub threshold_pct: f64,
    pub heavy_hitters: usize,
    pub k_rec: usize,
    pub count_mode: CountMode,
    pub privacy: PrivacyMode,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Barrier timeout used by networked rounds.
    pub round_timeout: Duration,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synth,
            path: None,
            format: FileFormat::Dshield,
            separator: Separator::Tab,
            contributors: ContributorRule::Auto,
            select_top: 100,
            select_drop_top: 10,
            select_drop_bottom: 20,
            train_len: 5,
            test_len: 1,
            alpha: 0.9,
            tau: 0.5,
            strategy: ShareSpec::default(),
            clustering: ClusterAlgo::KMeans,
            k: 5,
            threshold_pct: 40.0,
            heavy_hitters: 1000,
            k_rec: 50,
            count_mode: CountMode::Presence,
            privacy: PrivacyMode::PlaintextOracle,
            aggregation: Aggregation::Pooled,
            seed: 42,
            synth: SynthConfig::default(),
            round_timeout: Duration::from_secs(60),
        }
    }
}

impl ExperimentConfig {
    pub fn ip2ip_params(&self) -> Ip2IpParams {
        Ip2IpParams { heavy_hitters: self.heavy_hitters, k_rec: self.k_rec }
    }

    /// Whether contributor selection applies, after resolving `auto`.
    pub fn selection_active(&self) -> bool {
        match self.contributors {
            ContributorRule::All => false,
            ContributorRule::Selected => true,
            ContributorRule::Auto => self.source == DataSource::File,
        }
    }

    pub fn validate(&self) -> Result<(), CpbError> {
        let fail = |msg: String| Err(CpbError::Config(msg));
        if self.source == DataSource::File && self.path.is_none() {
            return fail("source = file requires a path".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(0.0..=100.0).contains(&self.threshold_pct) {
            return fail(format!("threshold_pct must lie in [0, 100], got {}", self.threshold_pct));
        }
        if self.train_len == 0 || self.test_len != 1 {
            return fail(format!(
                "train_len must be positive and test_len must be 1, got {}+{}",
                self.train_len, self.test_len
            ));
        }
        if self.k == 0 {
            return fail("k must be positive".into());
        }
        if self.heavy_hitters == 0 || self.k_rec == 0 {
            return fail("heavy_hitters and k_rec must be positive".into());
        }
        if self.source == DataSource::Synth {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. `#` starts a comment; unknown
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self, CpbError> {
        let mut cfg = ExperimentConfig::default();
        let bad = |line: usize, msg: String| CpbError::Config(format!("line {line}: {msg}"));
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value).map_err(|msg| bad(line, msg))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "source" => {
                self.source = match value {
                    "synth" => DataSource::Synth,
                    "file" => DataSource::File,
                    _ => return Err(format!("unknown source {value:?}")),
                }
            }
            "path" => self.path = Some(PathBuf::from(value)),
            "format" => {
                self.format = match value {
                    "dshield" => FileFormat::Dshield,
                    "canonical" => FileFormat::Canonical,
                    _ => return Err(format!("unknown format {value:?}")),
                }
            }
            "separator" => self.separator = value.parse()?,
            "contributors" => {
                self.contributors = match value {
                    "auto" => ContributorRule::Auto,
                    "all" => ContributorRule::All,
                    "selected" => ContributorRule::Selected,
                    _ => return Err(format!("unknown contributors rule {value:?}")),
                }
            }
            "select_top" => self.select_top = num(key, value)?,
            "select_drop_top" => self.select_drop_top = num(key, value)?,
            "select_drop_bottom" => self.select_drop_bottom = num(key, value)?,
            "train_len" => self.train_len = num(key, value)?,
            "test_len" => self.test_len = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "strategy" => self.strategy = ShareSpec::parse(value).map_err(|e| e.to_string())?,
            "clustering" => self.clustering = value.parse().map_err(|e: CollabError| e.to_string())?,
            "k" => self.k = num(key, value)?,
            "threshold_pct" => self.threshold_pct = num(key, value)?,
            "heavy_hitters" => self.heavy_hitters = num(key, value)?,
            "k_rec" => self.k_rec = num(key, value)?,
            "count_mode" => self.count_mode = value.parse()?,
            "privacy" => {
                self.privacy = match value {
                    "plaintext-oracle" => PrivacyMode::PlaintextOracle,
                    "prp-sim" => PrivacyMode::PrpSim,
                    "networked" => PrivacyMode::Networked,
                    _ => return Err(format!("unknown privacy mode {value:?}")),
                }
            }
            "aggregation" => {
                self.aggregation = match value {
                    "pooled" => Aggregation::Pooled,
                    "per-window" => Aggregation::PerWindow,
                    _ => return Err(format!("unknown aggregation {value:?}")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "round_timeout_secs" => self.round_timeout = Duration::from_secs(num(key, value)?),
            "orgs" => self.synth.orgs = num(key, value)?,
            "days" => self.synth.days = num(key, value)?,
            "events_per_day" => self.synth.events_per_day = num(key, value)?,
            "unique_per_day" => self.synth.unique_per_day = num(key, value)?,
            "planted_groups" => self.synth.planted_groups = num(key, value)?,
            "group_attackers" => self.synth.group_attackers = num(key, value)?,
            "hit_rate" => self.synth.hit_rate = num(key, value)?,
            "burst_period" => self.synth.burst_period = num(key, value)?,
            "noise_rate" => self.synth.noise_rate = num(key, value)?,
            "start_day" => self.synth.start_day = num(key, value)?,
            "global_pool" => self.synth.global_pool = num(key, value)?,
            "private_pool" => self.synth.private_pool = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Serializes back to the flat format, one key per line, every field
    /// explicit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv(
            "source",
            match self.source {
                DataSource::Synth => "synth".into(),
                DataSource::File => "file".into(),
            },
        );
        if let Some(path) = &self.path {
            kv("path", path.display().to_string());
        }
        kv(
            "format",
            match self.format {
                FileFormat::Dshield => "dshield".into(),
                FileFormat::Canonical => "canonical".into(),
            },
        );
        kv("separator", self.separator.as_str().into());
        kv(
            "contributors",
            match self.contributors {
                ContributorRule::Auto => "auto".into(),
                ContributorRule::All => "all".into(),
                ContributorRule::Selected => "selected".into(),
            },
        );
        kv("select_top", self.select_top.to_string());
        kv("select_drop_top", self.select_drop_top.to_string());
        kv("select_drop_bottom", self.select_drop_bottom.to_string());
        kv("train_len", self.train_len.to_string());
        kv("test_len", self.test_len.to_string());
        kv("alpha", self.alpha.to_string());
        kv("tau", self.tau.to_string());
        kv("strategy", self.strategy.label());
        kv("clustering", self.clustering.as_str().into());
        kv("k", self.k.to_string());
        kv("threshold_pct", self.threshold_pct.to_string());
        kv("heavy_hitters", self.heavy_hitters.to_string());
        kv("k_rec", self.k_rec.to_string());
        kv("count_mode", self.count_mode.as_str().into());
        kv("privacy", self.privacy.as_str().into());
        kv(
            "aggregation",
            match self.aggregation {
                Aggregation::Pooled => "pooled".into(),
                Aggregation::PerWindow => "per-window".into(),
            },
        );
        kv("seed", self.seed.to_string());
        kv("round_timeout_secs", self.round_timeout.as_secs().to_string());
        kv("orgs", self.synth.orgs.to_string());
        kv("days", self.synth.days.to_string());
        kv("events_per_day", self.synth.events_per_day.to_string());
        kv("unique_per_day", self.synth.unique_per_day.to_string());
        kv("planted_groups", self.synth.planted_groups.to_string());
        kv("group_attackers", self.synth.group_attackers.to_string());
        kv("hit_rate", self.synth.hit_rate.to_string());
        kv("burst_period", self.synth.burst_period.to_string());
        kv("noise_rate", self.synth.noise_rate.to_string());
        kv("start_day", self.synth.start_day.to_string());
        kv("global_pool", self.synth.global_pool.to_string());
        kv("private_pool", self.synth.private_pool.to_string());
        out
    }
}
