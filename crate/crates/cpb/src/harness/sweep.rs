//! Parameter-grid sweeps: clusterings x strategies x k values over a
//! shared ingestion pass. Cell failures are recorded and the sweep
//! continues.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{run_experiment_on, CpbError, ExperimentConfig, PrivacyMode, SummaryRow};
use crate::collab::{ClusterAlgo, ShareSpec};

/// A sweep is a base experiment plus axes to vary.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub k_values: Vec<usize>,
    pub strategies: Vec<ShareSpec>,
    pub clusterings: Vec<ClusterAlgo>,
}

impl SweepConfig {
    /// Parses the sweep axes from the same flat format, with the remaining
    /// keys forming the base experiment. Axis keys: `sweep_k`,
    /// `sweep_strategies`, `sweep_clusterings` (comma-separated).
    pub fn parse(text: &str) -> Result<Self, CpbError> {
        let mut base_lines = Vec::new();
        let mut k_values = Vec::new();
        let mut strategies = Vec::new();
        let mut clusterings = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            let bad = |msg: String| CpbError::Config(format!("line {}: {msg}", idx + 1));
            match content.split_once('=') {
                Some((key, value)) if key.trim() == "sweep_k" => {
                    for item in value.split(',') {
                        k_values.push(
                            item.trim()
                                .parse()
                                .map_err(|_| bad(format!("bad k {item:?}")))?,
                        );
                    }
                }
                Some((key, value)) if key.trim() == "sweep_strategies" => {
                    for item in value.split(',') {
                        strategies
                            .push(ShareSpec::parse(item.trim()).map_err(|e| bad(e.to_string()))?);
                    }
                }
                Some((key, value)) if key.trim() == "sweep_clusterings" => {
                    for item in value.split(',') {
                        clusterings
                            .push(item.trim().parse().map_err(|_| bad(format!("bad clustering {item:?}")))?);
                    }
                }
                _ => base_lines.push(raw),
            }
        }
        let base = ExperimentConfig::parse(&base_lines.join("\n"))?;
        let or_default = |list: Vec<usize>, d: usize| if list.is_empty() { vec![d] } else { list };
        Ok(SweepConfig {
            k_values: or_default(k_values, base.k),
            strategies: if strategies.is_empty() {
                vec![base.strategy.clone()]
            } else {
                strategies
            },
            clusterings: if clusterings.is_empty() { vec![base.clustering] } else { clusterings },
            base,
        })
    }

    pub fn cells(&self) -> usize {
        self.k_values.len() * self.strategies.len() * self.clusterings.len()
    }
}

/// One grid cell's outcome: its summary, or the error that stopped it.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub clustering: ClusterAlgo,
    pub strategy: String,
    pub k: usize,
    /// k at or above the org count degenerates to singleton clusters.
    pub degenerate: bool,
    pub summary: Result<SummaryRow, String>,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
}

impl SweepOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clustering,strategy,k,degenerate,status,");
        out.push_str(&SummaryRow::COLUMNS[2..].join(","));
        out.push('\n');
        for cell in &self.cells {
            match &cell.summary {
                Ok(s) => {
                    let full = s.csv_row();
                    // drop the leading clustering,k echo; the cell carries them
                    let tail: Vec<&str> = full.splitn(3, ',').collect();
                    let _ = writeln!(
                        out,
                        "{},{},{},{},ok,{}",
                        cell.clustering.as_str(),
                        cell.strategy,
                        cell.k,
                        u8::from(cell.degenerate),
                        tail[2],
                    );
                }
                Err(msg) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},error: {},{}",
                        cell.clustering.as_str(),
                        cell.strategy,
                        cell.k,
                        u8::from(cell.degenerate),
                        msg.replace(',', ";"),
                        ",".repeat(SummaryRow::COLUMNS.len() - 3),
                    );
                }
            }
        }
        out
    }
}

/// Runs every cell of the grid over one shared ingestion pass.
pub fn sweep(cfg: &SweepConfig) -> Result<SweepOutput, CpbError> {
    cfg.base.validate()?;
    let events = super::load_events(&cfg.base)?;

    let mut grid: Vec<(ClusterAlgo, ShareSpec, usize)> = Vec::with_capacity(cfg.cells());
    for &clustering in &cfg.clusterings {
        for strategy in &cfg.strategies {
            for &k in &cfg.k_values {
                grid.push((clustering, strategy.clone(), k));
            }
        }
    }

    let org_count = {
        let set: std::collections::BTreeSet<&crate::ingest::OrgId> =
            events.iter().map(|e| &e.org).collect();
        set.len()
    };

    let run_cell = |(clustering, strategy, k): &(ClusterAlgo, ShareSpec, usize)| {
        let mut cell_cfg = cfg.base.clone();
        cell_cfg.clustering = *clustering;
        cell_cfg.strategy = strategy.clone();
        cell_cfg.k = *k;
        let summary = run_experiment_on(&cell_cfg, &events)
            .map(|out| out.summary)
            .map_err(|e| e.to_string());
        SweepCell {
            clustering: *clustering,
            strategy: strategy.label(),
            k: *k,
            degenerate: *k >= org_count,
            summary,
        }
    };

    let cells: Vec<SweepCell> = if cfg.base.privacy == PrivacyMode::Networked {
        grid.iter().map(run_cell).collect()
    } else {
        grid.par_iter().map(run_cell).collect()
    };
    Ok(SweepOutput { cells })
}
