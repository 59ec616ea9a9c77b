//! Confusion counting and derived prediction-quality metrics.
//!
//! Counting is restricted to the candidate universe: a test-day attacker
//! that neither list could have contained is invisible to the confusion
//! matrix and is tracked separately as an unreachable positive, so recall
//! ceilings stay explicit. Ratios with a zero denominator are flagged as
//! undefined (`None`) and excluded from aggregates -- never silently
//! zeroed.

use std::collections::BTreeSet;

use crate::forecast::PredictionList;
use crate::ingest::Prefix24;

/// Confusion counts for one `(org, window)` prediction.
///
/// `tp + fp = |blacklist|` and `fn_ + tn = |whitelist|` always hold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Counts hits and misses of a prediction against the test-day attacker
/// set for the same org.
pub fn confusion(pred: &PredictionList, test: &BTreeSet<Prefix24>) -> Confusion {
    let mut c = Confusion::default();
    for p in &pred.blacklist {
        if test.contains(p) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for p in &pred.whitelist {
        if test.contains(p) {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

/// Test-day attackers outside the candidate universe; they can be neither
/// predicted nor whitelisted, so they appear in no confusion cell.
pub fn unreachable_positives(pred: &PredictionList, test: &BTreeSet<Prefix24>) -> u64 {
    test.iter().filter(|p| !pred.scores.contains_key(p)).count() as u64
}

/// Rates and deltas for one confusion versus the local baseline.
/// `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QualityReport {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
    pub tp_impr: Option<f64>,
    pub fp_incr: Option<f64>,
    pub fn_incr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn delta(after: u64, before: u64) -> Option<f64> {
    (before > 0).then(|| (after as f64 - before as f64) / before as f64)
}

/// Derives all quality metrics for `conf`, with deltas relative to
/// `baseline` (the same org/window with no sharing).
///
/// F1 is computed as `2tp / (2tp + fp + fn)`, which agrees with the
/// harmonic mean of precision and recall whenever that is defined and
/// extends it with F1 = 0 when tp = 0.
pub fn derive(conf: &Confusion, baseline: &Confusion) -> QualityReport {
    QualityReport {
        tpr: ratio(conf.tp, conf.tp + conf.fn_),
        fpr: ratio(conf.fp, conf.fp + conf.tn),
        ppv: ratio(conf.tp, conf.tp + conf.fp),
        f1: ratio(2 * conf.tp, 2 * conf.tp + conf.fp + conf.fn_),
        tp_impr: delta(conf.tp, baseline.tp),
        fp_incr: delta(conf.fp, baseline.fp),
        fn_incr: delta(conf.fn_, baseline.fn_),
    }
}

/// Mean and population standard deviation over the defined values of one
/// metric, plus how many undefined entries were excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub defined: usize,
    pub excluded: usize,
}

/// Per-metric summaries over a set of reports. A metric that is undefined
/// everywhere is reported as absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateSummary {
    pub tpr: Option<MetricSummary>,
    pub fpr: Option<MetricSummary>,
    pub ppv: Option<MetricSummary>,
    pub f1: Option<MetricSummary>,
    pub tp_impr: Option<MetricSummary>,
    pub fp_incr: Option<MetricSummary>,
    pub fn_incr: Option<MetricSummary>,
}

/// Sorting before summation makes the result independent of report order.
fn summarize(values: Vec<f64>, excluded: usize) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let mut values = values;
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / n;
    Some(MetricSummary { mean, std: var.sqrt(), defined: values.len(), excluded })
}

/// Aggregates reports across organizations and windows. Each metric is
/// averaged over its defined values only.
pub fn aggregate(reports: &[QualityReport]) -> AggregateSummary {
    fn collect(
        reports: &[QualityReport],
        pick: impl Fn(&QualityReport) -> Option<f64>,
    ) -> Option<MetricSummary> {
        let values: Vec<f64> = reports.iter().filter_map(&pick).collect();
        let excluded = reports.len() - values.len();
        summarize(values, excluded)
    }
    AggregateSummary {
        tpr: collect(reports, |r| r.tpr),
        fpr: collect(reports, |r| r.fpr),
        ppv: collect(reports, |r| r.ppv),
        f1: collect(reports, |r| r.f1),
        tp_impr: collect(reports, |r| r.tp_impr),
        fp_incr: collect(reports, |r| r.fp_incr),
        fn_incr: collect(reports, |r| r.fn_incr),
    }
}
