//! EWMA scoring and predictive blacklist construction.
//!
//! For each candidate attacker prefix the training window yields a daily
//! signal; the exponentially weighted moving average of that signal is the
//! predicted activity for the test day. Prefixes scoring at or above the
//! threshold form the blacklist, the rest of the candidate universe forms
//! the whitelist.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collab::SharedPool;
use crate::ingest::{CountMode, OrgDataset, OrgId, Prefix24, WindowSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    Alpha(f64),
    #[error("signal must be non-empty")]
    EmptySignal,
    #[error("shared entry for day {day} lies outside the training window")]
    SharedDayOutOfWindow { day: u16 },
}

/// Smoothing weight, threshold, and multiplicity semantics for prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastParams {
    pub alpha: f64,
    pub tau: f64,
    pub mode: CountMode,
}

impl Default for ForecastParams {
    fn default() -> Self {
        ForecastParams { alpha: 0.9, tau: 0.5, mode: CountMode::Presence }
    }
}

/// EWMA of a signal `r(1..=t)`:
///
/// ```text
/// score = sum over t' of alpha * (1 - alpha)^(t - t') * r(t')
/// ```
///
/// Later observations weigh more. For 0/1 signals the score lies in
/// `[0, 1 - (1-alpha)^t]`.
pub fn ewma_score(signal: &[f64], alpha: f64) -> Result<f64, ForecastError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ForecastError::Alpha(alpha));
    }
    if signal.is_empty() {
        return Err(ForecastError::EmptySignal);
    }
    let t = signal.len();
    let mut score = 0.0;
    for (i, &r) in signal.iter().enumerate() {
        score += alpha * (1.0 - alpha).powi((t - 1 - i) as i32) * r;
    }
    Ok(score)
}

/// Predictive blacklist/whitelist for one `(org, window)` pair.
///
/// The two lists partition the candidate universe (every prefix observed
/// locally or via sharing during the training window), and `scores` is
/// defined exactly on that universe.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionList {
    pub org: OrgId,
    pub window: WindowSpec,
    pub blacklist: std::collections::BTreeSet<Prefix24>,
    pub whitelist: std::collections::BTreeSet<Prefix24>,
    pub scores: BTreeMap<Prefix24, f64>,
}

impl PredictionList {
    pub fn universe_len(&self) -> usize {
        self.scores.len()
    }
}

/// Scores every candidate prefix and splits the universe at `tau`.
///
/// Local and shared observations merge per day: logical OR in presence
/// mode, sum in raw-count mode. A shared alert is evidence that the prefix
/// was active that day, not an extra local hit, so sharing the exact
/// elements an organization already holds changes nothing in presence
/// mode.
pub fn predict(
    train: &OrgDataset,
    shared: Option<&SharedPool>,
    window: &WindowSpec,
    params: &ForecastParams,
) -> Result<PredictionList, ForecastError> {
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(ForecastError::Alpha(params.alpha));
    }
    let len = window.train_len();
    let mut signals: BTreeMap<Prefix24, Vec<f64>> = BTreeMap::new();

    for (&(prefix, day), &raw) in train.elements() {
        let Some(pos) = window.train_position(day) else { continue };
        let sig = signals.entry(prefix).or_insert_with(|| vec![0.0; len]);
        match params.mode {
            CountMode::Presence => sig[pos] = 1.0,
            CountMode::Raw => sig[pos] += raw as f64,
        }
    }
    if let Some(pool) = shared {
        for ((prefix, day, _source), count) in pool.entries() {
            let pos = window
                .train_position(*day)
                .ok_or(ForecastError::SharedDayOutOfWindow { day: *day })?;
            let sig = signals.entry(*prefix).or_insert_with(|| vec![0.0; len]);
            match params.mode {
                CountMode::Presence => sig[pos] = 1.0,
                CountMode::Raw => sig[pos] += *count as f64,
            }
        }
    }

    let mut out = PredictionList {
        org: train.org().clone(),
        window: window.clone(),
        blacklist: Default::default(),
        whitelist: Default::default(),
        scores: BTreeMap::new(),
    };
    for (prefix, sig) in signals {
        let score = ewma_score(&sig, params.alpha)?;
        if score >= params.tau {
            out.blacklist.insert(prefix);
        } else {
            out.whitelist.insert(prefix);
        }
        out.scores.insert(prefix, score);
    }
    Ok(out)
}
