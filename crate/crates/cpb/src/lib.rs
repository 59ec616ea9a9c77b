//! Collaborative predictive blacklisting (CPB).
//!
//! Organizations that volunteer firewall alerts can forecast tomorrow's
//! attackers better together than alone, but sharing raw logs leaks
//! sensitive information. This crate implements a full CPB pipeline built
//! around a semi-trusted authority (STA) that clusters organizations by the
//! similarity of their alert sets *without seeing the alerts*:
//!
//! * [`ingest`] — DShield-style log parsing, /24 aggregation, contributor
//!   selection, sliding train/test windows, and a synthetic log generator
//!   with planted cross-victim correlations for ground-truth experiments.
//! * [`forecast`] — per-(organization, prefix) EWMA scoring and predictive
//!   blacklist/whitelist construction from local plus shared alerts.
//! * [`metrics`] — confusion counting against the test day, TPR/FPR/PPV/F1,
//!   and deltas versus the no-collaboration baseline.
//! * [`collab`] — the organization-to-organization (O2O) similarity matrix,
//!   k-means / k-NN / agglomerative clustering with outlier thresholds, and
//!   the data-sharing strategies (local, global, intersection, IP2IP, ...).
//! * [`privacy`] — the server-aided PRP protocol: organizations upload
//!   pseudo-random permutations of their alert multisets plus per-element
//!   ciphertexts; the STA computes intersection cardinalities and routes
//!   matching ciphertexts without learning any plaintext.
//! * [`net`] — a length-prefixed TCP wire protocol, the STA coordinator
//!   service, and the organization client.
//! * [`harness`] — experiment configuration, end-to-end runs, parameter
//!   sweeps, protocol benchmarks, and CSV emission.
//!
//! The `cpb` binary exposes all of it as subcommands; see the README.

pub mod collab;
pub mod forecast;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod net;
pub mod privacy;

pub use harness::{CpbError, ExitCode};
pub use ingest::{AlertEvent, CountMode, DayIndex, OrgDataset, OrgId, Prefix24, WindowSpec};
