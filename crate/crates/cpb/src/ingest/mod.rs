//! Log ingestion: DShield-format parsing, /24 aggregation, contributor
//! selection, and sliding train/test windows.
//!
//! Every alert is reduced to the attacker's /24 prefix and the UTC day it
//! was reported. Days are the canonical time unit of the whole pipeline;
//! sub-day resolution is parsed and then dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::sync::Arc;

use chrono::NaiveDate;
use thiserror::Error;

pub mod synth;

/// Days since 1970-01-01 (UTC). Two bytes is enough until 2149 and keeps
/// the protocol element encoding compact.
pub type DayIndex = u16;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).unwrap()
}

/// Day index of a calendar date, if it fits the two-byte range.
pub fn day_index_of(date: NaiveDate) -> Option<DayIndex> {
    let days = date.signed_duration_since(epoch()).num_days();
    u16::try_from(days).ok()
}

/// Calendar date of a day index.
pub fn date_of(day: DayIndex) -> NaiveDate {
    epoch() + chrono::Duration::days(i64::from(day))
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {err}")]
    Line { line: u64, err: LineError },
    #[error("too few qualifying contributors: found {found}, need at least {need}")]
    TooFewContributors { found: usize, need: usize },
    #[error("no events to window")]
    NoEvents,
    #[error("date range of {days} days cannot fit a {train}+{test} day window")]
    WindowTooShort { days: usize, train: usize, test: usize },
    #[error("unsupported test window length {0}: test windows are a single day")]
    TestLen(usize),
    #[error("invalid synthesis config: {0}")]
    SynthConfig(String),
    #[error("organization id {0:?} cannot be written to the canonical format")]
    UnwritableOrgId(String),
}

/// Per-line parse failures that the caller counts and moves past.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LineError {
    #[error("expected at least 5 fields, found {0}")]
    FieldCount(usize),
    #[error("unparsable timestamp {0:?}")]
    BadTimestamp(String),
    #[error("timestamp day outside the supported range: {0}")]
    DayOutOfRange(String),
}

// ---------------------------------------------------------------------------
// Core domain types
// ---------------------------------------------------------------------------

/// A /24 IPv4 network prefix, stored as the upper 24 address bits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix24(u32);

impl Prefix24 {
    /// Builds a prefix from a raw 24-bit value. `None` if out of range.
    pub fn from_value(value: u32) -> Option<Self> {
        (value < 1 << 24).then_some(Prefix24(value))
    }

    /// The /24 of a full IPv4 address given as four octets.
    pub fn of_octets(o: [u8; 4]) -> Self {
        Prefix24(u32::from(o[0]) << 16 | u32::from(o[1]) << 8 | u32::from(o[2]))
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// The three prefix octets, most significant first.
    pub fn octets(self) -> [u8; 3] {
        [(self.0 >> 16) as u8, (self.0 >> 8) as u8, self.0 as u8]
    }

    /// Whether the /24 lies in publicly routable space.
    ///
    /// Rejected: 0.0.0.0/8, RFC1918 (10/8, 172.16/12, 192.168/16),
    /// loopback (127/8), link-local (169.254/16), and everything from
    /// 224.0.0.0 up (multicast and reserved).
    pub fn is_routable(self) -> bool {
        let [a, b, _] = self.octets();
        !(a == 0
            || a == 10
            || a == 127
            || a >= 224
            || (a == 169 && b == 254)
            || (a == 172 && (16..32).contains(&b))
            || (a == 192 && b == 168))
    }
}

impl fmt::Display for Prefix24 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.octets();
        write!(f, "{a}.{b}.{c}.0")
    }
}

impl fmt::Debug for Prefix24 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Prefix24({self})")
    }
}

/// Organization identifier. Cheap to clone; ordered lexicographically.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrgId(Arc<str>);

impl OrgId {
    pub fn new(id: &str) -> Self {
        OrgId(Arc::from(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for OrgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for OrgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OrgId({})", self.0)
    }
}

impl From<&str> for OrgId {
    fn from(s: &str) -> Self {
        OrgId::new(s)
    }
}

/// One parsed alert: `org` was attacked from somewhere inside `attacker`
/// on day `day`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlertEvent {
    pub org: OrgId,
    pub attacker: Prefix24,
    pub day: DayIndex,
}

/// How multiplicities are interpreted throughout the pipeline.
///
/// The element universe is always `(prefix, day)`. In `Presence` mode
/// (the default) every observed element counts once, so a prefix
/// contributes as many units as the number of days it was seen. `Raw`
/// keeps the per-day event counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountMode {
    #[default]
    Presence,
    Raw,
}

impl CountMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMode::Presence => "presence",
            CountMode::Raw => "raw",
        }
    }
}

impl std::str::FromStr for CountMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "presence" => Ok(CountMode::Presence),
            "raw" => Ok(CountMode::Raw),
            other => Err(format!("unknown count mode {other:?}")),
        }
    }
}

/// One organization's alert multiset over `(prefix, day)` elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrgDataset {
    org: OrgId,
    elements: BTreeMap<(Prefix24, DayIndex), u64>,
}

impl OrgDataset {
    pub fn new(org: OrgId) -> Self {
        OrgDataset { org, elements: BTreeMap::new() }
    }

    pub fn from_elements<I>(org: OrgId, elements: I) -> Self
    where
        I: IntoIterator<Item = ((Prefix24, DayIndex), u64)>,
    {
        let mut d = OrgDataset::new(org);
        for ((p, day), n) in elements {
            d.record(p, day, n);
        }
        d
    }

    pub fn org(&self) -> &OrgId {
        &self.org
    }

    /// Adds `n` raw events of `prefix` on `day`.
    pub fn record(&mut self, prefix: Prefix24, day: DayIndex, n: u64) {
        if n == 0 {
            return;
        }
        *self.elements.entry((prefix, day)).or_insert(0) += n;
    }

    /// Distinct `(prefix, day)` elements, in sorted order.
    pub fn elements(&self) -> impl Iterator<Item = (&(Prefix24, DayIndex), &u64)> {
        self.elements.iter()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Raw event count of an element (0 when absent).
    pub fn raw_count(&self, prefix: Prefix24, day: DayIndex) -> u64 {
        self.elements.get(&(prefix, day)).copied().unwrap_or(0)
    }

    /// Mode-adjusted multiplicity of an element.
    pub fn effective_count(&self, prefix: Prefix24, day: DayIndex, mode: CountMode) -> u64 {
        match mode {
            CountMode::Presence => u64::from(self.raw_count(prefix, day) > 0),
            CountMode::Raw => self.raw_count(prefix, day),
        }
    }

    /// Iterates `(element, effective multiplicity)` under `mode`.
    pub fn effective(
        &self,
        mode: CountMode,
    ) -> impl Iterator<Item = ((Prefix24, DayIndex), u64)> + '_ {
        self.elements.iter().map(move |(&e, &n)| match mode {
            CountMode::Presence => (e, 1),
            CountMode::Raw => (e, n),
        })
    }

    /// Multiset cardinality under `mode`; this is |D_i|.
    pub fn multiset_size(&self, mode: CountMode) -> u64 {
        match mode {
            CountMode::Presence => self.elements.len() as u64,
            CountMode::Raw => self.elements.values().sum(),
        }
    }

    /// Distinct attacker prefixes, any day.
    pub fn prefix_set(&self) -> BTreeSet<Prefix24> {
        self.elements.keys().map(|&(p, _)| p).collect()
    }

    pub fn contains_prefix(&self, prefix: Prefix24) -> bool {
        self.elements
            .range((prefix, DayIndex::MIN)..=(prefix, DayIndex::MAX))
            .next()
            .is_some()
    }
}

// ---------------------------------------------------------------------------
// DShield-format parsing
// ---------------------------------------------------------------------------

/// Field separator of the input logs. Fields are trimmed after splitting,
/// so both `\t` and `", "` styles parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Separator {
    #[default]
    Tab,
    Comma,
}

impl Separator {
    pub fn ch(self) -> char {
        match self {
            Separator::Tab => '\t',
            Separator::Comma => ',',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Separator::Tab => "tab",
            Separator::Comma => "comma",
        }
    }
}

impl std::str::FromStr for Separator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tab" | "\t" => Ok(Separator::Tab),
            "comma" | "," => Ok(Separator::Comma),
            other => Err(format!("unknown separator {other:?}")),
        }
    }
}

/// Why a syntactically well-formed line produced no event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// Source address not a valid dotted quad.
    InvalidAddress,
    /// Valid address inside non-routable space.
    NonRoutable,
}

/// Outcome of parsing one log line.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedLine {
    Event(AlertEvent),
    Skipped(SkipReason),
}

/// Octet parser that tolerates DShield's zero-padded notation ("059").
fn parse_octet(s: &str) -> Option<u8> {
    if s.is_empty() || s.len() > 3 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    u16::from_str_radix(s, 10).ok().and_then(|v| u8::try_from(v).ok())
}

fn parse_ipv4(s: &str) -> Option<[u8; 4]> {
    let mut out = [0u8; 4];
    let mut parts = s.split('.');
    for slot in &mut out {
        *slot = parse_octet(parts.next()?)?;
    }
    parts.next().is_none().then_some(out)
}

/// Parses one DShield log line: contributor id, source IP, source port,
/// target port, timestamp. Ports are discarded. Invalid or non-routable
/// source addresses yield a skip marker rather than an event.
pub fn parse_dshield_line(line: &str, sep: Separator) -> Result<ParsedLine, LineError> {
    let fields: Vec<&str> = line.split(sep.ch()).map(str::trim).collect();
    if fields.len() < 5 {
        return Err(LineError::FieldCount(fields.len()));
    }
    let (org, ip, ts) = (fields[0], fields[1], fields[4]);

    let Some(octets) = parse_ipv4(ip) else {
        return Ok(ParsedLine::Skipped(SkipReason::InvalidAddress));
    };
    let prefix = Prefix24::of_octets(octets);
    if !prefix.is_routable() {
        return Ok(ParsedLine::Skipped(SkipReason::NonRoutable));
    }

    let stamp = chrono::NaiveDateTime::parse_from_str(ts, "%Y-%m-%d %H:%M:%S")
        .map_err(|_| LineError::BadTimestamp(ts.to_string()))?;
    let day = day_index_of(stamp.date()).ok_or_else(|| LineError::DayOutOfRange(ts.to_string()))?;

    Ok(ParsedLine::Event(AlertEvent { org: OrgId::new(org), attacker: prefix, day }))
}

/// Counters accumulated while parsing a whole input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: u64,
    pub events: u64,
    pub skipped_invalid: u64,
    pub skipped_non_routable: u64,
    pub malformed: u64,
}

/// Parses a DShield-format stream, collecting events and counting the
/// lines that were skipped or malformed. Blank lines are ignored.
pub fn parse_dshield_reader<R: BufRead>(
    reader: R,
    sep: Separator,
) -> Result<(Vec<AlertEvent>, IngestStats), IngestError> {
    let mut events = Vec::new();
    let mut stats = IngestStats::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_dshield_line(&line, sep) {
            Ok(ParsedLine::Event(ev)) => {
                stats.events += 1;
                events.push(ev);
            }
            Ok(ParsedLine::Skipped(SkipReason::InvalidAddress)) => stats.skipped_invalid += 1,
            Ok(ParsedLine::Skipped(SkipReason::NonRoutable)) => stats.skipped_non_routable += 1,
            Err(err) => {
                stats.malformed += 1;
                log::warn!("line {}: {err}", idx + 1);
            }
        }
    }
    Ok((events, stats))
}

// ---------------------------------------------------------------------------
// Canonical event format
// ---------------------------------------------------------------------------

/// Writes events in the canonical format: one `org,a.b.c.0,day` line each.
pub fn write_canonical<W: Write>(mut w: W, events: &[AlertEvent]) -> Result<(), IngestError> {
    for ev in events {
        let org = ev.org.as_str();
        if org.contains(',') || org.contains('\n') {
            return Err(IngestError::UnwritableOrgId(org.to_string()));
        }
        writeln!(w, "{},{},{}", org, ev.attacker, ev.day)?;
    }
    Ok(())
}

/// Reads the canonical `org,prefix,day` format back.
pub fn read_canonical<R: BufRead>(reader: R) -> Result<Vec<AlertEvent>, IngestError> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| IngestError::Line {
            line: idx as u64 + 1,
            err: LineError::BadTimestamp(msg),
        };
        let mut parts = line.trim().split(',');
        let (Some(org), Some(prefix), Some(day), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(IngestError::Line { line: idx as u64 + 1, err: LineError::FieldCount(0) });
        };
        let octets =
            parse_ipv4(prefix).ok_or_else(|| err(format!("bad prefix {prefix:?}")))?;
        let day: DayIndex = day.parse().map_err(|_| err(format!("bad day {day:?}")))?;
        events.push(AlertEvent {
            org: OrgId::new(org),
            attacker: Prefix24::of_octets(octets),
            day,
        });
    }
    Ok(events)
}

/// Writes events as DShield-format lines so they can be re-ingested.
/// The source address is the prefix base address; ports carry filler.
pub fn write_dshield<W: Write>(
    mut w: W,
    events: &[AlertEvent],
    sep: Separator,
) -> Result<(), IngestError> {
    let s = sep.ch();
    for ev in events {
        let date = date_of(ev.day);
        let v = ev.attacker.value();
        writeln!(
            w,
            "{}{s}{}{s}{}{s}{}{s}{} 12:00:00",
            ev.org,
            ev.attacker,
            v % 60000 + 1,
            (v >> 8) % 60000 + 1,
            date.format("%Y-%m-%d"),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Contributor selection
// ---------------------------------------------------------------------------

/// Contributor selection parameters: rank daily reporters by unique
/// prefixes, keep the `top`, then drop the `drop_top` largest and the
/// `drop_bottom` smallest of those.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionRule {
    pub top: usize,
    pub drop_top: usize,
    pub drop_bottom: usize,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule { top: 100, drop_top: 10, drop_bottom: 20 }
    }
}

/// Selects the contributor organizations for an experiment.
///
/// Only organizations that report on every day of `days` qualify. They are
/// ranked by the number of unique /24 prefixes reported over the range
/// (ties broken by lexicographic id), truncated to the rule's `top`, and
/// the extremes are dropped. The survivors return in rank order.
pub fn select_contributors(
    events: &[AlertEvent],
    days: RangeInclusive<DayIndex>,
    rule: SelectionRule,
) -> Result<Vec<OrgId>, IngestError> {
    let mut reported: BTreeMap<&OrgId, (BTreeSet<DayIndex>, BTreeSet<Prefix24>)> = BTreeMap::new();
    for ev in events {
        if days.contains(&ev.day) {
            let entry = reported.entry(&ev.org).or_default();
            entry.0.insert(ev.day);
            entry.1.insert(ev.attacker);
        }
    }

    let span = usize::from(days.end() - days.start()) + 1;
    let mut ranked: Vec<(&OrgId, usize)> = reported
        .into_iter()
        .filter(|(_, (d, _))| d.len() == span)
        .map(|(org, (_, prefixes))| (org, prefixes.len()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(rule.top);

    let need = rule.drop_top + rule.drop_bottom + 1;
    if ranked.len() < need {
        return Err(IngestError::TooFewContributors { found: ranked.len(), need });
    }
    Ok(ranked[rule.drop_top..ranked.len() - rule.drop_bottom]
        .iter()
        .map(|(org, _)| (*org).clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Sliding windows
// ---------------------------------------------------------------------------

/// A contiguous training range plus the single test day right after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    train_days: Vec<DayIndex>,
    test_day: DayIndex,
}

impl WindowSpec {
    /// Builds a window starting at `first`, enforcing contiguity.
    pub fn new(first: DayIndex, train_len: usize) -> Self {
        let train_days: Vec<DayIndex> =
            (0..train_len as u16).map(|off| first + off).collect();
        let test_day = first + train_len as u16;
        WindowSpec { train_days, test_day }
    }

    pub fn train_days(&self) -> &[DayIndex] {
        &self.train_days
    }

    pub fn train_len(&self) -> usize {
        self.train_days.len()
    }

    pub fn test_day(&self) -> DayIndex {
        self.test_day
    }

    /// Position of `day` inside the training range, if any.
    pub fn train_position(&self, day: DayIndex) -> Option<usize> {
        let first = *self.train_days.first()?;
        (day >= first && day < self.test_day).then(|| usize::from(day - first))
    }
}

/// One evaluation window: per-org training datasets and test-day datasets.
/// Organizations with no events in a part are simply absent from that map.
#[derive(Debug, Clone)]
pub struct Window {
    pub spec: WindowSpec,
    pub train: BTreeMap<OrgId, OrgDataset>,
    pub test: BTreeMap<OrgId, OrgDataset>,
}

impl Window {
    /// Test-day attacker prefixes for one org (empty set if absent).
    pub fn test_prefixes(&self, org: &OrgId) -> BTreeSet<Prefix24> {
        self.test.get(org).map(|d| d.prefix_set()).unwrap_or_default()
    }
}

/// Cuts sliding windows of `train_len` training days plus one test day,
/// advancing one day at a time over the events' full date range. A 15-day
/// range with 5+1 windows yields 10 windows.
pub fn build_windows(
    events: &[AlertEvent],
    train_len: usize,
    test_len: usize,
) -> Result<Vec<Window>, IngestError> {
    if test_len != 1 {
        return Err(IngestError::TestLen(test_len));
    }
    if train_len == 0 {
        return Err(IngestError::WindowTooShort { days: 0, train: 0, test: test_len });
    }
    let (first, last) = match events.iter().map(|e| e.day).fold(None, |acc, d| match acc {
        None => Some((d, d)),
        Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
    }) {
        Some(bounds) => bounds,
        None => return Err(IngestError::NoEvents),
    };
    let span = usize::from(last - first) + 1;
    if span < train_len + test_len {
        return Err(IngestError::WindowTooShort { days: span, train: train_len, test: test_len });
    }

    // Index once: org -> day -> prefix -> raw count.
    let mut by_org: BTreeMap<&OrgId, BTreeMap<DayIndex, BTreeMap<Prefix24, u64>>> =
        BTreeMap::new();
    for ev in events {
        *by_org
            .entry(&ev.org)
            .or_default()
            .entry(ev.day)
            .or_default()
            .entry(ev.attacker)
            .or_insert(0) += 1;
    }

    let mut windows = Vec::with_capacity(span - train_len - test_len + 1);
    for start in 0..=(span - train_len - test_len) as u16 {
        let spec = WindowSpec::new(first + start, train_len);
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for (org, by_day) in &by_org {
            let mut tr = OrgDataset::new((*org).clone());
            for &day in spec.train_days() {
                if let Some(prefixes) = by_day.get(&day) {
                    for (&p, &n) in prefixes {
                        tr.record(p, day, n);
                    }
                }
            }
            if !tr.is_empty() {
                train.insert((*org).clone(), tr);
            }
            if let Some(prefixes) = by_day.get(&spec.test_day()) {
                let mut te = OrgDataset::new((*org).clone());
                for (&p, &n) in prefixes {
                    te.record(p, spec.test_day(), n);
                }
                test.insert((*org).clone(), te);
            }
        }
        windows.push(Window { spec, train, test });
    }
    Ok(windows)
}
