//! Event-log data model, CSV ingestion/export and projection to variants.
//!
//! An [`EventLog`] is a collection of [`Trace`]s, one per case. Every event
//! carries a case identifier, an activity label, a resource label (possibly
//! empty) and a timestamp in epoch milliseconds (UTC).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An activity sequence: the projection of a trace on its activity labels.
pub type Variant = Vec<String>;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("MissingColumn: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("BadTimestamp: row {row}: cannot parse `{value}`")]
    BadTimestamp { row: usize, value: String },
    #[error("EmptyLog: the log contains no events")]
    EmptyLog,
    #[error("EmptyActivity: row {row} has an empty activity label")]
    EmptyActivity { row: usize },
    #[error("InvalidTrace: case `{case_id}`: {reason}")]
    InvalidTrace { case_id: String, reason: String },
    #[error("DuplicateCase: case `{0}` appears in more than one trace")]
    DuplicateCase(String),
    #[error("Csv: {0}")]
    Csv(#[from] csv::Error),
}

impl LogError {
    /// Stable short name of the error kind.
    pub fn name(&self) -> &'static str {
        match self {
            LogError::MissingColumn(_) => "MissingColumn",
            LogError::BadTimestamp { .. } => "BadTimestamp",
            LogError::EmptyLog => "EmptyLog",
            LogError::EmptyActivity { .. } => "EmptyActivity",
            LogError::InvalidTrace { .. } => "InvalidTrace",
            LogError::DuplicateCase(_) => "DuplicateCase",
            LogError::Csv(_) => "Csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub case_id: String,
    pub activity: String,
    pub resource: String,
    /// Epoch milliseconds, UTC.
    pub timestamp: i64,
}

impl Event {
    pub fn new(
        case_id: impl Into<String>,
        activity: impl Into<String>,
        resource: impl Into<String>,
        timestamp: i64,
    ) -> Self {
        Self {
            case_id: case_id.into(),
            activity: activity.into(),
            resource: resource.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    case_id: String,
    events: Vec<Event>,
}

impl Trace {
    /// Builds a trace, checking that every event belongs to `case_id`, has a
    /// non-empty activity, and that timestamps never decrease.
    pub fn new(case_id: impl Into<String>, events: Vec<Event>) -> Result<Self, LogError> {
        let case_id = case_id.into();
        let invalid = |reason: String| LogError::InvalidTrace {
            case_id: case_id.clone(),
            reason,
        };
        for (i, e) in events.iter().enumerate() {
            if e.case_id != case_id {
                return Err(invalid(format!("event {i} belongs to case `{}`", e.case_id)));
            }
            if e.activity.is_empty() {
                return Err(invalid(format!("event {i} has an empty activity")));
            }
        }
        if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(invalid("timestamps decrease along the trace".into()));
        }
        Ok(Self { case_id, events })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn activities(&self) -> Variant {
        self.events.iter().map(|e| e.activity.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    traces: Vec<Trace>,
}

impl EventLog {
    pub fn new(traces: Vec<Trace>) -> Result<Self, LogError> {
        let mut seen = HashSet::with_capacity(traces.len());
        for t in &traces {
            if !seen.insert(t.case_id.as_str()) {
                return Err(LogError::DuplicateCase(t.case_id.clone()));
            }
        }
        Ok(Self { traces })
    }

    /// Builds a log from activity sequences with multiplicities. Case ids are
    /// `1..=n`; the i-th event of every trace is stamped `i` seconds after
    /// the epoch, and resources are empty.
    pub fn from_sequences<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: AsRef<[&'a str]>,
    {
        let mut traces = Vec::new();
        for (seq, count) in sequences {
            for _ in 0..count {
                let case_id = (traces.len() + 1).to_string();
                let events = seq
                    .as_ref()
                    .iter()
                    .enumerate()
                    .map(|(i, a)| Event::new(case_id.clone(), *a, "", i as i64 * 1000))
                    .collect();
                traces.push(Trace { case_id, events });
            }
        }
        Self { traces }
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.traces.iter().flat_map(|t| t.events.iter())
    }

    /// Distinct activity labels, sorted.
    pub fn activities(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .events()
            .map(|e| e.activity.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort();
        set
    }
}

/// Header names of the four event columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub case_id: String,
    pub activity: String,
    pub resource: String,
    pub timestamp: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            case_id: "case_id".into(),
            activity: "activity".into(),
            resource: "resource".into(),
            timestamp: "timestamp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TimestampFormat {
    /// ISO-8601 / RFC 3339, seconds and offset optional (naive times are UTC).
    #[default]
    Iso8601,
    /// A `chrono` strftime pattern.
    Custom(String),
}

impl TimestampFormat {
    pub fn parse(&self, raw: &str) -> Option<i64> {
        let raw = raw.trim();
        match self {
            TimestampFormat::Iso8601 => parse_iso(raw),
            TimestampFormat::Custom(fmt) => parse_custom(raw, fmt),
        }
    }
}

const NAIVE_ISO_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
];

fn parse_iso(raw: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp_millis());
    }
    let naive = raw.strip_suffix('Z').unwrap_or(raw);
    NAIVE_ISO_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(naive, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(naive, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
        .map(|dt| dt.and_utc().timestamp_millis())
}

fn parse_custom(raw: &str, fmt: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
        return Some(dt.timestamp_millis());
    }
    if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
        return Some(dt.and_utc().timestamp_millis());
    }
    NaiveDate::parse_from_str(raw, fmt)
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp_millis())
}

/// Formats epoch milliseconds the way [`write_csv`] does.
pub fn format_timestamp(millis: i64) -> String {
    match DateTime::from_timestamp_millis(millis) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
        None => millis.to_string(),
    }
}

/// Reads a CSV event log. Events are grouped into traces by case id in order
/// of first appearance; each trace is stably sorted by timestamp.
pub fn ingest_csv<R: Read>(
    source: R,
    mapping: &ColumnMapping,
    timestamp_format: &TimestampFormat,
) -> Result<EventLog, LogError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(LogError::EmptyLog);
    }
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let case_col = column(&mapping.case_id).ok_or_else(|| LogError::MissingColumn(mapping.case_id.clone()))?;
    let act_col = column(&mapping.activity).ok_or_else(|| LogError::MissingColumn(mapping.activity.clone()))?;
    let ts_col = column(&mapping.timestamp).ok_or_else(|| LogError::MissingColumn(mapping.timestamp.clone()))?;
    let res_col = column(&mapping.resource);

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut grouped: Vec<(String, Vec<Event>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let case_id = field(case_col).to_string();
        let activity = field(act_col).to_string();
        if activity.is_empty() {
            return Err(LogError::EmptyActivity { row });
        }
        let raw_ts = field(ts_col);
        let timestamp = timestamp_format.parse(raw_ts).ok_or_else(|| LogError::BadTimestamp {
            row,
            value: raw_ts.to_string(),
        })?;
        let resource = res_col.map(|c| field(c).to_string()).unwrap_or_default();
        let slot = *index.entry(case_id.clone()).or_insert_with(|| {
            grouped.push((case_id.clone(), Vec::new()));
            grouped.len() - 1
        });
        grouped[slot].1.push(Event {
            case_id,
            activity,
            resource,
            timestamp,
        });
    }
    if grouped.is_empty() {
        return Err(LogError::EmptyLog);
    }
    let traces = grouped
        .into_iter()
        .map(|(case_id, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            Trace { case_id, events }
        })
        .collect();
    Ok(EventLog { traces })
}

/// Writes the log as CSV with the default column names; timestamps are
/// RFC 3339 with millisecond precision so the output re-ingests exactly.
pub fn write_csv<W: Write>(log: &EventLog, sink: W) -> Result<(), LogError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["case_id", "activity", "resource", "timestamp"])?;
    for e in log.events() {
        writer.write_record([
            e.case_id.as_str(),
            e.activity.as_str(),
            e.resource.as_str(),
            format_timestamp(e.timestamp).as_str(),
        ])?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn to_csv_string(log: &EventLog) -> String {
    let mut buf = Vec::new();
    write_csv(log, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Multiset of variants with their total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantDistribution {
    counts: BTreeMap<Variant, u64>,
    total: u64,
}

impl VariantDistribution {
    /// Builds a distribution from counts; zero counts are dropped. Returns
    /// `None` when nothing remains.
    pub fn from_counts(counts: impl IntoIterator<Item = (Variant, u64)>) -> Option<Self> {
        let mut map = BTreeMap::new();
        for (v, c) in counts {
            if c > 0 {
                *map.entry(v).or_insert(0) += c;
            }
        }
        let total = map.values().sum();
        (total > 0).then_some(Self { counts: map, total })
    }

    pub fn counts(&self) -> &BTreeMap<Variant, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, variant: &[String]) -> u64 {
        self.counts.get(variant).copied().unwrap_or(0)
    }

    pub fn relative_frequencies(&self) -> BTreeMap<Variant, f64> {
        let total = self.total as f64;
        self.counts
            .iter()
            .map(|(v, &c)| (v.clone(), c as f64 / total))
            .collect()
    }

    /// Variants ordered most-frequent first, ties broken lexicographically.
    pub fn by_frequency(&self) -> Vec<(&Variant, u64)> {
        let mut out: Vec<_> = self.counts.iter().map(|(v, &c)| (v, c)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        out
    }
}

/// Projects every trace on its activities and counts the variants.
pub fn variants(log: &EventLog) -> Result<VariantDistribution, LogError> {
    VariantDistribution::from_counts(log.traces().iter().map(|t| (t.activities(), 1)))
        .ok_or(LogError::EmptyLog)
}

pub fn relative_frequencies(dist: &VariantDistribution) -> BTreeMap<Variant, f64> {
    dist.relative_frequencies()
}
