//! Canonical clickstream event records and tolerant CSV/JSONL ingestion.
//!
//! Every input line maps to exactly one [`UserEvent`] or one rejection. Bad
//! lines are collected in a [`RejectionReport`] keyed by record number; a load
//! only fails outright when the file is unreadable or no record survives.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Required CSV header, in schema order.
pub const CSV_HEADER: &str = "user_id,timestamp,event_type,platform";

/// Lines parsed per batch while streaming a file.
const BATCH_LINES: usize = 64 * 1024;

/// The five tracked activities that feed the engagement score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activity {
    Filter,
    Pdp,
    Lead,
    Crf,
    Shortlist,
}

impl Activity {
    pub const ALL: [Activity; 5] = [
        Activity::Filter,
        Activity::Pdp,
        Activity::Lead,
        Activity::Crf,
        Activity::Shortlist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    FilterApplied,
    PdpView,
    LeadDropped,
    CrfOpened,
    Shortlisted,
    /// Any visit that is not one of the five tracked activities, such as a
    /// search-result page view. Counts toward recency and frequency only.
    OtherVisit,
}

impl EventType {
    pub const ALL: [EventType; 6] = [
        EventType::FilterApplied,
        EventType::PdpView,
        EventType::LeadDropped,
        EventType::CrfOpened,
        EventType::Shortlisted,
        EventType::OtherVisit,
    ];

    pub fn token(self) -> &'static str {
        match self {
            EventType::FilterApplied => "filter_applied",
            EventType::PdpView => "pdp_view",
            EventType::LeadDropped => "lead_dropped",
            EventType::CrfOpened => "crf_opened",
            EventType::Shortlisted => "shortlisted",
            EventType::OtherVisit => "other_visit",
        }
    }

    pub fn activity(self) -> Option<Activity> {
        match self {
            EventType::FilterApplied => Some(Activity::Filter),
            EventType::PdpView => Some(Activity::Pdp),
            EventType::LeadDropped => Some(Activity::Lead),
            EventType::CrfOpened => Some(Activity::Crf),
            EventType::Shortlisted => Some(Activity::Shortlist),
            EventType::OtherVisit => None,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for EventType {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|t| t.token() == s)
            .ok_or_else(|| RecordError::UnknownEventType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Web,
    App,
}

impl Platform {
    pub fn token(self) -> &'static str {
        match self {
            Platform::Web => "web",
            Platform::App => "app",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Platform {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "web" => Ok(Platform::Web),
            "app" => Ok(Platform::App),
            other => Err(RecordError::Malformed(format!(
                "unknown platform `{other}`"
            ))),
        }
    }
}

/// One timestamped interaction of one user.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UserEvent {
    pub user_id: String,
    /// UTC, whole seconds.
    pub timestamp: DateTime<Utc>,
    pub event_type: EventType,
    pub platform: Platform,
}

impl UserEvent {
    pub fn new(
        user_id: impl Into<String>,
        timestamp: DateTime<Utc>,
        event_type: EventType,
        platform: Platform,
    ) -> Result<Self, RecordError> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(RecordError::EmptyUserId);
        }
        Ok(Self {
            user_id,
            timestamp: truncate_to_second(timestamp),
            event_type,
            platform,
        })
    }

    /// Serializes to one schema line (no trailing newline).
    pub fn to_line(&self, format: Format) -> String {
        let ts = format_timestamp(self.timestamp);
        match format {
            Format::Csv => {
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .terminator(csv::Terminator::Any(b'\n'))
                    .from_writer(Vec::new());
                w.write_record([
                    self.user_id.as_str(),
                    ts.as_str(),
                    self.event_type.token(),
                    self.platform.token(),
                ])
                .expect("in-memory csv write");
                let mut bytes = w.into_inner().expect("in-memory csv flush");
                bytes.pop();
                String::from_utf8(bytes).expect("csv output is utf-8")
            }
            Format::Jsonl => serde_json::to_string(&RawRecord {
                user_id: self.user_id.clone(),
                timestamp: ts,
                event_type: self.event_type.token().to_string(),
                platform: self.platform.token().to_string(),
            })
            .expect("string record serializes"),
        }
    }
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn truncate_to_second(ts: DateTime<Utc>) -> DateTime<Utc> {
    ts.with_nanosecond(0).unwrap_or(ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!(
                "unknown input format `{other}` (expected csv or jsonl)"
            )),
        }
    }
}

/// Why a single record was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("empty user id")]
    EmptyUserId,
}

impl RecordError {
    pub fn kind(&self) -> RejectionKind {
        match self {
            RecordError::Malformed(_) => RejectionKind::MalformedRecord,
            RecordError::UnknownEventType(_) => RejectionKind::UnknownEventType,
            RecordError::EmptyUserId => RejectionKind::EmptyUserId,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RejectionKind {
    MalformedRecord,
    UnknownEventType,
    EmptyUserId,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv input must start with the header `{CSV_HEADER}`, found `{0}`")]
    MissingHeader(String),
    #[error("no valid records in input ({rejected} rejected)")]
    AllRecordsRejected { rejected: usize },
}

#[derive(Deserialize, Serialize)]
struct RawRecord {
    user_id: String,
    timestamp: String,
    event_type: String,
    platform: String,
}

/// Parses one record. CSV lines carry the four fields in schema order.
pub fn parse_event_line(line: &str, format: Format) -> Result<UserEvent, RecordError> {
    let raw = match format {
        Format::Csv if !line.contains('"') => {
            let fields: Vec<&str> = line.split(',').collect();
            let [user_id, timestamp, event_type, platform] = fields[..] else {
                return Err(RecordError::Malformed(format!(
                    "expected 4 fields, found {}",
                    fields.len()
                )));
            };
            RawRecord {
                user_id: user_id.to_string(),
                timestamp: timestamp.to_string(),
                event_type: event_type.to_string(),
                platform: platform.to_string(),
            }
        }
        // Quoted fields go through the full CSV grammar.
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(line.as_bytes());
            let record = reader
                .records()
                .next()
                .ok_or_else(|| RecordError::Malformed("empty line".into()))?
                .map_err(|e| RecordError::Malformed(e.to_string()))?;
            if record.len() != 4 {
                return Err(RecordError::Malformed(format!(
                    "expected 4 fields, found {}",
                    record.len()
                )));
            }
            RawRecord {
                user_id: record[0].to_string(),
                timestamp: record[1].to_string(),
                event_type: record[2].to_string(),
                platform: record[3].to_string(),
            }
        }
        Format::Jsonl => {
            serde_json::from_str(line).map_err(|e| RecordError::Malformed(e.to_string()))?
        }
    };
    let timestamp = DateTime::parse_from_rfc3339(raw.timestamp.trim())
        .map_err(|e| RecordError::Malformed(format!("timestamp `{}`: {e}", raw.timestamp)))?
        .with_timezone(&Utc);
    let event_type = raw.event_type.trim().parse::<EventType>()?;
    let platform = raw.platform.trim().parse::<Platform>()?;
    UserEvent::new(raw.user_id, timestamp, event_type, platform)
}

/// An in-memory event collection and the time span it covers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<UserEvent>,
    source_span: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

impl EventLog {
    pub fn new(events: Vec<UserEvent>) -> Self {
        let source_span = events.iter().fold(None, |span, e| match span {
            None => Some((e.timestamp, e.timestamp)),
            Some((lo, hi)) => Some((e.timestamp.min(lo), e.timestamp.max(hi))),
        });
        Self {
            events,
            source_span,
        }
    }

    pub fn events(&self) -> &[UserEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<UserEvent> {
        self.events
    }

    /// `[earliest, latest]` event timestamp, `None` for an empty log.
    pub fn source_span(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        self.source_span
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn filter(&self, mut keep: impl FnMut(&UserEvent) -> bool) -> EventLog {
        EventLog::new(self.events.iter().filter(|e| keep(e)).cloned().collect())
    }
}

/// Rejected records grouped by error class. Record numbers are 1-based and
/// exclude the CSV header line.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RejectionReport {
    pub by_kind: BTreeMap<RejectionKind, Vec<usize>>,
}

impl RejectionReport {
    pub fn total(&self) -> usize {
        self.by_kind.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn lines(&self, kind: RejectionKind) -> &[usize] {
        self.by_kind.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    fn record(&mut self, kind: RejectionKind, line: usize) {
        self.by_kind.entry(kind).or_default().push(line);
    }
}

/// Streams a file in fixed-size batches, parsing each batch in parallel.
pub fn load_event_log(
    path: impl AsRef<Path>,
    format: Format,
) -> Result<(EventLog, RejectionReport), LoadError> {
    let path = path.as_ref();
    let io_err = |source| LoadError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();

    if format == Format::Csv {
        match lines.next() {
            None => return Err(LoadError::AllRecordsRejected { rejected: 0 }),
            Some(header) => {
                let header = header.map_err(io_err)?;
                let header = header.trim_start_matches('\u{feff}').trim();
                if header != CSV_HEADER {
                    return Err(LoadError::MissingHeader(header.to_string()));
                }
            }
        }
    }

    let mut events = Vec::new();
    let mut report = RejectionReport::default();
    let mut batch: Vec<String> = Vec::with_capacity(BATCH_LINES);
    let mut next_record = 1usize;
    let mut flush = |batch: &mut Vec<String>, first: usize| {
        let parsed: Vec<_> = batch
            .par_iter()
            .map(|line| parse_event_line(line.trim_end_matches('\r'), format))
            .collect();
        for (offset, result) in parsed.into_iter().enumerate() {
            match result {
                Ok(event) => events.push(event),
                Err(err) => report.record(err.kind(), first + offset),
            }
        }
        batch.clear();
    };
    for line in lines {
        batch.push(line.map_err(io_err)?);
        if batch.len() == BATCH_LINES {
            flush(&mut batch, next_record);
            next_record += BATCH_LINES;
        }
    }
    flush(&mut batch, next_record);

    if events.is_empty() {
        return Err(LoadError::AllRecordsRejected {
            rejected: report.total(),
        });
    }
    Ok((EventLog::new(events), report))
}

/// Writes events in schema form, CSV with header.
pub fn write_event_log<W: std::io::Write>(
    mut out: W,
    events: &[UserEvent],
    format: Format,
) -> std::io::Result<()> {
    if format == Format::Csv {
        writeln!(out, "{CSV_HEADER}")?;
    }
    for event in events {
        writeln!(out, "{}", event.to_line(format))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use std::io::Write;

    fn ts(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    #[test]
    fn parses_csv_line() {
        let e = parse_event_line("u1,2023-01-05T10:00:00Z,pdp_view,app", Format::Csv).unwrap();
        assert_eq!(
            e,
            UserEvent {
                user_id: "u1".into(),
                timestamp: ts("2023-01-05T10:00:00Z"),
                event_type: EventType::PdpView,
                platform: Platform::App,
            }
        );
    }

    #[test]
    fn rejects_unknown_event_type() {
        let err =
            parse_event_line("u1,2023-01-05T10:00:00Z,teleport,app", Format::Csv).unwrap_err();
        assert_eq!(err, RecordError::UnknownEventType("teleport".into()));
    }

    #[test]
    fn rejects_empty_user() {
        let err = parse_event_line(",2023-01-05T10:00:00Z,pdp_view,web", Format::Csv).unwrap_err();
        assert_eq!(err, RecordError::EmptyUserId);
    }

    #[test]
    fn rejects_bad_field_count_and_timestamp() {
        for line in [
            "u1,2023-01-05T10:00:00Z,pdp_view",
            "u1,2023-01-05T10:00:00Z,pdp_view,app,extra",
            "u1,yesterday,pdp_view,app",
            "u1,2023-01-05T10:00:00Z,pdp_view,tablet",
            "",
        ] {
            let err = parse_event_line(line, Format::Csv).unwrap_err();
            assert_eq!(err.kind(), RejectionKind::MalformedRecord, "{line}");
        }
    }

    #[test]
    fn parses_jsonl_and_normalizes_offset() {
        let line = r#"{"user_id":"u9","timestamp":"2023-01-05T15:30:00+05:30","event_type":"lead_dropped","platform":"web"}"#;
        let e = parse_event_line(line, Format::Jsonl).unwrap();
        assert_eq!(
            e.timestamp,
            Utc.with_ymd_and_hms(2023, 1, 5, 10, 0, 0).unwrap()
        );
        assert_eq!(e.event_type, EventType::LeadDropped);
        let missing =
            r#"{"user_id":"u9","timestamp":"2023-01-05T10:00:00Z","event_type":"pdp_view"}"#;
        assert_eq!(
            parse_event_line(missing, Format::Jsonl).unwrap_err().kind(),
            RejectionKind::MalformedRecord
        );
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_valid_file() {
        let f = write_file(
            "user_id,timestamp,event_type,platform\n\
             u1,2023-01-05T10:00:00Z,pdp_view,app\n\
             u2,2023-01-04T10:00:00Z,other_visit,app\n\
             u1,2023-01-06T10:00:00Z,lead_dropped,app\n",
        );
        let (log, report) = load_event_log(f.path(), Format::Csv).unwrap();
        assert_eq!(log.len(), 3);
        assert!(report.is_empty());
        assert_eq!(
            log.source_span(),
            Some((ts("2023-01-04T10:00:00Z"), ts("2023-01-06T10:00:00Z")))
        );
    }

    #[test]
    fn reports_malformed_line_number() {
        let f = write_file(
            "user_id,timestamp,event_type,platform\n\
             u1,2023-01-05T10:00:00Z,pdp_view,app\n\
             u2,2023-01-04T10:00:00Z,other_visit,app\n\
             u3,not-a-time,pdp_view,app\n",
        );
        let (log, report) = load_event_log(f.path(), Format::Csv).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(report.total(), 1);
        assert_eq!(report.lines(RejectionKind::MalformedRecord), &[3]);
    }

    #[test]
    fn empty_file_rejects_everything() {
        let f = write_file("");
        for format in [Format::Csv, Format::Jsonl] {
            assert!(matches!(
                load_event_log(f.path(), format),
                Err(LoadError::AllRecordsRejected { .. })
            ));
        }
    }

    #[test]
    fn missing_header_and_missing_file() {
        let f = write_file("u1,2023-01-05T10:00:00Z,pdp_view,app\n");
        assert!(matches!(
            load_event_log(f.path(), Format::Csv),
            Err(LoadError::MissingHeader(_))
        ));
        assert!(matches!(
            load_event_log("/nonexistent/events.csv", Format::Csv),
            Err(LoadError::Io { .. })
        ));
    }

    fn arb_event() -> impl Strategy<Value = UserEvent> {
        (
            "[a-zA-Z0-9_,\" -]{1,12}",
            0i64..4_000_000_000,
            0usize..6,
            any::<bool>(),
        )
            .prop_map(|(user, secs, ty, web)| UserEvent {
                user_id: user,
                timestamp: Utc.timestamp_opt(secs, 0).unwrap(),
                event_type: EventType::ALL[ty],
                platform: if web { Platform::Web } else { Platform::App },
            })
    }

    proptest! {
        #[test]
        fn line_round_trip(event in arb_event(), jsonl in any::<bool>()) {
            let format = if jsonl { Format::Jsonl } else { Format::Csv };
            let line = event.to_line(format);
            prop_assert_eq!(parse_event_line(&line, format).unwrap(), event);
        }

        #[test]
        fn load_accounts_for_every_line(
            events in prop::collection::vec(arb_event(), 0..20),
            junk in prop::collection::vec(0usize..3, 0..8),
        ) {
            let mut text = format!("{CSV_HEADER}\n");
            let mut n_lines = 0;
            for e in &events {
                text.push_str(&e.to_line(Format::Csv));
                text.push('\n');
                n_lines += 1;
            }
            for j in &junk {
                text.push_str(["garbage", "u,2023-01-01T00:00:00Z,zap,web", ",2023-01-01T00:00:00Z,pdp_view,web"][*j]);
                text.push('\n');
                n_lines += 1;
            }
            let f = write_file(&text);
            match load_event_log(f.path(), Format::Csv) {
                Ok((log, report)) => {
                    prop_assert_eq!(log.len(), events.len());
                    prop_assert_eq!(report.total(), n_lines - events.len());
                }
                Err(LoadError::AllRecordsRejected { rejected }) => {
                    prop_assert!(events.is_empty());
                    prop_assert_eq!(rejected, junk.len());
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
