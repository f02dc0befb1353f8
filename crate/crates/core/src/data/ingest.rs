use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::schema::{DatasetManifest, Event, EventRecord};
use crate::error::{Result, UumError};

/// Per-user events, one time-sorted list per domain index.
pub type UserDomainEvents = BTreeMap<u64, Vec<Vec<Event>>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub users: UserDomainEvents,
    pub rejected: Vec<RecordError>,
    pub total_records: usize,
}

/// Reads an event log and groups events by user and domain.
///
/// Each domain list is sorted by `(timestamp, item_id)`. Rejected records are
/// reported with their 1-based line number; the run fails when the rejected
/// fraction exceeds `max_error_rate`.
pub fn ingest_events(path: &Path, manifest: &DatasetManifest, max_error_rate: f64) -> Result<IngestOutcome> {
    let file = File::open(path).map_err(|e| UumError::io(path, e))?;
    ingest_reader(BufReader::new(file), manifest, max_error_rate)
}

pub fn ingest_reader<R: BufRead>(reader: R, manifest: &DatasetManifest, max_error_rate: f64) -> Result<IngestOutcome> {
    let mut users: UserDomainEvents = BTreeMap::new();
    let mut rejected = Vec::new();
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| UumError::Data(format!("line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<EventRecord>(&line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|r| r.into_event(manifest));
        match parsed {
            Ok((user, event)) => {
                let lists = users.entry(user).or_insert_with(|| vec![Vec::new(); manifest.domain_count()]);
                lists[event.domain.index()].push(event);
            }
            Err(message) => {
                log::warn!("line {line_no}: {message}");
                rejected.push(RecordError { line: line_no, message });
            }
        }
    }
    if let Some(first) = rejected.first() {
        let rate = rejected.len() as f64 / total as f64;
        if rate > max_error_rate {
            if rejected.len() == 1 {
                return Err(UumError::Record { line: first.line, message: first.message.clone() });
            }
            return Err(UumError::Ingest {
                failed: rejected.len(),
                total,
                first_line: first.line,
                first_message: first.message.clone(),
            });
        }
    }
    for lists in users.values_mut() {
        for list in lists.iter_mut() {
            list.sort_by_key(|e| (e.timestamp, e.item_id));
        }
    }
    Ok(IngestOutcome { users, rejected, total_records: total })
}
