//! Line-delimited persistence for traces and the capsule log.
//!
//! Both formats hold one JSON object per line. Lines starting with `#` carry
//! run metadata and are skipped on load, as are blank lines. A final line
//! without its newline is an entry still being written and is ignored by
//! readers.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivityEvent, BId, ProvenanceCapsule};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: event_id {event_id} does not follow {previous}")]
    Order {
        line: usize,
        previous: u64,
        event_id: u64,
    },
    #[error("capsule {0} is not bound")]
    Unbound(BId),
    #[error("line {line}: sequence {sequence} does not follow {previous}")]
    Sequence {
        line: usize,
        previous: u64,
        sequence: u64,
    },
}

/// Complete, non-comment lines with their 1-based line numbers.
fn complete_lines<R: Read>(reader: R) -> Result<Vec<(usize, String)>, StoreError> {
    let mut reader = BufReader::new(reader);
    let mut out = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            break;
        }
        let text = buf.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        out.push((line_no, text.to_owned()));
    }
    Ok(out)
}

/// The metadata lines at the top of a trace or log, without their `# `.
pub fn read_header(path: &Path) -> Result<Vec<String>, StoreError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match line.strip_prefix('#') {
            Some(rest) => out.push(rest.trim().to_owned()),
            None if line.trim().is_empty() => continue,
            None => break,
        }
    }
    Ok(out)
}

fn write_header<W: Write>(w: &mut W, header: Option<&str>) -> io::Result<()> {
    if let Some(h) = header {
        for line in h.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

pub fn write_trace_to<W: Write>(
    mut w: W,
    trace: &[ActivityEvent],
    header: Option<&str>,
) -> Result<(), StoreError> {
    write_header(&mut w, header)?;
    for ev in trace {
        let line = serde_json::to_string(ev).map_err(io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(
    path: &Path,
    trace: &[ActivityEvent],
    header: Option<&str>,
) -> Result<(), StoreError> {
    write_trace_to(io::BufWriter::new(File::create(path)?), trace, header)
}

pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<ActivityEvent>, StoreError> {
    let mut trace: Vec<ActivityEvent> = Vec::new();
    for (line, text) in complete_lines(reader)? {
        let ev: ActivityEvent = serde_json::from_str(&text).map_err(|e| StoreError::Parse {
            line,
            message: e.to_string(),
        })?;
        ev.validate().map_err(|e| StoreError::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some(prev) = trace.last() {
            if ev.event_id <= prev.event_id {
                return Err(StoreError::Order {
                    line,
                    previous: prev.event_id,
                    event_id: ev.event_id,
                });
            }
        }
        trace.push(ev);
    }
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<Vec<ActivityEvent>, StoreError> {
    parse_trace(File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleLogEntry {
    pub sequence: u64,
    pub written_at_ms: u64,
    /// Number of records at write time.
    pub record_count: usize,
    #[serde(flatten)]
    pub capsule: ProvenanceCapsule,
}

/// Append-only capsule log with a latest-entry index by identity.
pub struct CapsuleLog {
    entries: Vec<CapsuleLogEntry>,
    latest: HashMap<BId, usize>,
    sink: Option<File>,
}

impl CapsuleLog {
    pub fn in_memory() -> Self {
        Self {
            entries: Vec::new(),
            latest: HashMap::new(),
            sink: None,
        }
    }

    /// Starts a new log file, replacing any existing one.
    pub fn create(path: &Path, header: Option<&str>) -> Result<Self, StoreError> {
        let mut file = File::create(path)?;
        let mut head = Vec::new();
        write_header(&mut head, header)?;
        file.write_all(&head)?;
        file.sync_data()?;
        Ok(Self {
            sink: Some(file),
            ..Self::in_memory()
        })
    }

    /// Opens an existing log for further appends.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let entries = read_entries(File::open(path)?)?;
        let mut log = Self::in_memory();
        for (line, entry) in entries {
            if let Some(prev) = log.entries.last() {
                if entry.sequence <= prev.sequence {
                    return Err(StoreError::Sequence {
                        line,
                        previous: prev.sequence,
                        sequence: entry.sequence,
                    });
                }
            }
            log.latest.insert(entry.capsule.b_id, log.entries.len());
            log.entries.push(entry);
        }
        log.sink = Some(OpenOptions::new().append(true).open(path)?);
        Ok(log)
    }

    pub fn append(
        &mut self,
        capsule: &ProvenanceCapsule,
        written_at_ms: u64,
    ) -> Result<u64, StoreError> {
        if !capsule.bound {
            return Err(StoreError::Unbound(capsule.b_id));
        }
        let sequence = self.entries.last().map_or(1, |e| e.sequence + 1);
        let entry = CapsuleLogEntry {
            sequence,
            written_at_ms,
            record_count: capsule.records.len(),
            capsule: capsule.clone(),
        };
        if let Some(file) = self.sink.as_mut() {
            let mut line = serde_json::to_vec(&entry).map_err(io::Error::other)?;
            line.push(b'\n');
            file.write_all(&line)?;
        }
        self.latest.insert(entry.capsule.b_id, self.entries.len());
        self.entries.push(entry);
        Ok(sequence)
    }

    /// Flushes appended entries to stable storage.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Some(file) = self.sink.as_mut() {
            file.sync_data()?;
        }
        Ok(())
    }

    pub fn lookup(&self, b_id: BId) -> Option<&CapsuleLogEntry> {
        self.latest.get(&b_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[CapsuleLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every complete entry with its line number, without ordering checks.
pub fn read_entries<R: Read>(reader: R) -> Result<Vec<(usize, CapsuleLogEntry)>, StoreError> {
    complete_lines(reader)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text)
                .map(|e| (line, e))
                .map_err(|e| StoreError::Parse {
                    line,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<CapsuleLogEntry>, StoreError> {
    Ok(read_entries(File::open(path)?)?
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

/// A broken invariant found by [`audit`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SequenceRegression {
        line: usize,
        previous: u64,
        sequence: u64,
    },
    DuplicateBinding {
        b_id: BId,
        first_line: usize,
        line: usize,
    },
    PathBoundTwice {
        vm_id: String,
        path: String,
        first: BId,
        second: BId,
    },
    Unbound {
        b_id: BId,
        line: usize,
    },
    BadSeal {
        b_id: BId,
        line: usize,
    },
    RecordCount {
        b_id: BId,
        line: usize,
        declared: usize,
        found: usize,
    },
    RecordOrder {
        b_id: BId,
        line: usize,
    },
    TraceMismatch {
        b_id: BId,
        expected: usize,
        found: usize,
    },
    MissingCapsule {
        vm_id: String,
        path: String,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::SequenceRegression { line, previous, sequence } => {
                write!(f, "sequence regression at line {line}: {sequence} after {previous}")
            }
            Self::DuplicateBinding { b_id, first_line, line } => {
                write!(f, "duplicate binding b_id={b_id} (lines {first_line} and {line})")
            }
            Self::PathBoundTwice { vm_id, path, first, second } => {
                write!(f, "file {vm_id}:{path} bound as b_id={first} and b_id={second}")
            }
            Self::Unbound { b_id, line } => write!(f, "unbound capsule b_id={b_id} at line {line}"),
            Self::BadSeal { b_id, line } => write!(f, "seal missing or foreign for b_id={b_id} at line {line}"),
            Self::RecordCount { b_id, line, declared, found } => write!(
                f,
                "record conservation b_id={b_id} at line {line}: {declared} records declared, {found} present"
            ),
            Self::RecordOrder { b_id, line } => write!(f, "records of b_id={b_id} out of order at line {line}"),
            Self::TraceMismatch { b_id, expected, found } => write!(
                f,
                "record conservation b_id={b_id}: trace has {expected} events, capsule holds {found} of them"
            ),
            Self::MissingCapsule { vm_id, path } => write!(f, "no capsule for traced file {vm_id}:{path}"),
        }
    }
}

/// Checks a capsule log: sequence monotonicity, one capsule per identity and
/// per file, bound and sealed entries, and record conservation. With a trace,
/// every traced file must have a capsule holding exactly its events.
pub fn audit(
    entries: &[(usize, CapsuleLogEntry)],
    trace: Option<&[ActivityEvent]>,
) -> Vec<Violation> {
    use std::collections::BTreeMap;
    let mut out = Vec::new();
    let mut by_bid: BTreeMap<BId, usize> = BTreeMap::new();
    let mut by_file: BTreeMap<(&str, &str), BId> = BTreeMap::new();
    let mut previous: Option<u64> = None;
    for (line, entry) in entries {
        let (line, cap) = (*line, &entry.capsule);
        if let Some(p) = previous {
            if entry.sequence <= p {
                out.push(Violation::SequenceRegression {
                    line,
                    previous: p,
                    sequence: entry.sequence,
                });
            }
        }
        previous = Some(previous.map_or(entry.sequence, |p| p.max(entry.sequence)));
        if let Some(&first_line) = by_bid.get(&cap.b_id) {
            out.push(Violation::DuplicateBinding {
                b_id: cap.b_id,
                first_line,
                line,
            });
        } else {
            by_bid.insert(cap.b_id, line);
        }
        match by_file.get(&(cap.vm_id.as_str(), cap.original_path.as_str())) {
            Some(&first) if first != cap.b_id => out.push(Violation::PathBoundTwice {
                vm_id: cap.vm_id.clone(),
                path: cap.original_path.clone(),
                first,
                second: cap.b_id,
            }),
            Some(_) => {}
            None => {
                by_file.insert((&cap.vm_id, &cap.original_path), cap.b_id);
            }
        }
        if !cap.bound {
            out.push(Violation::Unbound {
                b_id: cap.b_id,
                line,
            });
        }
        if cap.seal.as_ref().is_none_or(|s| s.b_id != cap.b_id) {
            out.push(Violation::BadSeal {
                b_id: cap.b_id,
                line,
            });
        }
        if entry.record_count != cap.records.len() {
            out.push(Violation::RecordCount {
                b_id: cap.b_id,
                line,
                declared: entry.record_count,
                found: cap.records.len(),
            });
        }
        if !cap.records_ordered() {
            out.push(Violation::RecordOrder {
                b_id: cap.b_id,
                line,
            });
        }
    }

    if let Some(trace) = trace {
        let mut traced: BTreeMap<(&str, &str), Vec<u64>> = BTreeMap::new();
        for ev in trace {
            traced
                .entry((ev.vm_id.as_str(), ev.subject_path.as_str()))
                .or_default()
                .push(ev.event_id);
        }
        let latest: BTreeMap<BId, &ProvenanceCapsule> = entries
            .iter()
            .map(|(_, e)| (e.capsule.b_id, &e.capsule))
            .collect();
        for ((vm, path), mut ids) in traced {
            ids.sort_unstable();
            let Some(cap) = by_file.get(&(vm, path)).map(|b| latest[b]) else {
                out.push(Violation::MissingCapsule {
                    vm_id: vm.to_owned(),
                    path: path.to_owned(),
                });
                continue;
            };
            let mut held: Vec<u64> = cap.records.iter().map(|r| r.event_id).collect();
            held.sort_unstable();
            let matching = held
                .iter()
                .filter(|id| ids.binary_search(id).is_ok())
                .count();
            if matching != ids.len() || held.len() != ids.len() {
                out.push(Violation::TraceMismatch {
                    b_id: cap.b_id,
                    expected: ids.len(),
                    found: matching,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{Engine, FrozenClock};
    use crate::model::OpKind;

    fn ev(id: u64) -> ActivityEvent {
        ActivityEvent {
            event_id: id,
            timestamp_ms: id * 5,
            vm_id: "vm-0001".into(),
            process_id: "app".into(),
            operator: "tenant".into(),
            op_kind: if id.is_multiple_of(2) {
                OpKind::Send
            } else {
                OpKind::Write
            },
            subject_path: "/data/x".into(),
            object_path: id.is_multiple_of(2).then(|| "controller".to_owned()),
            byte_count: id,
        }
    }

    fn bound_capsule(engine: &Engine, path: &str) -> ProvenanceCapsule {
        let b = engine.register_file(path, 1, "vm").unwrap();
        engine.encapsulate(b, &mut FrozenClock).unwrap().0
    }

    #[test]
    fn trace_round_trip_with_header() {
        let trace: Vec<_> = (1..=6).map(ev).collect();
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &trace, Some("seed=1\nconfig=abc")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=1\n# config=abc\n"));
        assert!(!text.contains("object_path\":null"));
        assert_eq!(parse_trace(&buf[..]).unwrap(), trace);
    }

    #[test]
    fn empty_input_is_empty_trace() {
        assert!(parse_trace(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn event_id_regression_reports_line() {
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &[ev(1), ev(3)], None).unwrap();
        buf.extend(serde_json::to_vec(&ev(2)).unwrap());
        buf.push(b'\n');
        match parse_trace(&buf[..]) {
            Err(StoreError::Order {
                line: 3,
                previous: 3,
                event_id: 2,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_unknown_fields() {
        let good = serde_json::to_string(&ev(1)).unwrap();
        let input = format!("{good}\nnot json\n");
        assert!(matches!(
            parse_trace(input.as_bytes()),
            Err(StoreError::Parse { line: 2, .. })
        ));
        let extra = good.replacen('{', "{\"colour\":\"red\",", 1);
        assert!(matches!(
            parse_trace(format!("{extra}\n").as_bytes()),
            Err(StoreError::Parse { line: 1, .. })
        ));
        // object_path on a WRITE breaks the presence rule
        let bad = good.replacen('{', "{\"object_path\":\"/y\",", 1);
        assert!(matches!(
            parse_trace(format!("{bad}\n").as_bytes()),
            Err(StoreError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn partial_last_line_is_invisible() {
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &[ev(1)], None).unwrap();
        let half = serde_json::to_string(&ev(2)).unwrap();
        buf.extend(&half.as_bytes()[..half.len() / 2]);
        assert_eq!(parse_trace(&buf[..]).unwrap(), vec![ev(1)]);
    }

    #[test]
    fn first_append_is_sequence_one() {
        let engine = Engine::new();
        let mut log = CapsuleLog::in_memory();
        let cap = bound_capsule(&engine, "/a");
        assert_eq!(log.append(&cap, 0).unwrap(), 1);
        assert_eq!(log.lookup(cap.b_id).unwrap().capsule, cap);
        assert!(log.lookup(BId::new(99).unwrap()).is_none());
    }

    #[test]
    fn unbound_capsule_rejected() {
        let engine = Engine::new();
        let b = engine.register_file("/a", 1, "vm").unwrap();
        let mut log = CapsuleLog::in_memory();
        assert!(matches!(
            log.append(&engine.capsule(b).unwrap(), 0),
            Err(StoreError::Unbound(_))
        ));
        assert!(log.is_empty());
    }

    #[test]
    fn file_log_reopens_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("capsules.jsonl");
        let engine = Engine::new();
        let a = bound_capsule(&engine, "/a");
        let b = bound_capsule(&engine, "/b");
        {
            let mut log = CapsuleLog::create(&path, Some("seed=3")).unwrap();
            log.append(&a, 10).unwrap();
            log.sync().unwrap();
        }
        let mut log = CapsuleLog::open(&path).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.append(&b, 20).unwrap(), 2);
        let back = read_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].capsule, a);
        assert_eq!(back[1].capsule, b);
        assert_eq!(back[1].sequence, 2);
    }
}
