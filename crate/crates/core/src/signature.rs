//! Composite file-operation signatures over ordered atomic event traces.
//!
//! Two signatures are recognised:
//!
//! - **file created**: a `CREATE` of a path in some process, with no later
//!   `RENAME` of that same path by that same process anywhere in the trace.
//! - **file copied**: either an explicit `COPY` event, or a `CREATE` of a
//!   destination followed in the same process by a `READ` of another path and
//!   then a `WRITE` of the destination carrying at least one byte.
//!
//! The trace is the detection window. Detectors are pure and return views
//! borrowing from the trace.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::model::{ActivityEvent, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompositeKind {
    FileCreated,
    FileCopied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompositeOperation<'t> {
    pub kind: CompositeKind,
    pub subject_path: &'t str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_path: Option<&'t str>,
    pub process_id: &'t str,
    /// Supporting event ids, in trace order. Never empty.
    pub witness_events: ArrayVec<u64, 3>,
}

impl CompositeOperation<'_> {
    pub fn first_witness(&self) -> u64 {
        self.witness_events[0]
    }
}

/// Optional restriction of the create signature to one directory tree.
#[derive(Debug, Clone, Copy, Default)]
pub struct SignatureOptions<'a> {
    pub directory_prefix: Option<&'a str>,
}

impl SignatureOptions<'_> {
    fn admits(&self, path: &str) -> bool {
        self.directory_prefix.is_none_or(|p| path.starts_with(p))
    }
}

fn witnesses(ids: &[u64]) -> ArrayVec<u64, 3> {
    ids.iter().copied().collect()
}

pub fn detect_create(trace: &[ActivityEvent]) -> Vec<CompositeOperation<'_>> {
    detect_create_with(trace, SignatureOptions::default())
}

pub fn detect_create_with<'t>(
    trace: &'t [ActivityEvent],
    opts: SignatureOptions<'_>,
) -> Vec<CompositeOperation<'t>> {
    let mut out = Vec::new();
    for (i, ev) in trace.iter().enumerate() {
        if ev.op_kind != OpKind::Create || !opts.admits(&ev.subject_path) {
            continue;
        }
        let renamed = trace[i + 1..].iter().any(|later| {
            later.op_kind == OpKind::Rename
                && later.subject_path == ev.subject_path
                && later.process_id == ev.process_id
        });
        if !renamed {
            out.push(CompositeOperation {
                kind: CompositeKind::FileCreated,
                subject_path: &ev.subject_path,
                source_path: None,
                process_id: &ev.process_id,
                witness_events: witnesses(&[ev.event_id]),
            });
        }
    }
    out
}

pub fn detect_copy(trace: &[ActivityEvent]) -> Vec<CompositeOperation<'_>> {
    let mut out = Vec::new();
    for (i, ev) in trace.iter().enumerate() {
        match ev.op_kind {
            OpKind::Copy => {
                // A COPY without a destination violates the event invariant;
                // fall back to the source path so the witness is not lost.
                let dest = ev.object_path.as_deref().unwrap_or(&ev.subject_path);
                out.push(CompositeOperation {
                    kind: CompositeKind::FileCopied,
                    subject_path: dest,
                    source_path: Some(&ev.subject_path),
                    process_id: &ev.process_id,
                    witness_events: witnesses(&[ev.event_id]),
                });
            }
            OpKind::Create => {
                if let Some(op) = create_read_write(trace, i) {
                    out.push(op);
                }
            }
            _ => {}
        }
    }
    out
}

/// Earliest READ of a different path after the CREATE at `at` that is itself
/// followed by a non-empty WRITE of the created path, all in one process.
fn create_read_write(trace: &[ActivityEvent], at: usize) -> Option<CompositeOperation<'_>> {
    let create = &trace[at];
    let same_proc = |e: &ActivityEvent| e.process_id == create.process_id;
    for (j, read) in trace.iter().enumerate().skip(at + 1) {
        if read.op_kind != OpKind::Read
            || !same_proc(read)
            || read.subject_path == create.subject_path
        {
            continue;
        }
        let write = trace[j + 1..].iter().find(|w| {
            w.op_kind == OpKind::Write
                && same_proc(w)
                && w.subject_path == create.subject_path
                && w.byte_count > 0
        });
        if let Some(write) = write {
            return Some(CompositeOperation {
                kind: CompositeKind::FileCopied,
                subject_path: &create.subject_path,
                source_path: Some(&read.subject_path),
                process_id: &create.process_id,
                witness_events: witnesses(&[create.event_id, read.event_id, write.event_id]),
            });
        }
    }
    None
}

/// Both detectors, ordered by first witness. A create and a copy sharing the
/// same first witness keep the created signature first.
pub fn detect_signatures(trace: &[ActivityEvent]) -> Vec<CompositeOperation<'_>> {
    detect_signatures_with(trace, SignatureOptions::default())
}

pub fn detect_signatures_with<'t>(
    trace: &'t [ActivityEvent],
    opts: SignatureOptions<'_>,
) -> Vec<CompositeOperation<'t>> {
    let mut all = detect_create_with(trace, opts);
    all.extend(detect_copy(trace));
    all.sort_by_key(|op| (op.first_witness(), op.kind));
    all
}
