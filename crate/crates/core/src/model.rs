//! Core domain types shared by every other module: binding identities,
//! activity-layer events, original files and their provenance capsules.

use std::fmt;
use std::num::NonZeroU64;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes per megabyte as used for file sizes (binary megabytes).
pub const BYTES_PER_MB: u64 = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("binding identity space exhausted after {last}")]
    BidOverflow { last: u64 },
    #[error("binding identity 0 is reserved")]
    ZeroBid,
    #[error("event {event_id}: {kind} requires object_path")]
    MissingObjectPath { event_id: u64, kind: OpKind },
    #[error("event {event_id}: {kind} must not carry object_path")]
    UnexpectedObjectPath { event_id: u64, kind: OpKind },
    #[error("event_id {event_id} does not follow {previous}")]
    EventOrder { previous: u64, event_id: u64 },
}

/// Binding identity shared by an original file and its provenance capsule.
///
/// Zero is the "unassigned" sentinel and can never be represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct BId(NonZeroU64);

impl BId {
    pub fn new(value: u64) -> Result<Self, ModelError> {
        NonZeroU64::new(value).map(BId).ok_or(ModelError::ZeroBid)
    }

    pub fn get(self) -> u64 {
        self.0.get()
    }
}

impl TryFrom<u64> for BId {
    type Error = ModelError;

    fn try_from(value: u64) -> Result<Self, Self::Error> {
        BId::new(value)
    }
}

impl From<BId> for u64 {
    fn from(b: BId) -> u64 {
        b.get()
    }
}

impl fmt::Display for BId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense counter handing out binding identities, starting at 1.
///
/// Safe for concurrent callers; a value is never handed out twice and the
/// counter refuses to wrap around to the sentinel.
#[derive(Debug, Default)]
pub struct BidRegistry {
    last: AtomicU64,
}

impl BidRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry whose next allocation is `last + 1`.
    pub fn starting_after(last: u64) -> Self {
        Self {
            last: AtomicU64::new(last),
        }
    }

    pub fn last(&self) -> u64 {
        self.last.load(Ordering::Acquire)
    }

    pub fn allocate(&self) -> Result<BId, ModelError> {
        let prev = self
            .last
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |v| v.checked_add(1))
            .map_err(|last| ModelError::BidOverflow { last })?;
        // prev + 1 cannot overflow here, fetch_update already checked it.
        BId::new(prev + 1)
    }
}

/// The eight kinds of atomic activity-layer operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Create,
    Rename,
    Copy,
    Read,
    Write,
    Delete,
    Send,
    Receive,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Create,
        OpKind::Rename,
        OpKind::Copy,
        OpKind::Read,
        OpKind::Write,
        OpKind::Delete,
        OpKind::Send,
        OpKind::Receive,
    ];

    /// Whether events of this kind name a second path (rename target, copy
    /// destination or transfer peer).
    pub fn takes_object(self) -> bool {
        matches!(
            self,
            OpKind::Rename | OpKind::Copy | OpKind::Send | OpKind::Receive
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Create => "CREATE",
            OpKind::Rename => "RENAME",
            OpKind::Copy => "COPY",
            OpKind::Read => "READ",
            OpKind::Write => "WRITE",
            OpKind::Delete => "DELETE",
            OpKind::Send => "SEND",
            OpKind::Receive => "RECEIVE",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One atomic activity-layer action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityEvent {
    pub event_id: u64,
    /// Milliseconds since run start.
    pub timestamp_ms: u64,
    pub vm_id: String,
    pub process_id: String,
    pub operator: String,
    pub op_kind: OpKind,
    pub subject_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_path: Option<String>,
    pub byte_count: u64,
}

impl ActivityEvent {
    pub fn validate(&self) -> Result<(), ModelError> {
        match (self.op_kind.takes_object(), self.object_path.is_some()) {
            (true, false) => Err(ModelError::MissingObjectPath {
                event_id: self.event_id,
                kind: self.op_kind,
            }),
            (false, true) => Err(ModelError::UnexpectedObjectPath {
                event_id: self.event_id,
                kind: self.op_kind,
            }),
            _ => Ok(()),
        }
    }
}

/// Checks every event and the strictly increasing `event_id` order.
pub fn validate_trace(trace: &[ActivityEvent]) -> Result<(), ModelError> {
    let mut previous: Option<u64> = None;
    for ev in trace {
        ev.validate()?;
        if let Some(p) = previous {
            if ev.event_id <= p {
                return Err(ModelError::EventOrder {
                    previous: p,
                    event_id: ev.event_id,
                });
            }
        }
        previous = Some(ev.event_id);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalFile {
    pub b_id: BId,
    pub path: String,
    pub size_mb: u64,
    pub vm_id: String,
}

impl OriginalFile {
    pub fn byte_length(&self) -> u64 {
        self.size_mb.saturating_mul(BYTES_PER_MB)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub event_id: u64,
    pub timestamp_ms: u64,
    pub operator: String,
    pub operation: OpKind,
    /// Storage-block location of the bound file.
    pub location: String,
    pub executing_entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receiver: Option<String>,
}

impl ProvenanceRecord {
    fn order_key(&self) -> (u64, u64) {
        (self.timestamp_ms, self.event_id)
    }
}

/// Stamp written when a capsule is bound to its original file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsuleSeal {
    pub location: String,
    pub executing_entity: String,
    pub b_id: BId,
}

/// Provenance metafile bound to one original file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceCapsule {
    pub b_id: BId,
    pub vm_id: String,
    pub original_path: String,
    /// Byte length of the bound file; 0 until bound.
    pub original_length: u64,
    pub bound: bool,
    pub records: Vec<ProvenanceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seal: Option<CapsuleSeal>,
}

impl ProvenanceCapsule {
    pub fn empty(file: &OriginalFile) -> Self {
        Self {
            b_id: file.b_id,
            vm_id: file.vm_id.clone(),
            original_path: file.path.clone(),
            original_length: 0,
            bound: false,
            records: Vec::new(),
            seal: None,
        }
    }

    /// Inserts keeping records ordered by (timestamp, event_id).
    pub fn insert_record(&mut self, record: ProvenanceRecord) {
        let key = record.order_key();
        let at = self.records.partition_point(|r| r.order_key() <= key);
        self.records.insert(at, record);
    }

    pub fn records_ordered(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].order_key() <= w[1].order_key())
    }
}
