//! Capsule engine: registers file objects, accumulates provenance records
//! matched by binding identity, and binds each capsule to its original file.
//!
//! Mutation is serialized per capsule. The file tables sit behind one
//! read-write lock that is only taken for writing during registration, so
//! recording and binding on distinct identities proceed concurrently.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ActivityEvent, BId, BidRegistry, CapsuleSeal, ModelError, OpKind, OriginalFile,
    ProvenanceCapsule, ProvenanceRecord, BYTES_PER_MB,
};

pub const DEFAULT_EXECUTOR: &str = "controller";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("file path must not be empty")]
    EmptyPath,
    #[error("file size must be positive")]
    ZeroSize,
    #[error("{path} on {vm_id} registered twice")]
    DuplicateRegistration { vm_id: String, path: String },
    #[error("no registered object {path} on {vm_id}")]
    UnknownObject { vm_id: String, path: String },
    #[error("unknown binding identity {0}")]
    UnknownBid(BId),
    #[error("capsule {0} is already bound")]
    AlreadyBound(BId),
    #[error("encapsulation of {b_id} failed after {attempts} attempts")]
    EncapsulationFailed {
        b_id: BId,
        attempts: u32,
        elapsed_s: f64,
    },
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Time source for the binding step.
pub trait BindingClock {
    /// Runs `step` and reports how many seconds it took on this clock.
    fn time<T>(&mut self, step: impl FnOnce() -> T) -> (T, f64);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl BindingClock for WallClock {
    fn time<T>(&mut self, step: impl FnOnce() -> T) -> (T, f64) {
        let start = Instant::now();
        let out = step();
        (out, start.elapsed().as_secs_f64())
    }
}

/// Clock on which binding takes no time (replays).
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl BindingClock for FrozenClock {
    fn time<T>(&mut self, step: impl FnOnce() -> T) -> (T, f64) {
        (step(), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Probability that a single binding attempt hits a transient fault.
    pub failure_probability: f64,
}

impl RetryPolicy {
    pub const NEVER_FAILS: RetryPolicy = RetryPolicy {
        max_retries: 0,
        failure_probability: 0.0,
    };

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.failure_probability) {
            return Err(EngineError::InvalidPolicy(format!(
                "failure_probability {} outside [0, 1]",
                self.failure_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryOutcome {
    pub capsule: ProvenanceCapsule,
    /// All attempts, failed ones included.
    pub delay_s: f64,
    /// Duration of the attempt that bound the capsule.
    pub final_attempt_s: f64,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordReceipt {
    pub b_id: BId,
    /// Capsule record count after the append.
    pub records: usize,
}

#[derive(Default)]
struct Tables {
    data_files: Vec<OriginalFile>,
    file_slot: HashMap<BId, usize>,
    by_path: HashMap<String, HashMap<String, BId>>,
    locations: BTreeMap<BId, String>,
    prov_files: BTreeMap<BId, Arc<Mutex<ProvenanceCapsule>>>,
}

impl Tables {
    fn resolve(&self, vm_id: &str, path: &str) -> Option<BId> {
        self.by_path.get(vm_id).and_then(|m| m.get(path)).copied()
    }
}

pub struct Engine {
    executor: String,
    registry: BidRegistry,
    tables: RwLock<Tables>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine {
    pub fn new() -> Self {
        Self::with_executor(DEFAULT_EXECUTOR)
    }

    /// `executor` names the entity stamped into every capsule seal.
    pub fn with_executor(executor: impl Into<String>) -> Self {
        Self {
            executor: executor.into(),
            registry: BidRegistry::new(),
            tables: RwLock::new(Tables::default()),
        }
    }

    pub fn register_file(&self, path: &str, size_mb: u64, vm_id: &str) -> Result<BId, EngineError> {
        if path.is_empty() {
            return Err(EngineError::EmptyPath);
        }
        if size_mb == 0 {
            return Err(EngineError::ZeroSize);
        }
        let mut t = self.tables.write();
        if t.resolve(vm_id, path).is_some() {
            return Err(EngineError::DuplicateRegistration {
                vm_id: vm_id.to_owned(),
                path: path.to_owned(),
            });
        }
        let b_id = self.registry.allocate()?;
        let file = OriginalFile {
            b_id,
            path: path.to_owned(),
            size_mb,
            vm_id: vm_id.to_owned(),
        };
        let capsule = ProvenanceCapsule::empty(&file);
        t.by_path
            .entry(vm_id.to_owned())
            .or_default()
            .insert(path.to_owned(), b_id);
        t.locations
            .insert(b_id, format!("{vm_id}:sb-{:08}", b_id.get()));
        t.prov_files.insert(b_id, Arc::new(Mutex::new(capsule)));
        let slot = t.data_files.len();
        t.file_slot.insert(b_id, slot);
        t.data_files.push(file);
        Ok(b_id)
    }

    pub fn resolve(&self, vm_id: &str, path: &str) -> Option<BId> {
        self.tables.read().resolve(vm_id, path)
    }

    /// Appends the provenance of `event` to the capsule of the file it acts on.
    pub fn record_provenance(&self, event: &ActivityEvent) -> Result<RecordReceipt, EngineError> {
        event.validate()?;
        let (b_id, location, capsule) = {
            let t = self.tables.read();
            let b_id = t
                .resolve(&event.vm_id, &event.subject_path)
                .ok_or_else(|| EngineError::UnknownObject {
                    vm_id: event.vm_id.clone(),
                    path: event.subject_path.clone(),
                })?;
            (
                b_id,
                t.locations[&b_id].clone(),
                Arc::clone(&t.prov_files[&b_id]),
            )
        };
        let (sender, receiver) = match event.op_kind {
            OpKind::Send => (Some(event.vm_id.clone()), event.object_path.clone()),
            OpKind::Receive => (event.object_path.clone(), Some(event.vm_id.clone())),
            _ => (None, None),
        };
        let record = ProvenanceRecord {
            event_id: event.event_id,
            timestamp_ms: event.timestamp_ms,
            operator: event.operator.clone(),
            operation: event.op_kind,
            location,
            executing_entity: event.process_id.clone(),
            sender,
            receiver,
        };
        let mut cap = capsule.lock();
        if cap.bound {
            return Err(EngineError::AlreadyBound(b_id));
        }
        cap.insert_record(record);
        Ok(RecordReceipt {
            b_id,
            records: cap.records.len(),
        })
    }

    fn binding_parts(
        &self,
        b_id: BId,
    ) -> Result<(OriginalFile, String, Arc<Mutex<ProvenanceCapsule>>), EngineError> {
        let t = self.tables.read();
        let slot = *t
            .file_slot
            .get(&b_id)
            .ok_or(EngineError::UnknownBid(b_id))?;
        Ok((
            t.data_files[slot].clone(),
            t.locations[&b_id].clone(),
            Arc::clone(&t.prov_files[&b_id]),
        ))
    }

    /// Binds the capsule to its original file and returns it together with
    /// the clock time spent in the binding step.
    pub fn encapsulate<C: BindingClock>(
        &self,
        b_id: BId,
        clock: &mut C,
    ) -> Result<(ProvenanceCapsule, f64), EngineError> {
        let (file, location, capsule) = self.binding_parts(b_id)?;
        let mut cap = capsule.lock();
        if cap.bound {
            return Err(EngineError::AlreadyBound(b_id));
        }
        let ((), delay) = clock.time(|| self.bind(&mut cap, &file, location));
        Ok((cap.clone(), delay))
    }

    fn bind(&self, cap: &mut ProvenanceCapsule, file: &OriginalFile, location: String) {
        cap.original_length = file.byte_length();
        cap.bound = true;
        cap.seal = Some(CapsuleSeal {
            location,
            executing_entity: self.executor.clone(),
            b_id: file.b_id,
        });
    }

    /// Encapsulation under simulated transient faults. Each attempt faults
    /// with `policy.failure_probability`; a faulted attempt still costs clock
    /// time and leaves the capsule unbound.
    pub fn encapsulate_with_retry<C: BindingClock, R: Rng + ?Sized>(
        &self,
        b_id: BId,
        clock: &mut C,
        policy: &RetryPolicy,
        faults: &mut R,
    ) -> Result<RetryOutcome, EngineError> {
        policy.validate()?;
        let (file, location, capsule) = self.binding_parts(b_id)?;
        let mut cap = capsule.lock();
        if cap.bound {
            return Err(EngineError::AlreadyBound(b_id));
        }
        let mut spent = 0.0;
        for attempt in 0..=policy.max_retries {
            let fault = faults.random_bool(policy.failure_probability);
            let (bound, dt) = clock.time(|| {
                if !fault {
                    self.bind(&mut cap, &file, location.clone());
                }
                !fault
            });
            spent += dt;
            if bound {
                return Ok(RetryOutcome {
                    capsule: cap.clone(),
                    delay_s: spent,
                    final_attempt_s: dt,
                    retries: attempt,
                });
            }
        }
        Err(EngineError::EncapsulationFailed {
            b_id,
            attempts: policy.max_retries + 1,
            elapsed_s: spent,
        })
    }

    pub fn capsule(&self, b_id: BId) -> Option<ProvenanceCapsule> {
        self.tables
            .read()
            .prov_files
            .get(&b_id)
            .map(|c| c.lock().clone())
    }

    /// Snapshot of all capsules in identity order.
    pub fn capsules(&self) -> Vec<ProvenanceCapsule> {
        self.tables
            .read()
            .prov_files
            .values()
            .map(|c| c.lock().clone())
            .collect()
    }

    pub fn files(&self) -> Vec<OriginalFile> {
        self.tables.read().data_files.clone()
    }

    pub fn location(&self, b_id: BId) -> Option<String> {
        self.tables.read().locations.get(&b_id).cloned()
    }

    /// Describes every breach of the file/capsule pairing, empty when sound.
    pub fn binding_violations(&self) -> Vec<String> {
        let t = self.tables.read();
        let mut out = Vec::new();
        if t.data_files.len() != t.prov_files.len() {
            out.push(format!(
                "{} files but {} capsules",
                t.data_files.len(),
                t.prov_files.len()
            ));
        }
        for file in &t.data_files {
            match t.prov_files.get(&file.b_id) {
                None => out.push(format!("file {} has no capsule", file.b_id)),
                Some(c) => {
                    let c = c.lock();
                    if c.original_path != file.path || c.vm_id != file.vm_id {
                        out.push(format!("capsule {} names a different file", file.b_id));
                    }
                    if c.bound {
                        let sealed = c.seal.as_ref().map(|s| s.b_id);
                        if sealed != Some(file.b_id) || c.original_length != file.byte_length() {
                            out.push(format!(
                                "capsule {} seal does not match its file",
                                file.b_id
                            ));
                        }
                    }
                    if !c.records_ordered() {
                        out.push(format!("capsule {} records out of order", file.b_id));
                    }
                }
            }
            if !t.locations.contains_key(&file.b_id) {
                out.push(format!("file {} has no location", file.b_id));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplaySummary {
    pub registered: usize,
    pub recorded: usize,
    pub bound: usize,
}

/// Drives a fresh or partially filled engine from a stored trace.
///
/// Every (vm, subject path) is registered in order of first appearance; its
/// size is the total of its WRITE byte counts rounded up to whole megabytes
/// (at least one). Events are then recorded, `workers` threads splitting the
/// work by identity, and every unbound capsule is bound in identity order.
pub fn replay(
    engine: &Engine,
    trace: &[ActivityEvent],
    workers: usize,
) -> Result<ReplaySummary, EngineError> {
    crate::model::validate_trace(trace)?;
    let mut written: HashMap<(&str, &str), u64> = HashMap::new();
    let mut order: Vec<(&str, &str)> = Vec::new();
    for ev in trace {
        let key = (ev.vm_id.as_str(), ev.subject_path.as_str());
        let total = written.entry(key).or_insert_with(|| {
            order.push(key);
            0
        });
        if ev.op_kind == OpKind::Write {
            *total = total.saturating_add(ev.byte_count);
        }
    }
    let mut summary = ReplaySummary::default();
    for key @ (vm, path) in order {
        if engine.resolve(vm, path).is_some() {
            continue;
        }
        let size_mb = written[&key].div_ceil(BYTES_PER_MB).max(1);
        engine.register_file(path, size_mb, vm)?;
        summary.registered += 1;
    }

    let workers = workers.max(1);
    if workers == 1 {
        for ev in trace {
            engine.record_provenance(ev)?;
        }
    } else {
        let mut buckets: Vec<Vec<&ActivityEvent>> = vec![Vec::new(); workers];
        for ev in trace {
            let b = engine
                .resolve(&ev.vm_id, &ev.subject_path)
                .expect("registered above");
            buckets[(b.get() % workers as u64) as usize].push(ev);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = buckets
                .iter()
                .map(|bucket| {
                    s.spawn(move || {
                        bucket
                            .iter()
                            .try_for_each(|ev| engine.record_provenance(ev).map(|_| ()))
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("replay worker panicked"))
        })?;
    }
    summary.recorded = trace.len();

    for cap in engine.capsules() {
        if !cap.bound {
            engine.encapsulate(cap.b_id, &mut FrozenClock)?;
            summary.bound += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn event(id: u64, kind: OpKind, vm: &str, path: &str, object: Option<&str>) -> ActivityEvent {
        ActivityEvent {
            event_id: id,
            timestamp_ms: id,
            vm_id: vm.into(),
            process_id: "proc".into(),
            operator: "tenant".into(),
            op_kind: kind,
            subject_path: path.into(),
            object_path: object.map(str::to_owned),
            byte_count: 10,
        }
    }

    /// Clock that charges a fixed time per step.
    struct FixedClock(f64);

    impl BindingClock for FixedClock {
        fn time<T>(&mut self, step: impl FnOnce() -> T) -> (T, f64) {
            (step(), self.0)
        }
    }

    #[test]
    fn first_registration() {
        let e = Engine::new();
        let b = e.register_file("/data/f1", 512, "vm1").unwrap();
        assert_eq!(b.get(), 1);
        assert_eq!(e.files().len(), 1);
        let cap = e.capsule(b).unwrap();
        assert!(cap.records.is_empty());
        assert!(!cap.bound);
    }

    #[test]
    fn two_registrations_distinct() {
        let e = Engine::new();
        let a = e.register_file("/f1", 1, "vm1").unwrap();
        let b = e.register_file("/f2", 1, "vm1").unwrap();
        assert_eq!((a.get(), b.get()), (1, 2));
        assert_ne!(e.capsule(a).unwrap(), e.capsule(b).unwrap());
    }

    #[test]
    fn paper_scale_registration() {
        let e = Engine::new();
        let ids: HashSet<BId> = (0..936)
            .map(|i| {
                e.register_file(&format!("/data/f{i}"), 512, &format!("vm{i}"))
                    .unwrap()
            })
            .collect();
        assert_eq!(ids.len(), 936);
        assert_eq!(e.capsules().len(), 936);
        assert!(e.binding_violations().is_empty());
    }

    #[test]
    fn registration_errors() {
        let e = Engine::new();
        assert_eq!(e.register_file("", 1, "vm"), Err(EngineError::EmptyPath));
        assert_eq!(e.register_file("/a", 0, "vm"), Err(EngineError::ZeroSize));
        e.register_file("/a", 1, "vm").unwrap();
        assert!(matches!(
            e.register_file("/a", 1, "vm"),
            Err(EngineError::DuplicateRegistration { .. })
        ));
        // same path on another vm is a different object
        assert!(e.register_file("/a", 1, "vm2").is_ok());
    }

    #[test]
    fn write_appends_one_record() {
        let e = Engine::new();
        let b = e.register_file("/data/f1", 512, "vm1").unwrap();
        let r = e
            .record_provenance(&event(1, OpKind::Write, "vm1", "/data/f1", None))
            .unwrap();
        assert_eq!(
            r,
            RecordReceipt {
                b_id: b,
                records: 1
            }
        );
        let cap = e.capsule(b).unwrap();
        assert_eq!(cap.records[0].operation, OpKind::Write);
        assert_eq!(cap.records[0].location, "vm1:sb-00000001");
    }

    #[test]
    fn send_and_receive_peers() {
        let e = Engine::new();
        let b = e.register_file("/f", 1, "vmA").unwrap();
        e.record_provenance(&event(1, OpKind::Send, "vmA", "/f", Some("vmB")))
            .unwrap();
        e.record_provenance(&event(2, OpKind::Receive, "vmA", "/f", Some("vmC")))
            .unwrap();
        let cap = e.capsule(b).unwrap();
        assert_eq!(cap.records[0].sender.as_deref(), Some("vmA"));
        assert_eq!(cap.records[0].receiver.as_deref(), Some("vmB"));
        assert_eq!(cap.records[1].sender.as_deref(), Some("vmC"));
        assert_eq!(cap.records[1].receiver.as_deref(), Some("vmA"));
    }

    #[test]
    fn unregistered_event_is_unknown_object() {
        let e = Engine::new();
        assert!(matches!(
            e.record_provenance(&event(1, OpKind::Write, "vm1", "/nope", None)),
            Err(EngineError::UnknownObject { .. })
        ));
    }

    #[test]
    fn encapsulate_sets_length_and_seal() {
        let e = Engine::new();
        let b = e.register_file("/data/f1", 512, "vm1").unwrap();
        for id in 1..=3 {
            e.record_provenance(&event(id, OpKind::Write, "vm1", "/data/f1", None))
                .unwrap();
        }
        let (cap, delay) = e.encapsulate(b, &mut FixedClock(0.25)).unwrap();
        assert!(cap.bound);
        assert_eq!(cap.original_length, 512 * (1 << 20));
        assert_eq!(cap.records.len(), 3);
        assert_eq!(delay, 0.25);
        let seal = cap.seal.unwrap();
        assert_eq!(seal.b_id, b);
        assert_eq!(seal.executing_entity, DEFAULT_EXECUTOR);
        assert!(e.binding_violations().is_empty());
    }

    #[test]
    fn encapsulate_errors() {
        let e = Engine::new();
        let missing = BId::new(99).unwrap();
        assert_eq!(
            e.encapsulate(missing, &mut WallClock).unwrap_err(),
            EngineError::UnknownBid(missing)
        );
        let b = e.register_file("/f", 1, "vm").unwrap();
        e.encapsulate(b, &mut WallClock).unwrap();
        assert_eq!(
            e.encapsulate(b, &mut WallClock).unwrap_err(),
            EngineError::AlreadyBound(b)
        );
        // a sealed capsule takes no further records
        assert_eq!(
            e.record_provenance(&event(1, OpKind::Read, "vm", "/f", None))
                .unwrap_err(),
            EngineError::AlreadyBound(b)
        );
    }

    #[test]
    fn retry_without_faults() {
        let e = Engine::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = RetryPolicy {
            max_retries: 5,
            failure_probability: 0.0,
        };
        for i in 0..50 {
            let b = e.register_file(&format!("/f{i}"), 1, "vm").unwrap();
            let out = e
                .encapsulate_with_retry(b, &mut FixedClock(2.0), &policy, &mut rng)
                .unwrap();
            assert_eq!(out.retries, 0);
            assert_eq!(out.delay_s, 2.0);
        }
    }

    #[test]
    fn retry_exhaustion() {
        let e = Engine::new();
        let b = e.register_file("/f", 1, "vm").unwrap();
        let policy = RetryPolicy {
            max_retries: 3,
            failure_probability: 1.0,
        };
        let err = e
            .encapsulate_with_retry(
                b,
                &mut FixedClock(1.5),
                &policy,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::EncapsulationFailed {
                b_id: b,
                attempts: 4,
                elapsed_s: 6.0
            }
        );
        assert!(!e.capsule(b).unwrap().bound);
    }

    #[test]
    fn retry_delay_accumulates() {
        let e = Engine::new();
        let policy = RetryPolicy {
            max_retries: 50,
            failure_probability: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut saw_retry = false;
        for i in 0..40 {
            let b = e.register_file(&format!("/f{i}"), 1, "vm").unwrap();
            let out = e
                .encapsulate_with_retry(b, &mut FixedClock(1.0), &policy, &mut rng)
                .unwrap();
            assert_eq!(out.delay_s, f64::from(out.retries + 1));
            assert_eq!(out.final_attempt_s, 1.0);
            saw_retry |= out.retries > 0;
        }
        assert!(saw_retry);
    }

    #[test]
    fn invalid_policy_rejected() {
        let e = Engine::new();
        let b = e.register_file("/f", 1, "vm").unwrap();
        let policy = RetryPolicy {
            max_retries: 1,
            failure_probability: 1.5,
        };
        assert!(matches!(
            e.encapsulate_with_retry(
                b,
                &mut WallClock,
                &policy,
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(EngineError::InvalidPolicy(_))
        ));
    }

    #[test]
    fn parallel_replay_matches_sequential() {
        let mut trace = Vec::new();
        for i in 0..200u64 {
            let kind =
                [OpKind::Create, OpKind::Write, OpKind::Read, OpKind::Delete][(i % 4) as usize];
            let mut ev = event(
                i + 1,
                kind,
                &format!("vm{}", i % 3),
                &format!("/f{}", i % 7),
                None,
            );
            ev.timestamp_ms = 1000 - i * 3 % 17;
            trace.push(ev);
        }
        let seq = Engine::new();
        replay(&seq, &trace, 1).unwrap();
        let par = Engine::new();
        let summary = replay(&par, &trace, 4).unwrap();
        assert_eq!(summary.recorded, 200);
        assert_eq!(summary.registered, summary.bound);
        assert_eq!(seq.capsules(), par.capsules());
    }

    #[test]
    fn replay_sizes_from_writes() {
        let mut w = event(2, OpKind::Write, "vm", "/f", None);
        w.byte_count = 3 * (1 << 20) + 1;
        let trace = vec![
            event(1, OpKind::Create, "vm", "/f", None),
            w,
            event(3, OpKind::Read, "vm", "/g", None),
        ];
        let e = Engine::new();
        replay(&e, &trace, 1).unwrap();
        let files = e.files();
        assert_eq!(files[0].size_mb, 4);
        assert_eq!(files[1].size_mb, 1);
    }
}
