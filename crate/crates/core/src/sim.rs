//! Seeded discrete-event workload simulator.
//!
//! Each size class is a batch of VM instances. An instance registers one file
//! with the capsule engine, runs a fixed activity script (CREATE, two WRITEs,
//! SEND) whose provenance messages travel to the controller, and once the
//! last message has arrived its capsule is bound by one of the controller's
//! `parallelism` encapsulation workers. Everything runs in virtual time.
//!
//! Randomness comes from per-class ChaCha streams derived from the seed: one
//! stream for timing (message latency, binding delay) and one for transient
//! binding faults. A class therefore simulates identically whether it runs
//! alone or as part of the whole workload.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsule::{BindingClock, Engine, EngineError, RetryPolicy};
use crate::model::{ActivityEvent, OpKind, ProvenanceCapsule, BYTES_PER_MB};

pub const DEFAULT_PARALLELISM: usize = 16;
/// Relative spread of message latency around its model value.
pub const LATENCY_JITTER: f64 = 0.2;
pub const CONTROLLER_PEER: &str = "controller";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("class index {index} out of range ({classes} classes)")]
    InvalidClass { index: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayDistribution {
    /// Normal, redrawn until positive.
    #[default]
    NormalTruncated,
    /// Uniform with the given mean and standard deviation, redrawn until positive.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    pub mean_s: f64,
    pub stddev_s: f64,
    #[serde(default)]
    pub distribution: DelayDistribution,
}

impl DelayModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.stddev_s == 0.0 {
            return self.mean_s;
        }
        loop {
            let x = match self.distribution {
                DelayDistribution::NormalTruncated => Normal::new(self.mean_s, self.stddev_s)
                    .expect("validated stddev")
                    .sample(rng),
                DelayDistribution::Uniform => {
                    let half = self.stddev_s * 3f64.sqrt();
                    rng.random_range(self.mean_s - half..self.mean_s + half)
                }
            };
            if x > 0.0 {
                return x;
            }
        }
    }
}

/// `base_s + per_mb_s * size_mb`, clamped at zero when evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub base_s: f64,
    pub per_mb_s: f64,
}

impl LinearModel {
    pub fn at(&self, size_mb: u64) -> f64 {
        (self.base_s + self.per_mb_s * size_mb as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub vm_count: u32,
    pub size_mb: u64,
    /// Overrides the workload-wide fault probability for this class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_probability: Option<f64>,
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub failure_probability: f64,
    #[serde(default)]
    pub max_retries: u32,
    pub delay_model: DelayModel,
    /// Transmission delay of one provenance message.
    #[serde(default)]
    pub imt_model: LinearModel,
    /// Duration of an instance's activity script, CREATE to SEND.
    #[serde(default)]
    pub activity_model: LinearModel,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.delay_model.mean_s > 0.0) {
            return bad(format!(
                "delay mean {} must be positive",
                self.delay_model.mean_s
            ));
        }
        if !(self.delay_model.stddev_s >= 0.0) {
            return bad(format!(
                "delay stddev {} must be nonnegative",
                self.delay_model.stddev_s
            ));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let probs = std::iter::once(self.failure_probability)
            .chain(self.classes.iter().filter_map(|c| c.failure_probability));
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("failure probability {p} outside [0, 1]"));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.size_mb == 0 {
                return bad(format!("class {i} has zero file size"));
            }
        }
        for (name, m) in [
            ("imt_model", &self.imt_model),
            ("activity_model", &self.activity_model),
        ] {
            if !m.base_s.is_finite() || !m.per_mb_s.is_finite() {
                return bad(format!("{name} coefficients must be finite"));
            }
        }
        Ok(())
    }

    pub fn total_instances(&self) -> u64 {
        self.classes.iter().map(|c| u64::from(c.vm_count)).sum()
    }

    pub fn policy_for(&self, class_index: usize) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            failure_probability: self.classes[class_index]
                .failure_probability
                .unwrap_or(self.failure_probability),
        }
    }

    fn first_instance(&self, class_index: usize) -> u64 {
        self.classes[..class_index]
            .iter()
            .map(|c| u64::from(c.vm_count))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub vm_id: String,
    pub size_mb: u64,
    /// Binding time of the attempt that bound the capsule.
    pub encapsulation_delay_s: f64,
    /// Time lost to faulted attempts.
    pub retry_delay_s: f64,
    pub retries: u32,
    /// Wait for a free encapsulation worker.
    pub queue_wait_s: f64,
    pub ready_s: f64,
    pub completed_s: f64,
    /// False when every attempt faulted.
    pub bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub class_index: usize,
    pub vm_count: u32,
    pub size_mb: u64,
    pub samples: Vec<DelaySample>,
    /// Makespan from batch start to the last binding.
    pub tgd_s: f64,
    /// Mean provenance-message transmission delay.
    pub imt_s: f64,
    pub retries_total: u32,
}

impl BatchResult {
    pub fn delays(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.encapsulation_delay_s)
    }
}

/// A bound capsule and the run-relative time it was written.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedCapsule {
    pub written_at_ms: u64,
    pub capsule: ProvenanceCapsule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub batches: Vec<BatchResult>,
    pub trace: Vec<ActivityEvent>,
    /// Bound capsules ordered by write time, then identity.
    pub capsules: Vec<TimedCapsule>,
}

struct SimClock<'a> {
    rng: &'a mut ChaCha8Rng,
    model: DelayModel,
}

impl BindingClock for SimClock<'_> {
    fn time<T>(&mut self, step: impl FnOnce() -> T) -> (T, f64) {
        let out = step();
        (out, self.model.sample(self.rng))
    }
}

fn class_rngs(seed: u64, class_index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut timing = ChaCha8Rng::seed_from_u64(seed);
    timing.set_stream(2 * class_index as u64);
    let mut faults = ChaCha8Rng::seed_from_u64(seed);
    faults.set_stream(2 * class_index as u64 + 1);
    (timing, faults)
}

fn secs_to_ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

struct ScriptedEvent {
    emitted_s: f64,
    instance: usize,
    step: usize,
    event: ActivityEvent,
}

/// Free worker ordered by release time, then worker index.
#[derive(PartialEq)]
struct Worker(f64, usize);

impl Eq for Worker {}

impl Ord for Worker {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Worker {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct ClassRun {
    batch: BatchResult,
    events: Vec<ActivityEvent>,
    capsules: Vec<TimedCapsule>,
}

fn run_class(
    engine: &Engine,
    config: &SimConfig,
    class_index: usize,
    first_event_id: u64,
    offset_ms: u64,
) -> Result<ClassRun, SimError> {
    let class = *config
        .classes
        .get(class_index)
        .ok_or(SimError::InvalidClass {
            index: class_index,
            classes: config.classes.len(),
        })?;
    let (mut timing, mut faults) = class_rngs(config.seed, class_index);
    let n = class.vm_count as usize;
    let first = config.first_instance(class_index);
    let size_bytes = class.size_mb * BYTES_PER_MB;
    let activity = config.activity_model.at(class.size_mb);
    let latency = config.imt_model.at(class.size_mb);

    let mut scripted = Vec::with_capacity(4 * n);
    let mut ready = vec![0.0f64; n];
    let mut latency_total = 0.0;
    let mut vm_ids = Vec::with_capacity(n);
    for i in 0..n {
        let vm_id = format!("vm-{:04}", first + i as u64 + 1);
        let path = format!("/data/{vm_id}/object-{}mb.bin", class.size_mb);
        let script = [
            (0.0, OpKind::Create, None, 0),
            (activity / 3.0, OpKind::Write, None, size_bytes / 2),
            (
                2.0 * activity / 3.0,
                OpKind::Write,
                None,
                size_bytes - size_bytes / 2,
            ),
            (
                activity,
                OpKind::Send,
                Some(CONTROLLER_PEER.to_owned()),
                size_bytes,
            ),
        ];
        for (step, (emitted_s, op_kind, object_path, byte_count)) in script.into_iter().enumerate()
        {
            let jitter = 1.0 + LATENCY_JITTER * (2.0 * timing.random::<f64>() - 1.0);
            let transit = latency * jitter;
            latency_total += transit;
            ready[i] = ready[i].max(emitted_s + transit);
            scripted.push(ScriptedEvent {
                emitted_s,
                instance: i,
                step,
                event: ActivityEvent {
                    event_id: 0,
                    timestamp_ms: offset_ms + secs_to_ms(emitted_s),
                    vm_id: vm_id.clone(),
                    process_id: format!("app-{vm_id}"),
                    operator: format!("tenant-{:04}", first + i as u64 + 1),
                    op_kind,
                    subject_path: path.clone(),
                    object_path,
                    byte_count,
                },
            });
        }
        vm_ids.push(vm_id);
    }
    scripted.sort_by(|a, b| {
        a.emitted_s
            .total_cmp(&b.emitted_s)
            .then(a.instance.cmp(&b.instance))
            .then(a.step.cmp(&b.step))
    });

    let mut bids = vec![None; n];
    let mut events = Vec::with_capacity(scripted.len());
    for (k, mut s) in scripted.into_iter().enumerate() {
        s.event.event_id = first_event_id + k as u64;
        if s.event.op_kind == OpKind::Create {
            bids[s.instance] =
                Some(engine.register_file(&s.event.subject_path, class.size_mb, &s.event.vm_id)?);
        }
        engine.record_provenance(&s.event)?;
        events.push(s.event);
    }

    let policy = config.policy_for(class_index);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ready[a].total_cmp(&ready[b]).then(a.cmp(&b)));
    let mut workers: BinaryHeap<Worker> = (0..config.parallelism).map(|w| Worker(0.0, w)).collect();
    let mut samples: Vec<Option<DelaySample>> = vec![None; n];
    let mut capsules = Vec::new();
    let mut tgd: f64 = 0.0;
    for i in order {
        let b_id = bids[i].expect("every instance creates its file");
        let mut clock = SimClock {
            rng: &mut timing,
            model: config.delay_model,
        };
        let (busy, final_s, retries, capsule) =
            match engine.encapsulate_with_retry(b_id, &mut clock, &policy, &mut faults) {
                Ok(out) => (
                    out.delay_s,
                    out.final_attempt_s,
                    out.retries,
                    Some(out.capsule),
                ),
                Err(EngineError::EncapsulationFailed { elapsed_s, .. }) => {
                    (elapsed_s, 0.0, policy.max_retries, None)
                }
                Err(e) => return Err(e.into()),
            };
        let Worker(free_at, w) = workers.pop().expect("parallelism >= 1");
        let start = free_at.max(ready[i]);
        let end = start + busy;
        workers.push(Worker(end, w));
        tgd = tgd.max(end);
        let bound = capsule.is_some();
        if let Some(capsule) = capsule {
            capsules.push(TimedCapsule {
                written_at_ms: offset_ms + secs_to_ms(end),
                capsule,
            });
        }
        samples[i] = Some(DelaySample {
            vm_id: vm_ids[i].clone(),
            size_mb: class.size_mb,
            encapsulation_delay_s: if bound { final_s } else { busy },
            retry_delay_s: busy - final_s,
            retries,
            queue_wait_s: start - ready[i],
            ready_s: ready[i],
            completed_s: end,
            bound,
        });
    }
    let samples: Vec<DelaySample> = samples.into_iter().map(|s| s.expect("scheduled")).collect();
    let retries_total = samples.iter().map(|s| s.retries).sum();
    capsules.sort_by_key(|c| (c.written_at_ms, c.capsule.b_id));
    let imt_s = if n == 0 {
        0.0
    } else {
        latency_total / (4 * n) as f64
    };
    Ok(ClassRun {
        batch: BatchResult {
            class_index,
            vm_count: class.vm_count,
            size_mb: class.size_mb,
            samples,
            tgd_s: tgd,
            imt_s,
            retries_total,
        },
        events,
        capsules,
    })
}

/// One class on a fresh engine, timed from zero.
pub fn simulate_class(config: &SimConfig, class_index: usize) -> Result<BatchResult, SimError> {
    config.validate()?;
    Ok(run_class(&Engine::new(), config, class_index, 1, 0)?.batch)
}

/// All classes back to back on one engine. Event ids run across the whole
/// workload and each class starts where the previous one's global delay
/// ended.
pub fn run(config: &SimConfig) -> Result<SimulationRun, SimError> {
    run_on(&Engine::new(), config)
}

pub fn run_on(engine: &Engine, config: &SimConfig) -> Result<SimulationRun, SimError> {
    config.validate()?;
    let mut out = SimulationRun {
        batches: Vec::with_capacity(config.classes.len()),
        trace: Vec::new(),
        capsules: Vec::new(),
    };
    let mut offset_ms = 0;
    for idx in 0..config.classes.len() {
        let next_id = out.trace.len() as u64 + 1;
        let class = run_class(engine, config, idx, next_id, offset_ms)?;
        offset_ms += (class.batch.tgd_s * 1000.0).ceil() as u64;
        out.trace.extend(class.events);
        out.capsules.extend(class.capsules);
        out.batches.push(class.batch);
    }
    Ok(out)
}

pub fn simulate_all(config: &SimConfig) -> Result<Vec<BatchResult>, SimError> {
    Ok(run(config)?.batches)
}

pub fn emit_trace(config: &SimConfig) -> Result<Vec<ActivityEvent>, SimError> {
    Ok(run(config)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(classes: Vec<ClassSpec>) -> SimConfig {
        SimConfig {
            seed: 7,
            parallelism: 4,
            failure_probability: 0.0,
            max_retries: 3,
            delay_model: DelayModel {
                mean_s: 5.0,
                stddev_s: 1.0,
                distribution: DelayDistribution::NormalTruncated,
            },
            imt_model: LinearModel {
                base_s: 1.0,
                per_mb_s: 0.01,
            },
            activity_model: LinearModel {
                base_s: 2.0,
                per_mb_s: 0.0,
            },
            classes,
        }
    }

    fn class(vm_count: u32, size_mb: u64) -> ClassSpec {
        ClassSpec {
            vm_count,
            size_mb,
            failure_probability: None,
        }
    }

    #[test]
    fn degenerate_single_instance() {
        let mut cfg = config(vec![class(1, 777)]);
        cfg.delay_model.stddev_s = 0.0;
        cfg.imt_model = LinearModel::default();
        cfg.activity_model = LinearModel::default();
        let b = simulate_class(&cfg, 0).unwrap();
        assert_eq!(b.tgd_s, 5.0);
        assert_eq!(b.samples.len(), 1);
        assert_eq!(b.samples[0].encapsulation_delay_s, 5.0);
        assert_eq!(b.retries_total, 0);
    }

    #[test]
    fn class_is_deterministic() {
        let cfg = config(vec![class(30, 512), class(20, 1024)]);
        assert_eq!(
            simulate_class(&cfg, 1).unwrap(),
            simulate_class(&cfg, 1).unwrap()
        );
        // standalone and in-workload runs of a class agree on timing
        let all = simulate_all(&cfg).unwrap();
        let alone = simulate_class(&cfg, 1).unwrap();
        assert_eq!(all[1].tgd_s, alone.tgd_s);
        assert_eq!(all[1].samples, alone.samples);
    }

    #[test]
    fn invalid_class_index() {
        let cfg = config(vec![class(1, 1)]);
        assert_eq!(
            simulate_class(&cfg, 3).unwrap_err(),
            SimError::InvalidClass {
                index: 3,
                classes: 1
            }
        );
    }

    #[test]
    fn empty_workload_is_empty() {
        let cfg = config(vec![]);
        assert!(simulate_all(&cfg).unwrap().is_empty());
        assert!(emit_trace(&cfg).unwrap().is_empty());
    }

    #[test]
    fn makespan_bounds() {
        let cfg = config(vec![class(50, 2048)]);
        let b = simulate_class(&cfg, 0).unwrap();
        let total: f64 = b
            .samples
            .iter()
            .map(|s| s.encapsulation_delay_s + s.retry_delay_s)
            .sum();
        let max = b.delays().fold(0.0, f64::max);
        assert!(b.tgd_s >= total / cfg.parallelism as f64);
        assert!(b.tgd_s >= max);
        assert!(b.delays().all(|d| d > 0.0));
    }

    #[test]
    fn retries_counted() {
        let mut cfg = config(vec![class(200, 512)]);
        cfg.failure_probability = 0.2;
        cfg.max_retries = 10;
        let b = simulate_class(&cfg, 0).unwrap();
        assert!(b.retries_total > 0);
        assert_eq!(
            b.retries_total,
            b.samples.iter().map(|s| s.retries).sum::<u32>()
        );
        assert!(b.samples.iter().all(|s| s.retries <= cfg.max_retries));
    }

    #[test]
    fn exhausted_instances_stay_unbound() {
        let mut cfg = config(vec![class(3, 512)]);
        cfg.failure_probability = 1.0;
        cfg.max_retries = 2;
        let run = run(&cfg).unwrap();
        assert!(run.capsules.is_empty());
        assert!(run.batches[0]
            .samples
            .iter()
            .all(|s| !s.bound && s.retries == 2));
    }

    #[test]
    fn imt_matches_latency_model() {
        let mut cfg = config(vec![class(100, 1000)]);
        cfg.imt_model = LinearModel {
            base_s: 2.0,
            per_mb_s: 0.003,
        };
        let b = simulate_class(&cfg, 0).unwrap();
        assert!((b.imt_s - 5.0).abs() < 0.1, "{}", b.imt_s);
    }

    #[test]
    fn uniform_delays_positive() {
        let mut cfg = config(vec![class(100, 10)]);
        cfg.delay_model = DelayModel {
            mean_s: 1.0,
            stddev_s: 1.0,
            distribution: DelayDistribution::Uniform,
        };
        let b = simulate_class(&cfg, 0).unwrap();
        assert!(b.delays().all(|d| d > 0.0 && d < 1.0 + 3f64.sqrt()));
    }

    #[test]
    fn trace_ids_strictly_increase() {
        let cfg = config(vec![class(3, 10), class(2, 20)]);
        let trace = emit_trace(&cfg).unwrap();
        assert_eq!(trace.len(), 20);
        assert!(crate::model::validate_trace(&trace).is_ok());
        assert!(trace
            .windows(2)
            .all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(vec![class(1, 1)]);
        cfg.delay_model.mean_s = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = config(vec![class(1, 0)]);
        assert!(cfg.validate().is_err());
        cfg.classes[0].size_mb = 1;
        cfg.classes[0].failure_probability = Some(2.0);
        assert!(cfg.validate().is_err());
    }
}
