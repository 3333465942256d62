//! Provenance capture for cloud activity-layer events.
//!
//! Events are matched to registered file objects, accumulated into provenance
//! capsules and bound to their originals under a shared binding identity.
//! Around that core sit composite-operation signature detection, memory and
//! disk footprint accounting, a seeded workload simulator with calibration
//! against published measurements, delay statistics and persistence.

pub mod calibrate;
pub mod capsule;
pub mod cli;
pub mod metrics;
pub mod model;
pub mod ocal;
pub mod reference;
pub mod report;
pub mod signature;
pub mod sim;
pub mod store;

pub use capsule::{Engine, EngineError, RetryPolicy};
pub use model::{ActivityEvent, BId, OpKind, OriginalFile, ProvenanceCapsule, ProvenanceRecord};
