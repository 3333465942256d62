//! Fits simulator parameters to published per-class measurements.
//!
//! 1. Classes and per-class fault probabilities come from the measured
//!    instance counts and retry counts.
//! 2. The message-latency model is the least-squares line through the
//!    measured (size, inter-message delay) pairs.
//! 3. The seed is the first one, counting up from the base seed, whose fault
//!    draws reproduce the measured retry counts exactly.
//! 4. The activity-duration line is refined by repeatedly fitting the
//!    residual between measured and simulated global delay.

use serde::Serialize;

use crate::reference::ClassMeasurement;
use crate::sim::{self, ClassSpec, LinearModel, SimConfig, SimError};

pub const ACTIVITY_REFINEMENTS: usize = 4;

/// Least-squares line through `(x, y)` points. Needs two distinct x values.
pub fn least_squares(points: &[(f64, f64)]) -> Option<LinearModel> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(LinearModel {
        base_s: my - slope * mx,
        per_mb_s: slope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFit {
    pub size_mb: u64,
    pub target_tgd_s: f64,
    pub simulated_tgd_s: f64,
    pub relative_error: f64,
    pub target_retries: u32,
    pub simulated_retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub config: SimConfig,
    pub seeds_tried: u64,
    pub classes: Vec<ClassFit>,
}

fn fault_probability(target: &ClassMeasurement) -> f64 {
    // expected retries of a geometric attempt count: n p / (1 - p)
    let r = f64::from(target.retries);
    r / (f64::from(target.vm_count) + r)
}

fn retries_match(config: &SimConfig, targets: &[ClassMeasurement]) -> Result<bool, SimError> {
    for (i, t) in targets.iter().enumerate() {
        if config.policy_for(i).failure_probability == 0.0 {
            continue;
        }
        if sim::simulate_class(config, i)?.retries_total != t.retries {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn calibrate(
    base: &SimConfig,
    targets: &[ClassMeasurement],
    max_seed_trials: u64,
) -> Result<Calibration, SimError> {
    let mut config = base.clone();
    config.classes = targets
        .iter()
        .map(|t| ClassSpec {
            vm_count: t.vm_count,
            size_mb: t.size_mb,
            failure_probability: Some(fault_probability(t)),
        })
        .collect();
    let imt_points: Vec<(f64, f64)> = targets
        .iter()
        .map(|t| (t.size_mb as f64, t.imt_s))
        .collect();
    config.imt_model = least_squares(&imt_points)
        .ok_or_else(|| SimError::InvalidConfig("need two distinct class sizes".into()))?;
    config.activity_model = LinearModel::default();
    config.validate()?;

    let mut seeds_tried = 0;
    loop {
        if seeds_tried == max_seed_trials {
            return Err(SimError::InvalidConfig(format!(
                "no seed in {}..{} reproduces the retry counts",
                base.seed,
                base.seed.wrapping_add(max_seed_trials)
            )));
        }
        config.seed = base.seed.wrapping_add(seeds_tried);
        seeds_tried += 1;
        if retries_match(&config, targets)? {
            break;
        }
    }

    for _ in 0..ACTIVITY_REFINEMENTS {
        let batches = sim::simulate_all(&config)?;
        let residual: Vec<(f64, f64)> = targets
            .iter()
            .zip(&batches)
            .map(|(t, b)| (t.size_mb as f64, t.tgd_s - b.tgd_s))
            .collect();
        let step = least_squares(&residual).expect("sizes already checked");
        config.activity_model.base_s += step.base_s;
        config.activity_model.per_mb_s += step.per_mb_s;
    }

    let batches = sim::simulate_all(&config)?;
    let classes = targets
        .iter()
        .zip(&batches)
        .map(|(t, b)| ClassFit {
            size_mb: t.size_mb,
            target_tgd_s: t.tgd_s,
            simulated_tgd_s: b.tgd_s,
            relative_error: (b.tgd_s - t.tgd_s) / t.tgd_s,
            target_retries: t.retries,
            simulated_retries: b.retries_total,
        })
        .collect();
    Ok(Calibration {
        config,
        seeds_tried,
        classes,
    })
}
