//! Delay statistics, frequency tables and the encapsulation benchmark gate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerable mean encapsulation time, seconds.
pub const DEFAULT_THRESHOLD_S: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("need at least 2 samples, got {n}")]
    TooFewSamples { n: usize },
    #[error("sample {value} falls outside every bin")]
    BinCoverage { value: f64 },
    #[error("invalid bins: {0}")]
    InvalidBins(String),
}

pub fn mean(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

fn sum_sq_dev(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples { n: samples.len() });
    }
    let m = mean(samples)?;
    Ok(samples.iter().map(|x| (x - m) * (x - m)).sum())
}

/// Unbiased sample variance, divisor n - 1.
pub fn variance(samples: &[f64]) -> Result<f64, MetricsError> {
    Ok(sum_sq_dev(samples)? / (samples.len() - 1) as f64)
}

/// sqrt(sum of squared deviations / (n (n - 1))), i.e. the standard error of
/// the mean. The conventional deviation is `variance(..).sqrt()`.
pub fn stddev_of_mean(samples: &[f64]) -> Result<f64, MetricsError> {
    let n = samples.len() as f64;
    Ok((sum_sq_dev(samples)? / (n * (n - 1.0))).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n: usize,
    pub mean_s: f64,
    pub variance: f64,
    pub stddev_of_mean: f64,
    pub stddev_conventional: f64,
}

pub fn summarize(samples: &[f64]) -> Result<StatsSummary, MetricsError> {
    let variance = variance(samples)?;
    Ok(StatsSummary {
        n: samples.len(),
        mean_s: mean(samples)?,
        variance,
        stddev_of_mean: stddev_of_mean(samples)?,
        stddev_conventional: variance.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower_s: f64,
    pub upper_s: f64,
}

impl Bin {
    pub const fn new(lower_s: f64, upper_s: f64) -> Self {
        Self { lower_s, upper_s }
    }
}

/// How bins are matched against samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinMode {
    /// Each bin is closed on both ends; a sample between bins is an error.
    #[default]
    Strict,
    /// Each bin runs up to the next bin's lower edge, the first bin extends
    /// down to the smallest sample and the last up to the largest.
    CoverGaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub n: usize,
    /// Bins as requested.
    pub bins: Vec<Bin>,
    /// Edges actually used for counting.
    pub effective: Vec<Bin>,
    pub counts: Vec<usize>,
    pub relative_pct: Vec<f64>,
    pub cumulative_pct: Vec<f64>,
}

fn check_bins(bins: &[Bin]) -> Result<(), MetricsError> {
    if bins.is_empty() {
        return Err(MetricsError::InvalidBins("no bins".into()));
    }
    for b in bins {
        if !(b.lower_s <= b.upper_s) {
            return Err(MetricsError::InvalidBins(format!(
                "bin [{}, {}] is inverted",
                b.lower_s, b.upper_s
            )));
        }
    }
    for w in bins.windows(2) {
        if w[1].lower_s <= w[0].upper_s {
            return Err(MetricsError::InvalidBins(format!(
                "bin [{}, {}] overlaps or precedes [{}, {}]",
                w[1].lower_s, w[1].upper_s, w[0].lower_s, w[0].upper_s
            )));
        }
    }
    Ok(())
}

/// Bins must be given in ascending order.
pub fn frequency_table(
    samples: &[f64],
    bins: &[Bin],
    mode: BinMode,
) -> Result<FrequencyTable, MetricsError> {
    check_bins(bins)?;
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = samples.iter().find(|x| x.is_nan()) {
        return Err(MetricsError::BinCoverage { value: bad });
    }
    let effective: Vec<Bin> = match mode {
        BinMode::Strict => bins.to_vec(),
        BinMode::CoverGaps => {
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let last = bins.len() - 1;
            bins.iter()
                .enumerate()
                .map(|(i, b)| Bin {
                    lower_s: if i == 0 { b.lower_s.min(lo) } else { b.lower_s },
                    upper_s: if i == last {
                        b.upper_s.max(hi)
                    } else {
                        bins[i + 1].lower_s
                    },
                })
                .collect()
        }
    };
    let last = effective.len() - 1;
    let mut counts = vec![0usize; effective.len()];
    for &x in samples {
        let slot = effective.iter().enumerate().position(|(i, b)| match mode {
            BinMode::Strict => b.lower_s <= x && x <= b.upper_s,
            BinMode::CoverGaps if i == last => b.lower_s <= x && x <= b.upper_s,
            BinMode::CoverGaps => b.lower_s <= x && x < b.upper_s,
        });
        match slot {
            Some(i) => counts[i] += 1,
            None => return Err(MetricsError::BinCoverage { value: x }),
        }
    }
    let n = samples.len();
    let relative_pct: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / n as f64 * 100.0)
        .collect();
    let mut running = 0usize;
    let cumulative_pct = counts
        .iter()
        .map(|&c| {
            running += c;
            running as f64 / n as f64 * 100.0
        })
        .collect();
    Ok(FrequencyTable {
        n,
        bins: bins.to_vec(),
        effective,
        counts,
        relative_pct,
        cumulative_pct,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub mean_s: f64,
    pub threshold_s: f64,
    pub pass: bool,
    pub margin_s: f64,
}

/// Passes iff the mean stays strictly below the threshold.
pub fn benchmark_gate(mean_s: f64, threshold_s: f64) -> GateReport {
    GateReport {
        mean_s,
        threshold_s,
        pass: mean_s < threshold_s,
        margin_s: threshold_s - mean_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    #[test]
    fn mean_of_table2_column() {
        let m = mean(&reference::TABLE2_MEAN_TIME_S).unwrap();
        assert!((m - 8.1974).abs() < 1e-12);
    }

    #[test]
    fn constant_samples() {
        assert_eq!(mean(&[3.5, 3.5, 3.5]).unwrap(), 3.5);
        assert_eq!(variance(&[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(stddev_of_mean(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn table2_spread() {
        // sum of squared deviations = 8.9350672
        let s = summarize(&reference::TABLE2_MEAN_TIME_S).unwrap();
        assert!((s.variance - 2.2337668).abs() < 1e-12, "{}", s.variance);
        assert!((s.stddev_conventional - 1.4945791).abs() < 1e-7);
        assert!((s.stddev_of_mean - 0.6683961).abs() < 1e-7);
    }

    #[test]
    fn errors_on_small_inputs() {
        assert_eq!(mean(&[]), Err(MetricsError::Empty));
        assert_eq!(variance(&[1.0]), Err(MetricsError::TooFewSamples { n: 1 }));
        assert_eq!(
            stddev_of_mean(&[]),
            Err(MetricsError::TooFewSamples { n: 0 })
        );
    }

    #[test]
    fn single_bin_is_everything() {
        let t = frequency_table(&[1.0, 2.0, 3.0], &[Bin::new(0.0, 5.0)], BinMode::Strict).unwrap();
        assert_eq!(t.counts, vec![3]);
        assert_eq!(t.relative_pct, vec![100.0]);
        assert_eq!(t.cumulative_pct, vec![100.0]);
    }

    #[test]
    fn gap_sample_is_a_coverage_error() {
        let bins = reference::TABLE3_BINS;
        assert_eq!(
            frequency_table(&[2.5], &bins, BinMode::Strict),
            Err(MetricsError::BinCoverage { value: 2.5 })
        );
        let t = frequency_table(&[2.5, 9.95, 0.5], &bins, BinMode::CoverGaps).unwrap();
        assert_eq!(t.counts, vec![2, 0, 0, 0, 1]);
        assert_eq!(t.effective[0].lower_s, 0.5);
        assert_eq!(t.effective[4].upper_s, 9.95);
    }

    #[test]
    fn closed_edges() {
        let t = frequency_table(
            &[1.0, 2.0, 3.0, 9.9],
            &reference::TABLE3_BINS,
            BinMode::Strict,
        )
        .unwrap();
        assert_eq!(t.counts, vec![2, 1, 0, 0, 1]);
    }

    #[test]
    fn bad_bins() {
        assert!(matches!(
            frequency_table(
                &[1.0],
                &[Bin::new(0.0, 2.0), Bin::new(2.0, 3.0)],
                BinMode::Strict
            ),
            Err(MetricsError::InvalidBins(_))
        ));
        assert!(matches!(
            frequency_table(&[1.0], &[Bin::new(3.0, 2.0)], BinMode::Strict),
            Err(MetricsError::InvalidBins(_))
        ));
        assert!(matches!(
            frequency_table(&[1.0], &[], BinMode::Strict),
            Err(MetricsError::InvalidBins(_))
        ));
    }

    #[test]
    fn gate() {
        let g = benchmark_gate(8.198, 10.0);
        assert!(g.pass);
        assert!((g.margin_s - 1.802).abs() < 1e-12);
        assert!(!benchmark_gate(10.0, 10.0).pass);
        assert!(benchmark_gate(0.001, 10.0).pass);
    }
}
