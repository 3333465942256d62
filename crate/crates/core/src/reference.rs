//! Published measurements of the reference experiment: 936 VM instances in
//! six size classes. Used as calibration targets and printed alongside
//! simulated results in reports.

use crate::metrics::Bin;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMeasurement {
    pub vm_count: u32,
    pub size_mb: u64,
    pub tgd_s: f64,
    pub imt_s: f64,
    pub retries: u32,
}

const fn row(
    vm_count: u32,
    size_mb: u64,
    tgd_s: f64,
    imt_s: f64,
    retries: u32,
) -> ClassMeasurement {
    ClassMeasurement {
        vm_count,
        size_mb,
        tgd_s,
        imt_s,
        retries,
    }
}

/// Global delay, inter-message delay and retries per class.
pub const TABLE1: [ClassMeasurement; 6] = [
    row(140, 512, 817.0, 28.9, 0),
    row(100, 1024, 867.0, 91.4, 0),
    row(160, 1536, 892.0, 90.9, 0),
    row(162, 2048, 948.0, 102.7, 7),
    row(184, 2560, 1072.0, 169.3, 3),
    row(190, 3072, 1118.0, 281.61, 7),
];

pub const TOTAL_INSTANCES: u32 = 936;

/// The visible "M.Time(s)" column of the mean-delay table.
pub const TABLE2_MEAN_TIME_S: [f64; 5] = [6.042, 8.584, 7.505, 8.866, 9.990];
/// The "M.Cont." column printed alongside.
pub const TABLE2_MEAN_CONT: [f64; 5] = [5.104, 5.924, 6.368, 7.011, 8.026];

pub const PRINTED_MEAN_DELAY_S: f64 = 8.198;
pub const PRINTED_STDDEV: f64 = 1.434;
pub const PRINTED_VARIANCE: f64 = 2.056;

/// Delay ranges of the frequency table, closed on both ends.
pub const TABLE3_BINS: [Bin; 5] = [
    Bin::new(1.0, 2.0),
    Bin::new(3.0, 4.0),
    Bin::new(5.0, 6.0),
    Bin::new(7.0, 8.0),
    Bin::new(9.0, 9.9),
];
pub const TABLE3_LABELS: [&str; 5] = ["1 - 2", "3 - 4", "5 - 6", "7 - 8", "9 - 9.9"];
pub const TABLE3_FREQUENCY: [usize; 5] = [14, 22, 104, 422, 374];
/// Printed under "Cumulative Freq.(%)"; the values are per-bin relative
/// frequencies, not running sums.
pub const TABLE3_PRINTED_PCT: [f64; 5] = [1.50, 2.40, 11.1, 45.1, 40.0];
/// Decimal places each printed percentage carries.
pub const TABLE3_PRINTED_DECIMALS: [u32; 5] = [2, 2, 1, 1, 1];

/// Synthetic delays reproducing the frequency table: each bin's count placed
/// at its midpoint.
pub fn table3_synthetic_samples() -> Vec<f64> {
    TABLE3_BINS
        .iter()
        .zip(TABLE3_FREQUENCY)
        .flat_map(|(b, n)| std::iter::repeat_n((b.lower_s + b.upper_s) / 2.0, n))
        .collect()
}
