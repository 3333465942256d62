//! Run reports: per-class tables, delay statistics, the benchmark gate and a
//! reconciliation of the published reference figures.
//!
//! Float formatting is fixed-width and every collection is ordered, so the
//! same run always renders to the same bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{self, Bin, BinMode, FrequencyTable, GateReport, MetricsError, StatsSummary};
use crate::reference;
use crate::sim::{BatchResult, SimConfig};

pub const GLOBAL_DELAY_CSV: &str = "global_delay.csv";
pub const MEAN_DELAY_CSV: &str = "mean_delay.csv";
pub const DELAY_FREQUENCY_CSV: &str = "delay_frequency.csv";
pub const REFERENCE_FREQUENCY_CSV: &str = "reference_frequency.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Allowed gap between a computed percentage and its published value.
pub const PCT_TOLERANCE: f64 = 0.1;

/// Hex SHA-256 of the config's canonical TOML form.
pub fn config_hash(config: &SimConfig) -> String {
    let text = toml::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The `key=value` metadata carried by every artifact of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub seed: u64,
    pub config_sha256: String,
}

impl RunStamp {
    pub fn of(config: &SimConfig) -> Self {
        Self {
            seed: config.seed,
            config_sha256: config_hash(config),
        }
    }

    pub fn header(&self) -> String {
        format!("seed={} config_sha256={}", self.seed, self.config_sha256)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub vm_count: u32,
    pub size_mb: u64,
    pub tgd_s: f64,
    pub imt_s: f64,
    pub retries: u32,
    /// Mean wait for a free encapsulation worker.
    pub mean_contention_s: f64,
    /// Mean encapsulation delay of the class.
    pub mean_time_s: f64,
    pub unbound: usize,
}

impl ClassRow {
    fn of(batch: &BatchResult) -> Self {
        let n = batch.samples.len().max(1) as f64;
        Self {
            vm_count: batch.vm_count,
            size_mb: batch.size_mb,
            tgd_s: batch.tgd_s,
            imt_s: batch.imt_s,
            retries: batch.retries_total,
            mean_contention_s: batch.samples.iter().map(|s| s.queue_wait_s).sum::<f64>() / n,
            mean_time_s: batch.delays().sum::<f64>() / n,
            unbound: batch.samples.iter().filter(|s| !s.bound).count(),
        }
    }
}

/// One row of the published frequency table next to what its counts imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCheck {
    pub label: String,
    pub frequency: usize,
    pub published_pct: f64,
    /// Decimal places of the published value.
    pub published_decimals: u32,
    pub relative_pct: f64,
    pub cumulative_pct: f64,
    /// The computed relative value rounds to the published digits.
    pub matches_published: bool,
    pub within_tolerance: bool,
}

/// Published figures set against values recomputed from the published data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub mean_time_column_s: Vec<f64>,
    pub computed: StatsSummary,
    pub published_mean_s: f64,
    pub published_variance: f64,
    pub published_stddev: f64,
    pub frequency: Vec<FrequencyCheck>,
}

fn round_to(x: f64, decimals: u32) -> f64 {
    let k = 10f64.powi(decimals as i32);
    (x * k).round() / k
}

pub fn reconcile() -> Result<Reconciliation, MetricsError> {
    let computed = metrics::summarize(&reference::TABLE2_MEAN_TIME_S)?;
    let table = metrics::frequency_table(
        &reference::table3_synthetic_samples(),
        &reference::TABLE3_BINS,
        BinMode::Strict,
    )?;
    let frequency = (0..table.counts.len())
        .map(|i| {
            let published = reference::TABLE3_PRINTED_PCT[i];
            let relative = table.relative_pct[i];
            FrequencyCheck {
                label: reference::TABLE3_LABELS[i].to_owned(),
                frequency: table.counts[i],
                published_pct: published,
                published_decimals: reference::TABLE3_PRINTED_DECIMALS[i],
                relative_pct: relative,
                cumulative_pct: table.cumulative_pct[i],
                matches_published: round_to(relative, reference::TABLE3_PRINTED_DECIMALS[i])
                    == published,
                within_tolerance: (relative - published).abs() <= PCT_TOLERANCE,
            }
        })
        .collect();
    Ok(Reconciliation {
        mean_time_column_s: reference::TABLE2_MEAN_TIME_S.to_vec(),
        computed,
        published_mean_s: reference::PRINTED_MEAN_DELAY_S,
        published_variance: reference::PRINTED_VARIANCE,
        published_stddev: reference::PRINTED_STDDEV,
        frequency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stamp: RunStamp,
    pub instances: usize,
    pub parallelism: usize,
    pub classes: Vec<ClassRow>,
    pub delays: StatsSummary,
    pub gate: GateReport,
    pub frequency: FrequencyTable,
    pub reference: Reconciliation,
}

impl RunReport {
    pub fn build(
        stamp: RunStamp,
        parallelism: usize,
        batches: &[BatchResult],
        threshold_s: f64,
    ) -> Result<Self, MetricsError> {
        let delays: Vec<f64> = batches.iter().flat_map(|b| b.delays()).collect();
        let summary = metrics::summarize(&delays)?;
        Ok(Self {
            stamp,
            instances: delays.len(),
            parallelism,
            classes: batches.iter().map(ClassRow::of).collect(),
            delays: summary,
            gate: metrics::benchmark_gate(summary.mean_s, threshold_s),
            frequency: metrics::frequency_table(
                &delays,
                &reference::TABLE3_BINS,
                BinMode::CoverGaps,
            )?,
            reference: reconcile()?,
        })
    }

    pub fn global_delay_csv(&self) -> String {
        csv_text(
            &self.stamp,
            &["VM-Count", "Size", "TGD(s)", "IMT(s)", "Retries"],
            self.classes.iter().map(|c| {
                vec![
                    c.vm_count.to_string(),
                    c.size_mb.to_string(),
                    format!("{:.3}", c.tgd_s),
                    format!("{:.3}", c.imt_s),
                    c.retries.to_string(),
                ]
            }),
        )
    }

    /// Per-class rows leave the overall columns empty; the closing `all` row
    /// carries the overall mean and conventional standard deviation.
    pub fn mean_delay_csv(&self) -> String {
        let n = self.instances.max(1) as f64;
        let mean_cont = self
            .classes
            .iter()
            .map(|c| c.mean_contention_s * c.vm_count as f64)
            .sum::<f64>()
            / n;
        let rows = self
            .classes
            .iter()
            .map(|c| {
                vec![
                    c.size_mb.to_string(),
                    format!("{:.3}", c.mean_contention_s),
                    format!("{:.3}", c.mean_time_s),
                    String::new(),
                    String::new(),
                ]
            })
            .chain(std::iter::once(vec![
                "all".to_owned(),
                format!("{mean_cont:.3}"),
                format!("{:.3}", self.delays.mean_s),
                format!("{:.3}", self.delays.mean_s),
                format!("{:.3}", self.delays.stddev_conventional),
            ]));
        csv_text(
            &self.stamp,
            &["Size", "M.Cont.", "M.Time(s)", "M.Delay(s)", "STD.Dev"],
            rows,
        )
    }

    pub fn delay_frequency_csv(&self) -> String {
        let f = &self.frequency;
        csv_text(
            &self.stamp,
            &[
                "Delay Range",
                "Frequency",
                "Cumulative Freq.(%)",
                "Relative Freq.(%)",
            ],
            (0..f.counts.len()).map(|i| {
                vec![
                    reference::TABLE3_LABELS[i].to_owned(),
                    f.counts[i].to_string(),
                    format!("{:.2}", f.cumulative_pct[i]),
                    format!("{:.2}", f.relative_pct[i]),
                ]
            }),
        )
    }

    pub fn reference_frequency_csv(&self) -> String {
        csv_text(
            &self.stamp,
            &[
                "Delay Range",
                "Frequency",
                "Published (%)",
                "Relative Freq.(%)",
                "Cumulative Freq.(%)",
                "Note",
            ],
            self.reference.frequency.iter().map(|r| {
                vec![
                    r.label.clone(),
                    r.frequency.to_string(),
                    r.published_text(),
                    format!("{:.2}", r.relative_pct),
                    format!("{:.2}", r.cumulative_pct),
                    frequency_note(r).to_owned(),
                ]
            }),
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut t = String::new();
        let d = &self.delays;
        let r = &self.reference;
        let c = &r.computed;
        let _ = writeln!(t, "# {}", self.stamp.header());
        let _ = writeln!(
            t,
            "{} instances in {} classes, {} encapsulation workers\n",
            self.instances,
            self.classes.len(),
            self.parallelism
        );

        let _ = writeln!(t, "Global delay per class");
        let _ = writeln!(
            t,
            "{:>8} {:>6} {:>10} {:>9} {:>7} {:>10} {:>10}",
            "VM-Count", "Size", "TGD(s)", "IMT(s)", "Retries", "M.Cont.", "M.Time(s)"
        );
        for row in &self.classes {
            let _ = writeln!(
                t,
                "{:>8} {:>6} {:>10.3} {:>9.3} {:>7} {:>10.3} {:>10.3}",
                row.vm_count,
                row.size_mb,
                row.tgd_s,
                row.imt_s,
                row.retries,
                row.mean_contention_s,
                row.mean_time_s
            );
        }
        let unbound: usize = self.classes.iter().map(|c| c.unbound).sum();
        if unbound > 0 {
            let _ = writeln!(
                t,
                "{unbound} capsules exhausted their retries and stayed unbound"
            );
        }

        let _ = writeln!(t, "\nEncapsulation delay over {} samples", d.n);
        let _ = writeln!(t, "  mean                      {:.4} s", d.mean_s);
        let _ = writeln!(t, "  variance (n-1)            {:.4}", d.variance);
        let _ = writeln!(
            t,
            "  stddev, conventional      {:.4} s",
            d.stddev_conventional
        );
        let _ = writeln!(t, "  stddev of the mean        {:.4} s", d.stddev_of_mean);
        let g = &self.gate;
        let _ = writeln!(
            t,
            "  benchmark gate            {} (mean {:.4} s {} {} s, margin {:.4} s)",
            if g.pass { "PASS" } else { "FAIL" },
            g.mean_s,
            if g.pass { "<" } else { ">=" },
            g.threshold_s,
            g.margin_s
        );

        let f = &self.frequency;
        let _ = writeln!(t, "\nDelay frequency (bins widened to cover gaps)");
        let _ = writeln!(
            t,
            "{:>9} {:>17} {:>9} {:>12} {:>12}",
            "Range", "Counted as", "Frequency", "Relative(%)", "Cumul.(%)"
        );
        for i in 0..f.counts.len() {
            let _ = writeln!(
                t,
                "{:>9} {:>17} {:>9} {:>12.2} {:>12.2}",
                reference::TABLE3_LABELS[i],
                interval(&f.effective[i], i + 1 == f.counts.len()),
                f.counts[i],
                f.relative_pct[i],
                f.cumulative_pct[i]
            );
        }

        let _ = writeln!(t, "\nReference figures");
        let _ = writeln!(
            t,
            "  published M.Time(s) column: {}",
            r.mean_time_column_s
                .iter()
                .map(|x| format!("{x:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let _ = writeln!(t, "  {:<26} {:>12} {:>12}", "", "published", "computed");
        let _ = writeln!(
            t,
            "  {:<26} {:>12.3} {:>12.4}",
            "mean delay (s)", r.published_mean_s, c.mean_s
        );
        let _ = writeln!(
            t,
            "  {:<26} {:>12.3} {:>12.4}",
            "variance", r.published_variance, c.variance
        );
        let _ = writeln!(
            t,
            "  {:<26} {:>12.3} {:>12.4}",
            "stddev, conventional", r.published_stddev, c.stddev_conventional
        );
        let _ = writeln!(
            t,
            "  {:<26} {:>12} {:>12.4}",
            "stddev of the mean", "-", c.stddev_of_mean
        );
        let _ = writeln!(
            t,
            "  The published variance and stddev do not follow from the published column:\n  \
             sqrt({:.3}) = {:.4}, while the column gives variance {:.4} and stddev {:.4}.",
            r.published_variance,
            r.published_variance.sqrt(),
            c.variance,
            c.stddev_conventional
        );

        let _ = writeln!(
            t,
            "\nPublished delay frequencies, recomputed from their counts"
        );
        let _ = writeln!(
            t,
            "{:>9} {:>9} {:>10} {:>12} {:>12}  note",
            "Range", "Frequency", "Published", "Relative(%)", "Cumul.(%)"
        );
        for row in &r.frequency {
            let _ = writeln!(
                t,
                "{:>9} {:>9} {:>10} {:>12.2} {:>12.2}  {}",
                row.label,
                row.frequency,
                row.published_text(),
                row.relative_pct,
                row.cumulative_pct,
                frequency_note(row)
            );
        }
        let _ = writeln!(
            t,
            "  The published column, headed cumulative, matches the per-bin relative frequency."
        );
        t
    }

    /// Writes every report artifact into `dir`, returning the paths written.
    pub fn write_to(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        let files = [
            (GLOBAL_DELAY_CSV, self.global_delay_csv()),
            (MEAN_DELAY_CSV, self.mean_delay_csv()),
            (DELAY_FREQUENCY_CSV, self.delay_frequency_csv()),
            (REFERENCE_FREQUENCY_CSV, self.reference_frequency_csv()),
            (REPORT_JSON, self.to_json()),
            (REPORT_TXT, self.render_text()),
        ];
        let mut out = Vec::with_capacity(files.len());
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body)?;
            out.push(path);
        }
        Ok(out)
    }
}

impl FrequencyCheck {
    pub fn published_text(&self) -> String {
        format!(
            "{:.*}",
            self.published_decimals as usize, self.published_pct
        )
    }
}

fn frequency_note(row: &FrequencyCheck) -> &'static str {
    match (row.matches_published, row.within_tolerance) {
        (true, _) => "matches relative frequency",
        (false, true) => "published value is a rounding of the relative frequency",
        (false, false) => "does not match",
    }
}

fn interval(b: &Bin, closed: bool) -> String {
    format!(
        "[{:.3}, {:.3}{}",
        b.lower_s,
        b.upper_s,
        if closed { "]" } else { ")" }
    )
}

fn csv_text<I>(stamp: &RunStamp, header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut buf = format!("# {}\n", stamp.header()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).expect("in-memory write");
        for row in rows {
            w.write_record(&row).expect("in-memory write");
        }
        w.flush().expect("in-memory flush");
    }
    String::from_utf8(buf).expect("utf-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconciliation_flags_only_the_rounded_row() {
        let r = reconcile().unwrap();
        let flags: Vec<bool> = r.frequency.iter().map(|f| f.matches_published).collect();
        assert_eq!(flags, vec![true, false, true, true, true]);
        assert!(r.frequency.iter().all(|f| f.within_tolerance));
        // 22 / 936
        assert!((r.frequency[1].relative_pct - 2.3504273504273505).abs() < 1e-12);
    }

    #[test]
    fn round_to_digits() {
        assert_eq!(round_to(45.0854, 1), 45.1);
        assert_eq!(round_to(1.4957, 2), 1.50);
    }

    #[test]
    fn csv_has_stamp_and_header() {
        let stamp = RunStamp {
            seed: 4,
            config_sha256: "ab".into(),
        };
        let text = csv_text(&stamp, &["A", "B C"], [vec!["1".into(), "x,y".into()]]);
        assert_eq!(text, "# seed=4 config_sha256=ab\nA,B C\n1,\"x,y\"\n");
    }
}
