use std::fmt::Write as _;

use crate::objective::Variant;
use crate::probe::EvalReport;
use crate::{Error, Result};

/// Largest accepted gap between a stored delta and its recomputation.
pub const DELTA_TOLERANCE: f64 = 1e-9;

/// One (run, benchmark) cell with its change against the baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: Variant,
    pub benchmark: String,
    pub seed: u64,
    pub top1: f64,
    pub delta: f64,
}

/// Accuracy per variant and benchmark, with deltas against one baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub baseline: Variant,
    pub rows: Vec<SweepRow>,
}

const CSV_HEADER: &str = "variant,benchmark,seed,top1,delta";

fn benchmark_label(report: &EvalReport) -> String {
    format!("{} ({})", report.benchmark, report.probe)
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL.iter().position(|&x| x == v).unwrap_or(usize::MAX)
}

impl SweepTable {
    /// Builds rows from `(variant, seed, report)` results. Every
    /// (benchmark, seed) pair needs a baseline entry.
    pub fn from_reports(baseline: Variant, results: &[(Variant, u64, EvalReport)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(results.len());
        for (variant, seed, report) in results {
            let benchmark = benchmark_label(report);
            let base = results
                .iter()
                .find(|(v, s, r)| *v == baseline && s == seed && benchmark_label(r) == benchmark)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no {} run for {benchmark} at seed {seed}",
                        baseline.label()
                    ))
                })?;
            rows.push(SweepRow {
                variant: *variant,
                benchmark,
                seed: *seed,
                top1: report.top1,
                delta: report.top1 - base.2.top1,
            });
        }
        rows.sort_by(|a, b| {
            (&a.benchmark, a.seed, variant_rank(a.variant)).cmp(&(&b.benchmark, b.seed, variant_rank(b.variant)))
        });
        if rows.windows(2).any(|w| (&w[0].benchmark, w[0].seed, w[0].variant) == (&w[1].benchmark, w[1].seed, w[1].variant)) {
            return Err(Error::Config("duplicate (variant, benchmark, seed) result".into()));
        }
        Ok(Self { baseline, rows })
    }

    /// Rows whose delta disagrees with their baseline row.
    pub fn audit(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for row in &self.rows {
            let base = self
                .rows
                .iter()
                .find(|r| r.variant == self.baseline && r.seed == row.seed && r.benchmark == row.benchmark);
            match base {
                None => problems.push(format!("{} {}: no baseline row", row.variant.label(), row.benchmark)),
                Some(b) if (row.delta - (row.top1 - b.top1)).abs() > DELTA_TOLERANCE => problems.push(format!(
                    "{} {}: delta {} but accuracy gap {}",
                    row.variant.label(),
                    row.benchmark,
                    row.delta,
                    row.top1 - b.top1
                )),
                Some(_) => {}
            }
        }
        problems
    }

    /// Aligned text with accuracy in percent and delta in points.
    pub fn to_text(&self) -> String {
        let headers = ["Method", "Benchmark", "Seed", "Top-1 (%)", "Delta (pp)"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.label().to_string(),
                    r.benchmark.clone(),
                    r.seed.to_string(),
                    format!("{:.2}", 100.0 * r.top1),
                    format!("{:+.2}", 100.0 * r.delta),
                ]
            })
            .collect();
        let mut widths = headers.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |fields: &[&str]| {
            let mut s = String::new();
            for (i, (f, w)) in fields.iter().zip(widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                if i < 2 {
                    let _ = write!(s, "{f:<w$}");
                } else {
                    let _ = write!(s, "{f:>w$}");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&headers);
        line(&widths.map(|w| "-".repeat(w)).iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cells {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out.push_str(&format!("Delta is the change in points against {}.\n", self.baseline.label()));
        out
    }

    /// Comma-separated rows with fractions at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.variant.label(), r.benchmark, r.seed, r.top1, r.delta);
        }
        out
    }

    pub fn from_csv(text: &str, baseline: Variant) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format("report CSV header mismatch".into()));
        }
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Format(format!("report CSV row {}: {line:?}", i + 2));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(SweepRow {
                    variant: Variant::from_label(f[0])?,
                    benchmark: f[1].to_string(),
                    seed: f[2].parse().map_err(|_| bad())?,
                    top1: f[3].parse().map_err(|_| bad())?,
                    delta: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { baseline, rows })
    }
}
