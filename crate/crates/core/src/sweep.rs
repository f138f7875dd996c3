//! Rate–distortion sweeps over a grid of budgets, with CSV and SVG output.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::bitstream::encode_batch;
use crate::codebook::MsvqModel;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::quantizer::squared_error;
use crate::rate::MarginalLossTable;

/// Column order of the CSV report. Downstream tooling depends on it.
pub const CSV_HEADER: &str =
    "b_cap,active_stages,plan_exact_bits,plan_avg_bits,predicted_mse,measured_mse,mean_payload_bits,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub b_cap: u32,
    pub active_stages: usize,
    pub plan_exact_bits: u64,
    pub plan_avg_bits: f64,
    pub predicted_mse: f64,
    pub measured_mse: f64,
    /// Mean coded bits per vector, excluding byte padding.
    pub mean_payload_bits: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Parses `lo:hi:step` into an inclusive ascending grid.
pub fn parse_grid(spec: &str) -> Result<Vec<u32>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("budget grid must be lo:hi:step, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
        .collect::<Result<Vec<u32>>>()?;
    let (lo, hi, step) = (nums[0], nums[1], nums[2]);
    if step == 0 || hi < lo {
        return Err(bad());
    }
    Ok((lo..=hi).step_by(step as usize).collect())
}

/// `count` budgets from 0 to `total` inclusive, evenly spaced and rounded down.
pub fn even_grid(total: u32, count: usize) -> Vec<u32> {
    if count < 2 {
        return vec![total];
    }
    (0..count)
        .map(|k| ((total as u64 * k as u64) / (count as u64 - 1)) as u32)
        .collect()
}

pub fn run_sweep(
    model: &MsvqModel,
    table: &MarginalLossTable,
    data: &FeatureMatrix,
    budgets: &[u32],
) -> Result<SweepReport> {
    if data.rows() == 0 {
        return Err(Error::InsufficientData("sweep needs data".into()));
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let rows = budgets
        .into_iter()
        .map(|b_cap| {
            let start = Instant::now();
            let batch = encode_batch(model, table, data, b_cap, false)?;
            let mse = data
                .iter_rows()
                .zip(&batch.z_hat)
                .map(|(z, zh)| squared_error(z, zh))
                .sum::<f64>()
                / data.rows() as f64;
            Ok(SweepRow {
                b_cap,
                active_stages: batch.plan.active_stages(),
                plan_exact_bits: batch.plan.exact_bits,
                plan_avg_bits: batch.plan.avg_bits,
                predicted_mse: table.predicted_mse(&batch.plan.stages),
                measured_mse: mse,
                mean_payload_bits: batch.mean_coded_bits(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3}",
                r.b_cap,
                r.active_stages,
                r.plan_exact_bits,
                r.plan_avg_bits,
                r.predicted_mse,
                r.measured_mse,
                r.mean_payload_bits,
                r.wall_ms
            );
        }
        s
    }

    /// Largest increase of measured MSE between consecutive rows (0 when monotone).
    pub fn max_mse_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| (w[1].measured_mse - w[0].measured_mse).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Measured MSE against mean payload bits as a standalone SVG.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 420.0, 60.0);
        let xs: Vec<f64> = self.rows.iter().map(|r| r.mean_payload_bits).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.measured_mse).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else {
                (lo.min(0.0), lo.max(0.0) + 1.0)
            }
        };
        let (x0, x1) = span(&xs);
        let (y0, y1) = span(&ys);
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{pad} {pad} V{b} H{r}" fill="none" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        let pts: Vec<String> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for (&x, &y) in xs.iter().zip(&ys) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
                px(x),
                py(y)
            );
        }
        let text = |s: &mut String, x: f64, y: f64, anchor: &str, t: String| {
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{t}</text>"#
            );
        };
        text(&mut s, pad, h - pad + 18.0, "middle", format!("{x0:.1}"));
        text(&mut s, w - pad, h - pad + 18.0, "middle", format!("{x1:.1}"));
        text(&mut s, pad - 6.0, h - pad, "end", format!("{y0:.4}"));
        text(&mut s, pad - 6.0, pad, "end", format!("{y1:.4}"));
        text(&mut s, w / 2.0, h - 15.0, "middle", "mean payload bits per vector".into());
        text(&mut s, 15.0, h / 2.0, "middle", "MSE".into());
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::bind_table;
    use crate::rate::{build_table, BitMode};
    use crate::testutil::fitted_model;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:10:5").unwrap(), vec![0, 5, 10]);
        assert_eq!(parse_grid("3:4:10").unwrap(), vec![3]);
        assert!(parse_grid("5:1:1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("0:4:0").is_err());
        assert_eq!(even_grid(9, 4), vec![0, 3, 6, 9]);
        assert_eq!(even_grid(28, 10).len(), 10);
    }

    #[test]
    fn sweep_is_monotone_and_exact_at_full_budget() {
        let (model, data) = fitted_model(4, false);
        let table = build_table(&model, &data, BitMode::Exact).unwrap();
        let model = bind_table(model, &table).unwrap();
        let total = table.total_bits() as u32;
        let report = run_sweep(&model, &table, &data, &even_grid(total, 6)).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.max_mse_increase() <= 1e-9);
        for r in &report.rows {
            assert!((r.predicted_mse - r.measured_mse).abs() <= 1e-9 * r.measured_mse.max(1.0));
            assert_eq!(r.mean_payload_bits, r.plan_exact_bits as f64);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
        let svg = report.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
