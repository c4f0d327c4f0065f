//! CSV tables and small line-plot PNGs.

use std::path::Path;

use digress_core::attack::AttackTrace;
use digress_core::eval::EvalReport;
use digress_core::timestep::EigenfeatureReport;
use image::{Rgb, RgbImage};

use crate::error::{AppError, Result};
use crate::io;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    io::ensure_parent(path)?;
    csv::Writer::from_path(path).map_err(|e| AppError::output(path, std::io::Error::other(e)))
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>, rows: Vec<Vec<String>>) -> Result<()> {
    let err = |e: csv::Error| AppError::output(path, std::io::Error::other(e));
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| AppError::output(path, e))
}

/// One row per index; `columns[j][i]` is column `j` at row `i`.
pub fn write_series_csv(path: &Path, index: &str, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    let w = writer(path)?;
    let mut rows = vec![std::iter::once(index.to_string()).chain(names.iter().map(|s| s.to_string())).collect()];
    let n = columns.iter().map(|c| c.len()).max().unwrap_or(0);
    for i in 0..n {
        let mut r = vec![i.to_string()];
        r.extend(columns.iter().map(|c| c.get(i).map(|v| v.to_string()).unwrap_or_default()));
        rows.push(r);
    }
    finish(path, w, rows)
}

pub fn write_trace_csv(path: &Path, trace: &AttackTrace) -> Result<()> {
    let w = writer(path)?;
    let mut rows = vec![vec!["iteration".into(), "loss".into(), "norm".into(), "seconds".into()]];
    for (i, loss) in trace.losses.iter().enumerate() {
        rows.push(vec![
            i.to_string(),
            loss.to_string(),
            trace.norms.get(i).map(|v| v.to_string()).unwrap_or_default(),
            trace.seconds.get(i).map(|v| format!("{v:.6}")).unwrap_or_default(),
        ]);
    }
    finish(path, w, rows)
}

/// Per-row metrics, then a second file with the per-(strength, aug) means.
pub fn write_eval_csv(rows_path: &Path, summary_path: &Path, report: &EvalReport) -> Result<()> {
    let w = writer(rows_path)?;
    let extra_names: Vec<String> = report
        .rows
        .first()
        .map(|r| r.panel.extras.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["image_id", "strength", "seed", "aug", "ssim", "psnr"].map(String::from).to_vec();
    header.extend(extra_names);
    let mut rows = vec![header];
    for r in &report.rows {
        let mut row = vec![
            r.image_id.clone(),
            r.strength.to_string(),
            r.seed.to_string(),
            r.aug.clone(),
            r.panel.ssim.to_string(),
            r.panel.psnr.to_string(),
        ];
        row.extend(r.panel.extras.iter().map(|(_, v)| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())));
        rows.push(row);
    }
    finish(rows_path, w, rows)?;

    let w = writer(summary_path)?;
    let mut rows = vec![["strength", "aug", "mean_ssim", "mean_psnr", "count"].map(String::from).to_vec()];
    for s in report.summary() {
        rows.push(vec![
            s.strength.to_string(),
            s.aug,
            s.mean_ssim.to_string(),
            s.mean_psnr.to_string(),
            s.count.to_string(),
        ]);
    }
    finish(summary_path, w, rows)
}

pub fn write_eigen_csv(path: &Path, report: &EigenfeatureReport) -> Result<()> {
    let w = writer(path)?;
    let mut header = vec!["timestep".to_string()];
    header.extend(report.layers.iter().map(|l| l.layer_id.clone()));
    let mut rows = vec![header];
    for (i, t) in report.timesteps.iter().enumerate() {
        let mut r = vec![t.to_string()];
        r.extend(report.layers.iter().map(|l| l.cosine[i].to_string()));
        rows.push(r);
    }
    finish(path, w, rows)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// Plots each series against its index, y autoscaled. No labels.
pub fn line_plot(path: &Path, series: &[&[f64]]) -> Result<()> {
    let (w, h, pad) = (480u32, 300u32, 24u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let finite = series.iter().flat_map(|s| s.iter()).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let axis = Rgb([120, 120, 120]);
    for x in pad..w - pad {
        img.put_pixel(x, h - pad, axis);
    }
    for y in pad..=h - pad {
        img.put_pixel(pad, y, axis);
    }
    let (pw, ph) = ((w - 2 * pad) as f64, (h - 2 * pad) as f64);
    for (k, s) in series.iter().enumerate() {
        let colour = Rgb(PALETTE[k % PALETTE.len()]);
        let n = s.len().max(2) - 1;
        let at = |i: usize| -> Option<(f64, f64)> {
            let v = s[i];
            v.is_finite().then(|| {
                (pad as f64 + pw * i as f64 / n as f64, (h - pad) as f64 - ph * (v - lo) / (hi - lo))
            })
        };
        for i in 0..s.len() {
            let Some(p) = at(i) else { continue };
            let q = if i + 1 < s.len() { at(i + 1).unwrap_or(p) } else { p };
            let steps = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
            for j in 0..=steps {
                let f = j as f64 / steps as f64;
                let (x, y) = (p.0 + f * (q.0 - p.0), p.1 + f * (q.1 - p.1));
                let (x, y) = (x.round() as i64, y.round() as i64);
                if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    io::ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| AppError::output(path, std::io::Error::other(e)))
}
