//! Summaries regenerated from a run directory, plus sample image grids.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::Deserialize;

use crate::error::{DgmError, Result};
use crate::tensor::Tensor;

/// Writes square images in `[-1, 1]`, one per row of `images`, as a
/// grayscale grid `per_row` images wide.
pub fn write_image_grid(path: &Path, images: &Tensor, side: usize, per_row: usize) -> Result<()> {
    if images.cols() != side * side || per_row == 0 {
        return Err(DgmError::shape(
            "write_image_grid",
            &[side * side],
            &[images.cols()],
        ));
    }
    let n = images.rows();
    let grid_rows = n.div_ceil(per_row).max(1);
    let pad = 1;
    let w = per_row * (side + pad) + pad;
    let h = grid_rows * (side + pad) + pad;
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..n {
        let (gr, gc) = (i / per_row, i % per_row);
        let (x0, y0) = (pad + gc * (side + pad), pad + gr * (side + pad));
        for (k, &v) in images.row(i).iter().enumerate() {
            let px = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            img.put_pixel((x0 + k % side) as u32, (y0 + k / side) as u32, Luma([px]));
        }
    }
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MetricRow {
    task: usize,
    scope: String,
    accuracy: f64,
    correct: usize,
    total: usize,
}

#[derive(Debug, Deserialize)]
struct GrowthCsvRow {
    task: usize,
    layer: usize,
    delta: usize,
    neurons_added: usize,
    width: usize,
    generator_params: usize,
}

#[derive(Debug, Deserialize)]
struct OccupationCsvRow {
    task: usize,
    epoch: usize,
    layer: usize,
    #[allow(dead_code)]
    reserved: usize,
    #[allow(dead_code)]
    total: usize,
    fraction: f64,
}

/// Report text plus any warnings about missing artifacts.
#[derive(Debug, Default)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
    /// `(task, A_t)` in checkpoint order.
    pub accuracy: Vec<(usize, f64)>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(DgmError::from))
        .collect()
}

/// Reads the artifacts of `dir` and writes `accuracy_vs_task.csv` and
/// `occupation_vs_epoch.csv` next to them.
pub fn report(dir: &Path) -> Result<Report> {
    let mut rep = Report::default();
    if !dir.is_dir() {
        rep.warnings
            .push(format!("{} is not a directory", dir.display()));
        return Ok(rep);
    }
    let manifest = dir.join("manifest.json");
    match std::fs::read_to_string(&manifest) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let status = v["status"].as_str().unwrap_or("unknown");
            if status != "complete" {
                rep.warnings
                    .push(format!("run status is {status}; report is partial"));
            }
            let _ = writeln!(
                rep.text,
                "run: variant={} data={} tasks_completed={} joint={}",
                v["config"]["model"]["variant"].as_str().unwrap_or("?"),
                v["data"]["source"].as_str().unwrap_or("?"),
                v["tasks_completed"],
                v["joint_baseline"],
            );
        }
        Err(_) => rep.warnings.push("manifest.json missing".into()),
    }

    let metrics_path = dir.join("metrics.csv");
    if metrics_path.exists() {
        let rows: Vec<MetricRow> = read_rows(&metrics_path)?;
        let mut w = csv::Writer::from_path(dir.join("accuracy_vs_task.csv"))?;
        w.write_record(["task", "scope", "accuracy"])?;
        let _ = writeln!(rep.text, "accuracy over all classes seen:");
        for r in &rows {
            if r.scope == "all" {
                rep.accuracy.push((r.task, r.accuracy));
                let _ = writeln!(
                    rep.text,
                    "  A_{} = {:.4} ({}/{})",
                    r.task, r.accuracy, r.correct, r.total
                );
            }
            if r.scope == "all" || r.scope.starts_with("task") {
                w.serialize((r.task, &r.scope, r.accuracy))?;
            }
        }
        w.flush()?;
        if let Some(&(last, _)) = rep.accuracy.last() {
            let conf = dir.join(format!("confusion_t{last}.csv"));
            if let Ok(mut r) = csv::Reader::from_path(&conf) {
                let mut wrong = Vec::new();
                for rec in r.records() {
                    let rec = rec?;
                    let t: usize = rec[0].parse().unwrap_or(0);
                    let row: Vec<usize> =
                        rec.iter().skip(1).map(|v| v.parse().unwrap_or(0)).collect();
                    let n: usize = row.iter().sum();
                    let (arg, top) = row
                        .iter()
                        .enumerate()
                        .filter(|(p, _)| *p != t)
                        .max_by_key(|(_, v)| **v)
                        .map_or((t, 0), |(p, v)| (p, *v));
                    wrong.push((t, n - row.get(t).copied().unwrap_or(0), arg, top));
                }
                let _ = writeln!(
                    rep.text,
                    "final confusion (class: errors, most frequent wrong prediction):"
                );
                for (t, errs, arg, top) in wrong {
                    let _ = writeln!(
                        rep.text,
                        "  class {t}: {errs} errors, {top} predicted as {arg}"
                    );
                }
            } else {
                rep.warnings.push(format!("{} missing", conf.display()));
            }
        }
    } else {
        rep.warnings.push("metrics.csv missing".into());
    }

    let growth_path = dir.join("growth.csv");
    if growth_path.exists() {
        let rows: Vec<GrowthCsvRow> = read_rows(&growth_path)?;
        let added: usize = rows.iter().map(|r| r.neurons_added).sum();
        let reserved: usize = rows.iter().map(|r| r.delta).sum();
        let _ = writeln!(
            rep.text,
            "growth: {added} neurons added, {reserved} mask entries reserved"
        );
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            let _ = writeln!(
                rep.text,
                "generator parameters: {} after task {} -> {} after task {}",
                first.generator_params, first.task, last.generator_params, last.task
            );
        }
        let widths: Vec<String> = rows
            .iter()
            .filter(|r| Some(r.task) == rows.last().map(|l| l.task))
            .map(|r| format!("layer{}={}", r.layer, r.width))
            .collect();
        if !widths.is_empty() {
            let _ = writeln!(rep.text, "final widths: {}", widths.join(" "));
        }
    } else {
        rep.warnings.push("growth.csv missing".into());
    }

    let occ_path = dir.join("occupation.csv");
    if occ_path.exists() {
        let rows: Vec<OccupationCsvRow> = read_rows(&occ_path)?;
        let mut w = csv::Writer::from_path(dir.join("occupation_vs_epoch.csv"))?;
        w.write_record(["step", "task", "epoch", "layer", "fraction"])?;
        let mut step = 0;
        let mut last = None;
        for r in &rows {
            if last != Some((r.task, r.epoch)) {
                step += 1;
                last = Some((r.task, r.epoch));
            }
            w.serialize((step, r.task, r.epoch, r.layer, r.fraction))?;
        }
        w.flush()?;
    } else {
        rep.warnings.push("occupation.csv missing".into());
    }
    Ok(rep)
}
