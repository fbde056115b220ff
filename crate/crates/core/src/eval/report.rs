//! Per-cell evaluation over a test grid, with marginal slices.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::metrics::{confusion_matrix, mae, micro_f1, micro_f1_from_confusion, point_prediction};
use super::plot;
use super::CompiledModel;
use crate::error::{Error, Result};
use crate::model::Task;
use crate::trajgen::{grid_cells, Dataset, DiffusionModel, GridCell, Sample, Split};

pub type Confusion = [[u64; 5]; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: GridCell,
    pub n: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRow {
    pub axis: &'static str,
    pub key: String,
    pub metric: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub cell: usize,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub overall: f64,
    pub n: usize,
    pub cells: Vec<CellResult>,
    pub slices: Vec<SliceRow>,
    /// Classification only: all samples, then one matrix per SNR.
    pub confusion: Option<Confusion>,
    pub confusion_by_snr: Vec<(Option<f64>, Confusion)>,
    pub missing: Vec<GridCell>,
    pub predictions: Vec<Prediction>,
}

pub const SLICE_AXES: [&str; 4] = ["length", "alpha", "snr", "model"];

pub fn snr_label(snr: Option<f64>) -> String {
    match snr {
        Some(s) => format!("{s}"),
        None => "none".into(),
    }
}

fn slice_key(axis: &str, c: &GridCell) -> (f64, String) {
    match axis {
        "length" => (c.length as f64, c.length.to_string()),
        "alpha" => (c.alpha, format!("{:.2}", c.alpha)),
        "snr" => (c.snr.unwrap_or(f64::INFINITY), snr_label(c.snr)),
        _ => (c.model.code() as f64, c.model.name().to_string()),
    }
}

/// Weighted means of cell metrics (weights = cell sizes) along one axis,
/// ordered by key.
pub fn marginals(cells: &[CellResult], axis: &'static str) -> Vec<SliceRow> {
    let mut groups: Vec<(f64, String, f64, usize)> = Vec::new();
    for c in cells {
        let (order, key) = slice_key(axis, &c.cell);
        match groups.iter_mut().find(|g| g.1 == key) {
            Some(g) => {
                g.2 += c.metric * c.n as f64;
                g.3 += c.n;
            }
            None => groups.push((order, key, c.metric * c.n as f64, c.n)),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    groups
        .into_iter()
        .map(|(_, key, sum, n)| SliceRow {
            axis,
            key,
            metric: sum / n as f64,
            n,
        })
        .collect()
}

/// Cells and their samples. Grid manifests list their cells; any other
/// dataset is grouped by (model, length, SNR, α) over its test split.
fn cells_of(ds: &Dataset) -> (Vec<(GridCell, Vec<&Sample>)>, Vec<GridCell>) {
    let by_id: HashMap<usize, &Sample> = ds.samples.iter().map(|s| (s.id, s)).collect();
    let mut present = Vec::new();
    let mut missing = Vec::new();
    if ds.manifest.cells.is_empty() {
        let test = ds.manifest.splits.test.iter().filter_map(|id| by_id.get(id).copied());
        let mut groups: BTreeMap<(usize, usize, u64, u64), Vec<&Sample>> = BTreeMap::new();
        for s in test {
            let t = &s.trajectory;
            let snr_bits = t.snr.unwrap_or(f64::INFINITY).to_bits();
            groups
                .entry((t.model.code(), t.len(), snr_bits, t.alpha.to_bits()))
                .or_default()
                .push(s);
        }
        for (_, members) in groups {
            let t = &members[0].trajectory;
            let cell = GridCell {
                model: t.model,
                length: t.len(),
                snr: t.snr,
                alpha: t.alpha,
            };
            present.push((cell, members));
        }
    } else {
        for r in &ds.manifest.cells {
            let members: Vec<&Sample> = (r.first_id..r.first_id + r.count)
                .filter_map(|id| by_id.get(&id).copied())
                .collect();
            if members.is_empty() {
                missing.push(r.cell.clone());
            } else {
                present.push((r.cell.clone(), members));
            }
        }
        if let Some(spec) = &ds.manifest.grid {
            for c in grid_cells(spec) {
                if !ds.manifest.cells.iter().any(|r| r.cell == c) {
                    missing.push(c);
                }
            }
        }
    }
    (present, missing)
}

/// Scores `model` on every cell of `ds`.
pub fn sliced_report(model: &CompiledModel, ds: &Dataset) -> Result<EvalReport> {
    let task = model.task();
    let (cells, missing) = cells_of(ds);
    if cells.is_empty() {
        return Err(Error::Data("evaluation set has no samples".into()));
    }
    let scored: Vec<Result<(CellResult, Vec<Prediction>)>> = cells
        .par_iter()
        .enumerate()
        .map(|(ci, (cell, members))| {
            let seqs: Vec<&[f64]> = members.iter().map(|s| s.trajectory.positions.as_slice()).collect();
            let rows = model.predict(&seqs)?;
            let preds: Vec<Prediction> = members
                .iter()
                .zip(&rows)
                .map(|(s, r)| Prediction {
                    id: s.id,
                    cell: ci,
                    truth: super::target(task, s),
                    predicted: point_prediction(task, r),
                })
                .collect();
            let metric = score(task, &preds)?;
            Ok((
                CellResult {
                    cell: cell.clone(),
                    n: members.len(),
                    metric,
                },
                preds,
            ))
        })
        .collect();
    let mut results = Vec::with_capacity(cells.len());
    let mut predictions = Vec::new();
    for r in scored {
        let (c, p) = r?;
        results.push(c);
        predictions.extend(p);
    }
    assemble(task, results, predictions, missing)
}

/// Builds the overall metric, slices and confusion tables from per-cell
/// results and per-sample predictions.
pub fn assemble(
    task: Task,
    results: Vec<CellResult>,
    predictions: Vec<Prediction>,
    missing: Vec<GridCell>,
) -> Result<EvalReport> {
    if results.is_empty() || predictions.is_empty() {
        return Err(Error::Data("empty report".into()));
    }
    if predictions.iter().any(|p| p.cell >= results.len()) {
        return Err(Error::Data("prediction refers to an unknown cell".into()));
    }
    let overall = score(task, &predictions)?;
    let slices = SLICE_AXES.iter().flat_map(|a| marginals(&results, a)).collect();
    let (confusion, confusion_by_snr) = if task == Task::Model {
        let all = confusion_of(&predictions)?;
        let mut snrs: Vec<Option<f64>> = results.iter().map(|c| c.cell.snr).collect();
        snrs.sort_by(|a, b| a.unwrap_or(f64::INFINITY).total_cmp(&b.unwrap_or(f64::INFINITY)));
        snrs.dedup();
        let per = snrs
            .into_iter()
            .map(|snr| {
                let sub: Vec<Prediction> = predictions
                    .iter()
                    .filter(|p| results[p.cell].cell.snr == snr)
                    .cloned()
                    .collect();
                Ok((snr, confusion_of(&sub)?))
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(all), per)
    } else {
        (None, Vec::new())
    };
    Ok(EvalReport {
        task,
        overall,
        n: predictions.len(),
        cells: results,
        slices,
        confusion,
        confusion_by_snr,
        missing,
        predictions,
    })
}

fn labels(preds: &[Prediction]) -> (Vec<usize>, Vec<usize>) {
    preds
        .iter()
        .map(|p| (p.predicted as usize, p.truth as usize))
        .unzip()
}

fn score(task: Task, preds: &[Prediction]) -> Result<f64> {
    match task {
        Task::Alpha => {
            let (p, t): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.predicted, p.truth)).unzip();
            mae(&p, &t)
        }
        Task::Model => {
            let (p, t) = labels(preds);
            micro_f1(&p, &t)
        }
    }
}

fn confusion_of(preds: &[Prediction]) -> Result<Confusion> {
    let (p, t) = labels(preds);
    confusion_matrix(&p, &t)
}

impl EvalReport {
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Alpha => "mae",
            Task::Model => "f1",
        }
    }

    /// Metric restricted to lengths in `[lo, hi]`, from the cells.
    pub fn metric_for_lengths(&self, lo: usize, hi: usize) -> Option<(f64, usize)> {
        let (sum, n) = self
            .cells
            .iter()
            .filter(|c| (lo..=hi).contains(&c.cell.length))
            .fold((0.0, 0), |(s, n), c| (s + c.metric * c.n as f64, n + c.n));
        (n > 0).then(|| (sum / n as f64, n))
    }

    /// `model,length,snr,alpha,metric,n`
    pub fn report_csv(&self) -> String {
        let mut s = String::from("model,length,snr,alpha,metric,n\n");
        for c in &self.cells {
            let snr = c.cell.snr.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.cell.model.name(),
                c.cell.length,
                snr,
                c.cell.alpha,
                c.metric,
                c.n
            );
        }
        s
    }

    pub fn slices_csv(&self) -> String {
        let mut s = String::from("axis,key,metric,n\n");
        for r in &self.slices {
            let _ = writeln!(s, "{},{},{},{}", r.axis, r.key, r.metric, r.n);
        }
        s
    }

    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("id,cell,truth,predicted\n");
        for p in &self.predictions {
            let _ = writeln!(s, "{},{},{},{}", p.id, p.cell, p.truth, p.predicted);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {}", self.task);
        let _ = writeln!(s, "metric: {}", self.metric_name());
        let _ = writeln!(s, "overall: {}", self.overall);
        let _ = writeln!(s, "samples: {}", self.n);
        let _ = writeln!(s, "cells: {}", self.cells.len());
        let _ = writeln!(s, "missing_cells: {}", self.missing.len());
        if let Some((m, n)) = self.metric_for_lengths(10, 50) {
            let _ = writeln!(s, "short_10_50: {m} (n={n})");
        }
        let reference = match self.task {
            Task::Alpha => 0.453,
            Task::Model => 0.563,
        };
        let _ = writeln!(s, "reference_short_10_50: {reference} (full-scale training, not comparable at desk scale)");
        for c in &self.missing {
            let _ = writeln!(
                s,
                "missing: {} length={} snr={} alpha={}",
                c.model,
                c.length,
                snr_label(c.snr),
                c.alpha
            );
        }
        for r in &self.slices {
            let _ = writeln!(s, "slice {}={}: {} (n={})", r.axis, r.key, r.metric, r.n);
        }
        s
    }

    /// Writes report.csv, slices.csv, predictions.csv, summary.txt, the
    /// confusion tables and the plots into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.report_csv())?;
        put("slices.csv", self.slices_csv())?;
        put("predictions.csv", self.predictions_csv())?;
        put("summary.txt", self.summary())?;
        if let Some(m) = &self.confusion {
            put("confusion_all.csv", confusion_csv(m))?;
            for (snr, m) in &self.confusion_by_snr {
                put(&format!("confusion_snr_{}.csv", snr_label(*snr)), confusion_csv(m))?;
            }
        }
        for (name, svg) in plot::emit_plots(self)? {
            put(&name, svg)?;
        }
        Ok(())
    }
}

/// Rows are true classes, columns predictions.
pub fn confusion_csv(m: &Confusion) -> String {
    let mut s = String::from("true\\pred");
    for d in DiffusionModel::ALL {
        s.push(',');
        s.push_str(d.name());
    }
    s.push('\n');
    for (i, d) in DiffusionModel::ALL.iter().enumerate() {
        s.push_str(d.name());
        for v in m[i] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Micro-F1 recomputed from the overall confusion matrix.
pub fn confusion_f1(report: &EvalReport) -> Option<f64> {
    report.confusion.as_ref().map(micro_f1_from_confusion)
}

/// Convenience for callers holding the test split only.
pub fn test_samples(ds: &Dataset) -> Vec<Sample> {
    ds.split(Split::Test)
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::to_string).collect()))
        .collect())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, v: &str, what: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: format!("bad {what} '{v}'"),
    })
}

fn parse_snr(path: &Path, line: usize, v: &str) -> Result<Option<f64>> {
    match v.trim() {
        "" | "none" => Ok(None),
        s => parse_field(path, line, s, "snr").map(Some),
    }
}

/// Rebuilds a report from the `report.csv`, `predictions.csv` and
/// `summary.txt` written by [`EvalReport::write`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let summary_path = dir.join("summary.txt");
    let summary = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let mut task = None;
    let mut missing = Vec::new();
    for (i, line) in summary.lines().enumerate() {
        if let Some(t) = line.strip_prefix("task: ") {
            task = Some(match t.trim() {
                "alpha" => Task::Alpha,
                "model" => Task::Model,
                other => {
                    return Err(Error::Parse {
                        path: summary_path.clone(),
                        line: i + 1,
                        detail: format!("unknown task '{other}'"),
                    })
                }
            });
        } else if let Some(rest) = line.strip_prefix("missing: ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let get = |k: &str| f.iter().find_map(|x| x.strip_prefix(k)).unwrap_or("");
            if f.len() != 4 {
                return Err(Error::Parse {
                    path: summary_path.clone(),
                    line: i + 1,
                    detail: "malformed missing-cell line".into(),
                });
            }
            missing.push(GridCell {
                model: f[0].parse()?,
                length: parse_field(&summary_path, i + 1, get("length="), "length")?,
                snr: parse_snr(&summary_path, i + 1, get("snr="))?,
                alpha: parse_field(&summary_path, i + 1, get("alpha="), "alpha")?,
            });
        }
    }
    let task = task.ok_or_else(|| Error::Data(format!("{} has no task line", summary_path.display())))?;
    let report_path = dir.join("report.csv");
    let mut cells = Vec::new();
    for (line, f) in csv_rows(&report_path)? {
        if f.len() != 6 {
            return Err(Error::Parse {
                path: report_path.clone(),
                line,
                detail: format!("expected 6 fields, got {}", f.len()),
            });
        }
        cells.push(CellResult {
            cell: GridCell {
                model: f[0].parse()?,
                length: parse_field(&report_path, line, &f[1], "length")?,
                snr: parse_snr(&report_path, line, &f[2])?,
                alpha: parse_field(&report_path, line, &f[3], "alpha")?,
            },
            metric: parse_field(&report_path, line, &f[4], "metric")?,
            n: parse_field(&report_path, line, &f[5], "n")?,
        });
    }
    let pred_path = dir.join("predictions.csv");
    let mut predictions = Vec::new();
    for (line, f) in csv_rows(&pred_path)? {
        if f.len() != 4 {
            return Err(Error::Parse {
                path: pred_path.clone(),
                line,
                detail: format!("expected 4 fields, got {}", f.len()),
            });
        }
        predictions.push(Prediction {
            id: parse_field(&pred_path, line, &f[0], "id")?,
            cell: parse_field(&pred_path, line, &f[1], "cell")?,
            truth: parse_field(&pred_path, line, &f[2], "truth")?,
            predicted: parse_field(&pred_path, line, &f[3], "predicted")?,
        });
    }
    assemble(task, cells, predictions, missing)
}
