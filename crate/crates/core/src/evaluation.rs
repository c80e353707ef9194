//! Macro F1, t-based confidence intervals, paired t-tests and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ontology::TaskId;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("golds and predictions differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no observations")]
    Empty,
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("missing result for {task} / {column}")]
    MissingCell { task: TaskId, column: String },
    #[error("fold {fold} missing for {task} / {column}")]
    MissingFold { task: TaskId, column: String, fold: usize },
}

/// Unweighted mean of per-class F1 over the classes that occur in either the
/// golds or the predictions.
pub fn macro_f1<T: Ord + Clone>(golds: &[T], preds: &[T]) -> Result<f64, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch(golds.len(), preds.len()));
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: BTreeSet<&T> = golds.iter().chain(preds).collect();
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (g, p) in golds.iter().zip(preds) {
            match (g == *c, p == *c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    }
    Ok(total / classes.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Two-sided Student-t quantile: the `p` quantile with `dof` degrees of
/// freedom, polished with Newton steps on the CDF.
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
    let mut x = dist.inverse_cdf(p);
    for _ in 0..8 {
        let f = dist.cdf(x) - p;
        let step = f / dist.pdf(x);
        x -= step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Mean and t-interval `mean ± t(n−1, (1+level)/2) · sd / √n`.
pub fn mean_ci(values: &[f64], level: f64) -> Result<(f64, f64, f64), EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFew(values.len()));
    }
    let m = mean(values);
    let n = values.len() as f64;
    let sd = sample_sd(values);
    if sd == 0.0 {
        return Ok((m, m, m));
    }
    let half = t_quantile(0.5 + level / 2.0, n - 1.0) * sd / n.sqrt();
    Ok((m, m - half, m + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub t: f64,
    pub dof: usize,
    pub p: f64,
}

/// Paired two-sided t-test on `a − b`. Identical differences give t = 0,
/// p = 1 when they are all zero, and t = ±∞, p = 0 otherwise.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFew(a.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dof = d.len() - 1;
    let m = mean(&d);
    let sd = sample_sd(&d);
    if sd == 0.0 {
        return Ok(if m == 0.0 {
            PairedTestResult { t: 0.0, dof, p: 1.0 }
        } else {
            PairedTestResult {
                t: m.signum() * f64::INFINITY,
                dof,
                p: 0.0,
            }
        });
    }
    let t = m / (sd / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof ≥ 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTestResult { t, dof, p })
}

/// Per-fold scores for every (task, column) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub k: usize,
    /// `(task, column) → per-fold macro F1`, folds indexed `0..k`.
    pub cells: BTreeMap<(TaskId, String), BTreeMap<usize, f64>>,
}

pub const AVERAGE_ROW: &str = "Average (All Tasks)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Two-decimal score without the leading zero (".84"); 1 renders as "1.0".
pub fn format_score(x: f64) -> String {
    let s = format!("{:.2}", x.clamp(0.0, 1.0));
    if s == "1.00" {
        "1.0".to_string()
    } else {
        s.trim_start_matches('0').to_string()
    }
}

pub fn format_cell(mean: f64, lo: f64, hi: f64) -> String {
    format!("{} ({},{})", format_score(mean), format_score(lo), format_score(hi))
}

impl ResultTable {
    pub fn new(columns: Vec<String>, k: usize) -> Self {
        ResultTable {
            columns,
            k,
            cells: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, task: TaskId, column: &str, fold: usize, score: f64) {
        if !self.columns.iter().any(|c| c == column) {
            self.columns.push(column.to_string());
        }
        self.cells
            .entry((task, column.to_string()))
            .or_default()
            .insert(fold, score);
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.cells.keys().map(|(t, _)| *t).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn folds(&self, task: TaskId, column: &str) -> Result<Vec<f64>, EvalError> {
        let cell = self
            .cells
            .get(&(task, column.to_string()))
            .ok_or_else(|| EvalError::MissingCell {
                task,
                column: column.to_string(),
            })?;
        (0..self.k)
            .map(|f| {
                cell.get(&f).copied().ok_or_else(|| EvalError::MissingFold {
                    task,
                    column: column.to_string(),
                    fold: f,
                })
            })
            .collect()
    }

    /// Per-fold mean over all tasks present in the table.
    pub fn average_folds(&self, column: &str) -> Result<Vec<f64>, EvalError> {
        let tasks = self.tasks();
        let mut acc = vec![0.0; self.k];
        for &t in &tasks {
            for (a, v) in acc.iter_mut().zip(self.folds(t, column)?) {
                *a += v;
            }
        }
        Ok(acc.into_iter().map(|a| a / tasks.len() as f64).collect())
    }

    /// Task × fold observations of one column, task-major.
    pub fn observations(&self, column: &str) -> Result<Vec<f64>, EvalError> {
        let mut out = Vec::new();
        for t in self.tasks() {
            out.extend(self.folds(t, column)?);
        }
        Ok(out)
    }

    /// Paired t-test between two columns over all task × fold observations.
    pub fn compare(&self, a: &str, b: &str) -> Result<PairedTestResult, EvalError> {
        paired_t(&self.observations(a)?, &self.observations(b)?)
    }

    /// Rendered rows: (attribute, concepts, one cell per column), tasks in
    /// report order then the average row. A missing cell is an error.
    pub fn rows(&self) -> Result<Vec<(String, String, Vec<String>)>, EvalError> {
        let tasks = self.tasks();
        if tasks.is_empty() || self.columns.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut rows = Vec::new();
        for &t in &tasks {
            let mut cells = Vec::new();
            for c in &self.columns {
                let (m, lo, hi) = mean_ci(&self.folds(t, c)?, 0.95)?;
                cells.push(format_cell(m, lo, hi));
            }
            rows.push((t.attribute_label().to_string(), t.concepts_label().to_string(), cells));
        }
        let mut cells = Vec::new();
        for c in &self.columns {
            let (m, lo, hi) = mean_ci(&self.average_folds(c)?, 0.95)?;
            cells.push(format_cell(m, lo, hi));
        }
        rows.push((AVERAGE_ROW.to_string(), String::new(), cells));
        Ok(rows)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, EvalError> {
        let rows = self.rows()?;
        let mut header = vec!["Attribute".to_string(), "Concepts".to_string()];
        header.extend(self.columns.iter().cloned());
        match format {
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&header).expect("in-memory write");
                for (a, c, cells) in &rows {
                    let mut rec = vec![a.clone(), c.clone()];
                    rec.extend(cells.iter().cloned());
                    w.write_record(&rec).expect("in-memory write");
                }
                Ok(String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))
            }
            ReportFormat::Text => {
                let mut table: Vec<Vec<String>> = vec![header];
                for (a, c, cells) in rows {
                    let mut rec = vec![a, c];
                    rec.extend(cells);
                    table.push(rec);
                }
                let widths: Vec<usize> = (0..table[0].len())
                    .map(|j| table.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
                    .collect();
                let mut out = String::new();
                for (i, r) in table.iter().enumerate() {
                    let line: Vec<String> = r
                        .iter()
                        .zip(&widths)
                        .map(|(s, w)| format!("{s:<w$}"))
                        .collect();
                    out.push_str(line.join("  ").trim_end());
                    out.push('\n');
                    if i == 0 {
                        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                        out.push('\n');
                    }
                }
                Ok(out)
            }
        }
    }

    /// Long-format fold-level results: `task,column,fold,macro_f1`.
    pub fn write_folds_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["task", "column", "fold", "macro_f1"])?;
        // Columns are written in display order so that reading the file back
        // reproduces the same table layout.
        for task in self.tasks() {
            for column in &self.columns {
                let Some(folds) = self.cells.get(&(task, column.clone())) else { continue };
                for (fold, score) in folds {
                    w.write_record([task.as_str(), column, &fold.to_string(), &format!("{score:?}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_folds_csv<R: std::io::Read>(r: R) -> Result<ResultTable, csv::Error> {
        let mut rd = csv::Reader::from_reader(r);
        let mut table = ResultTable::default();
        let mut max_fold = 0;
        for rec in rd.records() {
            let rec = rec?;
            let bad = |m: &str| {
                csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string()))
            };
            let task: TaskId = rec[0].parse().map_err(|_| bad("unknown task"))?;
            let fold: usize = rec[2].parse().map_err(|_| bad("bad fold"))?;
            let score: f64 = rec[3].parse().map_err(|_| bad("bad score"))?;
            max_fold = max_fold.max(fold);
            table.record(task, &rec[1], fold, score);
        }
        table.k = if table.cells.is_empty() { 0 } else { max_fold + 1 };
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        let golds = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        assert!((macro_f1(&golds, &preds).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&["a"], &["a"]).unwrap(), 1.0);
        assert!(macro_f1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ci_example() {
        let (m, lo, hi) = mean_ci(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.95).unwrap();
        assert!((m - 0.3).abs() < 1e-15);
        let half = 2.776_445_105_197_798_7 * (0.025f64).sqrt() / 5f64.sqrt();
        assert!((lo - (0.3 - half)).abs() < 1e-9);
        assert!((hi - (0.3 + half)).abs() < 1e-9);
        assert_eq!(mean_ci(&[0.5, 0.5, 0.5], 0.95).unwrap(), (0.5, 0.5, 0.5));
        assert!(mean_ci(&[0.5], 0.95).is_err());
    }

    #[test]
    fn t_test_edges() {
        let a = [0.1, 0.2, 0.3];
        assert_eq!(paired_t(&a, &a).unwrap(), PairedTestResult { t: 0.0, dof: 2, p: 1.0 });
        let r = paired_t(&[1.5, 2.5, 3.5], &[0.5, 1.5, 2.5]).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0 && r.p == 0.0);
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.84, 0.83, 0.86), ".84 (.83,.86)");
        assert_eq!(format_cell(1.0, 0.99, 1.2), "1.0 (.99,1.0)");
        assert_eq!(format_score(-0.1), ".00");
    }

    #[test]
    fn table_rendering() {
        let mut t = ResultTable::new(vec!["Majority".into()], 2);
        assert_eq!(t.render(ReportFormat::Text), Err(EvalError::Empty));
        t.record(TaskId::LateralityAll, "Majority", 0, 0.5);
        t.record(TaskId::LateralityAll, "Majority", 1, 0.7);
        t.record(TaskId::TypeMe, "Majority", 0, 0.9);
        assert!(matches!(t.render(ReportFormat::Csv), Err(EvalError::MissingFold { .. })));
        t.record(TaskId::TypeMe, "Majority", 1, 0.9);
        let csv = t.render(ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with(AVERAGE_ROW));
        let mut buf = Vec::new();
        t.write_folds_csv(&mut buf).unwrap();
        let back = ResultTable::read_folds_csv(buf.as_slice()).unwrap();
        assert_eq!(back.cells, t.cells);
    }
}
