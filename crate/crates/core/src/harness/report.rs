//! Cross-seed summaries: mean, median, and population std per method.

use std::fmt::Write as _;

use crate::dataset::TaskKind;
use crate::error::{Error, Result};
use crate::harness::run::RunReport;
use crate::metrics::{mean_and_std, Metrics};

/// Seed-aggregated statistics for one (method, split, metric) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub task_kind: TaskKind,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,split,metric,count,mean,median,std\n");
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.method, row.split, row.metric, row.count, row.mean, row.median, row.std
            )
            .expect("string write");
        }
        out
    }

    /// Fixed-width table for terminal output.
    pub fn render_table(&self) -> String {
        let header = ["method", "split", "metric", "count", "mean", "median", "std"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.split.clone(),
                    r.metric.clone(),
                    r.count.to_string(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.median),
                    format!("{:.4}", r.std),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row.iter()) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut write_row = |row: &[String]| {
            let line = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}", w = w))
                .collect::<Vec<_>>()
                .join("  ");
            out.push_str(line.trim_end());
            out.push('\n');
        };
        write_row(&header.map(String::from));
        for row in &cells {
            write_row(row);
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Aggregates one or more run reports into per-method statistics across
/// seeds; the reports must share one downstream task kind.
pub fn report_summary(reports: &[RunReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::Validation(
            "report summary needs at least one run report".into(),
        ));
    }
    let task_kind = reports[0].task_kind;
    for report in reports {
        if report.task_kind != task_kind {
            return Err(Error::Validation(format!(
                "cannot summarize reports with mixed task kinds: {} and {}",
                task_kind.as_str(),
                report.task_kind.as_str()
            )));
        }
    }

    let mut cells: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    let mut push = |method: &str, split: &str, metrics: &Metrics| {
        for (name, value) in metrics.entries() {
            let key = (method.to_string(), split.to_string(), name.to_string());
            match cells.iter_mut().find(|(k, _)| *k == key) {
                Some((_, values)) => values.push(value),
                None => cells.push((key, vec![value])),
            }
        }
    };
    for report in reports {
        let method = report.method.as_str();
        for rec in &report.records {
            if let Some(m) = &rec.pretrain_metrics {
                push(method, "pretrain", m);
            }
            push(method, "train", &rec.train_metrics);
            push(method, "test", &rec.test_metrics);
        }
    }

    let rows = cells
        .into_iter()
        .map(|((method, split, metric), values)| {
            let (mean, std) = mean_and_std(&values);
            SummaryRow {
                method,
                split,
                metric,
                count: values.len(),
                mean,
                median: median(&values),
                std,
            }
        })
        .collect();
    Ok(Summary { task_kind, rows })
}
