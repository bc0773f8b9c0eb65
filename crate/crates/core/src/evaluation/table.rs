use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalResult, Pipeline};
use crate::{Error, Result};

/// One line of a results table: pipeline, domain pair, seed, accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pipeline: Pipeline,
    pub source: String,
    pub target: String,
    /// Ablation variant or other qualifier; empty when not applicable.
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
}

impl ResultRow {
    pub fn new(result: &EvalResult, source: &str, target: &str, variant: &str) -> Self {
        Self {
            pipeline: result.pipeline,
            source: source.to_string(),
            target: target.to_string(),
            variant: variant.to_string(),
            seed: result.seed,
            accuracy: result.accuracy,
            n_correct: result.n_correct,
            n_total: result.n_total,
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    csv::Reader::from_path(path)
        .map_err(io)?
        .deserialize()
        .map(|r| r.map_err(io))
        .collect()
}

/// Column-aligned plain-text rendering, accuracy in percent.
pub fn format_table(rows: &[ResultRow]) -> String {
    let header = ["pipeline", "variant", "pair", "seed", "accuracy"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.pipeline.to_string(),
                if r.variant.is_empty() {
                    "-".into()
                } else {
                    r.variant.clone()
                },
                format!("{}->{}", r.source, r.target),
                r.seed.to_string(),
                format!("{:.2}", 100.0 * r.accuracy),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for line in &body {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.len());
        }
    }
    let render = |cells: [&str; 5]| {
        let mut s = String::new();
        for (k, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if k > 0 {
                s.push_str("  ");
            }
            // Numbers right-aligned, text left-aligned.
            if k >= 3 {
                s.push_str(&format!("{cell:>w$}"));
            } else {
                s.push_str(&format!("{cell:<w$}"));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = render(header);
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for line in &body {
        out.push_str(&render([&line[0], &line[1], &line[2], &line[3], &line[4]]));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ResultRow> {
        vec![
            ResultRow::new(
                &EvalResult::new(733, 1000, Pipeline::NoDa, 0).unwrap(),
                "svhn",
                "mnist",
                "",
            ),
            ResultRow::new(
                &EvalResult::new(846, 1000, Pipeline::Translate, 0).unwrap(),
                "svhn",
                "mnist",
                "full",
            ),
        ]
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results_csv(&path, &rows()).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), rows());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("pipeline,source,target,variant,seed,accuracy"));
    }

    #[test]
    fn table_is_aligned() {
        let t = format_table(&rows());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].contains("no_da") && lines[2].ends_with("73.30"));
        assert!(lines[3].ends_with("84.60"));
        assert_eq!(lines[2].len(), lines[3].len());
    }
}
