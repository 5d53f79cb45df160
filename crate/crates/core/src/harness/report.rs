//! Cross-run comparison tables: rows are retrievers, columns are k values,
//! the best cell per column is flagged.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use super::HarnessError;

/// One parsed row of a run's `metrics/summary.csv`.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub retriever: String,
    pub k: usize,
    pub bleu: Option<f64>,
    pub comet: Option<f64>,
    pub lacomet: Option<f64>,
}

impl SummaryRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "bleu" => self.bleu,
            "comet" => self.comet,
            "lacomet" => self.lacomet,
            _ => None,
        }
    }
}

pub fn load_summary(path: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Other(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| HarnessError::Other(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_ret), Some(c_k)) = (col("retriever"), col("k")) else {
        return Err(HarnessError::Other(format!(
            "{} is not a summary CSV",
            path.display()
        )));
    };
    let parse_opt = |field: Option<&str>| -> Option<f64> {
        field.and_then(|s| if s.is_empty() { None } else { s.parse().ok() })
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| HarnessError::Other(e.to_string()))?;
        rows.push(SummaryRow {
            retriever: record.get(c_ret).unwrap_or_default().to_string(),
            k: record
                .get(c_k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HarnessError::Other("bad k column".into()))?,
            bleu: parse_opt(col("bleu").and_then(|c| record.get(c))),
            comet: parse_opt(col("comet").and_then(|c| record.get(c))),
            lacomet: parse_opt(col("lacomet").and_then(|c| record.get(c))),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub metric: String,
    pub ks: Vec<usize>,
    /// (retriever label, one cell per k)
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    /// Row index of the best value per column.
    pub best: Vec<Option<usize>>,
}

/// Merge one or more runs' summaries into a retriever-by-k table for one
/// metric. All runs must share the same k grid.
pub fn compare_retrievers(
    summaries: &[Vec<SummaryRow>],
    metric: &str,
) -> Result<ComparisonTable, HarnessError> {
    if summaries.is_empty() {
        return Err(HarnessError::Other("no summaries to compare".into()));
    }
    let grid: BTreeSet<usize> = summaries[0].iter().map(|r| r.k).collect();
    for (i, summary) in summaries.iter().enumerate().skip(1) {
        let other: BTreeSet<usize> = summary.iter().map(|r| r.k).collect();
        if other != grid {
            return Err(HarnessError::GridMismatch {
                left: format!("{grid:?}"),
                right: format!("run {i}: {other:?}"),
            });
        }
    }
    let ks: Vec<usize> = grid.into_iter().collect();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for (run_idx, summary) in summaries.iter().enumerate() {
        let labels: BTreeSet<&str> = summary.iter().map(|r| r.retriever.as_str()).collect();
        for label in labels {
            let row_label = if summaries.len() > 1 {
                format!("{}:{label}", run_idx + 1)
            } else {
                label.to_string()
            };
            let cells: Vec<Option<f64>> = ks
                .iter()
                .map(|&k| {
                    summary
                        .iter()
                        .find(|r| r.retriever == label && r.k == k)
                        .and_then(|r| r.metric(metric))
                })
                .collect();
            rows.push((row_label, cells));
        }
    }
    let best: Vec<Option<usize>> = (0..ks.len())
        .map(|col| {
            rows.iter()
                .enumerate()
                .filter_map(|(i, (_, cells))| cells[col].map(|v| (i, v)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
        })
        .collect();
    Ok(ComparisonTable { metric: metric.to_string(), ks, rows, best })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("retriever");
        for k in &self.ks {
            out.push_str(&format!(",k{k}"));
        }
        out.push('\n');
        for (i, (label, cells)) in self.rows.iter().enumerate() {
            out.push_str(label);
            for (col, cell) in cells.iter().enumerate() {
                match cell {
                    Some(v) => {
                        let flag = if self.best[col] == Some(i) { "*" } else { "" };
                        out.push_str(&format!(",{v:.4}{flag}"));
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric: {}", self.metric)?;
        let label_width = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain([9])
            .max()
            .unwrap_or(9);
        write!(f, "{:label_width$}", "retriever")?;
        for k in &self.ks {
            write!(f, " {:>10}", format!("k={k}"))?;
        }
        writeln!(f)?;
        for (i, (label, cells)) in self.rows.iter().enumerate() {
            write!(f, "{label:label_width$}")?;
            for (col, cell) in cells.iter().enumerate() {
                match cell {
                    Some(v) => {
                        let flag = if self.best[col] == Some(i) { "*" } else { " " };
                        write!(f, " {:>9.4}{flag}", v)?;
                    }
                    None => write!(f, " {:>10}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
