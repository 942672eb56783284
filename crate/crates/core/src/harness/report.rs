use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::evaluate::VolumeResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Iou,
    Asd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Iou => "iou",
            Metric::Asd => "asd",
        }
    }

    fn higher_is_better(self) -> bool {
        self != Metric::Asd
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over volumes.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt(), count: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRow {
    pub label: String,
    /// One entry per column; `None` when no volume defines the metric.
    pub cells: Vec<Option<Stat>>,
    /// Set when the experiment did not finish.
    pub failure: Option<String>,
}

/// Rows of experiments by columns of organs for one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub metric: Metric,
    pub organs: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    pub fn new(metric: Metric, organs: Vec<String>) -> Self {
        ResultsTable { metric, organs, rows: Vec::new() }
    }

    pub fn push_results(&mut self, label: &str, results: &[VolumeResult]) {
        let cells = self
            .organs
            .iter()
            .map(|organ| {
                let values: Vec<f64> = results
                    .iter()
                    .flat_map(|r| r.organs.iter().filter(|o| &o.organ == organ))
                    .filter_map(|o| match self.metric {
                        Metric::Dice => Some(o.dice),
                        Metric::Iou => Some(o.iou),
                        Metric::Asd => o.asd,
                    })
                    .collect();
                Stat::of(&values)
            })
            .collect();
        self.rows.push(ResultsRow { label: label.to_string(), cells, failure: None });
    }

    pub fn push_failure(&mut self, label: &str, reason: &str) {
        self.rows.push(ResultsRow {
            label: label.to_string(),
            cells: vec![None; self.organs.len()],
            failure: Some(reason.to_string()),
        });
    }

    pub fn labels(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn row(&self, label: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Row index of the best mean in each column.
    pub fn column_best(&self) -> Vec<Option<usize>> {
        (0..self.organs.len())
            .map(|c| {
                let mut best: Option<(usize, f64)> = None;
                for (r, row) in self.rows.iter().enumerate() {
                    let Some(s) = row.cells[c] else { continue };
                    if !s.mean.is_finite() {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((_, b)) if self.metric.higher_is_better() => s.mean > b,
                        Some((_, b)) => s.mean < b,
                    };
                    if better {
                        best = Some((r, s.mean));
                    }
                }
                best.map(|(r, _)| r)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let m = self.metric.name();
        let mut out = String::from("label,status");
        for o in &self.organs {
            write!(out, ",{o}_{m}_mean,{o}_{m}_std").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.label));
            out.push(',');
            out.push_str(if row.failure.is_some() { "failed" } else { "ok" });
            for cell in &row.cells {
                match cell {
                    Some(s) => write!(out, ",{:.6},{:.6}", s.mean, s.std).unwrap(),
                    None => out.push_str(",NA,NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned plain text; the best entry of each column is wrapped in `**`.
    pub fn to_text(&self) -> String {
        let best = self.column_best();
        let mut header = vec![format!("Method ({})", self.metric.name())];
        header.extend(self.organs.iter().cloned());
        let mut grid = vec![header];
        for (r, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.label.clone()];
            for (c, cell) in row.cells.iter().enumerate() {
                let text = match (cell, &row.failure) {
                    (_, Some(_)) => "failed".to_string(),
                    (None, None) => "NA".to_string(),
                    (Some(s), None) => format!("{:.3}±{:.3}", s.mean, s.std),
                };
                line.push(if best[c] == Some(r) { format!("**{text}**") } else { text });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in grid.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (t, &w))| {
                    let pad = w - t.chars().count();
                    if c == 0 {
                        format!("{t}{}", " ".repeat(pad))
                    } else {
                        format!("{}{t}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for row in self.rows.iter().filter(|r| r.failure.is_some()) {
            writeln!(out, "{} failed: {}", row.label, row.failure.as_deref().unwrap_or("")).unwrap();
        }
        out
    }

    pub fn write(&self, csv_path: &Path, text_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        fs::write(text_path, self.to_text()).map_err(|e| Error::io(text_path, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::OrganReport;

    fn result(id: &str, dice: [f64; 2]) -> VolumeResult {
        let organs = ["heart", "aorta"]
            .iter()
            .zip(dice)
            .enumerate()
            .map(|(i, (n, d))| OrganReport {
                organ: n.to_string(),
                label: i as u8 + 1,
                dice: d,
                iou: d / (2.0 - d),
                asd: (d > 0.0).then_some(1.0 - d),
            })
            .collect();
        VolumeResult { volume_id: id.into(), organs }
    }

    fn table() -> ResultsTable {
        let mut t = ResultsTable::new(Metric::Dice, vec!["heart".into(), "aorta".into()]);
        t.push_results("CE", &[result("a", [0.8, 0.2]), result("b", [0.6, 0.4])]);
        t.push_results("CE(UDBA)", &[result("a", [0.9, 0.1])]);
        t.push_failure("Dice", "diverged");
        t
    }

    #[test]
    fn stats_and_best_columns() {
        let t = table();
        let s = t.row("CE").unwrap().cells[0].unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12 && (s.std - 0.1).abs() < 1e-12);
        assert_eq!(t.column_best(), vec![Some(1), Some(0)]);
        let mut asd = ResultsTable::new(Metric::Asd, vec!["heart".into(), "aorta".into()]);
        asd.push_results("CE", &[result("a", [0.8, 0.2])]);
        asd.push_results("CE(UDBA)", &[result("a", [0.9, 0.0])]);
        assert_eq!(asd.column_best(), vec![Some(1), Some(0)]);
        assert_eq!(asd.row("CE(UDBA)").unwrap().cells[1], None);
    }

    #[test]
    fn csv_layout() {
        let csv = table().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,status,heart_dice_mean,heart_dice_std,aorta_dice_mean,aorta_dice_std");
        assert_eq!(lines[1], "CE,ok,0.700000,0.100000,0.300000,0.100000");
        assert_eq!(lines[3], "Dice,failed,NA,NA,NA,NA");
    }

    #[test]
    fn text_marks_maxima_and_aligns() {
        let text = table().to_text();
        assert!(text.contains("**0.900±0.000**"));
        assert!(text.contains("**0.300±0.100**"));
        assert!(text.contains("Dice failed: diverged"));
        let widths: Vec<usize> = text.lines().take(5).map(|l| l.chars().count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{text}");
    }
}
