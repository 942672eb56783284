use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::scalar::Scalar;

use super::checkpoint::Checkpoint;
use super::dataset::{Dataset, SplitPart};
use super::evaluate::{evaluate_checkpoint, write_volume_csv, VolumeResult};
use super::experiment::ExperimentSpec;
use super::report::{Metric, ResultsTable};
use super::train::{train, TrainSummary, BEST_CHECKPOINT_FILE};

pub const RESULTS_FILE: &str = "results.csv";

/// Spec of one grid cell: `base` with its loss configuration replaced.
pub fn cell_spec(base: &ExperimentSpec, cell: LossConfig) -> ExperimentSpec {
    ExperimentSpec { loss: cell, ..base.clone() }
}

/// Trains one experiment into `dir`, evaluates its best checkpoint on `part`
/// and writes the per-volume results next to it.
pub fn run_experiment<T: Scalar>(
    spec: &ExperimentSpec,
    dir: &Path,
    part: SplitPart,
) -> Result<(TrainSummary, Vec<VolumeResult>)> {
    let summary = train::<T>(spec, dir)?;
    if let Some(loss) = summary.final_loss {
        if !loss.is_finite() {
            return Err(Error::Contract(format!("final loss {loss} is not finite")));
        }
    }
    let ck = Checkpoint::<T>::load(&dir.join(BEST_CHECKPOINT_FILE))?;
    let results = evaluate_checkpoint(&ck, part, None)?;
    write_volume_csv(&results, &dir.join(RESULTS_FILE))?;
    Ok((summary, results))
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub label: String,
    pub dir: PathBuf,
    pub result: std::result::Result<TrainSummary, String>,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub cells: Vec<CellOutcome>,
    pub dice: ResultsTable,
    pub iou: ResultsTable,
    pub asd: ResultsTable,
}

impl GridReport {
    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().err().map(|e| (c.label.as_str(), e.as_str())))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.result.is_ok())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for t in [&self.dice, &self.iou, &self.asd] {
            let m = t.metric.name();
            t.write(&root.join(format!("results_{m}.csv")), &root.join(format!("results_{m}.txt")))?;
        }
        Ok(())
    }
}

/// Runs every cell of the twelve-way loss/attention grid in table order,
/// each in `root/{label}/`. A failing cell is recorded and the grid
/// continues.
pub fn run_grid<T: Scalar>(base: &ExperimentSpec, root: &Path, part: SplitPart) -> Result<GridReport> {
    run_cells::<T>(base, &LossConfig::grid(), root, part)
}

pub fn run_cells<T: Scalar>(
    base: &ExperimentSpec,
    cells: &[LossConfig],
    root: &Path,
    part: SplitPart,
) -> Result<GridReport> {
    base.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let organs: Vec<String> = Dataset::open(base)?.organs.iter().map(|o| o.name.clone()).collect();
    let mut dice = ResultsTable::new(Metric::Dice, organs.clone());
    let mut iou = ResultsTable::new(Metric::Iou, organs.clone());
    let mut asd = ResultsTable::new(Metric::Asd, organs);
    let mut outcomes = Vec::with_capacity(cells.len());
    for &cell in cells {
        let label = cell.label();
        let dir = root.join(&label);
        let spec = cell_spec(base, cell);
        let result = match run_experiment::<T>(&spec, &dir, part) {
            Ok((summary, results)) => {
                dice.push_results(&label, &results);
                iou.push_results(&label, &results);
                asd.push_results(&label, &results);
                Ok(summary)
            }
            Err(e) => {
                let msg = e.to_string();
                for t in [&mut dice, &mut iou, &mut asd] {
                    t.push_failure(&label, &msg);
                }
                Err(msg)
            }
        };
        outcomes.push(CellOutcome { label, dir, result });
    }
    let report = GridReport { cells: outcomes, dice, iou, asd };
    report.write(root)?;
    Ok(report)
}
