//! Training, evaluation, ablation and reporting on top of the core model.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
pub mod evaluate;
pub mod experiment;
pub mod optim;
pub mod overlay;
pub mod report;
pub mod train;

pub use ablation::{run_grid, GridReport};
pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, SplitPart, VolumeData};
pub use evaluate::{evaluate_checkpoint, EvalSettings, VolumeResult};
pub use experiment::{DatasetSource, ExperimentSpec};
pub use report::{Metric, ResultsTable};
pub use train::{resume, train, TrainData, TrainSummary, Trainer};
