use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::total_loss;
use crate::model::{FeatureNoise, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, RngState};
use super::dataset::{stack_images, stack_labels, Dataset, SplitPart, VolumeData};
use super::evaluate::{evaluate_volumes, mean_dice, EvalSettings};
use super::experiment::ExperimentSpec;
use super::optim::Adam;

pub const NOISE_STREAM: u64 = 1;
pub const SHUFFLE_STREAM: u64 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.udba";
pub const BEST_CHECKPOINT_FILE: &str = "checkpoint_best.udba";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
const NONFINITE_DUMP_FILE: &str = "nonfinite_batch.txt";

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Loss breakdown of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based, counted over the whole run.
    pub step: usize,
    pub sample: String,
    pub main: f64,
    pub aux: f64,
    pub reg: f64,
    pub total: f64,
}

impl StepRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.epoch, self.step, self.sample, self.main, self.aux, self.reg, self.total
        )
    }
}

const LOG_HEADER: &str = "epoch,step,sample,L_main,L_aux,L_reg,L_total";

/// Training data held in memory.
pub struct TrainData<T> {
    /// Fitted slices, in volume-id then axial order.
    pub fit: Vec<SliceSample<T>>,
    pub validation: Vec<VolumeData<T>>,
    pub organs: Vec<(u8, String)>,
}

impl<T: Scalar> TrainData<T> {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let fit_ids = dataset.ids(SplitPart::Fit);
        if fit_ids.is_empty() {
            return Err(Error::EmptySplit("no training volumes".into()));
        }
        let fit = dataset.load_many::<T>(&fit_ids)?.into_iter().flat_map(|v| v.samples).collect();
        let validation = dataset.load_many(&dataset.ids(SplitPart::Validation))?;
        Ok(TrainData { fit, validation, organs: dataset.organ_labels() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    /// Total loss of the last optimizer step.
    pub final_loss: Option<f64>,
    pub best_val_dice: Option<f64>,
}

pub struct Trainer<T> {
    spec: ExperimentSpec,
    net: Network<T>,
    adam: Adam<T>,
    noise: FeatureNoise<ChaCha8Rng>,
    shuffle: ChaCha8Rng,
    epoch: usize,
    step: usize,
    best_val_dice: Option<f64>,
    last_loss: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let net = Network::new(spec.network.clone(), spec.seed)?;
        let adam = Adam::new(spec.optimizer, net.params().tensors());
        Ok(Trainer {
            noise: FeatureNoise::new(stream(spec.seed, NOISE_STREAM)),
            shuffle: stream(spec.seed, SHUFFLE_STREAM),
            spec,
            net,
            adam,
            epoch: 0,
            step: 0,
            best_val_dice: None,
            last_loss: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        ck.spec.validate()?;
        Ok(Trainer {
            net: ck.network()?,
            adam: ck.optimizer()?,
            noise: FeatureNoise::new(ck.noise_rng.restore()?),
            shuffle: ck.shuffle_rng.restore()?,
            epoch: ck.epoch,
            step: ck.step,
            best_val_dice: ck.best_val_dice,
            last_loss: None,
            spec: ck.spec,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let (m, v) = self.adam.moments();
        Checkpoint {
            spec: self.spec.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_dice: self.best_val_dice,
            noise_rng: RngState::capture(self.spec.seed, self.noise.rng()),
            shuffle_rng: RngState::capture(self.spec.seed, &self.shuffle),
            names: self.net.params().names().to_vec(),
            params: self.net.params().tensors().to_vec(),
            adam_step: self.adam.step_count(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
        }
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_val_dice(&self) -> Option<f64> {
        self.best_val_dice
    }

    fn summary(&self) -> TrainSummary {
        TrainSummary {
            epochs: self.epoch,
            steps: self.step,
            final_loss: self.last_loss,
            best_val_dice: self.best_val_dice,
        }
    }

    /// One shuffled pass over `samples`.
    pub fn train_epoch(&mut self, samples: &[SliceSample<T>], dump_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        if samples.is_empty() {
            return Err(Error::EmptySplit("no training slices".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.shuffle);
        let epoch = self.epoch + 1;
        let mut records = Vec::with_capacity(order.len().div_ceil(self.spec.batch_size));
        for chunk in order.chunks(self.spec.batch_size) {
            let batch: Vec<&SliceSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let image = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
            let labels = stack_labels(batch.iter().map(|s| &s.label));
            let sample = batch.iter().map(|s| s.id()).collect::<Vec<_>>().join("+");

            let mut g = Graph::new();
            let p = self.net.bind(&mut g);
            let vars = self.net.forward_graph(&mut g, &p, &image, self.spec.loss.udba, &mut self.noise)?;
            let out = vars.output(&g);
            let loss = total_loss(&out, &labels, &image, &self.spec.loss)?;
            let step = self.step + 1;
            if !loss.is_finite() || !loss.grad_main.is_finite() || !loss.grad_aux.is_finite() {
                if let Some(dir) = dump_dir {
                    dump_nonfinite(dir, epoch, step, &sample, &image, [loss.main, loss.aux, loss.reg, loss.total])?;
                }
                return Err(Error::NonFiniteLoss { epoch, step, sample });
            }
            let grads = g.backward(&[(vars.main_final, &loss.grad_main), (vars.aux, &loss.grad_aux)]);
            let per_param: Vec<Option<&Tensor<T>>> = p.iter().map(|&v| grads.get(v)).collect();
            self.adam.update(self.net.params_mut().tensors_mut(), &per_param)?;
            self.step = step;
            records.push(StepRecord {
                epoch,
                step,
                sample,
                main: loss.main.as_f64(),
                aux: loss.aux.as_f64(),
                reg: loss.reg.as_f64(),
                total: loss.total.as_f64(),
            });
        }
        self.epoch = epoch;
        self.last_loss = records.last().map(|r| r.total);
        Ok(records)
    }

    pub fn validate(&self, data: &TrainData<T>) -> Result<Option<f64>> {
        if data.validation.is_empty() {
            return Ok(None);
        }
        let settings = EvalSettings { udba: self.spec.loss.udba, seed: self.spec.seed, maps_dir: None };
        Ok(mean_dice(&evaluate_volumes(&self.net, &data.validation, &data.organs, &settings)?))
    }

    fn due_for_validation(&self) -> bool {
        let every = self.spec.eval_every;
        self.epoch == self.spec.epochs || (every > 0 && self.epoch.is_multiple_of(every))
    }

    /// Trains until `until` epochs are complete (capped at the configured
    /// count). With `out_dir`, appends to the step log and keeps the latest
    /// and best checkpoints there after every epoch.
    pub fn run(&mut self, data: &TrainData<T>, out_dir: Option<&Path>, until: usize) -> Result<TrainSummary> {
        let until = until.min(self.spec.epochs);
        let mut log = match out_dir {
            Some(dir) => Some(open_log(dir)?),
            None => None,
        };
        if let Some(dir) = out_dir {
            if self.epoch == 0 && self.spec.epochs == 0 {
                let ck = self.checkpoint();
                ck.save(&dir.join(CHECKPOINT_FILE))?;
                ck.save(&dir.join(BEST_CHECKPOINT_FILE))?;
            }
        }
        while self.epoch < until {
            let records = self.train_epoch(&data.fit, out_dir)?;
            if let Some((w, path)) = log.as_mut() {
                for r in &records {
                    writeln!(w, "{}", r.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
                }
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            let mut improved = false;
            if self.due_for_validation() {
                if let Some(d) = self.validate(data)? {
                    if self.best_val_dice.is_none_or(|b| d > b) {
                        self.best_val_dice = Some(d);
                        improved = true;
                    }
                }
            }
            if let Some(dir) = out_dir {
                let ck = self.checkpoint();
                // Without a validation fold the latest weights are the best.
                if improved || data.validation.is_empty() {
                    ck.save(&dir.join(BEST_CHECKPOINT_FILE))?;
                }
                ck.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        Ok(self.summary())
    }
}

fn open_log(dir: &Path) -> Result<(BufWriter<File>, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TRAIN_LOG_FILE);
    let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((w, path))
}

fn dump_nonfinite<T: Scalar>(dir: &Path, epoch: usize, step: usize, sample: &str, image: &Tensor<T>, terms: [T; 4]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(NONFINITE_DUMP_FILE);
    let text = format!(
        "epoch {epoch}\nstep {step}\nsample {sample}\nL_main {}\nL_aux {}\nL_reg {}\nL_total {}\nimage_min {}\nimage_max {}\nimage_finite {}\n",
        terms[0],
        terms[1],
        terms[2],
        terms[3],
        image.min_value(),
        image.max_value(),
        image.is_finite()
    );
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Fresh run of `spec`, writing `spec.toml`, the log and checkpoints to `out_dir`.
pub fn train<T: Scalar>(spec: &ExperimentSpec, out_dir: &Path) -> Result<TrainSummary> {
    let mut trainer = Trainer::<T>::new(spec.clone())?;
    let dataset = Dataset::open(spec)?;
    let data = TrainData::load(&dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log = out_dir.join(TRAIN_LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    spec.save(&out_dir.join("spec.toml"))?;
    trainer.run(&data, Some(out_dir), spec.epochs)
}

/// Continues the run stored in `checkpoint` until its configured epoch count.
pub fn resume<T: Scalar>(checkpoint: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let mut trainer = Trainer::<T>::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    let dataset = Dataset::open(trainer.spec())?;
    let data = TrainData::load(&dataset)?;
    let epochs = trainer.spec().epochs;
    trainer.run(&data, Some(out_dir), epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomConfig;
    use crate::harness::experiment::DatasetSource;

    fn tiny_spec(epochs: usize) -> ExperimentSpec {
        let mut spec = ExperimentSpec::desk();
        spec.epochs = epochs;
        spec.network.input_size = 32;
        spec.data.source = DatasetSource::Phantom {
            config: PhantomConfig { num_volumes: 2, size: 32, slices: 2, ..PhantomConfig::default() },
            seed: 1,
        };
        spec.data.folds = 1;
        spec
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(0);
        let s = train::<f64>(&spec, dir.path()).unwrap();
        assert_eq!((s.epochs, s.steps, s.final_loss), (0, 0, None));
        let ck = Checkpoint::<f64>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        let init = Network::<f64>::new(spec.network.clone(), spec.seed).unwrap();
        assert_eq!(ck.params, init.params().tensors());
    }

    #[test]
    fn log_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let s = train::<f64>(&tiny_spec(2), dir.path()).unwrap();
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 1 + s.steps);
        assert_eq!(s.steps, 8);
        assert!(dir.path().join(BEST_CHECKPOINT_FILE).exists());
        assert!(dir.path().join("spec.toml").exists());
    }

    #[test]
    fn nonfinite_input_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(1);
        let mut trainer = Trainer::<f64>::new(spec.clone()).unwrap();
        let data = TrainData::<f64>::load(&Dataset::open(&spec).unwrap()).unwrap();
        let mut fit = data.fit.clone();
        for s in &mut fit {
            s.image.data_mut()[0] = f64::NAN;
        }
        let err = trainer.train_epoch(&fit, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, step: 1, .. }), "{err}");
        let dump = fs::read_to_string(dir.path().join(NONFINITE_DUMP_FILE)).unwrap();
        assert!(dump.contains("sample phantom_"));
    }
}
