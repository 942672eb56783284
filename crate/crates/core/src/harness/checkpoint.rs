//! Checkpoint files: a magic line, one line of JSON metadata, then every
//! parameter and Adam moment as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::experiment::ExperimentSpec;
use super::optim::Adam;

const MAGIC: &str = "UDBA-CKPT-v1";

/// Position of a ChaCha stream, enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 =
            self.word_pos.parse().map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    scalar: String,
    spec: ExperimentSpec,
    epoch: usize,
    step: usize,
    best_val_dice: Option<f64>,
    noise_rng: RngState,
    shuffle_rng: RngState,
    adam_step: u64,
    names: Vec<String>,
    shapes: Vec<[usize; 4]>,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ExperimentSpec,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_val_dice: Option<f64>,
    pub noise_rng: RngState,
    pub shuffle_rng: RngState,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            scalar: T::NAME.to_string(),
            spec: self.spec.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_dice: self.best_val_dice,
            noise_rng: self.noise_rng.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            adam_step: self.adam_step,
            names: self.names.clone(),
            shapes: self.params.iter().map(Tensor::shape).collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Serde(e.to_string()))?;
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "{json}").unwrap();
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let json = lines.next().ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if h.names.len() != h.shapes.len() {
            return Err(Error::Checkpoint("header names and shapes disagree".into()));
        }
        let blob = lines.next().unwrap_or(&[]);
        let per_set: usize = h.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if blob.len() != per_set * 3 * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                per_set * 3 * 8,
                blob.len()
            )));
        }
        let mut values = blob.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())));
        let mut read_set = || -> Vec<Tensor<T>> {
            h.shapes
                .iter()
                .map(|&s| Tensor::from_vec(s, values.by_ref().take(s.iter().product()).collect()).unwrap())
                .collect()
        };
        let params = read_set();
        let adam_m = read_set();
        let adam_v = read_set();
        Ok(Checkpoint {
            spec: h.spec,
            epoch: h.epoch,
            step: h.step,
            best_val_dice: h.best_val_dice,
            noise_rng: h.noise_rng,
            shuffle_rng: h.shuffle_rng,
            names: h.names,
            params,
            adam_step: h.adam_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Network described by the stored spec, carrying the stored weights.
    pub fn network(&self) -> Result<Network<T>> {
        let mut net = Network::new(self.spec.network.clone(), self.spec.seed)?;
        if net.params().names() != self.names.as_slice() {
            return Err(Error::Checkpoint("parameter names do not match the configured network".into()));
        }
        net.load_params(self.params.clone())?;
        Ok(net)
    }

    pub fn optimizer(&self) -> Result<Adam<T>> {
        Adam::from_state(self.spec.optimizer, self.adam_step, self.adam_m.clone(), self.adam_v.clone())
    }
}
