use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::manifest::OrganSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Segthor,
    Lctsc,
    Phantom,
}

impl DatasetKind {
    /// `(volumes, held-out test volumes)` for the public datasets.
    pub fn split_sizes(self) -> Option<(usize, usize)> {
        match self {
            DatasetKind::Segthor => Some((40, 5)),
            DatasetKind::Lctsc => Some((60, 24)),
            DatasetKind::Phantom => None,
        }
    }

    pub fn default_organs(self) -> Vec<OrganSpec> {
        let names: &[&str] = match self {
            DatasetKind::Segthor => &["esophagus", "heart", "trachea", "aorta"],
            DatasetKind::Lctsc => &["esophagus", "spinal_cord", "heart", "lung_l", "lung_r"],
            DatasetKind::Phantom => &super::phantom::ORGAN_NAMES,
        };
        names
            .iter()
            .enumerate()
            .map(|(i, n)| OrganSpec { label: i as u8 + 1, name: n.to_string() })
            .collect()
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Segthor => "segthor",
            DatasetKind::Lctsc => "lctsc",
            DatasetKind::Phantom => "phantom",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "segthor" => Ok(DatasetKind::Segthor),
            "lctsc" => Ok(DatasetKind::Lctsc),
            "phantom" => Ok(DatasetKind::Phantom),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Volume-level train/test split with cross-validation folds over the
/// training volumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: DatasetKind,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Partition of `train`.
    pub folds: Vec<Vec<String>>,
    pub fold_index: usize,
}

impl SplitSpec {
    /// Builds folds round-robin over `train` in the given order.
    pub fn new(dataset: DatasetKind, train: Vec<String>, test: Vec<String>, fold_count: usize, fold_index: usize) -> Result<Self> {
        let fold_count = fold_count.max(1);
        if fold_index >= fold_count {
            return Err(Error::Config(format!("fold index {fold_index} out of range for {fold_count} folds")));
        }
        let mut folds = vec![Vec::new(); fold_count];
        for (i, id) in train.iter().enumerate() {
            folds[i % fold_count].push(id.clone());
        }
        let spec = SplitSpec { dataset, train, test, folds, fold_index };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let train: HashSet<&String> = self.train.iter().collect();
        if train.len() != self.train.len() {
            return Err(Error::Config("duplicate volume ids in training split".into()));
        }
        if self.test.iter().any(|id| train.contains(id)) {
            return Err(Error::Config("train and test splits overlap".into()));
        }
        let mut seen = HashSet::new();
        for id in self.folds.iter().flatten() {
            if !train.contains(id) || !seen.insert(id) {
                return Err(Error::Config(format!("folds do not partition the training split ({id})")));
            }
        }
        if seen.len() != train.len() {
            return Err(Error::Config("folds do not cover the training split".into()));
        }
        Ok(())
    }

    /// Held-out fold. Empty when only one fold exists.
    pub fn validation_ids(&self) -> &[String] {
        if self.folds.len() <= 1 {
            &[]
        } else {
            &self.folds[self.fold_index]
        }
    }

    /// Training volumes minus the held-out fold.
    pub fn fit_ids(&self) -> Vec<String> {
        let held: HashSet<&String> = self.validation_ids().iter().collect();
        self.train.iter().filter(|id| !held.contains(id)).cloned().collect()
    }
}

/// Seeded shuffle of `ids` into train/test, then `fold_count` folds over the
/// training part. The public datasets keep their published split sizes; the
/// phantom holds out a fifth of its volumes.
pub fn make_splits(dataset: DatasetKind, ids: &[String], seed: u64, fold_count: usize, fold_index: usize) -> Result<SplitSpec> {
    let n_test = match dataset.split_sizes() {
        Some((total, test)) => {
            if ids.len() != total {
                return Err(Error::Config(format!("{dataset} has {total} volumes, manifest lists {}", ids.len())));
            }
            test
        }
        None => ids.len() / 5,
    };
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::Config("duplicate volume ids".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order.split_off(n_test);
    SplitSpec::new(dataset, train, order, fold_count, fold_index)
}
