use std::collections::BTreeMap;

use crate::data::{
    extract_slices, load_volume, make_splits, phantom, CtVolume, DatasetKind, Manifest, OrganSpec, PreprocessOptions,
    SliceSample, SplitSpec,
};
use crate::error::{Error, Result};
use crate::metrics::Spacing2;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

use super::experiment::{DatasetSource, ExperimentSpec};

/// Which volumes of the split to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    /// Training volumes minus the held-out fold.
    Fit,
    /// The held-out fold.
    Validation,
    /// Every training volume.
    Train,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fit" => Ok(SplitPart::Fit),
            "validation" | "val" => Ok(SplitPart::Validation),
            "train" => Ok(SplitPart::Train),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Preprocessed slices of one volume, in axial order.
#[derive(Clone, Debug)]
pub struct VolumeData<T> {
    pub id: String,
    pub samples: Vec<SliceSample<T>>,
    /// In-plane spacing `(row, col)` in mm at network resolution.
    pub spacing: Spacing2,
}

impl<T: Scalar> VolumeData<T> {
    /// Ground truth of every slice stacked to `[slices, s, s]`.
    pub fn labels(&self) -> LabelMap {
        stack_labels(self.samples.iter().map(|s| &s.label))
    }
}

pub(crate) fn stack_labels<'a>(maps: impl Iterator<Item = &'a LabelMap>) -> LabelMap {
    let mut data = Vec::new();
    let (mut n, mut hw) = (0, [0, 0]);
    for m in maps {
        let [k, h, w] = m.shape();
        n += k;
        hw = [h, w];
        data.extend_from_slice(m.data());
    }
    LabelMap::new([n, hw[0], hw[1]], data).unwrap()
}

pub(crate) fn stack_images<T: Scalar>(images: &[&Tensor<T>]) -> Tensor<T> {
    let [_, c, h, w] = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    let mut n = 0;
    for t in images {
        n += t.batch();
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([n, c, h, w], data).unwrap()
}

enum Source {
    Phantom(BTreeMap<String, (CtVolume, CtVolume)>),
    Manifest(Manifest),
}

/// A dataset with its split, able to load preprocessed volumes by id.
pub struct Dataset {
    pub kind: DatasetKind,
    pub organs: Vec<OrganSpec>,
    pub split: SplitSpec,
    pub options: PreprocessOptions,
    source: Source,
}

impl Dataset {
    pub fn open(spec: &ExperimentSpec) -> Result<Self> {
        let options = PreprocessOptions { window: spec.data.window, input_size: spec.network.input_size };
        let (folds, fold) = (spec.data.folds, spec.data.fold);
        match &spec.data.source {
            DatasetSource::Phantom { config, seed } => {
                let cases = phantom::generate(*seed, config)?;
                let organs = DatasetKind::Phantom.default_organs().into_iter().take(config.organs).collect();
                let mut volumes = BTreeMap::new();
                for c in cases {
                    volumes.insert(c.image.id.clone(), (c.image, c.labels));
                }
                let ids: Vec<String> = volumes.keys().cloned().collect();
                let split = make_splits(DatasetKind::Phantom, &ids, spec.seed, folds, fold)?;
                Ok(Dataset { kind: DatasetKind::Phantom, organs, split, options, source: Source::Phantom(volumes) })
            }
            DatasetSource::Manifest { path } => {
                let m = Manifest::load(path)?;
                if let Some(max) = m.organs.iter().map(|o| o.label).max() {
                    if max as usize >= spec.network.num_classes {
                        return Err(Error::Config(format!(
                            "manifest organ label {max} needs more than {} classes",
                            spec.network.num_classes
                        )));
                    }
                }
                let split = m.splits(spec.seed, folds, fold)?;
                Ok(Dataset { kind: m.dataset, organs: m.organs.clone(), split, options, source: Source::Manifest(m) })
            }
        }
    }

    pub fn ids(&self, part: SplitPart) -> Vec<String> {
        match part {
            SplitPart::Fit => self.split.fit_ids(),
            SplitPart::Validation => self.split.validation_ids().to_vec(),
            SplitPart::Train => self.split.train.clone(),
            SplitPart::Test => self.split.test.clone(),
        }
    }

    pub fn all_ids(&self) -> Vec<String> {
        match &self.source {
            Source::Phantom(v) => v.keys().cloned().collect(),
            Source::Manifest(m) => m.ids(),
        }
    }

    /// `(label, name)` pairs in label order.
    pub fn organ_labels(&self) -> Vec<(u8, String)> {
        self.organs.iter().map(|o| (o.label, o.name.clone())).collect()
    }

    fn raw(&self, id: &str) -> Result<(CtVolume, CtVolume)> {
        match &self.source {
            Source::Phantom(v) => v.get(id).cloned().ok_or_else(|| Error::UnknownVolume(id.to_string())),
            Source::Manifest(m) => {
                let entry = m.volume(id)?;
                let mut image = load_volume(&m.resolve(&entry.image))?;
                let labels = load_volume(&m.resolve(&entry.label))?;
                image.id = id.to_string();
                Ok((image, labels))
            }
        }
    }

    pub fn load<T: Scalar>(&self, id: &str) -> Result<VolumeData<T>> {
        let (image, labels) = self.raw(id)?;
        let samples = extract_slices(&image, &labels, &self.options)?;
        let [_, h, w] = image.dims();
        let s = self.options.input_size as f64;
        let spacing = (image.spacing[1] * h as f64 / s, image.spacing[0] * w as f64 / s);
        Ok(VolumeData { id: id.to_string(), samples, spacing })
    }

    pub fn load_many<T: Scalar>(&self, ids: &[String]) -> Result<Vec<VolumeData<T>>> {
        ids.iter().map(|id| self.load(id)).collect()
    }
}
