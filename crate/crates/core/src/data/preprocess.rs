use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

use super::volume::CtVolume;

/// HU window mapped linearly onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Default for Window {
    /// Soft-tissue window.
    fn default() -> Self {
        Window { low: -200.0, high: 300.0 }
    }
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        if !(self.high > self.low) {
            return Err(Error::Config(format!("window high {} must exceed low {}", self.high, self.low)));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        ((hu - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub window: Window,
    pub input_size: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { window: Window::default(), input_size: 256 }
    }
}

/// Clamps a slice to the window and rescales it to `[0, 1]`.
pub fn enhance_contrast(slice_hu: &[f32], window: &Window) -> Vec<f64> {
    slice_hu.iter().map(|&v| window.apply(v as f64)).collect()
}

/// One preprocessed axial slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample<T> {
    /// `[1, 1, s, s]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    /// `[1, s, s]`
    pub label: LabelMap,
    pub volume_id: String,
    pub slice_index: usize,
}

impl<T: Scalar> SliceSample<T> {
    pub fn id(&self) -> String {
        format!("{}_{:03}", self.volume_id, self.slice_index)
    }
}

/// Nearest-neighbour resize of a `[n, h, w]` label map; every output pixel
/// copies one source pixel.
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let [n, h, w] = labels.shape();
    let src_index = |o: usize, input: usize, output: usize| {
        (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    let ys: Vec<usize> = (0..out_h).map(|o| src_index(o, h, out_h)).collect();
    let xs: Vec<usize> = (0..out_w).map(|o| src_index(o, w, out_w)).collect();
    let mut data = Vec::with_capacity(n * out_h * out_w);
    for b in 0..n {
        let item = labels.item(b);
        for &y in &ys {
            for &x in &xs {
                data.push(item[y * w + x]);
            }
        }
    }
    LabelMap::new([n, out_h, out_w], data).unwrap()
}

fn label_value(v: f32, volume: &str) -> Result<u8> {
    let r = v.round();
    if (v - r).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
        return Err(Error::Contract(format!("label volume {volume} holds non-class value {v}")));
    }
    Ok(r as u8)
}

/// Windows, rescales and resizes every axial slice of `vol`, pairing it with
/// the nearest-neighbour resized slice of `labels`.
pub fn extract_slices<T: Scalar>(
    vol: &CtVolume,
    labels: &CtVolume,
    opts: &PreprocessOptions,
) -> Result<Vec<SliceSample<T>>> {
    if vol.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "volume {} is {:?} but its labels are {:?}",
            vol.id,
            vol.dims(),
            labels.dims()
        )));
    }
    opts.window.validate()?;
    let [d, h, w] = vol.dims();
    let s = opts.input_size;
    (0..d)
        .into_par_iter()
        .map(|z| {
            let img: Vec<T> = enhance_contrast(vol.slice(z), &opts.window).into_iter().map(T::lit).collect();
            let img = Tensor::from_vec([1, 1, h, w], img)?;
            let image = resize_bilinear(&img, s, s).map(|v| v.max(T::zero()).min(T::one()));
            let lab = labels
                .slice(z)
                .iter()
                .map(|&v| label_value(v, &labels.id))
                .collect::<Result<Vec<u8>>>()?;
            let label = resize_labels_nearest(&LabelMap::new([1, h, w], lab)?, s, s);
            Ok(SliceSample { image, label, volume_id: vol.id.clone(), slice_index: z })
        })
        .collect()
}
