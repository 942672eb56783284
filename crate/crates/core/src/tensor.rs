//! Dense 4-D tensors in `[batch, channel, height, width]` layout, plus the
//! integer label maps and binary masks the segmentation code passes around.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `[n, c, h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: [usize; 4]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form tensor {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a `[1, 1, h, w]` tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), w, "ragged rows");
                r.iter().map(|&v| T::lit(v))
            })
            .collect();
        Tensor { shape: [1, 1, h, w], data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Pixels per channel plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One `h*w` channel plane.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {:?}, found {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Swaps the two spatial axes.
    pub fn transpose_spatial(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor::zeros([n, c, w, h]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(b, ch, x, y, self.at(b, ch, y, x));
                    }
                }
            }
        }
        out
    }

    /// Lossless conversion through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }
}

/// Integer class labels in `[n, h, w]` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "label buffer of {} values cannot form {:?}",
                data.len(),
                shape
            )));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelMap { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabelMap { shape: [1, h, w], data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn item(&self, n: usize) -> &[u8] {
        let p = self.plane();
        &self.data[n * p..(n + 1) * p]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of pixels carrying `label` in batch item `n`.
    pub fn mask(&self, n: usize, label: u8) -> Mask {
        Mask {
            height: self.shape[1],
            width: self.shape[2],
            data: self.item(n).iter().map(|&l| l == label).collect(),
        }
    }

    /// One-hot encoding as a `[n, classes, h, w]` tensor.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Tensor<T>> {
        let [n, h, w] = self.shape;
        let mut out = Tensor::zeros([n, classes, h, w]);
        for b in 0..n {
            for (i, &l) in self.item(b).iter().enumerate() {
                let l = l as usize;
                if l >= classes {
                    return Err(Error::Contract(format!(
                        "label {l} outside [0, {classes})"
                    )));
                }
                out.channel_mut(b, l)[i] = T::one();
            }
        }
        Ok(out)
    }

    pub fn transpose_spatial(&self) -> Self {
        let [n, h, w] = self.shape;
        let mut data = vec![0; self.data.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data[(b * w + x) * h + y] = self.data[(b * h + y) * w + x];
                }
            }
        }
        LabelMap { shape: [n, w, h], data }
    }
}

/// Per-pixel argmax over the class axis.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> LabelMap {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut data = vec![0u8; n * plane];
    for b in 0..n {
        let item = logits.item(b);
        for i in 0..plane {
            let mut best = 0usize;
            let mut best_v = item[i];
            for k in 1..c {
                let v = item[k * plane + i];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            data[b * plane + i] = best as u8;
        }
    }
    LabelMap { shape: [n, h, w], data }
}

/// 2-D binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of {} values cannot form {height}x{width}",
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    /// Parses rows of `0`/`1` (anything else counts as set).
    pub fn from_rows(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let data = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), width, "ragged rows");
                r.bytes().map(|b| b != b'0' && b != b'.')
            })
            .collect();
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixels set in the mask whose 4-neighbourhood leaves the mask
    /// (the image border counts as outside).
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut out = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let interior = y > 0
                    && x > 0
                    && y + 1 < h
                    && x + 1 < w
                    && self.get(y - 1, x)
                    && self.get(y + 1, x)
                    && self.get(y, x - 1)
                    && self.get(y, x + 1);
                if !interior {
                    out.set(y, x, true);
                }
            }
        }
        out
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    pub fn translate(&self, dy: isize, dx: isize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for (y, x) in self.points() {
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                out.set(ny as usize, nx as usize, true);
            }
        }
        out
    }
}
