use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, Tensor};

use super::dataset::VolumeData;
use super::evaluate::{predict_volume, EvalSettings};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
/// Pixels on both contours.
pub const SHARED_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

/// Grayscale `image` (`[1, 1, h, w]`, values in `[0, 1]`) with the
/// ground-truth contour in red and the predicted contour in green.
pub fn render_slice<T: Scalar>(image: &Tensor<T>, gt: &Mask, pred: &Mask) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if image.batch() != 1 || image.channels() != 1 {
        return Err(Error::Shape(format!("overlay needs a single plane, got {:?}", image.shape())));
    }
    if (gt.height(), gt.width()) != (h, w) || !gt.same_shape(pred) {
        return Err(Error::Shape(format!(
            "overlay image {h}x{w}, masks {}x{} and {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }
    let (cg, cp) = (gt.boundary(), pred.boundary());
    let plane = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        match (cg.get(y, x), cp.get(y, x)) {
            (true, true) => SHARED_COLOR,
            (true, false) => GT_COLOR,
            (false, true) => PRED_COLOR,
            (false, false) => {
                let v = (plane[y * w + x].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([v, v, v])
            }
        }
    }))
}

pub fn overlay_file_name(volume_id: &str, slice: usize, organ: &str) -> String {
    format!("{volume_id}_s{slice:03}_{organ}.png")
}

/// Writes one image per requested slice and organ. An empty `slices` picks
/// the middle slice.
pub fn render_overlays<T: Scalar>(
    net: &Network<T>,
    vol: &VolumeData<T>,
    slices: &[usize],
    organs: &[(u8, String)],
    settings: &EvalSettings,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let depth = vol.samples.len();
    let middle = [depth / 2];
    let slices = if slices.is_empty() { &middle[..] } else { slices };
    if let Some(&bad) = slices.iter().find(|&&s| s >= depth) {
        return Err(Error::Config(format!("volume {} has {depth} slices, slice {bad} requested", vol.id)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pred: LabelMap = predict_volume(net, vol, settings)?;
    let mut written = Vec::with_capacity(slices.len() * organs.len());
    for &s in slices {
        let sample = &vol.samples[s];
        for (label, name) in organs {
            let img = render_slice(&sample.image, &sample.label.mask(0, *label), &pred.mask(s, *label))?;
            let path = out_dir.join(overlay_file_name(&vol.id, s, name));
            img.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Mask {
        Mask::from_rows(&["000000", "011110", "011110", "011110", "011110", "000000"])
    }

    #[test]
    fn contour_is_erosion_difference_of_square() {
        let img = render_slice(&Tensor::<f64>::full([1, 1, 6, 6], 0.5), &square(), &Mask::empty(6, 6)).unwrap();
        let red: Vec<(u32, u32)> =
            img.enumerate_pixels().filter(|(_, _, p)| **p == GT_COLOR).map(|(x, y, _)| (y, x)).collect();
        let mut expected = Vec::new();
        for y in 1..5 {
            for x in 1..5 {
                if y == 1 || y == 4 || x == 1 || x == 4 {
                    expected.push((y, x));
                }
            }
        }
        assert_eq!(red, expected);
        assert_eq!(*img.get_pixel(2, 2), Rgb([128, 128, 128]));
    }

    #[test]
    fn perfect_prediction_contours_coincide() {
        let m = square();
        let img = render_slice(&Tensor::<f64>::zeros([1, 1, 6, 6]), &m, &m).unwrap();
        assert!(img.pixels().all(|p| *p != GT_COLOR && *p != PRED_COLOR));
        assert_eq!(img.pixels().filter(|p| **p == SHARED_COLOR).count(), 12);
    }

    #[test]
    fn rejects_mismatched_masks() {
        let r = render_slice(&Tensor::<f64>::zeros([1, 1, 6, 6]), &square(), &Mask::empty(5, 6));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
