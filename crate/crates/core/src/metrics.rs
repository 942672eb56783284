//! Overlap and surface-distance metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask};

/// Pixel spacing as (row, column) in mm per pixel.
pub type Spacing2 = (f64, f64);

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn overlap_counts(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    (inter, na, nb)
}

fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn iou_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    let union = na + nb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(gt: &Mask, pred: &Mask) -> Result<f64> {
    check_pair(gt, pred)?;
    let (i, a, b) = overlap_counts(gt, pred);
    Ok(dice_from_counts(i, a, b))
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou(gt: &Mask, pred: &Mask) -> Result<f64> {
    check_pair(gt, pred)?;
    let (i, a, b) = overlap_counts(gt, pred);
    Ok(iou_from_counts(i, a, b))
}

/// Lower envelope of parabolas along one line (Felzenszwalb & Huttenlocher).
/// `f` holds squared distances (infinite where no site is reachable yet);
/// samples are `step` apart.
fn envelope_1d(f: &[f64], step: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let pos = |i: usize| i as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < sites.len() && bounds[k + 1] < x {
            k += 1;
        }
        let d = x - pos(sites[k]);
        *o = d * d + f[sites[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `sites`, honouring anisotropic spacing. Infinite when `sites` is empty.
pub fn squared_distance_map(sites: &Mask, spacing: Spacing2) -> Vec<f64> {
    let (h, w) = (sites.height(), sites.width());
    let mut grid: Vec<f64> =
        sites.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope_1d(&col, spacing.0, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        envelope_1d(&grid[y * w..(y + 1) * w], spacing.1, &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

fn mean_boundary_distance(from: &Mask, to_boundary: &Mask, spacing: Spacing2) -> f64 {
    let dist = squared_distance_map(to_boundary, spacing);
    let w = from.width();
    let (sum, n) = from
        .points()
        .fold((0.0, 0usize), |(s, n), (y, x)| (s + dist[y * w + x].sqrt(), n + 1));
    sum / n as f64
}

/// Average symmetric surface distance: the mean distance from each mask's
/// boundary pixels to the other mask's boundary, averaged over the two
/// directions. Boundaries are mask minus its 4-connected erosion.
pub fn asd(gt: &Mask, pred: &Mask, spacing: Spacing2) -> Result<f64> {
    check_pair(gt, pred)?;
    if gt.is_empty() || pred.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks".into()));
    }
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::Contract(format!("spacing must be positive, got {spacing:?}")));
    }
    let (bg, bp) = (gt.boundary(), pred.boundary());
    Ok(0.5 * (mean_boundary_distance(&bg, &bp, spacing) + mean_boundary_distance(&bp, &bg, spacing)))
}

/// Metrics of one organ in one volume.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrganReport {
    pub organ: String,
    pub label: u8,
    pub dice: f64,
    pub iou: f64,
    /// Missing when no slice holds the organ in both masks.
    pub asd: Option<f64>,
}

/// Per-organ metrics over a stack of slices (`[slices, h, w]` label maps).
/// Dice and IoU pool voxel counts over the whole stack; ASD is computed per
/// slice where both masks contain the organ and averaged over those slices.
pub fn evaluate_volume(
    gt: &LabelMap,
    pred: &LabelMap,
    spacing: Spacing2,
    organs: &[(u8, String)],
) -> Result<Vec<OrganReport>> {
    if gt.shape() != pred.shape() {
        return Err(Error::Shape(format!("volumes {:?} and {:?}", gt.shape(), pred.shape())));
    }
    organs
        .iter()
        .map(|(label, name)| {
            let (mut inter, mut na, mut nb) = (0, 0, 0);
            let mut asd_sum = 0.0;
            let mut asd_slices = 0usize;
            for s in 0..gt.batch() {
                let (mg, mp) = (gt.mask(s, *label), pred.mask(s, *label));
                let (i, a, b) = overlap_counts(&mg, &mp);
                inter += i;
                na += a;
                nb += b;
                if a > 0 && b > 0 {
                    asd_sum += asd(&mg, &mp, spacing)?;
                    asd_slices += 1;
                }
            }
            Ok(OrganReport {
                organ: name.clone(),
                label: *label,
                dice: dice_from_counts(inter, na, nb),
                iou: iou_from_counts(inter, na, nb),
                asd: (asd_slices > 0).then(|| asd_sum / asd_slices as f64),
            })
        })
        .collect()
}
