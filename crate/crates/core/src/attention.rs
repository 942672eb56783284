//! Decoder disagreement turned into bottleneck attention.
//!
//! The two decoders' pass-1 logits give per-pixel maximum softmax
//! probabilities and argmax labels. Foreground agreement between the label
//! maps yields a union and an intersection mask, their OR is the binary
//! multi-confidence map (MCM), and `max(p_main, p_aux) * MCM` is the spatial
//! attention. The attention is area-averaged down to the bottleneck
//! resolution, replicated over the bottleneck channels and multiplied into
//! the bottleneck features.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::ops::softmax_channels;
use crate::scalar::Scalar;
use crate::tensor::{argmax_labels, LabelMap, Tensor};

/// Class id treated as background when deciding foreground agreement.
pub const BACKGROUND: u8 = 0;

/// Binary `[n, h, w]` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    shape: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("binary map {:?} from {} values", shape, data.len())));
        }
        Ok(BinaryMap { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixelwise `self => other`.
    pub fn is_subset_of(&self, other: &BinaryMap) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn or(&self, other: &BinaryMap) -> Result<BinaryMap> {
        if self.shape != other.shape {
            return Err(Error::Contract(format!(
                "binary OR of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(BinaryMap {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// `[n, 1, h, w]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [n, h, w] = self.shape;
        let data = self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::from_vec([n, 1, h, w], data).unwrap()
    }
}

/// Union and intersection of the two decoders' foreground predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgreementMasks {
    pub union: BinaryMap,
    pub intersection: BinaryMap,
}

/// Spatial attention and its bottleneck-shaped projection.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    /// `[n, 1, h, w]`, values in `[0, 1]`.
    pub map: Tensor<T>,
    /// `[n, c_b, h_b, w_b]`, identical across channels.
    pub projected: Tensor<T>,
}

/// Everything derived from one pair of decoder outputs.
#[derive(Clone, Debug)]
pub struct ConfidenceBundle<T> {
    pub p_main: Tensor<T>,
    pub p_aux: Tensor<T>,
    pub masks: AgreementMasks,
    pub mcm: BinaryMap,
    pub attention: AttentionMap<T>,
}

/// Per-pixel maximum of the softmax over classes, as `[n, 1, h, w]`.
pub fn max_probability<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let probs = softmax_channels(logits);
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let item = probs.item(b);
        let dst = out.channel_mut(b, 0);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (0..c).map(|k| item[k * plane + i]).fold(T::neg_infinity(), T::max);
        }
    }
    out
}

pub fn agreement_masks(main_labels: &LabelMap, aux_labels: &LabelMap) -> Result<AgreementMasks> {
    if main_labels.shape() != aux_labels.shape() {
        return Err(Error::Contract(format!(
            "agreement of label maps {:?} and {:?}",
            main_labels.shape(),
            aux_labels.shape()
        )));
    }
    let (union, intersection): (Vec<bool>, Vec<bool>) = main_labels
        .data()
        .iter()
        .zip(aux_labels.data())
        .map(|(&m, &a)| {
            let fg_main = m != BACKGROUND;
            let fg_aux = a != BACKGROUND;
            (fg_main || fg_aux, m == a && fg_main)
        })
        .unzip();
    let shape = main_labels.shape();
    Ok(AgreementMasks {
        union: BinaryMap { shape, data: union },
        intersection: BinaryMap { shape, data: intersection },
    })
}

/// `union OR intersection`.
pub fn multi_confidence_map(masks: &AgreementMasks) -> BinaryMap {
    masks.union.or(&masks.intersection).expect("agreement masks share a shape")
}

/// `max(p_main, p_aux) * MCM`, elementwise.
pub fn compute_attention<T: Scalar>(
    p_main: &Tensor<T>,
    p_aux: &Tensor<T>,
    mcm: &BinaryMap,
) -> Result<Tensor<T>> {
    p_main.expect_shape(p_aux.shape(), "p_aux")?;
    let [n, _, h, w] = p_main.shape();
    if p_main.channels() != 1 || mcm.shape() != [n, h, w] {
        return Err(Error::Shape(format!(
            "attention inputs {:?} / mcm {:?}",
            p_main.shape(),
            mcm.shape()
        )));
    }
    let data = p_main
        .data()
        .iter()
        .zip(p_aux.data())
        .zip(mcm.data())
        .map(|((&a, &b), &m)| if m { a.max(b) } else { T::zero() })
        .collect();
    Tensor::from_vec(p_main.shape(), data)
}

/// Area-averages `[n, 1, h, w]` attention down to `(h_b, w_b)` and replicates
/// it over `c_b` channels.
pub fn project_to_bottleneck<T: Scalar>(att: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, h, w] = att.shape();
    let [cb, hb, wb] = target;
    if c != 1 || hb == 0 || wb == 0 || h % hb != 0 || w % wb != 0 {
        return Err(Error::Contract(format!(
            "cannot project attention {:?} onto bottleneck {:?}",
            att.shape(),
            target
        )));
    }
    let (fy, fx) = (h / hb, w / wb);
    let area = T::from_usize(fy * fx).unwrap();
    let mut out = Tensor::zeros([n, cb, hb, wb]);
    let mut pooled = vec![T::zero(); hb * wb];
    for b in 0..n {
        let src = att.channel(b, 0);
        for y in 0..hb {
            for x in 0..wb {
                let mut acc = T::zero();
                for yy in 0..fy {
                    let row = (y * fy + yy) * w + x * fx;
                    acc = acc + src[row..row + fx].iter().copied().sum::<T>();
                }
                pooled[y * wb + x] = acc / area;
            }
        }
        for ch in 0..cb {
            out.channel_mut(b, ch).copy_from_slice(&pooled);
        }
    }
    Ok(out)
}

pub fn apply_attention<T: Scalar>(z: &Tensor<T>, projected: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != projected.shape() {
        return Err(Error::Contract(format!(
            "attention {:?} does not match bottleneck {:?}",
            projected.shape(),
            z.shape()
        )));
    }
    z.zip_map(projected, |a, b| a * b)
}

/// Runs the whole attention pipeline on a pair of pass-1 decoder outputs.
pub fn confidence_bundle<T: Scalar>(
    main_logits: &Tensor<T>,
    aux_logits: &Tensor<T>,
    bottleneck: [usize; 3],
) -> Result<ConfidenceBundle<T>> {
    main_logits.expect_shape(aux_logits.shape(), "aux logits")?;
    let p_main = max_probability(main_logits);
    let p_aux = max_probability(aux_logits);
    let masks = agreement_masks(&argmax_labels(main_logits), &argmax_labels(aux_logits))?;
    let mcm = multi_confidence_map(&masks);
    let map = compute_attention(&p_main, &p_aux, &mcm)?;
    let projected = project_to_bottleneck(&map, bottleneck)?;
    Ok(ConfidenceBundle { p_main, p_aux, masks, mcm, attention: AttentionMap { map, projected } })
}

/// Writes the MCM and attention of every batch item as 8-bit grayscale PNGs
/// named `{sample_id}_mcm.png` and `{sample_id}_attention.png` (batch items
/// after the first get a `_b{index}` suffix on the id).
pub fn dump_maps<T: Scalar>(
    bundle: &ConfidenceBundle<T>,
    sample_id: &str,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [n, h, w] = bundle.mcm.shape();
    let mut written = Vec::new();
    for b in 0..n {
        let id = if b == 0 { sample_id.to_string() } else { format!("{sample_id}_b{b}") };
        let plane = h * w;
        let mcm = &bundle.mcm.data()[b * plane..(b + 1) * plane];
        let att = bundle.attention.map.channel(b, 0);
        let maps: [(&str, Box<dyn Fn(usize) -> u8>); 2] = [
            ("mcm", Box::new(|i| if mcm[i] { 255 } else { 0 })),
            (
                "attention",
                Box::new(|i| (att[i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8),
            ),
        ];
        for (name, px) in maps {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([px(y as usize * w + x as usize)])
            });
            let path = dir.join(format!("{id}_{name}.png"));
            img.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(rows: &[&[u8]]) -> LabelMap {
        LabelMap::from_rows(rows)
    }

    fn bin(rows: &[&[u8]]) -> BinaryMap {
        let l = labels(rows);
        BinaryMap::new(l.shape(), l.data().iter().map(|&v| v != 0).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_one_over_n() {
        let p = max_probability(&Tensor::<f64>::zeros([1, 4, 3, 3]));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn confident_pixel_probability() {
        let logits = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![10.0, 0.0]).unwrap();
        let p = max_probability(&logits).data()[0];
        let expected = 1.0 / (1.0 + (-10f64).exp());
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn shift_invariance() {
        let a = Tensor::<f64>::from_vec([1, 3, 1, 2], vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.2]).unwrap();
        let b = a.map(|v| v + 7.25);
        let (pa, pb) = (max_probability(&a), max_probability(&b));
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_labels_agree_everywhere_on_foreground() {
        let l = labels(&[&[0, 1], &[2, 0]]);
        let m = agreement_masks(&l, &l).unwrap();
        let fg = bin(&[&[0, 1], &[1, 0]]);
        assert_eq!(m.union, fg);
        assert_eq!(m.intersection, fg);
        assert_eq!(multi_confidence_map(&m), fg);
    }

    #[test]
    fn disjoint_halves() {
        let main = labels(&[&[1, 0], &[1, 0]]);
        let aux = labels(&[&[0, 1], &[0, 1]]);
        let m = agreement_masks(&main, &aux).unwrap();
        assert_eq!(m.union, bin(&[&[1, 1], &[1, 1]]));
        assert_eq!(m.intersection, bin(&[&[0, 0], &[0, 0]]));
        assert_eq!(multi_confidence_map(&m), m.union);
    }

    #[test]
    fn all_background() {
        let l = LabelMap::zeros([1, 3, 3]);
        let m = agreement_masks(&l, &l).unwrap();
        assert_eq!(m.union.count(), 0);
        assert_eq!(m.intersection.count(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = LabelMap::zeros([1, 2, 2]);
        let b = LabelMap::zeros([1, 2, 3]);
        assert!(matches!(agreement_masks(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn mcm_equals_union_for_every_nested_pair_on_2x4() {
        // Enumerate every union mask on a 2x4 grid and, for each, every
        // intersection contained in it.
        for u in 0u32..256 {
            let mut i = u;
            loop {
                let to_map = |bits: u32| {
                    BinaryMap::new([1, 2, 4], (0..8).map(|k| bits >> k & 1 == 1).collect())
                        .unwrap()
                };
                let masks = AgreementMasks { union: to_map(u), intersection: to_map(i) };
                assert_eq!(multi_confidence_map(&masks), masks.union);
                if i == 0 {
                    break;
                }
                i = (i - 1) & u;
            }
        }
    }

    #[test]
    fn attention_hand_cases() {
        let pm = Tensor::<f64>::from_rows(&[&[0.5, 0.9], &[0.7, 0.6]]);
        let pa = Tensor::<f64>::from_rows(&[&[0.8, 0.4], &[0.7, 0.9]]);
        let mcm = bin(&[&[1, 1], &[0, 1]]);
        let att = compute_attention(&pm, &pa, &mcm).unwrap();
        assert_eq!(att.data(), &[0.8, 0.9, 0.0, 0.9]);

        let pm = Tensor::<f64>::from_rows(&[&[0.9]]);
        let pa = Tensor::<f64>::from_rows(&[&[0.6]]);
        assert_eq!(compute_attention(&pm, &pa, &bin(&[&[1]])).unwrap().data(), &[0.9]);
        assert_eq!(compute_attention(&pm, &pa, &bin(&[&[0]])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn projection_of_constant() {
        let att = Tensor::<f64>::full([1, 1, 8, 8], 0.375);
        let p = project_to_bottleneck(&att, [3, 2, 4]).unwrap();
        assert_eq!(p.shape(), [1, 3, 2, 4]);
        assert!(p.data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn projection_block_means() {
        let att = Tensor::<f64>::from_rows(&[
            &[1.0, 1.0, 0.0, 0.0],
            &[1.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0],
        ]);
        let p = project_to_bottleneck(&att, [1, 2, 2]).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_rejects_non_divisible() {
        let att = Tensor::<f64>::zeros([1, 1, 6, 6]);
        assert!(matches!(project_to_bottleneck(&att, [1, 4, 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn apply_attention_cases() {
        let z = Tensor::<f64>::from_rows(&[&[2.0, -4.0]]);
        let a = Tensor::<f64>::from_rows(&[&[0.5, 0.25]]);
        assert_eq!(apply_attention(&z, &a).unwrap().data(), &[1.0, -1.0]);
        assert_eq!(apply_attention(&z, &Tensor::ones([1, 1, 1, 2])).unwrap(), z);
        assert!(apply_attention(&z, &Tensor::zeros([1, 1, 1, 2])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_attention(&z, &Tensor::zeros([1, 1, 2, 1])).is_err());
    }

    #[test]
    fn dump_writes_two_pngs() {
        let logits = Tensor::<f64>::from_vec([1, 2, 2, 2], vec![0., 0., 5., 5., 1., 1., 0., 0.]).unwrap();
        let b = confidence_bundle(&logits, &logits, [2, 1, 1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = dump_maps(&b, "vol_003", dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(dir.path().join("vol_003_mcm.png").exists());
        let img = image::open(dir.path().join("vol_003_mcm.png")).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 255);
        assert_eq!(img.get_pixel(0, 1).0[0], 0);
    }

    fn logits_strategy(n: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-4.0f64..4.0, n * c * h * w)
            .prop_map(move |v| Tensor::from_vec([n, c, h, w], v).unwrap())
    }

    proptest! {
        #[test]
        fn pipeline_invariants(main in logits_strategy(1, 3, 8, 8), aux in logits_strategy(1, 3, 8, 8)) {
            let b = confidence_bundle(&main, &aux, [4, 2, 2]).unwrap();
            prop_assert!(b.masks.intersection.is_subset_of(&b.masks.union));
            let again = b.mcm.or(&b.mcm).unwrap();
            prop_assert_eq!(&again, &b.mcm);
            for (&a, &m) in b.attention.map.data().iter().zip(b.mcm.data()) {
                prop_assert!((0.0..=1.0).contains(&a));
                if m { prop_assert!(a > 1.0 / 3.0) } else { prop_assert_eq!(a, 0.0) }
            }
            let (lo, hi) = (b.attention.map.min_value(), b.attention.map.max_value());
            for &v in b.attention.projected.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            for ch in 1..4 {
                prop_assert_eq!(b.attention.projected.channel(0, ch), b.attention.projected.channel(0, 0));
            }
        }

        #[test]
        fn transposition_equivariance(main in logits_strategy(1, 3, 4, 6), aux in logits_strategy(1, 3, 4, 6)) {
            let b = confidence_bundle(&main, &aux, [1, 2, 2]).unwrap();
            let bt = confidence_bundle(&main.transpose_spatial(), &aux.transpose_spatial(), [1, 2, 2]).unwrap();
            prop_assert_eq!(bt.attention.map, b.attention.map.transpose_spatial());
        }
    }
}
