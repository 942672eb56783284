//! Segmentation losses, the CT-intensity regularisers and the composite
//! training objective.
//!
//! Every loss returns its value together with the gradient with respect to
//! the tensor it is differentiated in (probabilities for Dice and the
//! regularisers, logits for cross-entropy), so the trainer can seed the
//! network's tape directly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::ops::{softmax_backward, softmax_channels};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    Dice,
    Ce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    Ctr,
    Ctrm,
}

impl FromStr for BaseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(BaseLoss::Dice),
            "ce" => Ok(BaseLoss::Ce),
            other => Err(Error::Config(format!("unknown base loss {other:?}"))),
        }
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Regularizer::None),
            "ctr" => Ok(Regularizer::Ctr),
            "ctrm" => Ok(Regularizer::Ctrm),
            other => Err(Error::Config(format!("unknown regularizer {other:?}"))),
        }
    }
}

/// One cell of the loss/attention ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub base: BaseLoss,
    pub regularizer: Regularizer,
    pub udba: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { base: BaseLoss::Ce, regularizer: Regularizer::Ctrm, udba: true }
    }
}

impl LossConfig {
    /// All twelve combinations, in table order.
    pub fn grid() -> Vec<LossConfig> {
        let mut cells = Vec::with_capacity(12);
        for base in [BaseLoss::Dice, BaseLoss::Ce] {
            for regularizer in [Regularizer::None, Regularizer::Ctr, Regularizer::Ctrm] {
                for udba in [false, true] {
                    cells.push(LossConfig { base, regularizer, udba });
                }
            }
        }
        cells
    }

    /// Row label such as `CE+CTRM(UDBA)`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.base {
            BaseLoss::Dice => "Dice",
            BaseLoss::Ce => "CE",
        })?;
        match self.regularizer {
            Regularizer::None => {}
            Regularizer::Ctr => f.write_str("+CTR")?,
            Regularizer::Ctrm => f.write_str("+CTRM")?,
        }
        if self.udba {
            f.write_str("(UDBA)")?;
        }
        Ok(())
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossConfig::grid()
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown experiment label {s:?}")))
    }
}

/// A loss value and its gradient.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Soft Dice loss `1 - mean_c (2 sum(p g) + eps) / (sum p + sum g + eps)`,
/// with sums over batch and pixels. Gradient is with respect to `probs`.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, gt_onehot: &Tensor<T>) -> Result<LossValue<T>> {
    probs.expect_shape(gt_onehot.shape(), "dice ground truth")?;
    let [n, c, _, _] = probs.shape();
    let eps = T::lit(DICE_EPS);
    let classes = T::from_usize(c).unwrap();
    let mut grad = Tensor::zeros(probs.shape());
    let mut mean_dice = T::zero();
    for k in 0..c {
        let (mut inter, mut total) = (T::zero(), T::zero());
        for b in 0..n {
            for (&p, &g) in probs.channel(b, k).iter().zip(gt_onehot.channel(b, k)) {
                inter = inter + p * g;
                total = total + p + g;
            }
        }
        let num = T::lit(2.0) * inter + eps;
        let den = total + eps;
        mean_dice = mean_dice + num / den;
        let den2 = den * den;
        for b in 0..n {
            let gt = gt_onehot.channel(b, k).to_vec();
            for (d, g) in grad.channel_mut(b, k).iter_mut().zip(gt) {
                // d(num/den)/dp = (2 g den - num) / den^2
                *d = -(T::lit(2.0) * g * den - num) / den2 / classes;
            }
        }
    }
    Ok(LossValue { value: T::one() - mean_dice / classes, grad })
}

/// Pixelwise cross-entropy averaged over batch and pixels. Gradient is with
/// respect to `logits`.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<LossValue<T>> {
    let [n, c, h, w] = logits.shape();
    if labels.shape() != [n, h, w] {
        return Err(Error::Shape(format!("labels {:?} vs logits {:?}", labels.shape(), logits.shape())));
    }
    if labels.max_label() as usize >= c {
        return Err(Error::Contract(format!("label {} outside [0, {c})", labels.max_label())));
    }
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut grad = softmax_channels(logits);
    let mut total = T::zero();
    for b in 0..n {
        let item = logits.item(b);
        for (i, &l) in labels.item(b).iter().enumerate() {
            let m = (0..c).map(|k| item[k * plane + i]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c).map(|k| (item[k * plane + i] - m).exp()).sum::<T>().ln();
            total = total + lse - item[l as usize * plane + i];
            let j = grad.index(b, l as usize, 0, 0) + i;
            grad.data_mut()[j] = grad.data()[j] - T::one();
        }
    }
    let grad = grad.map(|v| v / count);
    Ok(LossValue { value: total / count, grad })
}

fn check_single_channel<T: Scalar>(ct: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_shape(ct.shape(), "ctr ground-truth mask")?;
    b.expect_shape(ct.shape(), "ctr prediction mask")?;
    if ct.channels() != 1 {
        return Err(Error::Shape(format!("ctr expects single-channel planes, got {:?}", ct.shape())));
    }
    Ok(())
}

/// Masked-intensity difference `sum(ct * gt) - sum(ct * p)` on one plane.
fn plane_difference<T: Scalar>(ct: &[T], gt: &[T], p: &[T]) -> T {
    let (mut sg, mut sp) = (T::zero(), T::zero());
    for ((&c, &g), &q) in ct.iter().zip(gt).zip(p) {
        sg = sg + c * g;
        sp = sp + c * q;
    }
    sg - sp
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// CT-intensity regulariser on `[n, 1, h, w]` planes:
/// `|sum(ct * gt) - sum(ct * p)| / (w h)`, averaged over the batch.
/// Gradient is with respect to `p_mask`.
pub fn ctr_with_grad<T: Scalar>(ct: &Tensor<T>, gt_mask: &Tensor<T>, p_mask: &Tensor<T>) -> Result<LossValue<T>> {
    check_single_channel(ct, gt_mask, p_mask)?;
    let n = ct.batch();
    let norm = T::from_usize(n * ct.plane()).unwrap();
    let mut grad = Tensor::zeros(ct.shape());
    let mut total = T::zero();
    for b in 0..n {
        let (c, g, p) = (ct.channel(b, 0), gt_mask.channel(b, 0), p_mask.channel(b, 0));
        let d = plane_difference(c, g, p);
        total = total + d.abs();
        let s = sign(d);
        for (o, &cv) in grad.channel_mut(b, 0).iter_mut().zip(c) {
            *o = -s * cv / norm;
        }
    }
    Ok(LossValue { value: total / norm, grad })
}

pub fn ctr<T: Scalar>(ct: &Tensor<T>, gt_mask: &Tensor<T>, p_mask: &Tensor<T>) -> Result<T> {
    Ok(ctr_with_grad(ct, gt_mask, p_mask)?.value)
}

fn class_plane<T: Scalar>(t: &Tensor<T>, k: usize) -> Tensor<T> {
    let [n, _, h, w] = t.shape();
    let mut data = Vec::with_capacity(n * h * w);
    for b in 0..n {
        data.extend_from_slice(t.channel(b, k));
    }
    Tensor::from_vec([n, 1, h, w], data).unwrap()
}

fn check_multiclass<T: Scalar>(ct: &Tensor<T>, gt_onehot: &Tensor<T>, probs: &Tensor<T>) -> Result<()> {
    probs.expect_shape(gt_onehot.shape(), "probabilities vs one-hot ground truth")?;
    let [n, _, h, w] = probs.shape();
    ct.expect_shape([n, 1, h, w], "ct image")
}

/// Multi-class CTR: per-class CTR summed over the foreground classes
/// (class 0 is background). Gradient is with respect to `probs`.
pub fn ctr_multiclass<T: Scalar>(ct: &Tensor<T>, gt_onehot: &Tensor<T>, probs: &Tensor<T>) -> Result<LossValue<T>> {
    check_multiclass(ct, gt_onehot, probs)?;
    let [n, c, _, _] = probs.shape();
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = T::zero();
    for k in 1..c {
        let lv = ctr_with_grad(ct, &class_plane(gt_onehot, k), &class_plane(probs, k))?;
        total = total + lv.value;
        for b in 0..n {
            grad.channel_mut(b, k).copy_from_slice(lv.grad.channel(b, 0));
        }
    }
    Ok(LossValue { value: total, grad })
}

/// Square matrix of CTR values between class-`i` ground truth (rows) and
/// class-`j` prediction (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CtrmMatrix<T> {
    classes: usize,
    entries: Vec<T>,
}

impl<T: Scalar> CtrmMatrix<T> {
    pub fn from_entries(classes: usize, entries: Vec<T>) -> Result<Self> {
        if entries.len() != classes * classes {
            return Err(Error::Shape(format!("{} entries for a {classes}x{classes} matrix", entries.len())));
        }
        Ok(CtrmMatrix { classes, entries })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt_class: usize, pred_class: usize) -> T {
        self.entries[gt_class * self.classes + pred_class]
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.classes).map(|k| self.get(k, k)).collect()
    }
}

pub fn ctrm_matrix<T: Scalar>(ct: &Tensor<T>, gt_onehot: &Tensor<T>, probs: &Tensor<T>) -> Result<CtrmMatrix<T>> {
    check_multiclass(ct, gt_onehot, probs)?;
    let c = probs.channels();
    let gts: Vec<_> = (0..c).map(|k| class_plane(gt_onehot, k)).collect();
    let ps: Vec<_> = (0..c).map(|k| class_plane(probs, k)).collect();
    let mut entries = Vec::with_capacity(c * c);
    for g in &gts {
        for p in &ps {
            entries.push(ctr(ct, g, p)?);
        }
    }
    Ok(CtrmMatrix { classes: c, entries })
}

/// Mean of all matrix entries.
pub fn ctrm_loss<T: Scalar>(m: &CtrmMatrix<T>) -> T {
    let n = T::from_usize(m.entries.len()).unwrap();
    m.entries.iter().copied().sum::<T>() / n
}

/// [`ctrm_loss`] of [`ctrm_matrix`], with the gradient with respect to
/// `probs`.
pub fn ctrm_loss_with_grad<T: Scalar>(ct: &Tensor<T>, gt_onehot: &Tensor<T>, probs: &Tensor<T>) -> Result<LossValue<T>> {
    check_multiclass(ct, gt_onehot, probs)?;
    let [n, c, _, _] = probs.shape();
    let cells = T::from_usize(c * c).unwrap();
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = T::zero();
    for i in 0..c {
        let g = class_plane(gt_onehot, i);
        for j in 0..c {
            let lv = ctr_with_grad(ct, &g, &class_plane(probs, j))?;
            total = total + lv.value;
            for b in 0..n {
                let src = lv.grad.channel(b, 0).to_vec();
                for (d, s) in grad.channel_mut(b, j).iter_mut().zip(src) {
                    *d = *d + s / cells;
                }
            }
        }
    }
    Ok(LossValue { value: total / cells, grad })
}

/// Per-term breakdown of the training objective together with the
/// gradients it seeds into the network.
#[derive(Clone, Debug)]
pub struct TotalLoss<T> {
    pub main: T,
    pub aux: T,
    pub reg: T,
    pub total: T,
    /// Gradient with respect to the final main-decoder logits.
    pub grad_main: Tensor<T>,
    /// Gradient with respect to the auxiliary logits.
    pub grad_aux: Tensor<T>,
}

impl<T: Scalar> TotalLoss<T> {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Base loss on logits; gradient with respect to the logits.
pub fn base_loss<T: Scalar>(base: BaseLoss, logits: &Tensor<T>, gt: &LabelMap) -> Result<LossValue<T>> {
    match base {
        BaseLoss::Ce => ce_loss(logits, gt),
        BaseLoss::Dice => {
            let probs = softmax_channels(logits);
            let onehot = gt.one_hot(logits.channels())?;
            let lv = dice_loss(&probs, &onehot)?;
            Ok(LossValue { value: lv.value, grad: softmax_backward(&probs, &lv.grad) })
        }
    }
}

/// Regulariser on the softmax of `logits`; gradient with respect to the
/// logits.
pub fn regularizer_loss<T: Scalar>(
    reg: Regularizer,
    logits: &Tensor<T>,
    gt: &LabelMap,
    ct: &Tensor<T>,
) -> Result<LossValue<T>> {
    if reg == Regularizer::None {
        return Ok(LossValue { value: T::zero(), grad: Tensor::zeros(logits.shape()) });
    }
    let probs = softmax_channels(logits);
    let onehot = gt.one_hot(logits.channels())?;
    let lv = match reg {
        Regularizer::Ctr => ctr_multiclass(ct, &onehot, &probs)?,
        Regularizer::Ctrm => ctrm_loss_with_grad(ct, &onehot, &probs)?,
        Regularizer::None => unreachable!(),
    };
    Ok(LossValue { value: lv.value, grad: softmax_backward(&probs, &lv.grad) })
}

/// `base(main_final) + base(aux) + regulariser(main_final)`.
pub fn total_loss<T: Scalar>(out: &ModelOutput<T>, gt: &LabelMap, ct: &Tensor<T>, cfg: &LossConfig) -> Result<TotalLoss<T>> {
    let main = base_loss(cfg.base, &out.main_final, gt)?;
    let aux = base_loss(cfg.base, &out.aux, gt)?;
    let reg = regularizer_loss(cfg.regularizer, &out.main_final, gt, ct)?;
    let mut grad_main = main.grad;
    grad_main.add_assign(&reg.grad);
    Ok(TotalLoss {
        main: main.value,
        aux: aux.value,
        reg: reg.value,
        total: main.value + aux.value + reg.value,
        grad_main,
        grad_aux: aux.grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(r)
    }

    #[test]
    fn grid_labels_in_table_order() {
        let labels: Vec<String> = LossConfig::grid().iter().map(LossConfig::label).collect();
        assert_eq!(
            labels,
            [
                "Dice", "Dice(UDBA)", "Dice+CTR", "Dice+CTR(UDBA)", "Dice+CTRM", "Dice+CTRM(UDBA)",
                "CE", "CE(UDBA)", "CE+CTR", "CE+CTR(UDBA)", "CE+CTRM", "CE+CTRM(UDBA)",
            ]
        );
        for c in LossConfig::grid() {
            assert_eq!(c.label().parse::<LossConfig>().unwrap(), c);
        }
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let gt = LabelMap::from_rows(&[&[0, 1], &[1, 0]]).one_hot::<f64>(2).unwrap();
        assert!(dice_loss(&gt, &gt).unwrap().value.abs() < 1e-5);
        let flipped = LabelMap::from_rows(&[&[1, 0], &[0, 1]]).one_hot::<f64>(2).unwrap();
        assert!((dice_loss(&flipped, &gt).unwrap().value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_single_pixel_half_probability() {
        // class 0: 2*0/(0.5+0) = 0; class 1: 2*0.5/(0.5+1) = 2/3
        let p = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let g = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let eps = DICE_EPS;
        let expected = 1.0 - (eps / (0.5 + eps) + (1.0 + eps) / (1.5 + eps)) / 2.0;
        let v = dice_loss(&p, &g).unwrap().value;
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn ce_cases() {
        let labels = LabelMap::from_rows(&[&[0, 3], &[2, 1]]);
        let uniform = Tensor::<f64>::zeros([1, 4, 2, 2]);
        assert!((ce_loss(&uniform, &labels).unwrap().value - 4f64.ln()).abs() < 1e-12);

        let confident = labels.one_hot::<f64>(4).unwrap().map(|v| v * 60.0);
        assert!(ce_loss(&confident, &labels).unwrap().value < 1e-20);

        let logits = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let v = ce_loss(&logits, &LabelMap::from_rows(&[&[0]])).unwrap().value;
        assert!((v - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((v - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        assert!(matches!(ce_loss(&logits, &LabelMap::from_rows(&[&[2]])), Err(Error::Contract(_))));
    }

    #[test]
    fn ctr_hand_cases() {
        let ct = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let gt = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let p = rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(ctr(&ct, &gt, &p).unwrap(), 0.75);
        assert_eq!(ctr(&ct, &gt, &gt).unwrap(), 0.0);
        assert_eq!(ctr(&Tensor::zeros([1, 1, 2, 2]), &gt, &p).unwrap(), 0.0);
        // swapping the masks keeps the absolute difference
        assert_eq!(ctr(&ct, &p, &gt).unwrap(), 0.75);
    }

    #[test]
    fn ctrm_hand_cases() {
        let m = CtrmMatrix::from_entries(2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(ctrm_loss(&m), 1.5);
        assert_eq!(ctrm_loss(&CtrmMatrix::from_entries(3, vec![0.0; 9]).unwrap()), 0.0);

        // 2 classes on a 2x2 grid; entries by hand from |sum(ct g_i) - sum(ct p_j)| / 4
        let ct = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let gt = LabelMap::from_rows(&[&[1, 0], &[0, 0]]).one_hot::<f64>(2).unwrap();
        let probs = Tensor::from_vec([1, 2, 2, 2], vec![0.5, 1.0, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0]).unwrap();
        // sum(ct g0) = 9, sum(ct g1) = 1, sum(ct p0) = 5.5, sum(ct p1) = 4.5
        let m = ctrm_matrix(&ct, &gt, &probs).unwrap();
        assert_eq!(m.entries(), &[3.5 / 4.0, 4.5 / 4.0, 4.5 / 4.0, 3.5 / 4.0]);
        assert_eq!(ctrm_loss(&m), 1.0);
        assert!((ctrm_loss_with_grad(&ct, &gt, &probs).unwrap().value - 1.0).abs() < 1e-15);

        let perfect = ctrm_matrix(&ct, &gt, &gt).unwrap();
        assert_eq!(perfect.diagonal(), vec![0.0, 0.0]);
    }

    #[test]
    fn ctrm_single_class_reduces_to_ctr() {
        let ct = rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let gt = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let p = rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
        let m = ctrm_matrix(&ct, &gt, &p).unwrap();
        assert_eq!(m.classes(), 1);
        assert_eq!(m.entries(), &[0.75]);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let ct = Tensor::from_vec([n, 1, s, s], (0..n * s * s).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let labels = LabelMap::new([n, s, s], (0..n * s * s).map(|_| rng.random_range(0..c as u8)).collect()).unwrap();
        let logits = Tensor::from_vec([n, c, s, s], (0..n * c * s * s).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        (ct, labels.one_hot(c).unwrap(), softmax_channels(&logits))
    }

    #[test]
    fn dice_and_ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (_, gt, probs) = random_instance(&mut rng, 1, 3, 4);
        let lv = dice_loss(&probs, &gt).unwrap();
        let h = 1e-6;
        for i in 0..probs.len() {
            let mut a = probs.clone();
            a.data_mut()[i] += h;
            let mut b = probs.clone();
            b.data_mut()[i] -= h;
            let fd = (dice_loss(&a, &gt).unwrap().value - dice_loss(&b, &gt).unwrap().value) / (2.0 * h);
            assert!((fd - lv.grad.data()[i]).abs() < 1e-7);
        }
        let labels = LabelMap::new([1, 4, 4], (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
        let logits = probs.map(|v| v.ln() * 1.7);
        let lv = ce_loss(&logits, &labels).unwrap();
        for i in 0..logits.len() {
            let mut a = logits.clone();
            a.data_mut()[i] += h;
            let mut b = logits.clone();
            b.data_mut()[i] -= h;
            let fd = (ce_loss(&a, &labels).unwrap().value - ce_loss(&b, &labels).unwrap().value) / (2.0 * h);
            assert!((fd - lv.grad.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ct, gt, probs) = random_instance(&mut rng, 1, 3, 8);
        let base = ctrm_loss(&ctrm_matrix(&ct, &gt, &probs).unwrap());
        let base_ctr = ctr_multiclass(&ct, &gt, &probs).unwrap().value;
        for alpha in [0.0, 0.25, 2.0, 8.0] {
            let scaled = ct.map(|v| v * alpha);
            assert_eq!(ctrm_loss(&ctrm_matrix(&scaled, &gt, &probs).unwrap()), alpha * base);
            assert_eq!(ctr_multiclass(&scaled, &gt, &probs).unwrap().value, alpha * base_ctr);
        }
        let alpha = 1.37;
        let scaled = ct.map(|v| v * alpha);
        let v = ctrm_loss(&ctrm_matrix(&scaled, &gt, &probs).unwrap());
        assert!((v - alpha * base).abs() <= 1e-12 * v.abs());
    }

    #[test]
    fn total_loss_sums_its_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [1, 3, 4, 4];
        let rand_t = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(shape, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let main = rand_t(&mut rng);
        let aux = rand_t(&mut rng);
        let ct = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let gt = LabelMap::new([1, 4, 4], (0..16).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let out = ModelOutput { main_pass1: main.clone(), aux: aux.clone(), confidence: None, main_final: main.clone() };
        for cfg in LossConfig::grid() {
            let t = total_loss(&out, &gt, &ct, &cfg).unwrap();
            let onehot = gt.one_hot(3).unwrap();
            let (pm, pa) = (softmax_channels(&main), softmax_channels(&aux));
            let (lm, la) = match cfg.base {
                BaseLoss::Ce => (ce_loss(&main, &gt).unwrap().value, ce_loss(&aux, &gt).unwrap().value),
                BaseLoss::Dice => (dice_loss(&pm, &onehot).unwrap().value, dice_loss(&pa, &onehot).unwrap().value),
            };
            let lr: f64 = match cfg.regularizer {
                Regularizer::None => 0.0,
                Regularizer::Ctr => (1..3)
                    .map(|k| ctr(&ct, &class_plane(&onehot, k), &class_plane(&pm, k)).unwrap())
                    .sum(),
                Regularizer::Ctrm => ctrm_loss(&ctrm_matrix(&ct, &onehot, &pm).unwrap()),
            };
            assert!((t.total - (lm + la + lr)).abs() < 1e-6, "{cfg}");
            assert_eq!(t.main, lm);
            assert_eq!(t.aux, la);
            if cfg.regularizer == Regularizer::None {
                assert_eq!(t.total, t.main + t.aux);
                assert_eq!(t.reg, 0.0);
            }
        }
    }

    #[test]
    fn perfect_prediction_zeroes_every_term() {
        let gt = LabelMap::from_rows(&[&[0, 1, 1], &[2, 2, 0]]);
        let logits = gt.one_hot::<f64>(3).unwrap().map(|v| v * 80.0);
        let ct = Tensor::from_rows(&[&[0.1, 0.5, 0.9], &[0.3, 0.2, 0.7]]);
        let out = ModelOutput { main_pass1: logits.clone(), aux: logits.clone(), confidence: None, main_final: logits };
        let cfg = LossConfig { base: BaseLoss::Ce, regularizer: Regularizer::Ctr, udba: false };
        assert!(total_loss(&out, &gt, &ct, &cfg).unwrap().total < 1e-12);
        let cfg = LossConfig { base: BaseLoss::Dice, ..cfg };
        assert!(total_loss(&out, &gt, &ct, &cfg).unwrap().total < 1e-5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn regularisers_are_nonnegative_and_symmetric(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (ct, gt, probs) = random_instance(&mut rng, 2, 3, 5);
                let m = ctrm_matrix(&ct, &gt, &probs).unwrap();
                prop_assert!(m.entries().iter().all(|&v| v >= 0.0));
                prop_assert!(ctrm_loss(&m) >= 0.0);
                for k in 0..3 {
                    let (g, p) = (class_plane(&gt, k), class_plane(&probs, k));
                    prop_assert_eq!(m.get(k, k), ctr(&ct, &g, &p).unwrap());
                    prop_assert_eq!(ctr(&ct, &g, &p).unwrap(), ctr(&ct, &p, &g).unwrap());
                }
                prop_assert!(dice_loss(&probs, &gt).unwrap().value >= 0.0);
                prop_assert!(dice_loss(&probs, &gt).unwrap().value <= 1.0);
            }
        }
    }
}
