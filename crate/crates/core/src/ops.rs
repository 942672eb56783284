//! Forward and backward kernels for the layers the network is built from.
//!
//! Every kernel parallelises over whole output planes so each output value is
//! produced by exactly one task in a fixed order; results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four independent accumulators so the loop vectorises; the summation
    // order is fixed, so results stay deterministic.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zero-padded copies of every plane of `x`, each `(h + 2 pad) x (w + 2 pad)`.
fn pad_planes<T: Scalar>(x: &Tensor<T>, pad: usize) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * hp * wp];
    out.par_chunks_mut(hp * wp).enumerate().for_each(|(idx, dst)| {
        let src = x.channel(idx / c, idx % c);
        for y in 0..h {
            dst[(y + pad) * wp + pad..(y + pad) * wp + pad + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    });
    out
}

/// Planes of `x` laid out with row stride `w + 2 pad`; the extra columns are
/// zero.
fn widen_planes<T: Scalar>(x: &Tensor<T>, pad: usize) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let wp = w + 2 * pad;
    let mut out = vec![T::zero(); n * c * h * wp];
    out.par_chunks_mut(h * wp).enumerate().for_each(|(idx, dst)| {
        let src = x.channel(idx / c, idx % c);
        for y in 0..h {
            dst[y * wp..y * wp + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    });
    out
}

/// Same-padded, stride-1 convolution. `weight` is `[out, in, k, k]` with odd
/// `k`, `bias` is `[1, out, 1, 1]`.
///
/// Works on zero-padded input planes: with row stride `wp = w + 2 pad`, output
/// pixel `i = y wp + x` reads padded input `i + ky wp + kx`, so every kernel tap
/// is one contiguous axpy. Columns `w..wp` of the accumulator are scratch.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, k, k2] = weight.shape();
    assert_eq!(cin, wcin, "conv2d input channels");
    assert_eq!(k, k2, "conv2d kernel must be square");
    assert!(k % 2 == 1, "conv2d kernel must be odd");
    let pad = k / 2;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let span = (h - 1) * wp + w;
    let padded = pad_planes(x, pad);
    let mut out = Tensor::zeros([n, cout, h, w]);
    out.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, dst)| {
        let (b, oc) = (idx / cout, idx % cout);
        let mut acc = vec![T::zero(); span];
        for ic in 0..cin {
            let src = &padded[(b * cin + ic) * hp * wp..(b * cin + ic + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    axpy(weight.at(oc, ic, ky, kx), &src[off..off + span], &mut acc);
                }
            }
        }
        let bv = bias.data()[oc];
        for y in 0..h {
            for (d, &a) in dst[y * w..(y + 1) * w].iter_mut().zip(&acc[y * wp..y * wp + w]) {
                *d = bv + a;
            }
        }
    });
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let pad = k / 2;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let span = (h - 1) * wp + w;
    // Scratch columns are zero here, so they contribute nothing below.
    let go_wide = widen_planes(grad_out, pad);
    let go_plane = |b: usize, oc: usize| &go_wide[(b * cout + oc) * h * wp..][..span];

    let grad_in = need_input.then(|| {
        let mut gi = Tensor::zeros(x.shape());
        gi.data_mut().par_chunks_mut(h * w).enumerate().for_each(|(idx, dst)| {
            let (b, ic) = (idx / cin, idx % cin);
            let mut acc = vec![T::zero(); hp * wp];
            for oc in 0..cout {
                let go = go_plane(b, oc);
                for ky in 0..k {
                    for kx in 0..k {
                        let off = ky * wp + kx;
                        axpy(weight.at(oc, ic, ky, kx), go, &mut acc[off..off + span]);
                    }
                }
            }
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&acc[(y + pad) * wp + pad..(y + pad) * wp + pad + w]);
            }
        });
        gi
    });

    let padded = pad_planes(x, pad);
    let per_out = cin * k * k;
    let mut grad_w = Tensor::zeros(weight.shape());
    grad_w.data_mut().par_chunks_mut(per_out).enumerate().for_each(|(oc, dst)| {
        for ic in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    let mut acc = T::zero();
                    for b in 0..n {
                        let src = &padded[(b * cin + ic) * hp * wp..(b * cin + ic + 1) * hp * wp];
                        acc = acc + dot(go_plane(b, oc), &src[off..off + span]);
                    }
                    dst[(ic * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let mut grad_b = Tensor::zeros([1, cout, 1, 1]);
    for oc in 0..cout {
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc + grad_out.channel(b, oc).iter().copied().sum::<T>();
        }
        grad_b.data_mut()[oc] = acc;
    }
    (grad_in, grad_w, grad_b)
}

/// Per-sample, per-channel normalisation with learned affine parameters.
/// Returns the output together with the normalised input and inverse
/// standard deviations needed by the backward pass.
pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let m = T::from_usize(plane).unwrap();
    let eps = T::lit(NORM_EPS);
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * c];
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * c + ch] = is;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            let xh = xhat.channel_mut(b, ch);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            let xh = xhat.channel(b, ch).to_vec();
            for (o, v) in out.channel_mut(b, ch).iter_mut().zip(xh) {
                *o = g * v + be;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Gradients of [`instance_norm`] with respect to input, gamma and beta.
pub fn instance_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, _, _] = xhat.shape();
    let m = T::from_usize(xhat.plane()).unwrap();
    let mut grad_in = Tensor::zeros(xhat.shape());
    let mut grad_g = Tensor::zeros(gamma.shape());
    let mut grad_b = Tensor::zeros(gamma.shape());
    for b in 0..n {
        for ch in 0..c {
            let go = grad_out.channel(b, ch);
            let xh = xhat.channel(b, ch);
            let g = gamma.data()[ch];
            let sum_dy: T = go.iter().copied().sum();
            let sum_dy_xh = dot(go, xh);
            grad_g.data_mut()[ch] = grad_g.data()[ch] + sum_dy_xh;
            grad_b.data_mut()[ch] = grad_b.data()[ch] + sum_dy;
            // dxhat = dy * g; dx = inv_std / m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            let scale = g * inv_std[b * c + ch] / m;
            let gi = grad_in.channel_mut(b, ch);
            for ((d, &dy), &xv) in gi.iter_mut().zip(go).zip(xh) {
                *d = scale * (m * dy - sum_dy - xv * sum_dy_xh);
            }
        }
    }
    (grad_in, grad_g, grad_b)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() }).unwrap()
}

/// 2x2, stride-2 max pooling. Returns the pooled tensor and, per output, the
/// flat index of the winning input element.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = x.index(b, ch, 2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(b, ch, 2 * y + dy, 2 * xx + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    out.set(b, ch, y, xx, x.data()[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gi = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        let d = &mut gi.data_mut()[i as usize];
        *d = *d + g;
    }
    gi
}

/// Linear interpolation taps along one axis (half-pixel centres, edges
/// clamped).
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Taps { lo, hi, frac }
    }
}

/// Bilinear resize of every channel plane to `out_h x out_w`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut rows = vec![T::zero(); h * out_w];
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            for y in 0..h {
                for o in 0..out_w {
                    let f = T::lit(tx.frac[o]);
                    let a = src[y * w + tx.lo[o]];
                    let bb = src[y * w + tx.hi[o]];
                    rows[y * out_w + o] = a + (bb - a) * f;
                }
            }
            let dst = out.channel_mut(b, ch);
            for o in 0..out_h {
                let f = T::lit(ty.frac[o]);
                let (r0, r1) = (ty.lo[o] * out_w, ty.hi[o] * out_w);
                for xx in 0..out_w {
                    let a = rows[r0 + xx];
                    let bb = rows[r1 + xx];
                    dst[o * out_w + xx] = a + (bb - a) * f;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(
    input_shape: [usize; 4],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let [_, _, out_h, out_w] = grad_out.shape();
    if (h, w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = Taps::new(h, out_h);
    let tx = Taps::new(w, out_w);
    let mut gi = Tensor::zeros(input_shape);
    let mut rows = vec![T::zero(); h * out_w];
    for b in 0..n {
        for ch in 0..c {
            rows.iter_mut().for_each(|v| *v = T::zero());
            let go = grad_out.channel(b, ch);
            for o in 0..out_h {
                let f = T::lit(ty.frac[o]);
                let (r0, r1) = (ty.lo[o] * out_w, ty.hi[o] * out_w);
                for xx in 0..out_w {
                    let g = go[o * out_w + xx];
                    rows[r0 + xx] = rows[r0 + xx] + g * (T::one() - f);
                    rows[r1 + xx] = rows[r1 + xx] + g * f;
                }
            }
            let dst = gi.channel_mut(b, ch);
            for y in 0..h {
                for o in 0..out_w {
                    let f = T::lit(tx.frac[o]);
                    let g = rows[y * out_w + o];
                    dst[y * w + tx.lo[o]] = dst[y * w + tx.lo[o]] + g * (T::one() - f);
                    dst[y * w + tx.hi[o]] = dst[y * w + tx.hi[o]] + g * f;
                }
            }
        }
    }
    gi
}

/// Channel-wise concatenation.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(a.item(i));
        out.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], out).unwrap()
}

pub fn concat_backward<T: Scalar>(
    a_channels: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = grad_out.shape();
    let split = a_channels * h * w;
    let mut ga = Vec::with_capacity(n * split);
    let mut gb = Vec::with_capacity(n * (c * h * w - split));
    for i in 0..n {
        let item = grad_out.item(i);
        ga.extend_from_slice(&item[..split]);
        gb.extend_from_slice(&item[split..]);
    }
    (
        Tensor::from_vec([n, a_channels, h, w], ga).unwrap(),
        Tensor::from_vec([n, c - a_channels, h, w], gb).unwrap(),
    )
}

/// Softmax over the class (channel) axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..n {
        let src = logits.item(b);
        let base = b * c * plane;
        for i in 0..plane {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[k * plane + i]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[k * plane + i] - m).exp();
                out.data_mut()[base + k * plane + i] = e;
                z = z + e;
            }
            for k in 0..c {
                let d = &mut out.data_mut()[base + k * plane + i];
                *d = *d / z;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to the logits:
/// `dz = p * (dp - sum_k dp_k p_k)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        for i in 0..plane {
            let mut s = T::zero();
            for k in 0..c {
                let j = probs.index(b, k, 0, 0) + i;
                s = s + grad_probs.data()[j] * probs.data()[j];
            }
            for k in 0..c {
                let j = probs.index(b, k, 0, 0) + i;
                out.data_mut()[j] = probs.data()[j] * (grad_probs.data()[j] - s);
            }
        }
    }
    out
}
