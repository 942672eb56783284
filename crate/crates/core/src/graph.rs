//! A single-use reverse-mode tape over [`Tensor`] values.
//!
//! A fresh graph is built for every training step. Leaves are either inputs
//! (no gradient) or parameters; [`Graph::backward`] accepts any number of
//! seed gradients so externally computed loss gradients can be injected at
//! the logits.

use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Resize { x: Var },
    Concat { a: Var, b: Var },
    /// `x + x * noise`
    Perturb { x: Var, noise: Tensor<T> },
    /// `x * factor` with a constant (non-differentiable) factor.
    Scale { x: Var, factor: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b }, ng)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, inv_std) =
            ops::instance_norm(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = ops::max_pool2(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = ops::resize_bilinear(self.value(x), out_h, out_w);
        let ng = self.needs(x);
        self.push(out, Op::Resize { x }, ng)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = ops::concat(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b }, ng)
    }

    pub fn perturb(&mut self, x: Var, noise: Tensor<T>) -> Var {
        let out = perturb_values(self.value(x), &noise);
        let ng = self.needs(x);
        self.push(out, Op::Perturb { x, noise }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: Tensor<T>) -> Var {
        let out = self.value(x).zip_map(&factor, |a, f| a * f).expect("scale shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    /// Back-propagates the given seed gradients. Seeds on the same variable
    /// accumulate.
    pub fn backward(&self, seeds: &[(Var, &Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut grads, v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        self.needs(*x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                    let (gx, gg, gb) =
                        ops::instance_norm_backward(xhat, inv_std, self.value(*gamma), &g);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, gb);
                    }
                }
                Op::Relu { x } => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &g));
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx = ops::max_pool2_backward(self.value(*x).shape(), argmax, &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Resize { x } => {
                    let gx = ops::resize_bilinear_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::concat_backward(self.value(*a).channels(), &g);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Perturb { x, noise } => {
                    // identity path plus the product path
                    let gx = g.zip_map(noise, |gv, n| gv + gv * n).unwrap();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale { x, factor } => {
                    let gx = g.zip_map(factor, |gv, f| gv * f).unwrap();
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}

/// `z + z * n`, elementwise.
pub fn perturb_values<T: Scalar>(z: &Tensor<T>, noise: &Tensor<T>) -> Tensor<T> {
    z.zip_map(noise, |v, n| v + v * n).expect("noise shape must match features")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
