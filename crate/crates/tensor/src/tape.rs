//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its gradient rule. Nodes are appended in evaluation order, so
//! the record is already topologically sorted and `backward` is a single
//! reverse sweep.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, Activation};
use crate::norm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Upsample {
        input: Var,
    },
    WeightNorm {
        v: Var,
        g: Var,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    ConcatChannels(Vec<Var>),
    Mse(Var, Var),
    Bce {
        pred: Var,
        pos: Arc<[T]>,
        neg: Arc<[T]>,
        eps: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves it depends on.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contribution: &[T]) {
    match slot {
        Some(acc) => acc
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, &c)| *a = *a + c),
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc
            .iter_mut()
            .zip(&contribution)
            .for_each(|(a, &c)| *a = *a + c),
        None => *slot = Some(contribution),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &deps,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(input), r)?;
        Ok(self.push(out, Op::PixelShuffle { input, r }, &[input]))
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Var {
        let out = kernels::activation(kind, self.value(input));
        self.push(out, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(Activation::Relu, input)
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Var {
        self.activation(Activation::LeakyRelu(alpha), input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(Activation::Sigmoid, input)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(Activation::Tanh, input)
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::upsample_bilinear(self.value(input), out_h, out_w)?;
        Ok(self.push(out, Op::Upsample { input }, &[input]))
    }

    /// `g * v / ||v||` per output channel (leading dimension of `v`).
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let out = norm::weight_norm_apply(self.value(v), self.value(g))?;
        Ok(self.push(out, Op::WeightNorm { v, g }, &[v, g]))
    }

    /// `W / sigma` where `sigma = u^T W v` and `v = normalize(W^T u)`.
    /// `u` is a persisted buffer and receives no gradient.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64]) -> Result<Var> {
        let wt = self.value(w);
        let (v, sigma) = norm::spectral_estimate(wt, u)?;
        if sigma.abs() < norm::MIN_DIRECTION_NORM {
            return Err(TensorError::invalid(
                "spectral_norm",
                "weight has zero spectral norm",
            ));
        }
        let inv = T::from_f64_lossy(1.0 / sigma);
        let out = wt.map(|x| x * inv);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v,
                sigma,
            },
            &[w],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
        let out = self.value(input).map(|x| x * s + b);
        self.push(out, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Var {
        self.affine(input, scale, 0.0)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum_f64();
        self.push(
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::Sum(input),
            &[input],
        )
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let m = t.sum_f64() / t.len() as f64;
        self.push(
            Tensor::scalar(T::from_f64_lossy(m)),
            Op::Mean(input),
            &[input],
        )
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel dimension.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut channels = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape {
                    op: "concat_channels",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            channels += vc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for i in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let out = Tensor::from_parts(vec![n, channels, h, w], data);
        Ok(self.push(out, Op::ConcatChannels(inputs.to_vec()), inputs))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_shape(tb, "mse")?;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::from_f64_lossy(s / ta.len() as f64));
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    /// Weighted binary cross-entropy
    /// `-(1/n) * sum(pos_i * ln p_i + neg_i * ln(1 - p_i))` with `p` clamped
    /// to `[eps, 1 - eps]`. Coefficients are constants.
    pub fn bce(&mut self, pred: Var, pos: &Tensor<T>, neg: &Tensor<T>, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(pos, "bce")?;
        p.expect_same_shape(neg, "bce")?;
        let (lo, hi) = (eps, 1.0 - eps);
        let s: f64 = p
            .data()
            .iter()
            .zip(pos.data().iter().zip(neg.data()))
            .map(|(&pv, (&a, &b))| {
                let pc = pv.as_f64().clamp(lo, hi);
                let mut term = 0.0;
                if a != T::zero() {
                    term += a.as_f64() * pc.ln();
                }
                if b != T::zero() {
                    term += b.as_f64() * (1.0 - pc).ln();
                }
                term
            })
            .sum();
        let out = Tensor::scalar(T::from_f64_lossy(-s / p.len() as f64));
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                pos: pos.data().into(),
                neg: neg.data().into(),
                eps,
            },
            &[pred],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. Contributions from shared inputs are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|d| Tensor::from_parts(node.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let want_b = bias.is_some_and(|b| self.wants(b));
                let r = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    &gt,
                    *stride,
                    *padding,
                    (self.wants(*input), self.wants(*weight), want_b),
                )?;
                if let Some(dx) = r.input {
                    accumulate(&mut grads[input.0], dx.data());
                }
                if let Some(dw) = r.weight {
                    accumulate(&mut grads[weight.0], dw.data());
                }
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    accumulate(&mut grads[b.0], db.data());
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                accumulate_owned(&mut grads[input.0], dx);
            }
            Op::PixelShuffle { input, r } => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let dx = kernels::pixel_unshuffle(&gt, *r)?;
                accumulate(&mut grads[input.0], dx.data());
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx: Vec<T> = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                accumulate_owned(&mut grads[input.0], dx);
            }
            Op::Upsample { input } => {
                let [_, _, h, w] = self.value(*input).dims4("upsample")?;
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let dx = kernels::upsample_bilinear_backward(&gt, h, w)?;
                accumulate(&mut grads[input.0], dx.data());
            }
            Op::WeightNorm { v, g: mag } => {
                let vt = self.value(*v);
                let gv = self.value(*mag).data();
                let norms = norm::row_norms(vt);
                let cols = vt.len() / vt.shape()[0];
                let mut dv = Vec::with_capacity(vt.len());
                let mut dg = Vec::with_capacity(norms.len());
                for (o, (row, grow)) in vt.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let n = norms[o];
                    let dot: f64 = row
                        .iter()
                        .zip(grow)
                        .map(|(&a, &b)| a.as_f64() * b.as_f64())
                        .sum();
                    dg.push(T::from_f64_lossy(dot / n));
                    let scale = gv[o].as_f64() / n;
                    let proj = dot / (n * n);
                    dv.extend(row.iter().zip(grow).map(|(&a, &b)| {
                        T::from_f64_lossy(scale * (b.as_f64() - proj * a.as_f64()))
                    }));
                }
                if self.wants(*v) {
                    accumulate_owned(&mut grads[v.0], dv);
                }
                if self.wants(*mag) {
                    accumulate_owned(&mut grads[mag.0], dg);
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/s) with s = u^T W v: G/s - <G,W>/s^2 * u v^T
                let wt = self.value(*w);
                let cols = v.len();
                let inner: f64 = wt
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum();
                let c = inner / (sigma * sigma);
                let dw: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let (r, col) = (i / cols, i % cols);
                        T::from_f64_lossy(gv.as_f64() / sigma - c * u[r] * v[col])
                    })
                    .collect();
                accumulate_owned(&mut grads[w.0], dw);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate_owned(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate_owned(
                        &mut grads[a.0],
                        g.iter().zip(tb).map(|(&x, &y)| x * y).collect(),
                    );
                }
                if self.wants(*b) {
                    accumulate_owned(
                        &mut grads[b.0],
                        g.iter().zip(ta).map(|(&x, &y)| x * y).collect(),
                    );
                }
            }
            Op::Affine { input, scale } => {
                let s = T::from_f64_lossy(*scale);
                accumulate_owned(&mut grads[input.0], g.iter().map(|&x| x * s).collect());
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                accumulate_owned(&mut grads[input.0], vec![g[0]; n]);
            }
            Op::Mean(input) => {
                let n = self.value(*input).len();
                let v = T::from_f64_lossy(g[0].as_f64() / n as f64);
                accumulate_owned(&mut grads[input.0], vec![v; n]);
            }
            Op::ConcatChannels(inputs) => {
                let [n, c, h, w] = node.value.dims4("concat_channels")?;
                let mut offset = 0;
                for &v in inputs {
                    let vc = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(n * vc * h * w);
                        for i in 0..n {
                            let start = (i * c + offset) * h * w;
                            d.extend_from_slice(&g[start..start + vc * h * w]);
                        }
                        accumulate_owned(&mut grads[v.0], d);
                    }
                    offset += vc;
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0].as_f64() / ta.len() as f64;
                let diff: Vec<T> = ta
                    .iter()
                    .zip(tb)
                    .map(|(&x, &y)| T::from_f64_lossy(k * (x.as_f64() - y.as_f64())))
                    .collect();
                if self.wants(*b) {
                    accumulate_owned(&mut grads[b.0], diff.iter().map(|&d| -d).collect());
                }
                if self.wants(*a) {
                    accumulate_owned(&mut grads[a.0], diff);
                }
            }
            Op::Bce {
                pred,
                pos,
                neg,
                eps,
            } => {
                let p = self.value(*pred).data();
                let scale = -g[0].as_f64() / p.len() as f64;
                let (lo, hi) = (*eps, 1.0 - eps);
                let dp: Vec<T> = p
                    .iter()
                    .zip(pos.iter().zip(neg.iter()))
                    .map(|(&pv, (&a, &b))| {
                        let x = pv.as_f64();
                        if x < lo || x > hi {
                            return T::zero();
                        }
                        T::from_f64_lossy(scale * (a.as_f64() / x - b.as_f64() / (1.0 - x)))
                    })
                    .collect();
                accumulate_owned(&mut grads[pred.0], dp);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn scalar_mse_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.5));
        let t = tape.constant(Tensor::scalar(1.25));
        let l = tape.mse(x, t).unwrap();
        let g = tape.backward(l).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 2.0 * (3.5 - 1.25)).abs() < 1e-15);
        assert!(g.get(t).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.7));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let x = tape.param(Tensor::ones(vec![1, 1, 4, 4]));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn detach_cuts_path() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
