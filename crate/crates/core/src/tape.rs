//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients additively, so a value
//! consumed twice (the gating skip path) receives both contributions.
//! Nodes whose inputs do not require gradients are skipped entirely.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{conv_backward, conv_forward, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp applied before the logarithms of the cross entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Hadamard(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    Bce {
        prob: Var,
        label: T,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Select {
        input: Var,
        index: usize,
    },
    LpPenalty {
        input: Var,
        p: T,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    /// Zero-padded convolution of a `[C_in,H,W]` input with `[C_out,C_in,kh,kw]`
    /// weights. Padding is `k/2`, so stride 1 preserves `H x W`; kernels must
    /// be odd.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [co, ci, kh, kw] = ws[..] else {
            return Err(Error::InvalidArgument(format!("conv2d weight must be 4-d, got {ws:?}")));
        };
        if ci != c {
            return Err(Error::shape("conv2d", &[co, c, kh, kw], &ws));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernels must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape("conv2d bias", &[co], self.value(bias).shape()));
        }
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kh,
            kw,
            stride,
        };
        let out = conv_forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_vec(&[co, geometry.out_height(), geometry.out_width()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            &[input, weight, bias],
        ))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `drop_prob` and survivors are scaled by `1/(1-drop_prob)`.
    /// Evaluation mode returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, drop_prob: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {drop_prob}"
            )));
        }
        if !training || drop_prob == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - drop_prob));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < drop_prob {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(src.shape(), data)?;
        Ok(self.push(value, Op::Mask { input: x, mask }, &[x]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Stacks `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (_, h, w) = self.value(*first).chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat_channels", &[c, h, w], &[c, ph, pw]));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(&[channels, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// `||pred - target||^2 / N`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::from_usize(p.len()).expect("count fits");
        let sq = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(self.push(Tensor::scalar(sq / n), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Binary cross entropy of a probability scalar against a 0/1 label.
    /// The probability is clamped to `[BCE_EPS, 1 - BCE_EPS]` first.
    pub fn bce(&mut self, prob: Var, label: f64) -> Result<Var> {
        if self.value(prob).len() != 1 {
            return Err(Error::shape("bce", &[], self.value(prob).shape()));
        }
        if label != 0.0 && label != 1.0 {
            return Err(Error::InvalidArgument(format!("bce label must be 0 or 1, got {label}")));
        }
        let p = self.value(prob).item().as_f64();
        let loss = bce_value(p, label);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::Bce {
                prob,
                label: T::from_f64_lossy(label),
            },
            &[prob],
        ))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            x,
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::Clamp { input: x, lo, hi },
        )
    }

    /// `[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let inv = T::one() / T::from_usize(h * w).expect("count fits");
        let src = self.value(x).data();
        let data = src
            .chunks(h * w)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::from_vec(&[c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `W x + b` with `W: [out, in]`, `x: [in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let ws = self.value(weight).shape().to_vec();
        let [out, inp] = ws[..] else {
            return Err(Error::InvalidArgument(format!("linear weight must be 2-d, got {ws:?}")));
        };
        if self.value(input).shape() != [inp] {
            return Err(Error::shape("linear", &[inp], self.value(input).shape()));
        }
        if self.value(bias).shape() != [out] {
            return Err(Error::shape("linear bias", &[out], self.value(bias).shape()));
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let data = (0..out)
            .map(|o| {
                w.data()[o * inp..(o + 1) * inp]
                    .iter()
                    .zip(x.data())
                    .fold(b.data()[o], |acc, (&wv, &xv)| acc + wv * xv)
            })
            .collect();
        let value = Tensor::from_vec(&[out], data)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let max = src.data().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let exps: Vec<T> = src.data().iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &v| a + v);
        let value = Tensor::from_vec(src.shape(), exps.iter().map(|&e| e / total).collect()).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let src = self.value(x);
        if index >= src.len() {
            return Err(Error::InvalidArgument(format!(
                "select index {index} out of range for {} elements",
                src.len()
            )));
        }
        let value = Tensor::scalar(src.data()[index]);
        Ok(self.push(value, Op::Select { input: x, index }, &[x]))
    }

    /// Smoothed, zero-anchored sparsity penalty
    /// `sum_i (w_i^2 + eps)^(p/2) - eps^(p/2)`.
    pub fn lp_penalty(&mut self, x: Var, p: f64, eps: f64) -> Var {
        let (pt, et) = (T::from_f64_lossy(p), T::from_f64_lossy(eps));
        let value = Tensor::scalar(T::from_f64_lossy(lp_value(self.value(x).data(), p, eps)));
        self.push(
            value,
            Op::LpPenalty {
                input: x,
                p: pt,
                eps: et,
            },
            &[x],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node requiring them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[], self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, data: Vec<T>| -> Result<()> {
            let t = Tensor::from_vec(self.value(v).shape(), data)?;
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let r = conv_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    (needs(*input), needs(*weight), needs(*bias)),
                );
                if let Some(d) = r.input {
                    acc(*input, d)?;
                }
                if let Some(d) = r.weight {
                    acc(*weight, d)?;
                }
                if let Some(d) = r.bias {
                    acc(*bias, d)?;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                acc(
                    *x,
                    xs.iter()
                        .zip(gd)
                        .map(|(&v, &u)| if v > T::zero() { u } else { T::zero() })
                        .collect(),
                )?;
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                acc(*x, ys.iter().zip(gd).map(|(&y, &u)| u * y * (T::one() - y)).collect())?;
            }
            Op::Mask { input, mask } => {
                acc(*input, mask.iter().zip(gd).map(|(&m, &u)| m * u).collect())?;
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    let bs = self.value(*b).data();
                    acc(*a, bs.iter().zip(gd).map(|(&v, &u)| v * u).collect())?;
                }
                if needs(*b) {
                    let as_ = self.value(*a).data();
                    acc(*b, as_.iter().zip(gd).map(|(&v, &u)| v * u).collect())?;
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, gd.to_vec())?;
                }
                if needs(*b) {
                    acc(*b, gd.to_vec())?;
                }
            }
            Op::Scale(x, f) => {
                acc(*x, gd.iter().map(|&u| u * *f).collect())?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if needs(p) {
                        acc(p, gd[offset..offset + n].to_vec())?;
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                acc(*x, vec![gd[0]; self.value(*x).len()])?;
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = gd[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).expect("fits");
                let diff: Vec<T> = p.iter().zip(t).map(|(&a, &b)| (a - b) * scale).collect();
                if needs(*target) {
                    acc(*target, diff.iter().map(|&d| -d).collect())?;
                }
                if needs(*pred) {
                    acc(*pred, diff)?;
                }
            }
            Op::Bce { prob, label } => {
                let p = self.value(*prob).item().as_f64();
                let l = label.as_f64();
                let d = if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                    0.0
                } else {
                    -l / p + (1.0 - l) / (1.0 - p)
                };
                acc(*prob, vec![gd[0] * T::from_f64_lossy(d)])?;
            }
            Op::Clamp { input, lo, hi } => {
                let xs = self.value(*input).data();
                acc(
                    *input,
                    xs.iter()
                        .zip(gd)
                        .map(|(&v, &u)| if v >= *lo && v <= *hi { u } else { T::zero() })
                        .collect(),
                )?;
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw()?;
                let inv = T::one() / T::from_usize(h * w).expect("fits");
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &u in gd {
                    d.extend(std::iter::repeat_n(u * inv, h * w));
                }
                acc(*x, d)?;
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                let inp = x.len();
                if needs(*input) {
                    let mut dx = vec![T::zero(); inp];
                    for (o, &u) in gd.iter().enumerate() {
                        for (d, &wv) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                            *d = *d + u * wv;
                        }
                    }
                    acc(*input, dx)?;
                }
                if needs(*weight) {
                    let mut dw = Vec::with_capacity(w.len());
                    for &u in gd {
                        dw.extend(x.iter().map(|&xv| u * xv));
                    }
                    acc(*weight, dw)?;
                }
                if needs(*bias) {
                    acc(*bias, gd.to_vec())?;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot = y.iter().zip(gd).fold(T::zero(), |a, (&yv, &u)| a + yv * u);
                acc(*x, y.iter().zip(gd).map(|(&yv, &u)| yv * (u - dot)).collect())?;
            }
            Op::Select { input, index } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                d[*index] = gd[0];
                acc(*input, d)?;
            }
            Op::LpPenalty { input, p, eps } => {
                let half = *p / T::from_f64_lossy(2.0);
                let xs = self.value(*input).data();
                acc(
                    *input,
                    xs.iter()
                        .map(|&w| gd[0] * *p * w * (w * w + *eps).powf(half - T::one()))
                        .collect(),
                )?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Clamped binary cross entropy, evaluated in f64.
pub fn bce_value(prob: f64, label: f64) -> f64 {
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Smoothed lp penalty value, evaluated in f64.
pub fn lp_value<T: Real>(weights: &[T], p: f64, eps: f64) -> f64 {
    let anchor = eps.powf(p / 2.0);
    weights
        .iter()
        .map(|w| {
            let w = w.as_f64();
            (w * w + eps).powf(p / 2.0) - anchor
        })
        .sum()
}
