//! Reverse-mode differentiation over the layer set of [`super::ops`].
//!
//! A [`GradTape`] records every operation applied during a forward pass
//! together with whatever the backward pass needs (normalized activations,
//! dropout masks). [`GradTape::backward`] walks the record in reverse once
//! and returns one gradient per registered parameter.

use rand::Rng;

use super::kernels::{self, Dims, Window};
use super::ops::{self, NormMode, PoolWindow, BCE_EPS};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Caller-chosen identifier of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    /// Size-preserving padding (at stride 1) for an odd `k`.
    pub fn same(k: usize, stride: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormBuffers<T: Scalar = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> NormBuffers<T> {
    pub fn new(channels: usize) -> Self {
        NormBuffers {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        ho: usize,
        wo: usize,
        depthwise: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu6(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        wh: usize,
        ww: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct GradTape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients keyed by parameter, in ascending [`ParamId`] order.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries
            .binary_search_by_key(&id, |(k, _)| *k)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(k, t)| (*k, t))
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            consumed: false,
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<Dims> {
        ops::dims(self.value(v))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    fn conv_common(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, depthwise: bool) -> Result<Var> {
        let d = self.dims(x)?;
        let (cout, cin, kh, kw) = self.value(w).dims4()?;
        if depthwise {
            if cout != d.c || cin != 1 {
                return Err(Error::dim(format!(
                    "depthwise weights {:?} do not match {} input channels",
                    self.value(w).shape(),
                    d.c
                )));
            }
        } else if cin != d.c {
            return Err(Error::dim(format!(
                "input channel axis (1) is {} but weight axis 1 expects {cin}",
                d.c
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("kernel axes 2 and 3 differ: {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::dim(format!(
                    "bias has {} entries for {cout} output channels",
                    self.value(b).len()
                )));
            }
        }
        let (win, ho, wo) = ops::conv_window(d, kh, geom.stride, geom.padding, geom.dilation)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::depthwise_forward(xv, d, wv, bv, win, ho, wo)
        } else {
            kernels::conv2d_forward(xv, d, wv, cout, bv, win, ho, wo)
        };
        let value = Tensor::new(&[d.n, cout, ho, wo], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                win,
                ho,
                wo,
                depthwise,
            },
            needs,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.conv_common(x, w, b, geom, false)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.conv_common(x, w, b, geom, true)
    }

    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, _, kh, kw) = self.value(w).dims4()?;
        if kh != 1 || kw != 1 {
            return Err(Error::Contract(format!(
                "pointwise convolution needs a 1x1 kernel, got {kh}x{kw}"
            )));
        }
        self.conv_common(x, w, b, ConvGeometry::UNIT, false)
    }

    /// Batch normalization. Training mode normalizes with batch statistics
    /// and folds them into `buffers`; inference mode reads `buffers` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        buffers: &mut NormBuffers<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let d = self.dims(x)?;
        let c = d.c;
        if self.value(gamma).len() != c
            || self.value(beta).len() != c
            || buffers.running_mean.len() != c
            || buffers.running_var.len() != c
        {
            return Err(Error::dim(format!(
                "batch norm parameters do not match {c} input channels"
            )));
        }
        let (mean, inv_std) = match mode {
            NormMode::Train => {
                let count = d.n * d.hw();
                if count < 2 {
                    return Err(Error::dim(format!(
                        "training-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let (mean, var) = kernels::channel_stats(self.value(x).data(), d);
                kernels::fold_running(
                    buffers.running_mean.data_mut(),
                    buffers.running_var.data_mut(),
                    &mean,
                    &var,
                    buffers.momentum,
                    count,
                );
                let inv = var
                    .iter()
                    .map(|&v| ops::inv_std(v, buffers.epsilon))
                    .collect::<Result<Vec<_>>>()?;
                (mean, inv)
            }
            NormMode::Inference => {
                let inv = buffers
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| ops::inv_std(v, buffers.epsilon))
                    .collect::<Result<Vec<_>>>()?;
                (buffers.running_mean.data().to_vec(), inv)
            }
        };
        let (y, xhat) = kernels::normalize_affine(
            self.value(x).data(),
            d,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.value(x).shape(), y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            needs,
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let value = ops::relu6(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Relu6(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.dims(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?)?;
        let mut channels = 0;
        for &p in parts {
            let d = self.dims(p)?;
            if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                return Err(Error::dim(format!(
                    "concat operands differ outside the channel axis: {:?} vs {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            channels += d.c;
        }
        let mut data = Vec::with_capacity(first.n * channels * first.hw());
        for n in 0..first.n {
            for &p in parts {
                let d = self.dims(p)?;
                let per = d.c * d.hw();
                data.extend_from_slice(&self.value(p).data()[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::new(&[first.n, channels, first.h, first.w], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(x), factor)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample { x, factor }, needs))
    }

    pub fn avg_pool(&mut self, x: Var, window: PoolWindow) -> Result<Var> {
        let d = self.dims(x)?;
        let (wh, ww) = ops::pool_extent(d, window)?;
        let value = ops::avg_pool(self.value(x), window)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool { x, wh, ww }, needs))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.value(x).shape(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = ops::bce_loss(self.value(pred), target)?;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// `Σ weights ⊙ x`, a scalar. Handy for projecting a tensor output onto
    /// a random direction in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::dim(format!(
                "weights {:?} do not match {:?}",
                weights.shape(),
                self.value(x).shape()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss`. A tape can only be replayed
    /// once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("gradient tape already consumed".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.push((id, Tensor::new(node.value.shape(), g)?));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        // Parameters registered after the loss still get a (zero) gradient.
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Param(id) = node.op {
                out.push((id, Tensor::zeros(node.value.shape())));
            }
        }

        out.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(ParamId, Tensor<T>)> = Vec::with_capacity(out.len());
        for (id, g) in out {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                _ => merged.push((id, g)),
            }
        }
        Ok(Gradients { entries: merged })
    }

    fn propagate(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let send = |v: Var, delta: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv {
                x,
                w,
                b,
                win,
                ho,
                wo,
                depthwise,
            } => {
                let d = self.dims(*x)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.needs(*x);
                let cg = if *depthwise {
                    kernels::depthwise_backward(xv, d, wv, *win, *ho, *wo, &g, need_x)
                } else {
                    let cout = self.value(*w).shape()[0];
                    kernels::conv2d_backward(xv, d, wv, cout, *win, *ho, *wo, &g, need_x)
                };
                if let Some(dx) = cg.input {
                    send(*x, dx, grads);
                }
                send(*w, cg.weights, grads);
                if let Some(b) = b {
                    send(*b, cg.bias, grads);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = self.dims(*x)?;
                let ng = kernels::batchnorm_backward(xhat, d, inv_std, self.value(*gamma).data(), &g, *batch_stats);
                send(*x, ng.input, grads);
                send(*gamma, ng.gamma, grads);
                send(*beta, ng.beta, grads);
            }
            Op::Relu6(x) => {
                let six = T::from_f64(6.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &g)| if v > T::zero() && v < six { g } else { T::zero() })
                    .collect();
                send(*x, dx, grads);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                send(*x, dx, grads);
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g, grads);
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let total = g.len() / n;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).len() / n;
                    let mut dp = Vec::with_capacity(per * n);
                    for b in 0..n {
                        dp.extend_from_slice(&g[b * total + offset..b * total + offset + per]);
                    }
                    offset += per;
                    send(p, dp, grads);
                }
            }
            Op::Upsample { x, factor } => {
                let d = self.dims(*x)?;
                send(*x, kernels::upsample_backward(&g, d, *factor), grads);
            }
            Op::AvgPool { x, wh, ww } => {
                let d = self.dims(*x)?;
                send(*x, kernels::avgpool_backward(&g, d, *wh, *ww), grads);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                send(*x, dx, grads);
            }
            Op::Bce { pred, target } => {
                let eps = T::from_f64(BCE_EPS);
                let one = T::one();
                let scale = g[0] / T::from_usize(target.len());
                // Evaluated at the clamped probability so saturated outputs
                // still receive a corrective gradient.
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        let p = p.max(eps).min(one - eps);
                        scale * (p - y) / (p * (one - p))
                    })
                    .collect();
                send(*pred, dp, grads);
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|&w| w * g[0]).collect();
                send(*x, dx, grads);
            }
        }
        Ok(())
    }
}
