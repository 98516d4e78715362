//! Pure forward operations. None of these mutate their inputs except
//! [`batchnorm_forward`] in training mode, which updates the running
//! statistics it is handed.

use super::kernels::{self, Dims, Window};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    /// `out × in × k × k` (standard), `ch × 1 × k × k` (depthwise) or
    /// `out × in × 1 × 1` (pointwise).
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>) -> Self {
        ConvParams {
            weights,
            bias: None,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Padding that keeps the spatial size at stride 1 for an odd kernel.
    pub fn same_padding(mut self) -> Self {
        let k = self.weights.shape().get(2).copied().unwrap_or(1);
        self.padding = self.dilation * (k - 1) / 2;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
    /// Weight of the current batch in the running-statistics update.
    pub momentum: T,
    pub mode: NormMode,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            epsilon: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
            mode: NormMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self, channels: usize) -> Result<()> {
        let c = self.gamma.len();
        if c != channels || self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::dim(format!(
                "batch norm parameters sized {c} (beta {}, mean {}, var {}) for {channels} input channels",
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::arg("batch norm epsilon must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn dims(t: &Tensor<impl Scalar>) -> Result<Dims> {
    let (n, c, h, w) = t.dims4()?;
    Ok(Dims { n, c, h, w })
}

pub(crate) fn conv_window(
    d: Dims,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<(Window, usize, usize)> {
    if stride == 0 || dilation == 0 {
        return Err(Error::arg("stride and dilation must be positive"));
    }
    let win = Window {
        k,
        stride,
        padding,
        dilation,
    };
    match (win.out_len(d.h), win.out_len(d.w)) {
        (Some(ho), Some(wo)) => Ok((win, ho, wo)),
        _ => Err(Error::dim(format!(
            "spatial size {}x{} with padding {padding} is smaller than the {k}x{k} kernel (dilation {dilation})",
            d.h, d.w
        ))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::dim(format!(
            "bias has {} entries for {channels} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Dense 2-D cross-correlation, `N×C×H×W → N×O×H'×W'`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let d = dims(input)?;
    let (cout, cin, kh, kw) = params.weights.dims4()?;
    if cin != d.c {
        return Err(Error::dim(format!(
            "input channel axis (1) is {} but weight axis 1 expects {cin}",
            d.c
        )));
    }
    if kh != kw {
        return Err(Error::dim(format!("kernel axes 2 and 3 differ: {kh}x{kw}")));
    }
    check_bias(params.bias.as_ref(), cout)?;
    let (win, ho, wo) = conv_window(d, kh, params.stride, params.padding, params.dilation)?;
    let out = kernels::conv2d_forward(
        input.data(),
        d,
        params.weights.data(),
        cout,
        params.bias.as_ref().map(|b| b.data()),
        win,
        ho,
        wo,
    );
    Tensor::new(&[d.n, cout, ho, wo], out)
}

/// One `k×k` filter per input channel; channel `c` of the output sees only
/// channel `c` of the input.
pub fn depthwise_conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let d = dims(input)?;
    let (ch, one, kh, kw) = params.weights.dims4()?;
    if ch != d.c || one != 1 {
        return Err(Error::dim(format!(
            "depthwise weights {:?} do not match {} input channels (expected {}x1xkxk)",
            params.weights.shape(),
            d.c,
            d.c
        )));
    }
    if kh != kw {
        return Err(Error::dim(format!("kernel axes 2 and 3 differ: {kh}x{kw}")));
    }
    check_bias(params.bias.as_ref(), ch)?;
    let (win, ho, wo) = conv_window(d, kh, params.stride, params.padding, params.dilation)?;
    let out = kernels::depthwise_forward(
        input.data(),
        d,
        params.weights.data(),
        params.bias.as_ref().map(|b| b.data()),
        win,
        ho,
        wo,
    );
    Tensor::new(&[d.n, d.c, ho, wo], out)
}

/// 1×1 convolution: a per-pixel matrix-vector product across channels.
pub fn pointwise_conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (_, _, kh, kw) = params.weights.dims4()?;
    if kh != 1 || kw != 1 || params.stride != 1 || params.padding != 0 {
        return Err(Error::Contract(format!(
            "pointwise convolution needs a 1x1 kernel with stride 1 and no padding, got {kh}x{kw} stride {} padding {}",
            params.stride, params.padding
        )));
    }
    conv2d_forward(input, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Multiply-accumulates performed by one convolution over an input of shape
/// `input` (bias additions excluded).
pub fn conv_macs<T: Scalar>(input: &[usize], params: &ConvParams<T>, kind: ConvKind) -> Result<u64> {
    if input.len() != 4 {
        return Err(Error::dim(format!("expected NCHW input shape, got {input:?}")));
    }
    let d = Dims {
        n: input[0],
        c: input[1],
        h: input[2],
        w: input[3],
    };
    let (cout, cin, k, _) = params.weights.dims4()?;
    let (_, ho, wo) = conv_window(d, k, params.stride, params.padding, params.dilation)?;
    let per_output = match kind {
        ConvKind::Standard | ConvKind::Pointwise => cin * k * k,
        ConvKind::Depthwise => k * k,
    };
    Ok((d.n * cout * ho * wo * per_output) as u64)
}

pub fn relu6<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    input.map(|v| v.max(T::zero()).min(six))
}

/// Logistic function, clamped so outputs stay strictly inside (0, 1).
pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

/// Mean binary cross-entropy. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let eps = T::from_f64(BCE_EPS);
    let one = T::one();
    let total = pred.data().iter().zip(target.data()).fold(T::zero(), |acc, (&p, &y)| {
        let p = p.max(eps).min(one - eps);
        acc - (y * p.ln() + (one - y) * (one - p).ln())
    });
    Ok(total / T::from_usize(pred.len()))
}

/// Batch normalization. In [`NormMode::Train`] the batch statistics are used
/// and folded into the running statistics; in [`NormMode::Inference`] only
/// the running statistics are read.
pub fn batchnorm_forward<T: Scalar>(input: &Tensor<T>, params: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    let d = dims(input)?;
    params.validate(d.c)?;
    let (mean, inv_std) = match params.mode {
        NormMode::Inference => {
            let inv = params
                .running_var
                .data()
                .iter()
                .map(|&v| inv_std(v, params.epsilon))
                .collect::<Result<Vec<_>>>()?;
            (params.running_mean.data().to_vec(), inv)
        }
        NormMode::Train => {
            let count = d.n * d.hw();
            if count < 2 {
                return Err(Error::dim(format!(
                    "training-mode batch norm needs at least 2 values per channel, got {count}"
                )));
            }
            let (mean, var) = kernels::channel_stats(input.data(), d);
            kernels::fold_running(
                params.running_mean.data_mut(),
                params.running_var.data_mut(),
                &mean,
                &var,
                params.momentum,
                count,
            );
            let inv = var
                .iter()
                .map(|&v| inv_std(v, params.epsilon))
                .collect::<Result<Vec<_>>>()?;
            (mean, inv)
        }
    };
    let (y, _) = kernels::normalize_affine(
        input.data(),
        d,
        &mean,
        &inv_std,
        params.gamma.data(),
        params.beta.data(),
    );
    Tensor::new(input.shape(), y)
}

pub(crate) fn inv_std<T: Scalar>(var: T, eps: T) -> Result<T> {
    let denom = var + eps;
    if denom > T::zero() && denom.is_finite() {
        Ok(T::one() / denom.sqrt())
    } else {
        Err(Error::Internal(format!(
            "non-positive variance {var:?} after epsilon guard"
        )))
    }
}

/// Bilinear upsampling by an integer factor with half-pixel centres
/// (align-corners off).
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::arg("upsampling factor must be at least 1"));
    }
    let d = dims(input)?;
    let out = kernels::upsample_forward(input.data(), d, factor);
    Tensor::new(&[d.n, d.c, d.h * factor, d.w * factor], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolWindow {
    /// Square non-overlapping window (stride equals the window size).
    Size(usize),
    /// Reduce each plane to 1×1.
    Global,
}

pub(crate) fn pool_extent(d: Dims, window: PoolWindow) -> Result<(usize, usize)> {
    match window {
        PoolWindow::Global => Ok((d.h, d.w)),
        PoolWindow::Size(0) => Err(Error::arg("pool window must be positive")),
        PoolWindow::Size(k) if k > d.h || k > d.w => {
            Err(Error::arg(format!("pool window {k} larger than input {}x{}", d.h, d.w)))
        }
        PoolWindow::Size(k) => Ok((k, k)),
    }
}

pub fn avg_pool<T: Scalar>(input: &Tensor<T>, window: PoolWindow) -> Result<Tensor<T>> {
    let d = dims(input)?;
    let (wh, ww) = pool_extent(d, window)?;
    let out = kernels::avgpool_forward(input.data(), d, wh, ww);
    Tensor::new(&[d.n, d.c, d.h / wh, d.w / ww], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dirac(out: usize, inp: usize, k: usize) -> Tensor<f64> {
        let mut w = Tensor::zeros(&[out, inp, k, k]);
        for o in 0..out {
            let i = if inp == 1 { 0 } else { o };
            w.data_mut()[((o * inp + i) * k + k / 2) * k + k / 2] = 1.0;
        }
        w
    }

    // Direct summation, written independently of the im2col path.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups_depthwise: bool) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, ci, k, _) = w.dims4().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ic in 0..ci {
                            let src_c = if groups_depthwise { oc } else { ic };
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((oc * ci + ic) * k + ky) * k + kx]
                                        * x.data()[((b * c + src_c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        let _ = c;
        out
    }

    #[test]
    fn conv2d_hand_example() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &ConvParams::new(w)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv2d_dirac_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 6], &mut rng);
        let y = conv2d_forward(&x, &ConvParams::new(dirac(3, 3, 3)).same_padding()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let p = ConvParams::new(random(&[3, 2, 3, 3], &mut rng))
            .with_bias(Tensor::zeros(&[3]))
            .same_padding();
        assert!(conv2d_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = random(&[2, 3, 7, 6], &mut rng);
            let w = random(&[4, 3, 3, 3], &mut rng);
            let got = conv2d_forward(&x, &ConvParams::new(w.clone()).with_stride(stride).with_padding(pad)).unwrap();
            let want = conv_oracle(&x, &w, stride, pad, false);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv2d_names_the_mismatched_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 3, 3]));
        let err = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("axis"), "{err}");
        let big = ConvParams::new(Tensor::<f32>::zeros(&[1, 2, 5, 5]));
        assert!(matches!(conv2d_forward(&x, &big), Err(Error::Dimension(_))));
    }

    #[test]
    fn dilated_conv_matches_sparse_kernel() {
        // A dilation-2 3x3 kernel equals a 5x5 kernel with zeros between taps.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[1, 2, 9, 8], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let mut wide = Tensor::zeros(&[3, 2, 5, 5]);
        for o in 0..3 {
            for i in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        wide.data_mut()[((o * 2 + i) * 5 + 2 * ky) * 5 + 2 * kx] =
                            w.data()[((o * 2 + i) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let a = conv2d_forward(&x, &ConvParams::new(w).with_dilation(2).same_padding()).unwrap();
        let b = conv2d_forward(&x, &ConvParams::new(wide).same_padding()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn dilation_wider_than_the_map_keeps_only_the_centre_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let w = random(&[3, 1, 3, 3], &mut rng);
        let y = depthwise_conv2d_forward(&x, &ConvParams::new(w.clone()).with_dilation(6).same_padding()).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let centre = w.data()[c * 9 + 4];
                for (a, b) in y.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert_eq!(*a, centre * b);
                }
            }
        }
        let dense = random(&[4, 3, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &ConvParams::new(dense).with_dilation(18).same_padding()).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2, 2]);
    }

    #[test]
    fn depthwise_dirac_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 4, 5, 5], &mut rng);
        let y = depthwise_conv2d_forward(&x, &ConvParams::new(dirac(4, 1, 3)).same_padding()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(&[1, 3, 4, 4], &mut rng);
        x.data_mut()[..16].fill(0.0);
        let p = ConvParams::new(random(&[3, 1, 3, 3], &mut rng)).same_padding();
        let y = depthwise_conv2d_forward(&x, &p).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_matches_grouped_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = random(&[1, 2, 3, 3], &mut rng);
            let w = random(&[2, 1, 3, 3], &mut rng);
            let got = depthwise_conv2d_forward(&x, &ConvParams::new(w.clone()).with_stride(stride).with_padding(pad))
                .unwrap();
            let want = conv_oracle(&x, &w, stride, pad, true);
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(matches!(depthwise_conv2d_forward(&x, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_hand_example() {
        let x = t(&[1, 2, 1, 1], &[1.0, 2.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 1.0, 2.0, 0.0]);
        let y = pointwise_conv2d_forward(&x, &ConvParams::new(w)).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
    }

    #[test]
    fn pointwise_identity_and_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 3, 4, 5], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(pointwise_conv2d_forward(&x, &ConvParams::new(eye)).unwrap(), x);

        let w = random(&[2, 3, 1, 1], &mut rng);
        let y = pointwise_conv2d_forward(&x, &ConvParams::new(w.clone())).unwrap();
        for p in 0..20 {
            for o in 0..2 {
                let want: f64 = (0..3).map(|i| w.data()[o * 3 + i] * x.data()[i * 20 + p]).sum();
                assert!((y.data()[o * 20 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_rejects_spatial_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(matches!(pointwise_conv2d_forward(&x, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn relu6_clips_both_ends() {
        let x = t(&[3], &[-1.0, 3.0, 8.0]);
        assert_eq!(relu6(&x).data(), &[0.0, 3.0, 6.0]);
        let inside = t(&[4], &[0.0, 1.5, 5.9, 6.0]);
        assert_eq!(relu6(&inside), inside);
    }

    #[test]
    fn sigmoid_values() {
        let y = sigmoid(&t(&[3], &[0.0, 2.0, -2.0]));
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.880797).abs() < 1e-6);
        assert!((y.data()[1] + y.data()[2] - 1.0).abs() < 1e-15);
        let extreme = sigmoid(&Tensor::<f32>::new(&[2], vec![100.0, -200.0]).unwrap());
        assert!(extreme.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bce_values() {
        let p = t(&[1], &[0.5]);
        let y = t(&[1], &[1.0]);
        assert!((bce_loss(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let perfect = t(&[4], &[0.0, 1.0, 1.0, 0.0]);
        let l = bce_loss(&perfect, &perfect).unwrap();
        assert!(l >= 0.0 && l <= -(1.0 - BCE_EPS).ln() + 1e-12);
        assert!(bce_loss(&p, &t(&[2], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn batchnorm_inference_identity_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let mut p = BatchNormParams::<f64>::new(3);
        p.mode = NormMode::Inference;
        let y = batchnorm_forward(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v / (1.0 + 1e-5f64).sqrt())) < 1e-15);
        assert!(y.max_abs_diff(&x) < 1e-5);

        p.gamma = Tensor::full(&[3], 2.0);
        p.beta = Tensor::full(&[3], 1.0);
        p.epsilon = 1e-300;
        let y = batchnorm_forward(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| 2.0 * v + 1.0)) < 1e-12);
    }

    #[test]
    fn batchnorm_train_constant_batch_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 2, 3, 3], 4.25);
        let mut p = BatchNormParams::<f64>::new(2);
        p.beta = t(&[2], &[0.5, -1.5]);
        p.gamma = t(&[2], &[3.0, 7.0]);
        let y = batchnorm_forward(&x, &mut p).unwrap();
        assert!(y.plane(0, 0).iter().chain(y.plane(1, 0)).all(|&v| v == 0.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.5));
        // running stats moved towards the batch mean
        assert!((p.running_mean.data()[0] - 0.425).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let mut p = BatchNormParams::<f64>::new(2);
        assert!(matches!(batchnorm_forward(&x, &mut p), Err(Error::Dimension(_))));
    }

    #[test]
    fn upsample_hand_evaluated() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = bilinear_upsample(&x, 2).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn upsample_shapes_and_constants() {
        let x = Tensor::<f32>::full(&[1, 2, 56, 56], 5.0);
        let y = bilinear_upsample(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 2, 224, 224]);
        assert!(y.data().iter().all(|&v| v == 5.0));
        assert!(matches!(bilinear_upsample(&x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn avg_pool_values() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool(&x, PoolWindow::Global).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[1, 2, 4, 4], -3.0);
        assert!(avg_pool(&c, PoolWindow::Size(2))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -3.0));
        assert!(matches!(avg_pool(&x, PoolWindow::Size(3)), Err(Error::Argument(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let y = avg_pool(&x, PoolWindow::Size(2)).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x.data()[(oy * 2 + dy) * 4 + ox * 2 + dx];
                    }
                }
                assert!((y.data()[oy * 2 + ox] - s / 4.0).abs() < 1e-12);
            }
        }
    }
}
