//! Finite-difference oracle for the tape's analytic gradients.
//!
//! The oracle evaluates the forward pass only, in f64. Analytic gradients
//! are checked in both precisions: f32 against the f64 difference quotient
//! with h = 1e-3 (relative error < 1e-3), and f64 against an extrapolated
//! five-point central stencil with h = 1e-2 (relative error < 1e-6).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvGeometry, GradTape, NormBuffers, NormMode, ParamId, PoolWindow, Scalar, Tensor, Var};

/// A differentiable scalar function of a list of tensors.
pub trait Case {
    fn params(&self) -> Vec<Tensor<f64>>;

    /// Builds the loss on `tape`, with `params` already registered in order.
    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, params: &[Var]) -> Var;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// f32 analytic gradient vs f64 difference quotient, h = 1e-3, tol 1e-3.
    Single,
    /// f64 analytic gradient vs the extrapolated five-point central stencil,
    /// h = 1e-2, tol 1e-6.
    Double,
}

impl Precision {
    pub fn step(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-2,
        }
    }

    /// Magnitude below which both gradients are treated as numerical noise.
    pub fn floor(self) -> f64 {
        match self {
            Precision::Single => 1e-4,
            Precision::Double => 1e-6,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-6,
        }
    }
}

fn eval_loss<C: Case>(case: &C, params: &[Tensor<f64>]) -> f64 {
    let mut tape = GradTape::<f64>::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone()))
        .collect();
    let l = case.loss(&mut tape, &vars);
    tape.value(l).data()[0]
}

fn analytic<C: Case, T: Scalar>(case: &C, params: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut tape = GradTape::<T>::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.cast()))
        .collect();
    let l = case.loss(&mut tape, &vars);
    let g = tape.backward(l).expect("backward");
    (0..params.len())
        .map(|i| {
            g.get(ParamId(i))
                .expect("one gradient per parameter")
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(p+h) - L(p-h)) / 2h`
    ThreePoint,
    /// `(-L(p+2h) + 8L(p+h) - 8L(p-h) + L(p-2h)) / 12h`
    FivePoint,
    /// Five-point estimates at h and h/2 combined as `(16 D(h/2) - D(h)) / 15`.
    Extrapolated,
}

/// Central difference for every parameter element, evaluated in f64.
pub fn numeric<C: Case>(case: &C, h: f64, stencil: Stencil) -> Vec<Vec<f64>> {
    let base = case.params();
    let at = |i: usize, j: usize, offset: f64| {
        let mut shifted = base.clone();
        shifted[i].data_mut()[j] += offset;
        eval_loss(case, &shifted)
    };
    let five = |i: usize, j: usize, h: f64| {
        (-at(i, j, 2.0 * h) + 8.0 * at(i, j, h) - 8.0 * at(i, j, -h) + at(i, j, -2.0 * h)) / (12.0 * h)
    };
    let mut out = Vec::with_capacity(base.len());
    for (i, b) in base.iter().enumerate() {
        let g = (0..b.len())
            .map(|j| match stencil {
                Stencil::ThreePoint => (at(i, j, h) - at(i, j, -h)) / (2.0 * h),
                Stencil::FivePoint => five(i, j, h),
                Stencil::Extrapolated => (16.0 * five(i, j, h / 2.0) - five(i, j, h)) / 15.0,
            })
            .collect();
        out.push(g);
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Worst relative error over all parameter elements.
pub fn worst_error<C: Case>(case: &C, precision: Precision) -> f64 {
    let params = case.params();
    let got = match precision {
        Precision::Single => analytic::<C, f32>(case, &params),
        Precision::Double => analytic::<C, f64>(case, &params),
    };
    let stencil = match precision {
        Precision::Single => Stencil::ThreePoint,
        Precision::Double => Stencil::Extrapolated,
    };
    let want = numeric(case, precision.step(), stencil);
    let mut worst: f64 = 0.0;
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.len(), w.len(), "gradient shape mismatch");
        for (&a, &n) in g.iter().zip(w) {
            worst = worst.max(relative_error(a, n, precision.floor()));
        }
    }
    worst
}

pub fn check_case<C: Case>(case: &C, precision: Precision) -> Result<f64, String> {
    let worst = worst_error(case, precision);
    if worst < precision.tolerance() {
        Ok(worst)
    } else {
        Err(format!(
            "relative error {worst:.3e} exceeds {:.0e}",
            precision.tolerance()
        ))
    }
}

/// Every differentiable layer, each with a seeded random instance builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv2d,
    Depthwise,
    Pointwise,
    BatchNormTrain,
    BatchNormInference,
    Relu6,
    Upsample,
    SigmoidBce,
    AvgPool,
    AddConcatDropout,
    /// conv, BN (train), ReLU6, 1×1 conv, sigmoid, BCE in one graph.
    Composed,
}

impl Layer {
    pub const ALL: [Layer; 11] = [
        Layer::Conv2d,
        Layer::Depthwise,
        Layer::Pointwise,
        Layer::BatchNormTrain,
        Layer::BatchNormInference,
        Layer::Relu6,
        Layer::Upsample,
        Layer::SigmoidBce,
        Layer::AvgPool,
        Layer::AddConcatDropout,
        Layer::Composed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv2d => "conv2d",
            Layer::Depthwise => "depthwise",
            Layer::Pointwise => "pointwise",
            Layer::BatchNormTrain => "batchnorm/train",
            Layer::BatchNormInference => "batchnorm/inference",
            Layer::Relu6 => "relu6",
            Layer::Upsample => "upsample",
            Layer::SigmoidBce => "sigmoid+bce",
            Layer::AvgPool => "avg_pool",
            Layer::AddConcatDropout => "add/concat/dropout",
            Layer::Composed => "conv-bn-relu6-bce",
        }
    }

    /// Checks the instance built from `seed`; `Ok` holds the worst error.
    pub fn check(self, seed: u64, precision: Precision) -> Result<f64, String> {
        match self {
            Layer::Conv2d => check_case(&Conv::new(seed, false, false), precision),
            Layer::Depthwise => check_case(&Conv::new(seed, true, false), precision),
            Layer::Pointwise => check_case(&Conv::new(seed, false, true), precision),
            Layer::BatchNormTrain => check_case(&BatchNorm::new(seed, NormMode::Train), precision),
            Layer::BatchNormInference => check_case(&BatchNorm::new(seed, NormMode::Inference), precision),
            Layer::Relu6 => check_case(&Relu6::new(seed), precision),
            Layer::Upsample => check_case(&Upsample::new(seed), precision),
            Layer::SigmoidBce => check_case(&SigmoidBce::new(seed), precision),
            Layer::AvgPool => check_case(&Pooling::new(seed), precision),
            Layer::AddConcatDropout => check_case(&Plumbing::new(seed), precision),
            Layer::Composed => check_case(&Composed::new(seed), precision),
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn cast<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast()
}

struct Conv {
    depthwise: bool,
    stride: usize,
    dilation: usize,
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    proj: Tensor<f64>,
}

impl Conv {
    fn new(seed: u64, depthwise: bool, pointwise: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = rng.random_range(1..4);
        let cout = if depthwise { cin } else { rng.random_range(1..4) };
        let k = if pointwise { 1 } else { 3 };
        let stride = if pointwise { 1 } else { rng.random_range(1..3) };
        let dilation = if pointwise { 1 } else { rng.random_range(1..3) };
        let x = uniform(&[2, cin, 4, 4], -1.0, 1.0, &mut rng);
        let w = uniform(&[cout, if depthwise { 1 } else { cin }, k, k], -1.0, 1.0, &mut rng);
        let b = uniform(&[cout], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::<f64>::new();
        let (xv, wv, bv) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
        let geom = ConvGeometry::same(k, stride, dilation);
        let y = if depthwise {
            tape.depthwise_conv2d(xv, wv, Some(bv), geom)
        } else {
            tape.conv2d(xv, wv, Some(bv), geom)
        }
        .unwrap();
        let proj = uniform(tape.value(y).shape(), -1.0, 1.0, &mut rng);
        Conv {
            depthwise,
            stride,
            dilation,
            x,
            w,
            b,
            proj,
        }
    }
}

impl Case for Conv {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone(), self.w.clone(), self.b.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let k = self.w.shape()[2];
        let geom = ConvGeometry::same(k, self.stride, self.dilation);
        let y = if self.depthwise {
            tape.depthwise_conv2d(p[0], p[1], Some(p[2]), geom)
        } else if k == 1 {
            tape.pointwise_conv2d(p[0], p[1], Some(p[2]))
        } else {
            tape.conv2d(p[0], p[1], Some(p[2]), geom)
        }
        .unwrap();
        tape.weighted_sum(y, &cast(&self.proj)).unwrap()
    }
}

struct BatchNorm {
    x: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
    proj: Tensor<f64>,
    mode: NormMode,
}

impl BatchNorm {
    fn new(seed: u64, mode: NormMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..4);
        let x = uniform(&[2, c, 3, 3], -2.0, 2.0, &mut rng);
        BatchNorm {
            gamma: uniform(&[c], 0.5, 1.5, &mut rng),
            beta: uniform(&[c], -1.0, 1.0, &mut rng),
            proj: uniform(&[2, c, 3, 3], -1.0, 1.0, &mut rng),
            x,
            mode,
        }
    }
}

impl Case for BatchNorm {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let c = self.gamma.len();
        let mut buffers = NormBuffers::<T>::new(c);
        buffers.running_mean = Tensor::full(&[c], T::from_f64(0.3));
        buffers.running_var = Tensor::full(&[c], T::from_f64(1.7));
        let y = tape.batch_norm(p[0], p[1], p[2], &mut buffers, self.mode).unwrap();
        // A non-linear read-out, so the normalization's mean/variance terms
        // contribute to the gradient.
        let s = tape.sigmoid(y);
        tape.weighted_sum(s, &cast(&self.proj)).unwrap()
    }
}

/// Inputs kept at least 0.05 away from the ReLU6 kinks at 0 and 6.
struct Relu6 {
    x: Tensor<f64>,
    proj: Tensor<f64>,
}

impl Relu6 {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * 2 * 3 * 3)
            .map(|_| loop {
                let v: f64 = rng.random_range(-2.0..8.0);
                if v.abs() > 0.05 && (v - 6.0).abs() > 0.05 {
                    break v;
                }
            })
            .collect();
        Relu6 {
            x: Tensor::new(&[2, 2, 3, 3], data).unwrap(),
            proj: uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng),
        }
    }
}

impl Case for Relu6 {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let y = tape.relu6(p[0]);
        tape.weighted_sum(y, &cast(&self.proj)).unwrap()
    }
}

struct Upsample {
    factor: usize,
    x: Tensor<f64>,
    proj: Tensor<f64>,
}

impl Upsample {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor = rng.random_range(1..5);
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        Upsample {
            factor,
            x: uniform(&[2, 2, h, w], -1.0, 1.0, &mut rng),
            proj: uniform(&[2, 2, h * factor, w * factor], -1.0, 1.0, &mut rng),
        }
    }
}

impl Case for Upsample {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let y = tape.upsample(p[0], self.factor).unwrap();
        tape.weighted_sum(y, &cast(&self.proj)).unwrap()
    }
}

struct SigmoidBce {
    logits: Tensor<f64>,
    target: Tensor<f64>,
}

impl SigmoidBce {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = uniform(&[2, 1, 3, 3], -4.0, 4.0, &mut rng);
        let target = Tensor::new(
            &[2, 1, 3, 3],
            (0..18).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        SigmoidBce { logits, target }
    }
}

impl Case for SigmoidBce {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let s = tape.sigmoid(p[0]);
        tape.bce(s, &cast(&self.target)).unwrap()
    }
}

struct Pooling {
    global: bool,
    x: Tensor<f64>,
    proj: Tensor<f64>,
}

impl Pooling {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = seed.is_multiple_of(2);
        let out = if global { 1 } else { 2 };
        Pooling {
            global,
            x: uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng),
            proj: uniform(&[2, 2, out, out], -1.0, 1.0, &mut rng),
        }
    }
}

impl Case for Pooling {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let window = if self.global {
            PoolWindow::Global
        } else {
            PoolWindow::Size(2)
        };
        let y = tape.avg_pool(p[0], window).unwrap();
        tape.weighted_sum(y, &cast(&self.proj)).unwrap()
    }
}

/// Residual add, channel concat and dropout with a fixed mask.
struct Plumbing {
    seed: u64,
    a: Tensor<f64>,
    b: Tensor<f64>,
    proj: Tensor<f64>,
}

impl Plumbing {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plumbing {
            seed,
            a: uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng),
            b: uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng),
            proj: uniform(&[2, 4, 2, 3], -1.0, 1.0, &mut rng),
        }
    }
}

impl Case for Plumbing {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let sum = tape.add(p[0], p[1]).unwrap();
        let sq = tape.sigmoid(sum);
        let cat = tape.concat(&[sq, p[1]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xd0);
        let dropped = tape.dropout(cat, 0.3, &mut rng).unwrap();
        tape.weighted_sum(dropped, &cast(&self.proj)).unwrap()
    }
}

/// conv → BN (train) → ReLU6 → conv(1×1) → sigmoid → BCE
struct Composed {
    x: Tensor<f64>,
    w1: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
    target: Tensor<f64>,
}

impl Composed {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::new(
            &[2, 1, 4, 4],
            (0..32).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        Composed {
            x: uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng),
            w1: uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng),
            gamma: uniform(&[3], 0.3, 0.6, &mut rng),
            // One channel per ReLU6 branch: clipped at 0, linear, clipped at 6.
            // Normalized activations stay within ±sqrt(31), so the kinks are
            // never within reach of the difference step.
            beta: Tensor::new(
                &[3],
                vec![
                    rng.random_range(-5.0..-4.0),
                    rng.random_range(2.5..3.5),
                    rng.random_range(10.0..11.0),
                ],
            )
            .unwrap(),
            w2: uniform(&[1, 3, 1, 1], -1.0, 1.0, &mut rng),
            b2: uniform(&[1], -0.5, 0.5, &mut rng),
            target,
        }
    }
}

impl Case for Composed {
    fn params(&self) -> Vec<Tensor<f64>> {
        vec![
            self.w1.clone(),
            self.gamma.clone(),
            self.beta.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    fn loss<T: Scalar>(&self, tape: &mut GradTape<T>, p: &[Var]) -> Var {
        let x = tape.input(cast(&self.x));
        let h = tape.conv2d(x, p[0], None, ConvGeometry::same(3, 1, 1)).unwrap();
        let mut buffers = NormBuffers::new(3);
        let h = tape.batch_norm(h, p[1], p[2], &mut buffers, NormMode::Train).unwrap();
        let h = tape.relu6(h);
        let h = tape.pointwise_conv2d(h, p[3], Some(p[4])).unwrap();
        let prob = tape.sigmoid(h);
        tape.bce(prob, &cast(&self.target)).unwrap()
    }
}
