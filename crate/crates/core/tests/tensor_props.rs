use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woundseg::tensor::{
    adam_step, avg_pool, batchnorm_forward, bilinear_upsample, conv2d_forward, conv_macs, depthwise_conv2d_forward,
    pointwise_conv2d_forward, relu6, sigmoid, AdamConfig, AdamState, BatchNormParams, ConvKind, ConvParams, GradTape,
    NormBuffers, NormMode, ParamId, PoolWindow, Tensor,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[derive(Debug, Clone)]
struct SepCase {
    seed: u64,
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    h: usize,
    w: usize,
}

fn sep_case() -> impl Strategy<Value = SepCase> {
    (
        any::<u64>(),
        1usize..3,
        1usize..5,
        1usize..6,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        1usize..3,
        1usize..3,
        5usize..10,
        5usize..10,
    )
        .prop_map(|(seed, n, cin, cout, k, stride, dilation, h, w)| SepCase {
            seed,
            n,
            cin,
            cout,
            k,
            stride,
            dilation,
            h,
            w,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn separable_pair_equals_composed_kernel(c in sep_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let x = random(&[c.n, c.cin, c.h, c.w], &mut rng);
        let dw = random(&[c.cin, 1, c.k, c.k], &mut rng);
        let pw = random(&[c.cout, c.cin, 1, 1], &mut rng);
        let kk = c.k * c.k;
        let mut full = vec![0.0f32; c.cout * c.cin * kk];
        for o in 0..c.cout {
            for i in 0..c.cin {
                for t in 0..kk {
                    full[(o * c.cin + i) * kk + t] = pw.data()[o * c.cin + i] * dw.data()[i * kk + t];
                }
            }
        }
        let full = Tensor::new(&[c.cout, c.cin, c.k, c.k], full).unwrap();
        let pad = c.dilation * (c.k - 1) / 2;
        let dw_params = ConvParams::new(dw).with_stride(c.stride).with_padding(pad).with_dilation(c.dilation);
        let mid = depthwise_conv2d_forward(&x, &dw_params).unwrap();
        let sep = pointwise_conv2d_forward(&mid, &ConvParams::new(pw)).unwrap();
        let direct = conv2d_forward(
            &x,
            &ConvParams::new(full).with_stride(c.stride).with_padding(pad).with_dilation(c.dilation),
        )
        .unwrap();
        prop_assert_eq!(sep.shape(), direct.shape());
        prop_assert!(sep.max_abs_diff(&direct) < 1e-5);
    }

    #[test]
    fn separable_cost_ratio_is_exact(c in sep_case()) {
        let pad = c.dilation * (c.k - 1) / 2;
        let input = [c.n, c.cin, c.h, c.w];
        let dw = ConvParams::new(Tensor::<f32>::zeros(&[c.cin, 1, c.k, c.k]))
            .with_stride(c.stride).with_padding(pad).with_dilation(c.dilation);
        let full = ConvParams::new(Tensor::<f32>::zeros(&[c.cout, c.cin, c.k, c.k]))
            .with_stride(c.stride).with_padding(pad).with_dilation(c.dilation);
        let pw = ConvParams::new(Tensor::<f32>::zeros(&[c.cout, c.cin, 1, 1]));
        let dw_macs = conv_macs(&input, &dw, ConvKind::Depthwise).unwrap();
        let (ho, wo) = {
            let probe = depthwise_conv2d_forward(&Tensor::zeros(&input), &dw).unwrap();
            (probe.shape()[2], probe.shape()[3])
        };
        let pw_macs = conv_macs(&[c.n, c.cin, ho, wo], &pw, ConvKind::Pointwise).unwrap();
        let full_macs = conv_macs(&input, &full, ConvKind::Standard).unwrap();
        // (dw + pw) / full == 1/out + 1/k²  ⇔  (dw + pw)·out·k² == full·(k² + out)
        let (out, kk) = (c.cout as u64, (c.k * c.k) as u64);
        prop_assert_eq!((dw_macs + pw_macs) * out * kk, full_macs * (kk + out));
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let y = random(&[2, 3, 6, 6], &mut rng);
        let params = ConvParams::new(random(&[4, 3, 3, 3], &mut rng)).same_padding();
        let mixed = Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| a * p + b * q).collect(),
        )
        .unwrap();
        let lhs = conv2d_forward(&mixed, &params).unwrap();
        let cx = conv2d_forward(&x, &params).unwrap();
        let cy = conv2d_forward(&y, &params).unwrap();
        let rhs = Tensor::new(
            cx.shape(),
            cx.data().iter().zip(cy.data()).map(|(&p, &q)| a * p + b * q).collect(),
        )
        .unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn dirac_kernel_is_identity(seed in any::<u64>(), c in 1usize..4, k in prop_oneof![Just(1usize), Just(3), Just(5)], h in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, c, h, h + 1], &mut rng);
        let kk = k * k;
        let mut w = vec![0.0f32; c * c * kk];
        for i in 0..c {
            w[(i * c + i) * kk + kk / 2] = 1.0;
        }
        let params = ConvParams::new(Tensor::new(&[c, c, k, k], w).unwrap()).same_padding();
        prop_assert_eq!(conv2d_forward(&x, &params).unwrap(), x);
    }

    #[test]
    fn forward_ops_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let snapshot = x.clone();
        let conv = ConvParams::new(random(&[4, 3, 3, 3], &mut rng)).with_bias(random(&[4], &mut rng)).same_padding();
        let dw = ConvParams::new(random(&[3, 1, 3, 3], &mut rng)).same_padding().with_stride(2);
        let pw = ConvParams::new(random(&[5, 3, 1, 1], &mut rng));
        let run = |x: &Tensor| {
            let mut bn = BatchNormParams::new(3);
            vec![
                conv2d_forward(x, &conv).unwrap(),
                depthwise_conv2d_forward(x, &dw).unwrap(),
                pointwise_conv2d_forward(x, &pw).unwrap(),
                relu6(x),
                sigmoid(x),
                bilinear_upsample(x, 4).unwrap(),
                avg_pool(x, PoolWindow::Size(2)).unwrap(),
                avg_pool(x, PoolWindow::Global).unwrap(),
                batchnorm_forward(x, &mut bn).unwrap(),
            ]
        };
        let first = run(&x);
        let second = run(&x);
        prop_assert_eq!(&x, &snapshot);
        for (a, b) in first.iter().zip(&second) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn upsample_preserves_constants(v in -10.0f32..10.0, h in 1usize..6, w in 1usize..6, factor in 1usize..6) {
        let x = Tensor::full(&[1, 2, h, w], v);
        let y = bilinear_upsample(&x, factor).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, h * factor, w * factor][..]);
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() <= 1e-6 * v.abs().max(1.0)));
    }

    #[test]
    fn training_outputs_stay_finite(seed in any::<u64>(), scale in 0.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 6, 6], &mut rng).map(|v| v * scale);
        let target = Tensor::new(&[2, 1, 6, 6], (0..72).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.input(x);
        let w = tape.param(ParamId(0), random(&[4, 3, 3, 3], &mut rng).map(|v| v * scale));
        let g = tape.param(ParamId(1), Tensor::full(&[4], 1.0));
        let b = tape.param(ParamId(2), Tensor::zeros(&[4]));
        let head = tape.param(ParamId(3), random(&[1, 4, 1, 1], &mut rng).map(|v| v * scale));
        let h = tape.conv2d(xv, w, None, woundseg::tensor::ConvGeometry::same(3, 1, 1)).unwrap();
        let mut buffers = NormBuffers::new(4);
        let h = tape.batch_norm(h, g, b, &mut buffers, NormMode::Train).unwrap();
        let h = tape.relu6(h);
        let h = tape.pointwise_conv2d(h, head, None).unwrap();
        let p = tape.sigmoid(h);
        prop_assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let loss = tape.bce(p, &target).unwrap();
        prop_assert!(tape.value(loss).all_finite());
        let grads = tape.backward(loss).unwrap();
        prop_assert_eq!(grads.len(), 4);
        for (_, t) in grads.iter() {
            prop_assert!(t.all_finite());
        }
        prop_assert!(buffers.running_var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn adam_moments_track_parameter_shapes(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random(&[3, 2], &mut rng);
        let mut b = random(&[4], &mut rng);
        let mut state = AdamState::new(AdamConfig::default(), [&a, &b]);
        for _ in 0..steps {
            let ga = random(&[3, 2], &mut rng);
            let gb = random(&[4], &mut rng);
            adam_step(&mut [&mut a, &mut b], &[&ga, &gb], &mut state).unwrap();
        }
        prop_assert_eq!(state.t, steps as u64);
        prop_assert_eq!(state.m[0].shape(), a.shape());
        prop_assert_eq!(state.v[1].shape(), b.shape());
        prop_assert!(state.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }
}
