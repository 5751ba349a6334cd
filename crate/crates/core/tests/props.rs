//! Property tests for the numeric invariants.

use proptest::prelude::*;

use smbea_core::attack::{adam_step, normalize_gradient, schedule_bounds};
use smbea_core::graph::Graph;
use smbea_core::losses::kl_div;
use smbea_core::tensor::Tensor;

fn tensor_strategy(max_c: usize, max_hw: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(move |(c, h, w)| {
        prop::collection::vec(lo..hi, c * h * w)
            .prop_map(move |data| Tensor::new(vec![c, h, w], data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_maps_are_distributions(t in tensor_strategy(4, 6, -5.0, 5.0)) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = g.softmax2d(x).unwrap();
        let hw = t.shape()[1] * t.shape()[2];
        for ch in 0..t.shape()[0] {
            let slice = &g.value(s).data()[ch * hw..(ch + 1) * hw];
            let sum: f64 = slice.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(slice.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(t in tensor_strategy(3, 5, -3.0, 3.0), c in -50.0..50.0f64) {
        let mut g = Graph::new();
        let a = g.constant(t.clone());
        let b = g.constant(t.map(|v| v + c));
        let sa = g.softmax2d(a).unwrap();
        let sb = g.softmax2d(b).unwrap();
        let diff = smbea_core::tensor::max_abs_diff(g.value(sa), g.value(sb));
        prop_assert!(diff < 1e-9, "shift changed softmax by {diff}");
    }

    #[test]
    fn normalized_gradient_cancels_positive_scales(
        data in prop::collection::vec(-10.0..10.0f64, 1..128),
        c in prop_oneof![1e-6..1e6f64, Just(1e-3), Just(1e3)],
    ) {
        let g = Tensor::new(vec![data.len()], data).unwrap();
        let a = normalize_gradient(&g);
        let b = normalize_gradient(&g.map(|v| v * c));
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(1e-12);
            prop_assert!((x - y).abs() / denom < 1e-9, "{x} vs {y} at scale {c}");
        }
        // Unit L1 norm unless the gradient was all zeros.
        let n: f64 = a.data().iter().map(|v| v.abs()).sum();
        if g.data().iter().any(|&v| v != 0.0) {
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_dilation_one_matches_reference_bits(
        seed in 0u64..1000,
        stride in 1usize..=2,
        padding in 0usize..=2,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let input = mk(vec![2, 6, 6]);
        let kernel = mk(vec![3, 2, 3, 3]);
        let bias = mk(vec![3]);

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let k = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        let y = g.conv2d(x, k, b, stride, padding, 1).unwrap();

        // Direct dilation-free reference.
        let (h, w, kk) = (6usize, 6usize, 3usize);
        let oh = (h + 2 * padding - kk) / stride + 1;
        let ow = (w + 2 * padding - kk) / stride + 1;
        let mut want = Tensor::zeros(vec![3, oh, ow]);
        for oc in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += input.at3(ic, iy as usize, ix as usize)
                                        * kernel.data()[((oc * 2 + ic) * kk + ky) * kk + kx];
                                }
                            }
                        }
                    }
                    want.set3(oc, oy, ox, acc);
                }
            }
        }
        prop_assert_eq!(g.value(y).data(), want.data());
    }

    #[test]
    fn tsr_roundtrip_preserves_bits(
        data in prop::collection::vec(-1e12..1e12f64, 1..64),
    ) {
        let t = Tensor::new(vec![data.len()], data).unwrap();
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        let back = Tensor::read_tsr(&mut buf.as_slice()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn schedule_monotone_with_decaying_increments(
        t1 in 1e-4..1e-1f64,
        beta3 in 0.05..0.999f64,
        n in 2usize..12,
    ) {
        let bounds = schedule_bounds(t1, beta3, n);
        prop_assert_eq!(bounds.len(), n);
        let mut prev_inc = f64::INFINITY;
        for w in bounds.windows(2) {
            let inc = w[1] - w[0];
            prop_assert!(inc > 0.0, "bounds must strictly increase");
            prop_assert!(inc < prev_inc, "increments must strictly decay");
            prev_inc = inc;
        }
    }

    #[test]
    fn kl_is_nonnegative_and_identity_only_at_equality(
        p in tensor_strategy(2, 4, 0.01, 1.0),
        q in tensor_strategy(2, 4, 0.01, 1.0),
    ) {
        let same = kl_div(&p, &p, 1e-8).unwrap();
        prop_assert!(same.abs() < 1e-12);
        if p.same_shape(&q) {
            let kl = kl_div(&p, &q, 1e-8).unwrap();
            prop_assert!(kl >= -1e-12);
            if smbea_core::tensor::max_abs_diff(&p, &q) > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn adam_step_emits_valid_images(
        adv in tensor_strategy(1, 6, 0.0, 1.0),
        scale in 0.1..100.0f64,
    ) {
        let m = adv.map(|v| (v * 17.0).sin() * scale);
        let v = m.map(|x| x * x * 0.5 + 1e-12);
        let out = adam_step(&adv, &m, &v, 2e-4, 1e-8);
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn bilinear_preserves_constant_maps(
        value in 0.0..1.0f64,
        oh in 1usize..12,
        ow in 1usize..12,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![2, 4, 5], value));
        let y = g.bilinear_resize(x, oh, ow).unwrap();
        for &v in g.value(y).data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_stay_finite(
        t in tensor_strategy(2, 5, 0.0, 1.0),
    ) {
        let mut g = Graph::new();
        let x = g.variable(t.clone());
        let s = g.sigmoid(x);
        let sm = g.softmax2d(s).unwrap();
        let r = g.relu(sm);
        let m = g.mean(r);
        g.backward(m).unwrap();
        prop_assert!(g.value(sm).all_finite());
        prop_assert!(g.grad(x).unwrap().all_finite());
    }
}
