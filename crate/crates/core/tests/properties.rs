use cpe_core::{
    clifford::{correlation_map, fuse, geometric_product, scalar_inner, similarity_map, FusionParams, Multivector},
    conv::{conv2d, ConvSpec},
    filter::gaussian_blur3,
    frequency::{decompose, BandPair, LightUNet, LightUNetConfig},
    metrics::{psnr, ssim, SsimConfig},
    model::init_store,
    reconstruct::{
        enhance_illumination, extract_illumination, gain_from_activation, gamma_from_activation, reconstruct,
        reconstruct_unclamped,
    },
    resize::{resize, ResizeMode},
    rng::Lcg,
    tensor::{add, channel_max},
    EnhanceParams, OpCounter, Shape, Tensor,
};
use proptest::prelude::*;

fn shape_strategy(max_c: usize, max_hw: usize) -> impl Strategy<Value = Shape> {
    (1..=2usize, 1..=max_c, 1..=max_hw, 1..=max_hw).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn tensor_in(shape: Shape, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, shape.len()).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn tensor_strategy(max_c: usize, max_hw: usize, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    shape_strategy(max_c, max_hw).prop_flat_map(move |s| tensor_in(s, lo, hi))
}

fn mv() -> impl Strategy<Value = Multivector<f64>> {
    prop::array::uniform4(-10.0f64..10.0).prop_map(Multivector::from_components)
}

fn close(a: Multivector<f64>, b: Multivector<f64>, rel: f64) -> bool {
    let scale = 1.0 + a.components().iter().chain(&b.components()).fold(0.0f64, |m, v| m.max(v.abs()));
    a.components().iter().zip(b.components()).all(|(x, y)| (x - y).abs() <= rel * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    #[test]
    fn scalar_inner_is_scalar_part_of_reversed_product(a in mv(), b in mv()) {
        let si = scalar_inner(a, b);
        let gp = geometric_product(a, b.reversion()).s;
        prop_assert!((si - gp).abs() <= 1e-6 * (1.0 + si.abs()));
    }

    #[test]
    fn geometric_product_associative_and_distributive(a in mv(), b in mv(), c in mv()) {
        prop_assert!(close((a * b) * c, a * (b * c), 1e-9));
        prop_assert!(close(a * (b + c), a * b + a * c, 1e-9));
        prop_assert!(close((a + b) * c, a * c + b * c, 1e-9));
    }

    #[test]
    fn reversion_involution_and_norm(a in mv()) {
        prop_assert_eq!(a.reversion().reversion(), a);
        prop_assert!(scalar_inner(a, a) >= 0.0);
        prop_assert_eq!(scalar_inner(a, a) == 0.0, a == Multivector::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn similarity_strictly_inside_and_symmetric(
        (l, h) in (1..=4usize, 1..=4usize).prop_flat_map(|(hh, ww)| {
            let s = Shape::new(1, 12, hh, ww);
            (tensor_in(s, -30.0, 30.0), tensor_in(s, -30.0, 30.0))
        })
    ) {
        let s = similarity_map(&l, &h).unwrap();
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert_eq!(similarity_map(&h, &l).unwrap(), s);
    }

    #[test]
    fn fuse_is_bounded(
        (l, h, wl, wh, r1, r2) in (1..=3usize, 1..=5usize).prop_flat_map(|(c, hw)| {
            let s = Shape::new(1, c, hw, hw);
            let ws = Shape::new(12, c, 1, 1);
            (tensor_in(s, -2.0, 2.0), tensor_in(s, -2.0, 2.0), tensor_in(ws, -1.0, 1.0), tensor_in(ws, -1.0, 1.0), -3.0f32..3.0, -3.0f32..3.0)
        })
    ) {
        let params = FusionParams {
            proj_low: ConvSpec::same(wl, None, 1).unwrap(),
            proj_high: ConvSpec::same(wh, None, 1).unwrap(),
            raw_w1: r1,
            raw_w2: r2,
        };
        let (w1, w2) = params.weights();
        let bands = BandPair::new(l, h).unwrap();
        let f = fuse(&bands, &params, &mut OpCounter::default()).unwrap();
        for ((&fv, &lv), &hv) in f.data().iter().zip(bands.low.data()).zip(bands.high.data()) {
            prop_assert!(fv.abs() <= w1.max(w2) * (lv.abs() + hv.abs()) + 1e-6);
        }
    }

    #[test]
    fn blur_stays_within_channel_range(x in tensor_strategy(3, 9, -5.0, 5.0), sigma in 0.3f32..3.0) {
        let y = gaussian_blur3(&x, sigma).unwrap();
        let s = x.shape();
        for n in 0..s.batch {
            for c in 0..s.channels {
                let p = x.plane(n, c);
                let lo = p.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = p.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(y.plane(n, c).iter().all(|&v| v >= lo - 1e-5 && v <= hi + 1e-5));
            }
        }
    }

    #[test]
    fn decompose_is_exact_partition(x in tensor_strategy(3, 9, -1.0, 1.0)) {
        let (low, high) = decompose(&x, 1.0).unwrap();
        let sum = add(&low, &high).unwrap();
        // Two roundings (the subtraction and the re-addition), each at most
        // half an ulp of the larger operand.
        for ((&s, &v), (&l, &h)) in sum.data().iter().zip(x.data()).zip(low.data().iter().zip(high.data())) {
            let scale = v.abs().max(l.abs()).max(h.abs());
            prop_assert!((s - v).abs() <= f32::EPSILON * scale, "{} vs {}", s, v);
        }
    }

    #[test]
    fn conv_is_linear(
        (x, y, w, groups) in (1..=3usize, 1..=2usize, 1..=7usize).prop_flat_map(|(g, per, hw)| {
            let cin = g * per;
            let s = Shape::new(1, cin, hw, hw + 1);
            (tensor_in(s, -1.0, 1.0), tensor_in(s, -1.0, 1.0), tensor_in(Shape::new(2 * g, per, 3, 3), -1.0, 1.0), Just(g))
        }),
        alpha in -2.0f32..2.0, beta in -2.0f32..2.0,
    ) {
        let spec = ConvSpec::same(w, None, groups).unwrap();
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = conv2d(&mix, &spec).unwrap();
        let cx = conv2d(&x, &spec).unwrap();
        let cy = conv2d(&y, &spec).unwrap();
        let rhs = Tensor::new(cx.shape(), cx.data().iter().zip(cy.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
    }

    #[test]
    fn bilinear_identity_resize_is_exact(x in tensor_strategy(3, 12, -3.0, 3.0)) {
        let s = x.shape();
        prop_assert_eq!(resize(&x, s.height, s.width, ResizeMode::Bilinear).unwrap(), x);
    }

    #[test]
    fn retinex_invariants(
        x in tensor_strategy(3, 6, 0.001, 1.0).prop_filter("rgb", |t| t.shape().channels == 3),
        gamma_act in -20.0f32..20.0,
        gain_act in -20.0f32..20.0,
        bump in 0.0f32..0.5,
    ) {
        let illu = extract_illumination(&x);
        let p = EnhanceParams::uniform(illu.shape(), gamma_from_activation(gamma_act), gain_from_activation(gain_act));
        let enh = enhance_illumination(&illu, &p).unwrap();
        let out = reconstruct_unclamped(&x, &illu, &enh).unwrap();
        let s = x.shape();
        for n in 0..s.batch {
            for i in 0..s.plane() {
                let ratios: Vec<f32> = (0..3).map(|c| out.plane(n, c)[i] / x.plane(n, c)[i]).collect();
                prop_assert!(ratios.iter().all(|r| (r - ratios[0]).abs() <= 1e-5 * ratios[0].max(1.0)));
                let argmax = |t: &Tensor| (0..3).fold(0, |m, c| if t.plane(n, c)[i] > t.plane(n, m)[i] { c } else { m });
                prop_assert_eq!(argmax(&out), argmax(&x));
            }
        }
        // Larger gain never darkens any channel.
        let brighter = EnhanceParams { gamma_map: p.gamma_map.clone(), gain_map: p.gain_map.map(|g| g + bump) };
        let out2 = reconstruct_unclamped(&x, &illu, &enhance_illumination(&illu, &brighter).unwrap()).unwrap();
        prop_assert!(out2.data().iter().zip(out.data()).all(|(b, a)| b >= a));
        // G ≥ 1 with Γ ≤ 1 never darkens.
        let lift = EnhanceParams::uniform(illu.shape(), gamma_from_activation(gamma_act), 1.0 + bump);
        let lifted = reconstruct(&x, &illu, &enhance_illumination(&illu, &lift).unwrap()).unwrap();
        prop_assert!(lifted.data().iter().zip(x.data()).all(|(y, x)| *y >= x * (1.0 - 1e-6)));
    }

    #[test]
    fn bounded_maps_for_extreme_activations(a in prop_oneof![-1e6f32..1e6, -50.0f32..50.0, Just(1e6f32), Just(-1e6f32)]) {
        let g = gamma_from_activation(a);
        let k = gain_from_activation(a);
        prop_assert!(g > 0.15 && g < 1.0);
        prop_assert!(k > 0.8 && k < 2.5);
    }

    #[test]
    fn metrics_are_symmetric(
        (a, b) in (11..=14usize, 11..=14usize).prop_flat_map(|(h, w)| {
            let s = Shape::new(1, 3, h, w);
            (tensor_in(s, 0.0, 1.0), tensor_in(s, 0.0, 1.0))
        })
    ) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let cfg = SsimConfig::default();
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
    }
}

#[test]
fn channel_max_is_the_illumination() {
    let x = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, y, x| ((c + 2 * y + x) % 3) as f32 / 3.0).unwrap();
    assert_eq!(extract_illumination(&x), channel_max(&x));
}

#[test]
fn high_band_noise_decorrelates() {
    // Low features fixed, high features i.i.d. zero-mean: the pre-sigmoid
    // correlation averages to zero.
    let mut rng = Lcg::new(17);
    let s = Shape::new(1, 12, 100, 100);
    let low = Tensor::from_fn(s, |_, c, y, x| ((c * 7 + y * 3 + x) % 13) as f32 / 13.0 - 0.2).unwrap();
    let high = Tensor::from_fn(s, |_, _, _, _| rng.uniform(-1.0, 1.0) as f32).unwrap();
    let corr = correlation_map(&low, &high).unwrap();
    let n = corr.len() as f64;
    let mean = corr.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = corr.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 3.0 * (var / n).sqrt(), "mean {mean}, se {}", (var / n).sqrt());
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let base = Tensor::full(Shape::new(1, 3, 32, 32), 0.5f32);
    for seed in 0..5 {
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.03, 0.1, 0.3] {
            let mut rng = Lcg::new(seed);
            let noisy = base.map(|v| v + (rng.uniform(-1.0, 1.0) * amp) as f32);
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last, "seed {seed} amp {amp}");
            last = p;
        }
    }
}

fn bias_free_unet(depth: usize, seed: u64) -> LightUNet {
    let cfg = LightUNetConfig { base_channels: 4, depth, growth: 2, ..Default::default() };
    let mut specs = Vec::new();
    cfg.schema("", &mut specs);
    let net = LightUNet::load(&init_store(&specs, seed), "", cfg).unwrap();
    let blocks = net
        .blocks
        .iter()
        .map(|b| b.map_weights(|c| ConvSpec { bias: c.bias.as_ref().map(|v| vec![0.0; v.len()]), ..c.clone() }))
        .collect();
    LightUNet { blocks, ..net }
}

#[test]
fn relu_branch_is_positively_homogeneous() {
    let x = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| 0.1 + ((c + y * x) % 7) as f32 / 7.0).unwrap();
    // Input scaling: degree one at any depth.
    for depth in [0, 1, 2] {
        let net = bias_free_unet(depth, 5);
        let y = net.forward(&x, &mut OpCounter::default()).unwrap();
        let y2 = net.forward(&x.scale(2.0), &mut OpCounter::default()).unwrap();
        assert!(y2.max_abs_diff(&y.scale(2.0)).unwrap() <= 1e-5 * (1.0 + y.max_value()));
    }
    // Weight scaling: each of the two linear stages contributes one factor.
    let net = bias_free_unet(0, 6);
    let alpha = 1.5f32;
    let scaled = LightUNet {
        blocks: net.blocks.iter().map(|b| b.map_weights(|c| ConvSpec { weight: c.weight.scale(alpha), ..c.clone() })).collect(),
        ..net.clone()
    };
    let y = net.forward(&x, &mut OpCounter::default()).unwrap();
    let ys = scaled.forward(&x, &mut OpCounter::default()).unwrap();
    assert!(ys.max_abs_diff(&y.scale(alpha * alpha)).unwrap() <= 1e-5 * (1.0 + ys.max_value()));
}

#[test]
fn branch_output_shape_for_odd_sizes() {
    let net = bias_free_unet(2, 9);
    for (h, w) in [(16, 16), (17, 23), (31, 16), (40, 33)] {
        let y = net.forward(&Tensor::full(Shape::new(2, 3, h, w), 0.3), &mut OpCounter::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, h, w));
    }
}
