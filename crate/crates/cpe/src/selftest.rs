//! Oracle suites and golden-fixture replay behind `cpe selftest`.

use std::{
    fmt::Write as _,
    path::{Path, PathBuf},
    time::{Duration, Instant},
};

use cpe_core::{
    clifford::{geometric_product, scalar_inner, BLADES},
    conv::conv2d,
    filter::gaussian_blur3,
    frequency::{extract_bands, BandPair, LightUNet},
    gradcheck::{charbonnier_grad, fusion_gradcheck, GraphConfig},
    metrics::{psnr, ssim, SsimConfig},
    pyramid::{run_level, run_pyramid},
    reconstruct::{
        apply_retinex, enhance_full, enhance_illumination, extract_illumination, gain_from_activation,
        gamma_from_activation, params_from_activations, reconstruct_unclamped, GAIN_MIN, GAIN_SPAN, GAMMA_MIN,
        GAMMA_SPAN,
    },
    resize::resize,
    rng::Lcg,
    tensor::{channel_max, channel_mean},
    ConvSpec, EnhanceParams, FusionParams, Model, ModelConfig, Multivector, OpCounter, ParamStore, ResizeMode,
    Shape, StageCounters, Tensor,
};

use crate::{checkpoint::Fixture, oracle};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>, elapsed: Duration) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail: detail.into(),
            elapsed,
        }
    }
}

/// Tolerances and trial counts of the built-in suites.
pub const CLIFFORD_TRIALS: usize = 10_000;
pub const CLIFFORD_TOL: f64 = 1e-6;
pub const CLIFFORD_BUDGET: Duration = Duration::from_secs(1);
pub const ALGEBRA_TRIALS: usize = 1_000;
pub const RETINEX_PIXELS: usize = 100_000;
pub const RATIO_TOL: f64 = 1e-5;
pub const IDENTITY_TOL: f64 = 1e-6;
pub const KERNEL_CASES: usize = 200;
pub const KERNEL_TOL: f64 = 1e-5;
pub const KERNEL_BUDGET: Duration = Duration::from_secs(30);
pub const GRAD_SEEDS: u64 = 20;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-3;

fn random_mv(rng: &mut Lcg) -> Multivector<f64> {
    Multivector::from_components([
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
    ])
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Worst componentwise error of `a` against `b`, relative to the larger
/// magnitude component of either.
fn rel_mv(a: Multivector<f64>, b: Multivector<f64>) -> f64 {
    let (ca, cb) = (a.components(), b.components());
    let scale = ca.iter().chain(&cb).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    ca.iter().zip(&cb).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

/// Closed-form scalar inner product against the scalar part of `a · b†`,
/// the latter evaluated by the independent blade-bitmask product.
pub fn clifford_theorem(trials: usize) -> CheckResult {
    let t0 = Instant::now();
    let mut rng = Lcg::new(0xC1F0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (a, b) = (random_mv(&mut rng), random_mv(&mut rng));
        let closed = scalar_inner(a, b);
        let via_oracle = oracle::blade_product_mv(a, b.reversion()).s;
        let via_engine = geometric_product(a, b.reversion()).s;
        worst = worst.max(rel(closed, via_oracle)).max(rel(closed, via_engine));
    }
    let elapsed = t0.elapsed();
    let passed = worst <= CLIFFORD_TOL && elapsed < CLIFFORD_BUDGET;
    CheckResult::new(
        "clifford scalar-inner theorem",
        passed,
        format!("{trials} pairs, max rel err {worst:.2e}, {:.0} ms", elapsed.as_secs_f64() * 1e3),
        elapsed,
    )
}

pub fn algebra_laws(trials: usize) -> CheckResult {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let basis = |i: usize| {
        let mut c = [0.0; BLADES];
        c[i] = 1.0;
        Multivector::from_components(c)
    };
    let one = basis(0);
    let neg_one = Multivector::scalar(-1.0);
    if geometric_product(basis(1), basis(1)) != one {
        failures.push(String::from("e1² ≠ 1"));
    }
    if geometric_product(basis(2), basis(2)) != one {
        failures.push(String::from("e2² ≠ 1"));
    }
    if geometric_product(basis(3), basis(3)) != neg_one {
        failures.push(String::from("e12² ≠ −1"));
    }
    let mut rng = Lcg::new(0xA15E);
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let (a, b, c) = (random_mv(&mut rng), random_mv(&mut rng), random_mv(&mut rng));
        let gp = geometric_product::<f64>;
        worst[0] = worst[0].max(rel_mv(gp(gp(a, b), c), gp(a, gp(b, c))));
        worst[1] = worst[1].max(rel_mv(gp(a, b + c), gp(a, b) + gp(a, c)));
        worst[1] = worst[1].max(rel_mv(gp(a + b, c), gp(a, c) + gp(b, c)));
        if a.reversion().reversion() != a {
            worst[2] = f64::INFINITY;
        }
        worst[3] = worst[3].max(rel_mv(gp(a, b), oracle::blade_product_mv(a, b)));
    }
    for (name, w) in ["associativity", "distributivity", "reversion involution", "product vs blade oracle"]
        .iter()
        .zip(worst)
    {
        if w > CLIFFORD_TOL {
            failures.push(format!("{name}: {w:.2e}"));
        }
    }
    let elapsed = t0.elapsed();
    let detail = if failures.is_empty() {
        format!(
            "{trials} triples, assoc {:.1e}, distrib {:.1e}, vs oracle {:.1e}",
            worst[0], worst[1], worst[3]
        )
    } else {
        failures.join("; ")
    };
    CheckResult::new("clifford algebra laws", failures.is_empty(), detail, elapsed)
}

fn random_tensor(rng: &mut Lcg, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform(lo, hi) as f32).expect("finite values")
}

fn ratio_constancy(pixels: usize, rng: &mut Lcg) -> Result<f64, String> {
    let width = 1000.min(pixels);
    let shape = Shape::new(1, 3, pixels.div_ceil(width), width);
    let x = random_tensor(rng, shape, 1e-3, 1.0);
    let illu = extract_illumination(&x);
    let p = EnhanceParams {
        gamma_map: random_tensor(rng, illu.shape(), GAMMA_MIN, GAMMA_MIN + GAMMA_SPAN),
        gain_map: random_tensor(rng, illu.shape(), GAIN_MIN, GAIN_MIN + GAIN_SPAN),
    };
    let enh = enhance_illumination(&illu, &p).map_err(|e| e.to_string())?;
    let out = reconstruct_unclamped(&x, &illu, &enh).map_err(|e| e.to_string())?;
    let out_max = channel_max(&out);
    let mut worst = 0.0f64;
    for c in 0..3 {
        let planes = x.plane(0, c).iter().zip(out.plane(0, c));
        for (((&xi, &oi), &xm), &om) in planes.zip(illu.data()).zip(out_max.data()) {
            let before = f64::from(xi) / f64::from(xm);
            let after = f64::from(oi) / f64::from(om);
            worst = worst.max((before - after).abs());
        }
    }
    Ok(worst)
}

fn extreme_bounds(rng: &mut Lcg) -> Result<(), String> {
    let mut acts: Vec<f32> = vec![-1e6, 1e6, 0.0, -1e3, 1e3, -50.0, 50.0, f32::MIN_POSITIVE, -f32::MIN_POSITIVE];
    acts.extend((0..4096).map(|_| {
        let mag = 10f64.powf(rng.uniform(-6.0, 6.0));
        (if rng.next_f64() < 0.5 { -mag } else { mag }) as f32
    }));
    let n = acts.len();
    let t = Tensor::new(Shape::new(1, 1, 1, n), acts).expect("finite");
    let p = params_from_activations(&t, &t);
    let g_ok = |v: f32| GAMMA_MIN < f64::from(v) && f64::from(v) < GAMMA_MIN + GAMMA_SPAN;
    let k_ok = |v: f32| GAIN_MIN < f64::from(v) && f64::from(v) < GAIN_MIN + GAIN_SPAN;
    for ((&a, &g), &k) in t.data().iter().zip(p.gamma_map.data()).zip(p.gain_map.data()) {
        if !g_ok(g) || !g_ok(gamma_from_activation(a)) {
            return Err(format!("gamma {g} out of bounds at activation {a:e}"));
        }
        if !k_ok(k) || !k_ok(gain_from_activation(a)) {
            return Err(format!("gain {k} out of bounds at activation {a:e}"));
        }
    }
    Ok(())
}

fn identity_path(rng: &mut Lcg) -> Result<f64, String> {
    let x = random_tensor(rng, Shape::new(1, 3, 64, 64), 0.0, 1.0);
    let p = EnhanceParams::uniform(x.shape(), 1.0, 1.0);
    let out = apply_retinex(&x, &p, &mut OpCounter::default()).map_err(|e| e.to_string())?;
    Ok(f64::from(out.max_abs_diff(&x).map_err(|e| e.to_string())?))
}

pub fn retinex_invariants(pixels: usize) -> CheckResult {
    let t0 = Instant::now();
    let mut rng = Lcg::new(0x2E71);
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    match ratio_constancy(pixels, &mut rng) {
        Ok(w) if w <= RATIO_TOL => notes.push(format!("ratio err {w:.1e} on {pixels} px")),
        Ok(w) => failures.push(format!("channel-ratio constancy: {w:.2e} > {RATIO_TOL:e}")),
        Err(e) => failures.push(format!("channel-ratio constancy: {e}")),
    }
    match extreme_bounds(&mut rng) {
        Ok(()) => notes.push(String::from("Γ/G strictly bounded over ±1e6")),
        Err(e) => failures.push(format!("Γ/G bounds: {e}")),
    }
    match identity_path(&mut rng) {
        Ok(w) if w <= IDENTITY_TOL => notes.push(format!("Γ=G=1 err {w:.1e}")),
        Ok(w) => failures.push(format!("Γ=G=1 identity: {w:.2e} > {IDENTITY_TOL:e}")),
        Err(e) => failures.push(format!("Γ=G=1 identity: {e}")),
    }
    let passed = failures.is_empty();
    let detail = if passed { notes.join(", ") } else { failures.join("; ") };
    CheckResult::new("retinex invariants", passed, detail, t0.elapsed())
}

fn max_diff(engine: &Tensor, oracle: &Tensor<f64>) -> f64 {
    if engine.shape() != oracle.shape() {
        return f64::INFINITY;
    }
    engine
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(&a, &b)| (f64::from(a) - b).abs())
        .fold(0.0, f64::max)
}

fn pick(rng: &mut Lcg, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn conv_case(rng: &mut Lcg) -> Result<f64, cpe_core::Error> {
    let groups = pick(rng, 1, 3);
    let ipg = pick(rng, 1, 3);
    let opg = pick(rng, 1, 3);
    let k = [1, 3, 5][rng.below(3)];
    let stride = pick(rng, 1, 2);
    let padding = pick(rng, 0, k / 2 + 1);
    let h = pick(rng, k, k + 8);
    let w = pick(rng, k, k + 8);
    let batch = pick(rng, 1, 2);
    let x = random_tensor(rng, Shape::new(batch, groups * ipg, h, w), -1.0, 1.0);
    let weight = random_tensor(rng, Shape::new(groups * opg, ipg, k, k), -1.0, 1.0);
    let bias: Option<Vec<f32>> = (rng.next_f64() < 0.5)
        .then(|| (0..groups * opg).map(|_| rng.uniform(-1.0, 1.0) as f32).collect());
    let spec = ConvSpec::new(weight.clone(), bias.clone(), groups, stride, padding)?;
    let got = conv2d(&x, &spec)?;
    let bias64: Option<Vec<f64>> = bias.map(|b| b.iter().map(|&v| f64::from(v)).collect());
    let want = oracle::conv2d(&x.cast(), &weight.cast(), bias64.as_deref(), groups, stride, padding);
    Ok(max_diff(&got, &want))
}

fn blur_case(rng: &mut Lcg) -> Result<f64, cpe_core::Error> {
    let shape = Shape::new(pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 12), pick(rng, 1, 12));
    let x = random_tensor(rng, shape, -1.0, 1.0);
    let sigma = rng.uniform(0.3, 3.0) as f32;
    let got = gaussian_blur3(&x, sigma)?;
    Ok(max_diff(&got, &oracle::gaussian_blur3(&x.cast(), f64::from(sigma))))
}

fn resize_case(rng: &mut Lcg) -> Result<f64, cpe_core::Error> {
    let mode = [ResizeMode::Bilinear, ResizeMode::Bicubic, ResizeMode::Area][rng.below(3)];
    let shape = Shape::new(1, pick(rng, 1, 3), pick(rng, 1, 12), pick(rng, 1, 12));
    let (oh, ow) = (pick(rng, 1, 24), pick(rng, 1, 24));
    let x = random_tensor(rng, shape, -1.0, 1.0);
    let got = resize(&x, oh, ow, mode)?;
    Ok(max_diff(&got, &oracle::resize(&x.cast(), oh, ow, mode)))
}

fn reduction_case(rng: &mut Lcg) -> Result<f64, cpe_core::Error> {
    let shape = Shape::new(pick(rng, 1, 2), pick(rng, 1, 8), pick(rng, 1, 10), pick(rng, 1, 10));
    let x = random_tensor(rng, shape, -1.0, 1.0);
    let x64 = x.cast();
    Ok(max_diff(&channel_mean(&x), &oracle::channel_mean(&x64))
        .max(max_diff(&channel_max(&x), &oracle::channel_max(&x64))))
}

type KernelCase = fn(&mut Lcg) -> Result<f64, cpe_core::Error>;

/// Engine kernels (f32) against the brute-force f64 oracles.
pub fn kernel_oracles(cases: usize) -> Vec<CheckResult> {
    let suites: [(&str, KernelCase); 4] = [
        ("kernel oracle: conv2d", conv_case),
        ("kernel oracle: gaussian blur", blur_case),
        ("kernel oracle: resize", resize_case),
        ("kernel oracle: channel reductions", reduction_case),
    ];
    let mut rng = Lcg::new(0x0EAC);
    suites
        .iter()
        .map(|(name, case)| {
            let t0 = Instant::now();
            let mut worst = 0.0f64;
            let mut error = None;
            for i in 0..cases {
                match case(&mut rng) {
                    Ok(d) => worst = worst.max(d),
                    Err(e) => {
                        error = Some(format!("case {i}: {e}"));
                        break;
                    }
                }
            }
            let elapsed = t0.elapsed();
            let passed = error.is_none() && worst <= KERNEL_TOL && elapsed < KERNEL_BUDGET;
            let detail = error.unwrap_or_else(|| format!("{cases} cases, max |Δ| {worst:.2e}"));
            CheckResult::new(*name, passed, detail, elapsed)
        })
        .collect()
}

pub fn gradient_checks(seeds: u64) -> CheckResult {
    let t0 = Instant::now();
    let zero_grad = {
        let t = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.37);
        charbonnier_grad(&t, &t, 1e-3).map(|g| g.data().iter().all(|&v| v == 0.0))
    };
    let report = fusion_gradcheck(0..seeds, GraphConfig::default(), GRAD_STEP);
    let elapsed = t0.elapsed();
    match (report, zero_grad) {
        (Ok(r), Ok(zero)) => {
            let passed = r.max_rel_error < GRAD_TOL && r.checked > 0 && zero;
            let mut detail = format!(
                "{seeds} seeds, {} coords checked, {} skipped at kinks, max rel err {:.2e}",
                r.checked, r.skipped, r.max_rel_error
            );
            if let Some(w) = r.worst.filter(|_| !passed) {
                detail.push_str(&format!(" at {w}"));
            }
            if !zero {
                detail.push_str("; Charbonnier gradient nonzero at target");
            }
            CheckResult::new("gradient checks", passed, detail, elapsed)
        }
        (Err(e), _) | (_, Err(e)) => CheckResult::new("gradient checks", false, e.to_string(), elapsed),
    }
}

pub fn metric_sanity() -> CheckResult {
    let t0 = Instant::now();
    let run = || -> Result<Vec<String>, cpe_core::Error> {
        let mut fails = Vec::new();
        let px = |v: f32| Tensor::new(Shape::new(1, 1, 1, 1), vec![v]);
        let p = psnr(&px(0.0)?, &px(0.5)?)?;
        if (p - 6.0206).abs() > 1e-4 {
            fails.push(format!("psnr(0, 0.5) = {p}"));
        }
        let mut rng = Lcg::new(0x3E7);
        let a = random_tensor(&mut rng, Shape::new(1, 3, 32, 32), 0.0, 0.9);
        let p = psnr(&a, &a)?;
        if p != 100.0 {
            fails.push(format!("psnr(a, a) = {p}"));
        }
        let p = psnr(&a, &a.map(|v| v + 0.1))?;
        if (p - 20.0).abs() > 1e-4 {
            fails.push(format!("psnr with +0.1 offset = {p}"));
        }
        let cfg = SsimConfig::default();
        let s = ssim(&a, &a, &cfg)?;
        if s != 1.0 {
            fails.push(format!("ssim(a, a) = {s:?}"));
        }
        let bin = a.map(|v| if v > 0.45 { 1.0 } else { 0.0 });
        let s = ssim(&bin, &bin.map(|v| 1.0 - v), &cfg)?;
        if !(s < 0.0) {
            fails.push(format!("ssim of inverted binary image = {s}"));
        }
        Ok(fails)
    };
    let (passed, detail) = match run() {
        Ok(f) if f.is_empty() => (true, String::from("psnr 6.0206 / 100 cap / 20 dB, ssim(a,a) = 1, inverted < 0")),
        Ok(f) => (false, f.join("; ")),
        Err(e) => (false, e.to_string()),
    };
    CheckResult::new("metric sanity", passed, detail, t0.elapsed())
}

/// All built-in suites at their full sizes.
pub fn run_builtin() -> Vec<CheckResult> {
    let mut out = vec![
        clifford_theorem(CLIFFORD_TRIALS),
        algebra_laws(ALGEBRA_TRIALS),
        retinex_invariants(RETINEX_PIXELS),
    ];
    out.extend(kernel_oracles(KERNEL_CASES));
    out.push(gradient_checks(GRAD_SEEDS));
    out.push(metric_sanity());
    out
}

fn attr<T: std::str::FromStr>(f: &Fixture, key: &str, default: T) -> Result<T, String> {
    match f.attrs.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| format!("attribute {key}={v:?} does not parse")),
    }
}

fn attr_bool(f: &Fixture, key: &str, default: bool) -> Result<bool, String> {
    match f.attrs.get(key).map(String::as_str) {
        None => Ok(default),
        Some("1" | "true") => Ok(true),
        Some("0" | "false") => Ok(false),
        Some(v) => Err(format!("attribute {key}={v:?} is not a boolean")),
    }
}

/// Model configuration from fixture attributes, defaulting missing keys.
pub fn fixture_model_config(f: &Fixture) -> Result<ModelConfig, String> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        base_size: attr(f, "base_size", d.base_size)?,
        levels: attr(f, "levels", d.levels)?,
        base_channels: attr(f, "base_channels", d.base_channels)?,
        depth: attr(f, "depth", d.depth)?,
        growth: attr(f, "growth", d.growth)?,
        head_channels: attr(f, "head_channels", d.head_channels)?,
        head_outputs: attr(f, "head_outputs", d.head_outputs)?,
        sigma: attr(f, "sigma", d.sigma)?,
        proj_bias: attr_bool(f, "proj_bias", d.proj_bias)?,
    })
}

fn tensor(f: &Fixture, name: &str) -> Result<Tensor, String> {
    f.tensors
        .require(name)
        .and_then(|t| t.to_tensor())
        .map_err(|e| format!("tensor {name}: {e}"))
}

fn scalar_out(v: f64) -> Tensor {
    Tensor::new(Shape::new(1, 1, 1, 1), vec![v as f32]).expect("finite metric")
}

fn resize_mode(name: &str) -> Result<ResizeMode, String> {
    match name {
        "bilinear" => Ok(ResizeMode::Bilinear),
        "bicubic" => Ok(ResizeMode::Bicubic),
        "area" => Ok(ResizeMode::Area),
        other => Err(format!("unknown resize mode {other:?}")),
    }
}

/// Run the operation a fixture describes; returns `(expected tensor name, output)` pairs.
pub fn evaluate_fixture(f: &Fixture) -> Result<Vec<(String, Tensor)>, String> {
    let params: ParamStore = f.tensors.subtree("params/");
    let e = |e: cpe_core::Error| e.to_string();
    let single = |t: Tensor| Ok(vec![(String::from("expected"), t)]);
    let cfg = fixture_model_config(f)?;
    match f.op.as_str() {
        "conv2d" => {
            let weight = tensor(f, "params/weight")?;
            let bias = params.get("bias").map(|b| b.data.clone());
            let spec = ConvSpec::new(
                weight,
                bias,
                attr(f, "groups", 1)?,
                attr(f, "stride", 1)?,
                attr(f, "padding", 0)?,
            )
            .map_err(e)?;
            single(conv2d(&tensor(f, "input")?, &spec).map_err(e)?)
        }
        "gaussian_blur3" => single(gaussian_blur3(&tensor(f, "input")?, attr(f, "sigma", 1.0f32)?).map_err(e)?),
        "resize" => {
            let mode = resize_mode(f.attrs.get("mode").map_or("bilinear", String::as_str))?;
            let out = resize(&tensor(f, "input")?, attr(f, "out_h", 0)?, attr(f, "out_w", 0)?, mode);
            single(out.map_err(e)?)
        }
        "ssim" => single(scalar_out(
            ssim(&tensor(f, "input/a")?, &tensor(f, "input/b")?, &SsimConfig::default()).map_err(e)?,
        )),
        "psnr" => single(scalar_out(psnr(&tensor(f, "input/a")?, &tensor(f, "input/b")?).map_err(e)?)),
        "light_unet" => {
            let net = LightUNet::load(&params, "", cfg.unet_config()).map_err(e)?;
            single(net.forward(&tensor(f, "input")?, &mut OpCounter::default()).map_err(e)?)
        }
        "extract_bands" => {
            let low = LightUNet::load(&params, "low/", cfg.unet_config()).map_err(e)?;
            let high = LightUNet::load(&params, "high/", cfg.unet_config()).map_err(e)?;
            let b = extract_bands(&tensor(f, "input")?, &low, &high, cfg.sigma, &mut OpCounter::default())
                .map_err(e)?;
            Ok(vec![(String::from("expected/low"), b.low), (String::from("expected/high"), b.high)])
        }
        "fuse" => {
            let fp = FusionParams::load(&params, "", cfg.base_channels, cfg.proj_bias).map_err(e)?;
            let bands = BandPair::new(tensor(f, "input/low")?, tensor(f, "input/high")?).map_err(e)?;
            single(cpe_core::clifford::fuse(&bands, &fp, &mut OpCounter::default()).map_err(e)?)
        }
        "pyramid_level" => {
            let i: usize = attr(f, "level", 0)?;
            let level = Model::load_level(&cfg, &params, i).map_err(e)?;
            let (feat, next) = run_level(
                &tensor(f, "input")?,
                i,
                &level,
                &cfg.pyramid_config(),
                &mut OpCounter::default(),
            )
            .map_err(e)?;
            let mut out = vec![(String::from("expected/feature"), feat)];
            out.extend(next.map(|s| (String::from("expected/state"), s)));
            Ok(out)
        }
        "run_pyramid" => {
            let model = Model::from_store(cfg, &params).map_err(e)?;
            let p = run_pyramid(&tensor(f, "input")?, &model, &mut StageCounters::default()).map_err(e)?;
            let mut out: Vec<_> = p
                .features
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("expected/level{i}"), t))
                .collect();
            out.push((String::from("expected/native_concat"), p.native_concat));
            Ok(out)
        }
        "enhance_full" => {
            let model = Model::from_store(cfg, &params).map_err(e)?;
            single(enhance_full(&tensor(f, "input")?, &model).map_err(e)?)
        }
        other => Err(format!("unknown fixture op {other:?}")),
    }
}

/// Compare every `expected*` tensor in the fixture with the engine output.
pub fn check_fixture(f: &Fixture) -> Result<String, String> {
    let produced = evaluate_fixture(f)?;
    let tol = f64::from(f.tolerance);
    let mut compared = 0;
    let mut worst = 0.0f64;
    for (name, stored) in f.tensors.iter() {
        if name != "expected" && !name.starts_with("expected/") {
            continue;
        }
        let want = stored.to_tensor().map_err(|e| format!("tensor {name}: {e}"))?;
        let (_, got) = produced
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| format!("tensor {name}: op {} produces no such output", f.op))?;
        if got.shape() != want.shape() {
            return Err(format!("tensor {name}: shape {} vs expected {}", got.shape(), want.shape()));
        }
        let d = f64::from(got.max_abs_diff(&want).map_err(|e| e.to_string())?);
        if !(d <= tol) {
            return Err(format!("tensor {name}: max |Δ| {d:.3e} exceeds tolerance {tol:e}"));
        }
        worst = worst.max(d);
        compared += 1;
    }
    if compared == 0 {
        return Err(String::from("fixture holds no expected tensors"));
    }
    Ok(format!("{compared} tensor(s), max |Δ| {worst:.2e} ≤ {tol:e}"))
}

/// `*.bin` files in `dir`, sorted by name.
pub fn fixture_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn run_fixtures(dir: &Path) -> Vec<CheckResult> {
    let files = match fixture_files(dir) {
        Ok(f) => f,
        Err(e) => {
            return vec![CheckResult::new(
                format!("fixtures in {}", dir.display()),
                false,
                format!("cannot list directory: {e}"),
                Duration::ZERO,
            )]
        }
    };
    files
        .iter()
        .map(|path| {
            let t0 = Instant::now();
            let name = format!(
                "fixture {}",
                path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
            );
            let outcome = Fixture::load(path)
                .map_err(|e| format!("unreadable: {e}"))
                .and_then(|f| check_fixture(&f));
            match outcome {
                Ok(d) => CheckResult::new(name, true, d, t0.elapsed()),
                Err(d) => CheckResult::new(name, false, d, t0.elapsed()),
            }
        })
        .collect()
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.chars().count()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{}  {:<width$}  {:>9.1} ms  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64() * 1e3,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(s, "{} checks, {} failed", results.len(), failed);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(clifford_theorem(500).passed);
        assert!(algebra_laws(200).passed);
        assert!(retinex_invariants(5_000).passed);
        assert!(metric_sanity().passed);
        for r in kernel_oracles(40) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn table_counts_failures() {
        let rows = [
            CheckResult::new("a", true, "", Duration::ZERO),
            CheckResult::new("b", false, "broken", Duration::ZERO),
        ];
        let t = render_table(&rows);
        assert!(t.contains("FAIL  b"));
        assert!(t.ends_with("2 checks, 1 failed\n"));
    }
}
