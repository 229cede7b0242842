//! Reverse-mode gradients for the fusion → heads → Retinex → Charbonnier
//! subgraph, and a central-difference harness to verify them.
//!
//! The forward pass reuses the engine kernels in `f64`; backward passes are
//! written out by hand. Graphs expose their parameters (and differentiable
//! inputs) as one flat vector so [`fd_check`] can perturb each coordinate.

use alloc::{format, string::String, vec::Vec};

use crate::{
    clifford::{aggregate, similarity_map, FusionParams, FIELD_CHANNELS, MANIFOLDS},
    conv::{conv2d, ConvSpec},
    counter::OpCounter,
    frequency::BandPair,
    reconstruct::{
        enhance_illumination, extract_illumination, params_from_activations, reconstruct_unclamped, EnhanceParams,
        Head, HeadParams, GAIN_MIN, GAIN_SPAN, GAMMA_MIN, GAMMA_SPAN, ILLUMINATION_EPS,
    },
    rng::Lcg,
    tensor::{channel_mean, concat_channels, sigmoid_scalar},
    Error, Real, Result, Shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CharbonnierLoss {
    pub epsilon: f64,
}

impl Default for CharbonnierLoss {
    fn default() -> Self {
        CharbonnierLoss { epsilon: 1e-3 }
    }
}

impl CharbonnierLoss {
    pub fn value<T: Real>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        charbonnier(pred, target, T::of(self.epsilon))
    }

    pub fn gradient<T: Real>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        charbonnier_grad(pred, target, T::of(self.epsilon))
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `mean(sqrt((pred − target)² + ε²))`.
pub fn charbonnier<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    same_shape("charbonnier", pred, target)?;
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &t)| acc + ((p - t) * (p - t) + eps * eps).sqrt());
    Ok(sum / T::of(pred.len() as f64))
}

/// `∂charbonnier/∂pred`; exactly zero wherever `pred == target`.
pub fn charbonnier_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    same_shape("charbonnier", pred, target)?;
    let n = T::of(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let r = p - t;
            if r == T::zero() {
                T::zero()
            } else {
                r / ((r * r + eps * eps).sqrt() * n)
            }
        })
        .collect();
    Ok(Tensor::from_raw(pred.shape(), data))
}

/// A value and its accumulated adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor<T: Real = f64> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> DualTensor<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        DualTensor { value, grad }
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        same_shape("accumulate", &self.value, g)?;
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// Adjoints of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T: Real = f64> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {} vs output {out_shape}", grad_out.shape()),
        ));
    }
    let s = input.shape();
    let (kh, kw) = spec.kernel_size();
    let out_per_group = spec.out_channels() / spec.groups;
    let in_per_group = spec.in_per_group();
    let (pad, stride) = (spec.padding as isize, spec.stride);
    let mut d_in = Tensor::zeros(s);
    let mut d_w = Tensor::zeros(spec.weight.shape());
    let w = spec.weight.data();
    for n in 0..s.batch {
        for oc in 0..spec.out_channels() {
            let g = grad_out.plane(n, oc);
            let group = oc / out_per_group;
            for icg in 0..in_per_group {
                let ic = group * in_per_group + icg;
                let wbase = (oc * in_per_group + icg) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut dw = T::zero();
                        for oy in 0..out_shape.height {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= s.height as isize {
                                continue;
                            }
                            for ox in 0..out_shape.width {
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if ix < 0 || ix >= s.width as isize {
                                    continue;
                                }
                                let gv = g[oy * out_shape.width + ox];
                                let idx = iy as usize * s.width + ix as usize;
                                dw = dw + gv * input.plane(n, ic)[idx];
                                let di = &mut d_in.plane_mut(n, ic)[idx];
                                *di = *di + gv * w[wbase + ky * kw + kx];
                            }
                        }
                        let slot = &mut d_w.data_mut()[wbase + ky * kw + kx];
                        *slot = *slot + dw;
                    }
                }
            }
        }
    }
    let bias = spec.bias.as_ref().map(|b| {
        (0..b.len())
            .map(|oc| {
                (0..s.batch).fold(T::zero(), |acc, n| {
                    grad_out.plane(n, oc).iter().fold(acc, |a, &v| a + v)
                })
            })
            .collect()
    });
    Ok(ConvGrads {
        input: d_in,
        weight: d_w,
        bias,
    })
}

/// `σ'(x) = σ(x)(1 − σ(x))`.
pub fn sigmoid_grad<T: Real>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() - s)
}

/// Intermediate values of one fusion module kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FusionCache<T: Real = f64> {
    pub low12: Tensor<T>,
    pub high12: Tensor<T>,
    pub s_map: Tensor<T>,
    pub output: Tensor<T>,
}

pub fn fusion_forward<T: Real>(bands: &BandPair<T>, params: &FusionParams<T>) -> Result<FusionCache<T>> {
    let low12 = conv2d(&bands.low, &params.proj_low)?;
    let high12 = conv2d(&bands.high, &params.proj_high)?;
    let s_map = similarity_map(&low12, &high12)?;
    let output = aggregate(bands, params.weights(), &s_map)?;
    Ok(FusionCache {
        low12,
        high12,
        s_map,
        output,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads<T: Real = f64> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
    pub proj_low: ConvGrads<T>,
    pub proj_high: ConvGrads<T>,
    pub raw_w1: T,
    pub raw_w2: T,
}

pub fn backward_fusion<T: Real>(
    bands: &BandPair<T>,
    params: &FusionParams<T>,
    cache: &FusionCache<T>,
    d_out: &Tensor<T>,
) -> Result<FusionGrads<T>> {
    let s = bands.low.shape();
    same_shape("backward_fusion", &bands.low, d_out)?;
    let (w1, w2) = params.weights();
    let mut d_low = Tensor::zeros(s);
    let mut d_high = Tensor::zeros(s);
    let mut d_s: Tensor<T> = Tensor::zeros(s.with_channels(1));
    let (mut dw1, mut dw2) = (T::zero(), T::zero());
    for n in 0..s.batch {
        let mask = cache.s_map.plane(n, 0);
        for c in 0..s.channels {
            let (l, h, g) = (bands.low.plane(n, c), bands.high.plane(n, c), d_out.plane(n, c));
            for i in 0..s.plane() {
                let m = mask[i];
                dw1 = dw1 + g[i] * l[i] * m;
                dw2 = dw2 + g[i] * h[i] * (T::one() - m);
                d_low.plane_mut(n, c)[i] = g[i] * w1 * m;
                d_high.plane_mut(n, c)[i] = g[i] * w2 * (T::one() - m);
                let ds = &mut d_s.plane_mut(n, 0)[i];
                *ds = *ds + g[i] * (w1 * l[i] - w2 * h[i]);
            }
        }
    }

    // corr = (1/M) Σ_c l12_c · h12_c, S = σ(corr)
    let third = T::one() / T::of(MANIFOLDS as f64);
    let mut d_l12 = Tensor::zeros(cache.low12.shape());
    let mut d_h12 = Tensor::zeros(cache.high12.shape());
    for n in 0..s.batch {
        let dcorr: Vec<T> = d_s
            .plane(n, 0)
            .iter()
            .zip(cache.s_map.plane(n, 0))
            .map(|(&ds, &m)| ds * m * (T::one() - m) * third)
            .collect();
        for c in 0..FIELD_CHANNELS {
            for (i, &dc) in dcorr.iter().enumerate() {
                d_l12.plane_mut(n, c)[i] = dc * cache.high12.plane(n, c)[i];
                d_h12.plane_mut(n, c)[i] = dc * cache.low12.plane(n, c)[i];
            }
        }
    }
    let proj_low = conv2d_backward(&bands.low, &params.proj_low, &d_l12)?;
    let proj_high = conv2d_backward(&bands.high, &params.proj_high, &d_h12)?;
    for (d, &v) in d_low.data_mut().iter_mut().zip(proj_low.input.data()) {
        *d = *d + v;
    }
    for (d, &v) in d_high.data_mut().iter_mut().zip(proj_high.input.data()) {
        *d = *d + v;
    }

    // w1 = σ(a − b), w2 = 1 − w1
    let dd = (dw1 - dw2) * w1 * w2;
    Ok(FusionGrads {
        low: d_low,
        high: d_high,
        proj_low,
        proj_high,
        raw_w1: dd,
        raw_w2: -dd,
    })
}

/// `∂(G · max(I, ε)^Γ)` with respect to `(I, Γ, G)`, given the upstream
/// adjoint of the enhanced illumination.
pub fn backward_enhance_illumination<T: Real>(illu: T, gamma: T, gain: T, d_enh: T) -> (T, T, T) {
    let eps = T::of(ILLUMINATION_EPS);
    let ic = illu.max(eps);
    let pow = ic.powf(gamma);
    let d_illu = if illu > eps { d_enh * gain * gamma * pow / ic } else { T::zero() };
    (d_illu, d_enh * gain * pow * ic.ln(), d_enh * pow)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructGrads<T: Real = f64> {
    pub x_low: Tensor<T>,
    pub gamma_map: Tensor<T>,
    pub gain_map: Tensor<T>,
}

/// Adjoint of `X · G · max(I, ε)^Γ / max(I, ε)` with `I = max_c X`.
///
/// The max routes its adjoint to the first maximal channel, matching the
/// forward tie-break.
pub fn backward_reconstruct<T: Real>(x_low: &Tensor<T>, p: &EnhanceParams<T>, d_out: &Tensor<T>) -> Result<ReconstructGrads<T>> {
    same_shape("backward_reconstruct", x_low, d_out)?;
    let s = x_low.shape();
    let eps = T::of(ILLUMINATION_EPS);
    let illu = extract_illumination(x_low);
    let enh = enhance_illumination(&illu, p)?;
    let mut d_x = Tensor::zeros(s);
    let mut d_gamma = Tensor::zeros(illu.shape());
    let mut d_gain = Tensor::zeros(illu.shape());
    for n in 0..s.batch {
        for i in 0..s.plane() {
            let (iv, e) = (illu.plane(n, 0)[i], enh.plane(n, 0)[i]);
            let ic = iv.max(eps);
            let mut d_e = T::zero();
            let mut d_ic = T::zero();
            let mut arg = 0;
            for c in 0..s.channels {
                let (x, g) = (x_low.plane(n, c)[i], d_out.plane(n, c)[i]);
                if x > x_low.plane(n, arg)[i] {
                    arg = c;
                }
                d_x.plane_mut(n, c)[i] = g * e / ic;
                d_e = d_e + g * x / ic;
                d_ic = d_ic - g * x * e / (ic * ic);
            }
            let (gamma, gain) = (p.gamma_map.plane(n, 0)[i], p.gain_map.plane(n, 0)[i]);
            let (d_illu, dg, dk) = backward_enhance_illumination(iv, gamma, gain, d_e);
            d_gamma.plane_mut(n, 0)[i] = dg;
            d_gain.plane_mut(n, 0)[i] = dk;
            let through_denominator = if iv > eps { d_ic } else { T::zero() };
            let dx = &mut d_x.plane_mut(n, arg)[i];
            *dx = *dx + d_illu + through_denominator;
        }
    }
    Ok(ReconstructGrads {
        x_low: d_x,
        gamma_map: d_gamma,
        gain_map: d_gain,
    })
}

/// Head intermediates: pre-ReLU hidden, output, channel-mean activation.
#[derive(Clone, Debug)]
pub struct HeadCache<T: Real = f64> {
    pub pre: Tensor<T>,
    pub hidden: Tensor<T>,
    pub activation: Tensor<T>,
}

pub fn head_forward<T: Real>(x: &Tensor<T>, head: &Head<T>) -> Result<HeadCache<T>> {
    let pre = conv2d(x, &head.conv)?;
    let hidden = pre.map(|v| v.max(T::zero()));
    let out = conv2d(&hidden, &head.out)?;
    Ok(HeadCache {
        pre,
        hidden,
        activation: channel_mean(&out),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T: Real = f64> {
    pub input: Tensor<T>,
    pub conv: ConvGrads<T>,
    pub out: ConvGrads<T>,
}

pub fn backward_head<T: Real>(x: &Tensor<T>, head: &Head<T>, cache: &HeadCache<T>, d_act: &Tensor<T>) -> Result<HeadGrads<T>> {
    let k = head.out.out_channels();
    let out_shape = cache.activation.shape().with_channels(k);
    let inv = T::one() / T::of(k as f64);
    let d_out = Tensor::from_fn(out_shape, |n, _, y, x| d_act.at(n, 0, y, x) * inv)?;
    let out = conv2d_backward(&cache.hidden, &head.out, &d_out)?;
    let mut d_pre = out.input.clone();
    for (d, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= T::zero() {
            *d = T::zero();
        }
    }
    let conv = conv2d_backward(x, &head.conv, &d_pre)?;
    Ok(HeadGrads {
        input: conv.input.clone(),
        conv,
        out,
    })
}

/// A scalar function of a flat coordinate vector with an analytic gradient.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    /// Evaluate and cache intermediates.
    fn forward(&mut self) -> Result<f64>;
    /// Gradient at the last forward point.
    fn backward(&self) -> Result<Vec<f64>>;
    /// Which side of every non-smooth point the last forward landed on.
    fn kink_signature(&self) -> Vec<u8> {
        Vec::new()
    }
    fn param_name(&self, i: usize) -> String {
        format!("theta[{i}]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a kink.
    pub skipped: usize,
}

/// Absolute floor on the denominator of the relative error.
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Compare the analytic gradient against `(f(θ + h e_i) − f(θ − h e_i)) / 2h`
/// for every coordinate.
pub fn fd_check<G: Differentiable>(graph: &mut G, h: f64) -> Result<FdReport> {
    graph.forward()?;
    let analytic = graph.backward()?;
    let signature = graph.kink_signature();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for i in 0..graph.num_params() {
        let v = graph.param(i);
        graph.set_param(i, v + h);
        let plus = graph.forward()?;
        let crossed = graph.kink_signature() != signature;
        graph.set_param(i, v - h);
        let minus = graph.forward()?;
        let crossed = crossed || graph.kink_signature() != signature;
        graph.set_param(i, v);
        if crossed {
            report.skipped += 1;
            continue;
        }
        let err = relative_error(analytic[i], (plus - minus) / (2.0 * h));
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(graph.param_name(i));
        }
    }
    graph.forward()?;
    Ok(report)
}

/// `f(θ) = a · θ`.
#[derive(Clone, Debug)]
pub struct LinearGraph {
    pub coeffs: Vec<f64>,
    pub theta: Vec<f64>,
}

impl LinearGraph {
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = Lcg::new(seed);
        LinearGraph {
            coeffs: (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            theta: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        }
    }
}

impl Differentiable for LinearGraph {
    fn num_params(&self) -> usize {
        self.theta.len()
    }
    fn param(&self, i: usize) -> f64 {
        self.theta[i]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        self.theta[i] = v;
    }
    fn forward(&mut self) -> Result<f64> {
        Ok(self.coeffs.iter().zip(&self.theta).map(|(a, t)| a * t).sum())
    }
    fn backward(&self) -> Result<Vec<f64>> {
        Ok(self.coeffs.clone())
    }
}

/// Charbonnier loss of a free prediction against a fixed target.
#[derive(Clone, Debug)]
pub struct CharbonnierGraph {
    pub pred: Tensor<f64>,
    pub target: Tensor<f64>,
    pub loss: CharbonnierLoss,
}

impl CharbonnierGraph {
    /// Residuals are kept at least 0.1 in magnitude, away from the
    /// high-curvature region around zero.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = Lcg::new(seed);
        let shape = Shape::new(1, 1, size, size);
        let target = Tensor::from_fn(shape, |_, _, _, _| rng.uniform(0.0, 1.0)).expect("finite");
        let pred = target.map(|t| {
            let r = rng.uniform(0.1, 0.5);
            if rng.below(2) == 0 { t + r } else { t - r }
        });
        CharbonnierGraph {
            pred,
            target,
            loss: CharbonnierLoss::default(),
        }
    }
}

impl Differentiable for CharbonnierGraph {
    fn num_params(&self) -> usize {
        self.pred.len()
    }
    fn param(&self, i: usize) -> f64 {
        self.pred.data()[i]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        self.pred.data_mut()[i] = v;
    }
    fn forward(&mut self) -> Result<f64> {
        self.loss.value(&self.pred, &self.target)
    }
    fn backward(&self) -> Result<Vec<f64>> {
        Ok(self.loss.gradient(&self.pred, &self.target)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphConfig {
    pub levels: usize,
    pub channels: usize,
    pub size: usize,
    pub head_hidden: usize,
    pub head_outputs: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            levels: 3,
            channels: 4,
            size: 8,
            head_hidden: 4,
            head_outputs: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Segment {
    name: String,
    offset: usize,
    dims: [usize; 4],
}

/// Unpacked view of the flat coordinate vector.
#[derive(Clone, Debug)]
pub struct GraphValues<T: Real = f64> {
    pub bands: Vec<BandPair<T>>,
    pub fusion: Vec<FusionParams<T>>,
    pub heads: HeadParams<T>,
    pub x_low: Tensor<T>,
}

#[derive(Clone, Debug)]
struct GraphCache {
    values: GraphValues<f64>,
    fusion: Vec<FusionCache<f64>>,
    concat: Tensor<f64>,
    gamma: HeadCache<f64>,
    gain: HeadCache<f64>,
    params: EnhanceParams<f64>,
    output: Tensor<f64>,
    signature: Vec<u8>,
}

/// Per-level band fusion → concatenation → Γ/G heads → unclamped Retinex
/// reconstruction → Charbonnier against a fixed target.
///
/// Coordinates cover every fusion and head parameter plus the bands and the
/// low-light image.
#[derive(Clone, Debug)]
pub struct FusionReconstructGraph {
    pub config: GraphConfig,
    pub target: Tensor<f64>,
    pub loss: CharbonnierLoss,
    theta: Vec<f64>,
    segments: Vec<Segment>,
    cache: Option<GraphCache>,
}

struct Builder<'a> {
    rng: &'a mut Lcg,
    theta: Vec<f64>,
    segments: Vec<Segment>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, dims: [usize; 4], lo: f64, hi: f64) {
        let offset = self.theta.len();
        for _ in 0..dims.iter().product::<usize>() {
            let v = self.rng.uniform(lo, hi);
            self.theta.push(v);
        }
        self.segments.push(Segment { name, offset, dims });
    }
}

impl FusionReconstructGraph {
    pub fn random(seed: u64, config: GraphConfig) -> Result<Self> {
        let GraphConfig {
            levels,
            channels: c,
            size,
            head_hidden: hid,
            head_outputs: k,
        } = config;
        let mut rng = Lcg::new(seed);
        let mut b = Builder {
            rng: &mut rng,
            theta: Vec::new(),
            segments: Vec::new(),
        };
        let proj = 1.0 / libm_sqrt(c as f64);
        for i in 0..levels {
            b.push(format!("level{i}/low"), [1, c, size, size], -1.0, 1.0);
            b.push(format!("level{i}/high"), [1, c, size, size], -0.5, 0.5);
            for p in ["proj_low", "proj_high"] {
                b.push(format!("level{i}/{p}/weight"), [FIELD_CHANNELS, c, 1, 1], -proj, proj);
                b.push(format!("level{i}/{p}/bias"), [1, 1, 1, FIELD_CHANNELS], -proj, proj);
            }
            b.push(format!("level{i}/raw_w1"), [1, 1, 1, 1], -1.0, 1.0);
            b.push(format!("level{i}/raw_w2"), [1, 1, 1, 1], -1.0, 1.0);
        }
        let cin = levels * c;
        let conv = 1.0 / libm_sqrt((cin * 9) as f64);
        let out = 1.0 / libm_sqrt(hid as f64);
        for h in ["gamma", "gain"] {
            b.push(format!("head/{h}/conv/weight"), [hid, cin, 3, 3], -conv, conv);
            b.push(format!("head/{h}/conv/bias"), [1, 1, 1, hid], -conv, conv);
            b.push(format!("head/{h}/out/weight"), [k, hid, 1, 1], -out, out);
            b.push(format!("head/{h}/out/bias"), [1, 1, 1, k], -out, out);
        }
        b.push(String::from("x_low"), [1, 3, size, size], 0.05, 1.0);
        let (theta, segments) = (b.theta, b.segments);

        let mut graph = FusionReconstructGraph {
            config,
            target: Tensor::zeros(Shape::new(1, 3, size, size)),
            loss: CharbonnierLoss::default(),
            theta,
            segments,
            cache: None,
        };
        // Residuals start at 0.1..0.4 in magnitude so the loss is far from
        // its curvature peak at zero.
        graph.forward_values()?;
        let output = graph.cache.take().map(|c| c.output).expect("forward fills the cache");
        graph.target = output.map(|v| {
            let r = rng.uniform(0.1, 0.4);
            if rng.below(2) == 0 { v + r } else { v - r }
        });
        Ok(graph)
    }

    fn tensor(&self, seg: usize) -> Tensor<f64> {
        let s = &self.segments[seg];
        let [n, c, h, w] = s.dims;
        let shape = Shape::new(n, c, h, w);
        Tensor::new(shape, self.theta[s.offset..s.offset + shape.len()].to_vec()).expect("finite coordinates")
    }

    pub fn values(&self) -> GraphValues<f64> {
        let mut seg = 0;
        let mut next = || {
            seg += 1;
            self.tensor(seg - 1)
        };
        let mut bands = Vec::new();
        let mut fusion = Vec::new();
        let conv = |w: Tensor<f64>, b: Tensor<f64>, pad: usize| {
            ConvSpec::new(w, Some(b.into_data()), 1, 1, pad).expect("valid layer")
        };
        for _ in 0..self.config.levels {
            let low = next();
            let high = next();
            bands.push(BandPair::new(low, high).expect("matching bands"));
            let (lw, lb, hw, hb) = (next(), next(), next(), next());
            fusion.push(FusionParams {
                proj_low: conv(lw, lb, 0),
                proj_high: conv(hw, hb, 0),
                raw_w1: next().data()[0],
                raw_w2: next().data()[0],
            });
        }
        let mut head = || Head {
            conv: conv(next(), next(), 1),
            out: conv(next(), next(), 0),
        };
        let gamma = head();
        let gain = head();
        GraphValues {
            bands,
            fusion,
            heads: HeadParams { gamma, gain },
            x_low: next(),
        }
    }

    fn forward_values(&mut self) -> Result<f64> {
        let values = self.values();
        let mut fusion = Vec::with_capacity(values.bands.len());
        for (bands, params) in values.bands.iter().zip(&values.fusion) {
            fusion.push(fusion_forward(bands, params)?);
        }
        let refs: Vec<&Tensor<f64>> = fusion.iter().map(|f| &f.output).collect();
        let concat = concat_channels(&refs)?;
        let gamma = head_forward(&concat, &values.heads.gamma)?;
        let gain = head_forward(&concat, &values.heads.gain)?;
        let params = params_from_activations(&gamma.activation, &gain.activation);
        let illu = extract_illumination(&values.x_low);
        let enh = enhance_illumination(&illu, &params)?;
        let output = reconstruct_unclamped(&values.x_low, &illu, &enh)?;
        let loss = if self.target.shape() == output.shape() {
            self.loss.value(&output, &self.target)?
        } else {
            0.0
        };

        let mut signature = Vec::new();
        for h in [&gamma, &gain] {
            signature.extend(h.pre.data().iter().map(|&v| u8::from(v > 0.0)));
        }
        let xs = values.x_low.shape();
        for i in 0..xs.plane() {
            let mut arg = 0;
            for c in 1..xs.channels {
                if values.x_low.plane(0, c)[i] > values.x_low.plane(0, arg)[i] {
                    arg = c;
                }
            }
            let clamped = illu.data()[i] <= ILLUMINATION_EPS;
            signature.push(arg as u8 | (u8::from(clamped) << 4));
        }
        self.cache = Some(GraphCache {
            values,
            fusion,
            concat,
            gamma,
            gain,
            params,
            output,
            signature,
        });
        Ok(loss)
    }

    /// Prediction from the last forward pass.
    pub fn output(&self) -> Option<&Tensor<f64>> {
        self.cache.as_ref().map(|c| &c.output)
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

fn bounded_grad(act: f64, lo: f64, span: f64, value: f64) -> f64 {
    // Zero where the value sits on its floating-point clamp.
    let raw = lo + span * sigmoid_scalar(act);
    if raw != value { 0.0 } else { span * sigmoid_grad(act) }
}

impl Differentiable for FusionReconstructGraph {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn param(&self, i: usize) -> f64 {
        self.theta[i]
    }

    fn set_param(&mut self, i: usize, v: f64) {
        self.theta[i] = v;
        self.cache = None;
    }

    fn forward(&mut self) -> Result<f64> {
        self.forward_values()
    }

    fn backward(&self) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::Usage("backward called before forward"))?;
        let v = &cache.values;
        let d_out = self.loss.gradient(&cache.output, &self.target)?;
        let rec = backward_reconstruct(&v.x_low, &cache.params, &d_out)?;

        let d_act = |act: &Tensor<f64>, map: &Tensor<f64>, d_map: &Tensor<f64>, lo: f64, span: f64| {
            let data = act
                .data()
                .iter()
                .zip(map.data())
                .zip(d_map.data())
                .map(|((&a, &m), &d)| d * bounded_grad(a, lo, span, m))
                .collect();
            Tensor::from_raw(act.shape(), data)
        };
        let d_gamma_act = d_act(&cache.gamma.activation, &cache.params.gamma_map, &rec.gamma_map, GAMMA_MIN, GAMMA_SPAN);
        let d_gain_act = d_act(&cache.gain.activation, &cache.params.gain_map, &rec.gain_map, GAIN_MIN, GAIN_SPAN);
        let g_head = backward_head(&cache.concat, &v.heads.gamma, &cache.gamma, &d_gamma_act)?;
        let k_head = backward_head(&cache.concat, &v.heads.gain, &cache.gain, &d_gain_act)?;
        let mut d_concat = DualTensor::new(cache.concat.clone());
        d_concat.accumulate(&g_head.input)?;
        d_concat.accumulate(&k_head.input)?;

        let mut grad = Vec::with_capacity(self.theta.len());
        let c = self.config.channels;
        for (i, (bands, params)) in v.bands.iter().zip(&v.fusion).enumerate() {
            let d_f = d_concat.grad.channel_range(i * c, c)?;
            let g = backward_fusion(bands, params, &cache.fusion[i], &d_f)?;
            grad.extend_from_slice(g.low.data());
            grad.extend_from_slice(g.high.data());
            for p in [&g.proj_low, &g.proj_high] {
                grad.extend_from_slice(p.weight.data());
                grad.extend_from_slice(p.bias.as_deref().unwrap_or(&[]));
            }
            grad.push(g.raw_w1);
            grad.push(g.raw_w2);
        }
        for h in [&g_head, &k_head] {
            grad.extend_from_slice(h.conv.weight.data());
            grad.extend_from_slice(h.conv.bias.as_deref().unwrap_or(&[]));
            grad.extend_from_slice(h.out.weight.data());
            grad.extend_from_slice(h.out.bias.as_deref().unwrap_or(&[]));
        }
        grad.extend_from_slice(rec.x_low.data());
        debug_assert_eq!(grad.len(), self.theta.len());
        Ok(grad)
    }

    fn kink_signature(&self) -> Vec<u8> {
        self.cache.as_ref().map(|c| c.signature.clone()).unwrap_or_default()
    }

    fn param_name(&self, i: usize) -> String {
        let seg = self.segments.iter().rposition(|s| s.offset <= i).unwrap_or(0);
        format!("{}[{}]", self.segments[seg].name, i - self.segments[seg].offset)
    }
}

/// Worst relative error over `seeds` random fusion graphs.
pub fn fusion_gradcheck(seeds: core::ops::Range<u64>, config: GraphConfig, h: f64) -> Result<FdReport> {
    let mut worst = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for seed in seeds {
        let mut g = FusionReconstructGraph::random(seed, config)?;
        let r = fd_check(&mut g, h)?;
        worst.checked += r.checked;
        worst.skipped += r.skipped;
        if r.max_rel_error >= worst.max_rel_error {
            worst.max_rel_error = r.max_rel_error;
            worst.worst = r.worst.map(|w| format!("seed {seed}: {w}"));
        }
    }
    Ok(worst)
}

/// Run the same subgraph through the `f32` engine kernels.
pub fn engine_loss_f32(values: &GraphValues<f64>, target: &Tensor<f64>, loss: CharbonnierLoss) -> Result<f32> {
    let mut ops = OpCounter::default();
    let mut features = Vec::new();
    for (bands, p) in values.bands.iter().zip(&values.fusion) {
        let b = BandPair::new(bands.low.cast::<f32>(), bands.high.cast::<f32>())?;
        let fp = FusionParams {
            proj_low: p.proj_low.cast(),
            proj_high: p.proj_high.cast(),
            raw_w1: p.raw_w1 as f32,
            raw_w2: p.raw_w2 as f32,
        };
        features.push(crate::clifford::fuse(&b, &fp, &mut ops)?);
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    let concat = concat_channels(&refs)?;
    let heads = HeadParams {
        gamma: Head {
            conv: values.heads.gamma.conv.cast(),
            out: values.heads.gamma.out.cast(),
        },
        gain: Head {
            conv: values.heads.gain.conv.cast(),
            out: values.heads.gain.out.cast(),
        },
    };
    let params = crate::reconstruct::predict_params(&concat, &heads, &mut ops)?;
    let x = values.x_low.cast::<f32>();
    let illu = extract_illumination(&x);
    let out = reconstruct_unclamped(&x, &illu, &enhance_illumination(&illu, &params)?)?;
    loss.value(&out, &target.cast::<f32>())
}
