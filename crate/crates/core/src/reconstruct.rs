//! Native-resolution parameter heads and Retinex reconstruction.
//!
//! ```text
//! Γ = 0.15 + 0.85 · σ(mean_c F_γ)        Γ ∈ (0.15, 1.0)
//! G = 0.80 + 1.70 · σ(mean_c F_gain)     G ∈ (0.8, 2.5)
//! I = max_c X                            illumination
//! E = G · max(I, ε)^Γ
//! X_enh = clamp(X · E / max(I, ε), 0, 1)
//! ```
//!
//! Every channel of a pixel is scaled by the same ratio, so channel
//! proportions are preserved up to the final clamp.

use alloc::{format, vec, vec::Vec};

use crate::{
    conv::{conv2d, ConvSpec},
    counter::{OpCounter, StageCounters},
    params::{conv_schema, ParamSpec, ParamStore},
    pyramid::{build_base, latent_features},
    resize::{AxisWeights, ResizeMode},
    tensor::{channel_max, sigmoid_scalar},
    Error, Model, Real, Result, Shape, Tensor,
};

/// Lower clamp on illumination in the exponent and the ratio denominator.
pub const ILLUMINATION_EPS: f64 = 1e-4;
pub const GAMMA_MIN: f64 = 0.15;
pub const GAMMA_SPAN: f64 = 0.85;
pub const GAIN_MIN: f64 = 0.8;
pub const GAIN_SPAN: f64 = 1.7;

/// Most output rows produced per stripe in the streamed native stage.
pub const STRIPE_ROWS: usize = 48;
/// Fewest rows per stripe; bounds the halo overhead on very wide images.
pub const STRIPE_MIN_ROWS: usize = 8;
/// Target pixels per stripe, which keeps one feature plane of the stripe in cache.
pub const STRIPE_PIXELS: usize = 96 * 1024;

/// Rows per stripe for an image `width` pixels wide.
pub fn stripe_rows(width: usize) -> usize {
    (STRIPE_PIXELS / width.max(1)).clamp(STRIPE_MIN_ROWS, STRIPE_ROWS)
}

/// `lo + span · σ(x)`, kept strictly inside `(lo, lo + span)` even where the
/// sigmoid saturates in floating point.
#[inline]
pub fn bounded_sigmoid<T: Real>(x: T, lo: f64, span: f64) -> T {
    let (lo_t, hi_t) = (T::of(lo), T::of(lo + span));
    let eps = T::epsilon();
    // Evaluated in f64 and rounded once.
    let v = T::of(lo + span * sigmoid_scalar(x).as_f64());
    v.max(lo_t + lo_t * eps).min(hi_t - hi_t * eps)
}

#[inline]
pub fn gamma_from_activation<T: Real>(x: T) -> T {
    bounded_sigmoid(x, GAMMA_MIN, GAMMA_SPAN)
}

#[inline]
pub fn gain_from_activation<T: Real>(x: T) -> T {
    bounded_sigmoid(x, GAIN_MIN, GAIN_SPAN)
}

/// 3×3 conv → ReLU → 1×1 conv; the channel mean of the output is the head
/// activation fed to the bounded sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Real = f32> {
    pub conv: ConvSpec<T>,
    pub out: ConvSpec<T>,
}

impl<T: Real> Head<T> {
    /// Channel-mean activation, shape `(batch, 1, H, W)`.
    pub fn activation(&self, x: &Tensor<T>, ops: &mut OpCounter) -> Result<Tensor<T>> {
        let hidden = conv2d(x, &self.conv)?;
        ops.record_conv(&self.conv, hidden.shape());
        let hidden = hidden.map(|v| v.max(T::zero()));
        let out = conv2d(&hidden, &self.out)?;
        ops.record_conv(&self.out, out.shape());
        ops.record_elementwise(hidden.len() + out.len());
        Ok(crate::tensor::channel_mean(&out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Real = f32> {
    pub gamma: Head<T>,
    pub gain: Head<T>,
}

impl HeadParams<f32> {
    pub fn schema(prefix: &str, in_channels: usize, hidden: usize, outputs: usize, out: &mut Vec<ParamSpec>) {
        for name in ["gamma", "gain"] {
            conv_schema(out, &format!("{prefix}{name}/conv"), [hidden, in_channels, 3, 3], true);
            conv_schema(out, &format!("{prefix}{name}/out"), [outputs, hidden, 1, 1], true);
        }
    }

    pub fn load(store: &ParamStore, prefix: &str, in_channels: usize, hidden: usize, outputs: usize) -> Result<Self> {
        let head = |name: &str| -> Result<Head> {
            Ok(Head {
                conv: store.conv(&format!("{prefix}{name}/conv"), [hidden, in_channels, 3, 3], 1, 1, true)?,
                out: store.conv(&format!("{prefix}{name}/out"), [outputs, hidden, 1, 1], 1, 0, true)?,
            })
        };
        Ok(HeadParams {
            gamma: head("gamma")?,
            gain: head("gain")?,
        })
    }

    pub fn save(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, head) in [("gamma", &self.gamma), ("gain", &self.gain)] {
            store.insert_conv(&format!("{prefix}{name}/conv"), &head.conv)?;
            store.insert_conv(&format!("{prefix}{name}/out"), &head.out)?;
        }
        Ok(())
    }
}

impl<T: Real> HeadParams<T> {
    pub fn in_channels(&self) -> usize {
        self.gamma.conv.in_channels()
    }
}

/// Per-pixel Gamma and Gain maps, each `(batch, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceParams<T: Real = f32> {
    pub gamma_map: Tensor<T>,
    pub gain_map: Tensor<T>,
}

impl<T: Real> EnhanceParams<T> {
    /// Spatially constant maps, used to force a specific mapping.
    pub fn uniform(shape: Shape, gamma: T, gain: T) -> Self {
        let s = shape.with_channels(1);
        EnhanceParams {
            gamma_map: Tensor::full(s, gamma),
            gain_map: Tensor::full(s, gain),
        }
    }

    fn check(&self, illu: Shape) -> Result<()> {
        if self.gamma_map.shape() != illu || self.gain_map.shape() != illu {
            return Err(Error::shape(
                "enhance params",
                format!(
                    "gamma {} / gain {} vs illumination {illu}",
                    self.gamma_map.shape(),
                    self.gain_map.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Map head activations to Γ and G.
pub fn params_from_activations<T: Real>(gamma_act: &Tensor<T>, gain_act: &Tensor<T>) -> EnhanceParams<T> {
    EnhanceParams {
        gamma_map: gamma_act.map(gamma_from_activation),
        gain_map: gain_act.map(gain_from_activation),
    }
}

/// Heads applied to a materialized native-resolution feature block.
pub fn predict_params<T: Real>(native_concat: &Tensor<T>, heads: &HeadParams<T>, ops: &mut OpCounter) -> Result<EnhanceParams<T>> {
    if native_concat.shape().channels != heads.in_channels() {
        return Err(Error::shape(
            "predict_params",
            format!(
                "feature block has {} channels, heads expect {}",
                native_concat.shape().channels,
                heads.in_channels()
            ),
        ));
    }
    let g = heads.gamma.activation(native_concat, ops)?;
    let k = heads.gain.activation(native_concat, ops)?;
    ops.record_elementwise(g.len() + k.len());
    Ok(params_from_activations(&g, &k))
}

/// Same result as bicubically upsampling every feature map to `out_h × out_w`,
/// concatenating, and calling [`predict_params`], but processed in row
/// stripes so only `O(stripe · width · channels)` native-size scratch exists.
pub fn predict_params_streaming<T: Real>(
    features: &[Tensor<T>],
    out_h: usize,
    out_w: usize,
    heads: &HeadParams<T>,
    ops: &mut OpCounter,
) -> Result<EnhanceParams<T>> {
    let first = features
        .first()
        .ok_or_else(|| Error::shape("predict_params", "no feature maps"))?
        .shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("output size", "must be >= 1x1"));
    }
    let total: usize = features.iter().map(|f| f.shape().channels).sum();
    if total != heads.in_channels() || features.iter().any(|f| f.shape().batch != first.batch) {
        return Err(Error::shape(
            "predict_params",
            format!("feature maps carry {total} channels, heads expect {}", heads.in_channels()),
        ));
    }

    // Horizontal bicubic pass at latent height; vertical taps per native row.
    let plans: Vec<(AxisWeights<T>, AxisWeights<T>)> = features
        .iter()
        .map(|f| {
            let s = f.shape();
            (
                AxisWeights::new(s.width, out_w, ResizeMode::Bicubic),
                AxisWeights::new(s.height, out_h, ResizeMode::Bicubic),
            )
        })
        .collect();

    let map_shape = Shape::new(first.batch, 1, out_h, out_w);
    let mut gamma_map = Tensor::zeros(map_shape);
    let mut gain_map = Tensor::zeros(map_shape);
    let stripe = stripe_rows(out_w).min(out_h);

    for n in 0..first.batch {
        let mut hpass: Vec<Vec<T>> = Vec::with_capacity(features.len());
        for (f, (horizontal, _)) in features.iter().zip(&plans) {
            let s = f.shape();
            let mut buf = vec![T::zero(); s.channels * s.height * out_w];
            for c in 0..s.channels {
                horizontal.apply_horizontal(f.plane(n, c), s.width, &mut buf[c * s.height * out_w..][..s.height * out_w]);
            }
            ops.record_macs((s.channels * s.height * horizontal.total_taps()) as u64);
            hpass.push(buf);
        }

        let mut y0 = 0;
        while y0 < out_h {
            let rows = stripe.min(out_h - y0);
            // One halo row above and below; rows outside the image stay zero,
            // which is exactly the heads' zero padding.
            let block_shape = Shape::new(1, total, rows + 2, out_w);
            let mut block = vec![T::zero(); block_shape.len()];
            let plane = (rows + 2) * out_w;
            let mut channel = 0;
            for (f, ((_, vertical), buf)) in features.iter().zip(plans.iter().zip(&hpass)) {
                let s = f.shape();
                for c in 0..s.channels {
                    let src = &buf[c * s.height * out_w..][..s.height * out_w];
                    let dst = &mut block[channel * plane..][..plane];
                    for r in 0..rows + 2 {
                        let y = (y0 + r) as isize - 1;
                        if y < 0 || y as usize >= out_h {
                            continue;
                        }
                        vertical.apply_vertical_row(src, out_w, y as usize, &mut dst[r * out_w..][..out_w]);
                    }
                    ops.record_macs((rows * out_w * vertical.taps(0).0.len()) as u64);
                    channel += 1;
                }
            }
            let block = Tensor::from_raw(block_shape, block);
            let g = heads.gamma.activation(&block, ops)?;
            let k = heads.gain.activation(&block, ops)?;
            let dst_g = &mut gamma_map.plane_mut(n, 0)[y0 * out_w..][..rows * out_w];
            for (d, &a) in dst_g.iter_mut().zip(&g.data()[out_w..]) {
                *d = gamma_from_activation(a);
            }
            let dst_k = &mut gain_map.plane_mut(n, 0)[y0 * out_w..][..rows * out_w];
            for (d, &a) in dst_k.iter_mut().zip(&k.data()[out_w..]) {
                *d = gain_from_activation(a);
            }
            ops.record_elementwise(2 * rows * out_w);
            y0 += rows;
        }
    }
    Ok(EnhanceParams { gamma_map, gain_map })
}

/// `max_c X`, shape `(batch, 1, H, W)`.
pub fn extract_illumination<T: Real>(x_low: &Tensor<T>) -> Tensor<T> {
    channel_max(x_low)
}

/// `G · max(I, ε)^Γ` per pixel.
pub fn enhance_illumination<T: Real>(illu_in: &Tensor<T>, p: &EnhanceParams<T>) -> Result<Tensor<T>> {
    p.check(illu_in.shape())?;
    let eps = T::of(ILLUMINATION_EPS);
    let data = illu_in
        .data()
        .iter()
        .zip(p.gamma_map.data())
        .zip(p.gain_map.data())
        .map(|((&i, &g), &k)| k * i.max(eps).powf(g))
        .collect();
    Ok(Tensor::from_raw(illu_in.shape(), data))
}

fn scale_by_ratio<T: Real>(
    x_low: &Tensor<T>,
    illu_in: &Tensor<T>,
    illu_enh: &Tensor<T>,
    clamp: bool,
) -> Result<Tensor<T>> {
    let s = x_low.shape();
    let want = s.with_channels(1);
    if illu_in.shape() != want || illu_enh.shape() != want {
        return Err(Error::shape(
            "reconstruct",
            format!("illumination maps {} / {} vs image {s}", illu_in.shape(), illu_enh.shape()),
        ));
    }
    let eps = T::of(ILLUMINATION_EPS);
    let mut out = x_low.clone();
    for n in 0..s.batch {
        let ratio: Vec<T> = illu_in
            .plane(n, 0)
            .iter()
            .zip(illu_enh.plane(n, 0))
            .map(|(&i, &e)| e / i.max(eps))
            .collect();
        for c in 0..s.channels {
            for (o, &r) in out.plane_mut(n, c).iter_mut().zip(&ratio) {
                let v = *o * r;
                *o = if clamp { v.max(T::zero()).min(T::one()) } else { v };
            }
        }
    }
    Ok(out)
}

/// `clamp(X · E / max(I, ε), 0, 1)`.
pub fn reconstruct<T: Real>(x_low: &Tensor<T>, illu_in: &Tensor<T>, illu_enh: &Tensor<T>) -> Result<Tensor<T>> {
    scale_by_ratio(x_low, illu_in, illu_enh, true)
}

/// [`reconstruct`] without the final clamp.
pub fn reconstruct_unclamped<T: Real>(x_low: &Tensor<T>, illu_in: &Tensor<T>, illu_enh: &Tensor<T>) -> Result<Tensor<T>> {
    scale_by_ratio(x_low, illu_in, illu_enh, false)
}

/// Illumination extraction, enhancement and ratio reconstruction fused into a
/// single pass; no intermediate maps are allocated.
pub fn apply_retinex(x_low: &Tensor, p: &EnhanceParams, ops: &mut OpCounter) -> Result<Tensor> {
    let s = x_low.shape();
    p.check(s.with_channels(1))?;
    let eps = ILLUMINATION_EPS as f32;
    let mut out = x_low.clone();
    let plane = s.plane();
    let c = s.channels;
    for n in 0..s.batch {
        let gamma = p.gamma_map.plane(n, 0);
        let gain = p.gain_map.plane(n, 0);
        let base = n * c * plane;
        let data = &mut out.data_mut()[base..base + c * plane];
        for i in 0..plane {
            let mut illu = data[i];
            for ch in 1..c {
                illu = illu.max(data[ch * plane + i]);
            }
            let clamped = illu.max(eps);
            let ratio = gain[i] * clamped.powf(gamma[i]) / clamped;
            for ch in 0..c {
                let v = &mut data[ch * plane + i];
                *v = (*v * ratio).clamp(0.0, 1.0);
            }
        }
    }
    ops.record_elementwise(s.len() + s.batch * plane);
    Ok(out)
}

/// End-to-end enhancement: base → pyramid → streamed heads → Retinex.
pub fn enhance_full(x_low: &Tensor, model: &Model) -> Result<Tensor> {
    enhance_full_counted(x_low, model, &mut StageCounters::default())
}

pub fn enhance_full_counted(x_low: &Tensor, model: &Model, counters: &mut StageCounters) -> Result<Tensor> {
    let cfg = model.config.pyramid_config();
    let s = x_low.shape();
    let base = build_base(x_low, &cfg, &mut counters.base)?;
    let features = latent_features(&base, &model.levels, &cfg, &mut counters.latent)?;
    let params = predict_params_streaming(&features, s.height, s.width, &model.heads, &mut counters.heads)?;
    apply_retinex(x_low, &params, &mut counters.reconstruct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(r: f32, g: f32, b: f32) -> Tensor {
        Tensor::new(Shape::new(1, 3, 1, 1), alloc::vec![r, g, b]).unwrap()
    }

    #[test]
    fn zero_activation_midpoints() {
        assert_eq!(gamma_from_activation(0.0f32), 0.575);
        assert_eq!(gain_from_activation(0.0f32), 1.65);
    }

    #[test]
    fn saturating_activations() {
        let g = gamma_from_activation(10.0f64);
        assert!((g - 0.999_961).abs() < 1e-6, "{g}");
        assert!((gain_from_activation(10.0f64) - 2.499_923).abs() < 1e-6);
        assert!((gamma_from_activation(-10.0f64) - 0.150_039).abs() < 1e-6);
        assert!((gain_from_activation(-10.0f64) - 0.800_077).abs() < 1e-6);
        for x in [-1e6f32, -100.0, 100.0, 1e6] {
            let g = gamma_from_activation(x);
            let k = gain_from_activation(x);
            assert!(g > 0.15 && g < 1.0, "{x} -> {g}");
            assert!(k > 0.8 && k < 2.5, "{x} -> {k}");
        }
    }

    #[test]
    fn illumination_examples() {
        let x = pixel(0.1, 0.2, 0.4);
        let illu = extract_illumination(&x);
        assert_eq!(illu.data(), &[0.4]);
        let p = EnhanceParams::uniform(illu.shape(), 0.5, 2.0);
        let e = enhance_illumination(&illu, &p).unwrap();
        assert!((e.data()[0] - 1.264_911).abs() < 1e-6);

        let raw = reconstruct_unclamped(&x, &illu, &e).unwrap();
        for (v, want) in raw.data().iter().zip([0.316_228, 0.632_456, 1.264_911]) {
            assert!((v - want).abs() < 1e-6);
        }
        let out = reconstruct(&x, &illu, &e).unwrap();
        for (v, want) in out.data().iter().zip([0.316_228, 0.632_456, 1.0]) {
            assert!((v - want).abs() < 1e-6);
        }

        let one = Tensor::full(Shape::new(1, 1, 1, 1), 1.0f32);
        let p = EnhanceParams::uniform(one.shape(), 0.37, 0.8);
        assert_eq!(enhance_illumination(&one, &p).unwrap().data(), &[0.8]);

        let p = EnhanceParams::uniform(illu.shape(), 1.0, 1.0);
        assert_eq!(enhance_illumination(&illu, &p).unwrap(), illu);

        let black = pixel(0.0, 0.0, 0.0);
        let bi = extract_illumination(&black);
        let be = enhance_illumination(&bi, &EnhanceParams::uniform(bi.shape(), 0.15, 2.5)).unwrap();
        assert_eq!(reconstruct(&black, &bi, &be).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_ratio_is_identity() {
        let x = pixel(0.3, 0.05, 0.6);
        let illu = extract_illumination(&x);
        assert_eq!(reconstruct_unclamped(&x, &illu, &illu).unwrap(), x);
    }

    #[test]
    fn fused_matches_composition() {
        let x = Tensor::from_fn(Shape::new(2, 3, 5, 4), |n, c, y, x| ((n * 13 + c * 7 + y * 5 + x * 3) % 11) as f32 / 10.0).unwrap();
        let maps = Shape::new(2, 1, 5, 4);
        let p = EnhanceParams {
            gamma_map: Tensor::from_fn(maps, |_, _, y, x| 0.2 + 0.1 * (y + x) as f32 / 2.0).unwrap(),
            gain_map: Tensor::from_fn(maps, |n, _, y, _| 0.9 + 0.3 * (n + y) as f32).unwrap(),
        };
        let illu = extract_illumination(&x);
        let composed = reconstruct(&x, &illu, &enhance_illumination(&illu, &p).unwrap()).unwrap();
        let fused = apply_retinex(&x, &p, &mut OpCounter::default()).unwrap();
        assert!(fused.max_abs_diff(&composed).unwrap() <= 1e-7);
    }

    #[test]
    fn shape_errors() {
        let x = pixel(0.1, 0.2, 0.3);
        let bad = EnhanceParams::uniform(Shape::new(1, 1, 2, 2), 0.5f32, 1.0);
        assert!(enhance_illumination(&extract_illumination(&x), &bad).is_err());
        assert!(apply_retinex(&x, &bad, &mut OpCounter::default()).is_err());
    }

    fn small_model(seed: u64) -> Model {
        let cfg = crate::ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() };
        Model::seeded(cfg, seed).unwrap()
    }

    #[test]
    fn streaming_matches_materialized() {
        let model = small_model(21);
        for (h, w) in [(100, 37), (48, 48), (49, 20), (7, 130), (45, 5000)] {
            let x = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| ((c * 17 + y * 5 + x * 11) % 29) as f32 / 29.0).unwrap();
            let out = crate::pyramid::run_pyramid(&x, &model, &mut StageCounters::default()).unwrap();
            let reference = predict_params(&out.native_concat, &model.heads, &mut OpCounter::default()).unwrap();
            let streamed = predict_params_streaming(&out.features, h, w, &model.heads, &mut OpCounter::default()).unwrap();
            assert!(streamed.gamma_map.max_abs_diff(&reference.gamma_map).unwrap() <= 1e-6, "{h}x{w}");
            assert!(streamed.gain_map.max_abs_diff(&reference.gain_map).unwrap() <= 1e-6, "{h}x{w}");
        }
    }

    #[test]
    fn stripe_height_adapts_to_width() {
        assert_eq!(stripe_rows(100), STRIPE_ROWS);
        assert_eq!(stripe_rows(5000), 19);
        assert_eq!(stripe_rows(1 << 20), STRIPE_MIN_ROWS);
    }

    #[test]
    fn zero_heads_on_gray() {
        let mut model = small_model(2);
        model.zero_heads();
        let x = Tensor::full(Shape::new(1, 3, 40, 50), 0.2f32);
        let y = enhance_full(&x, &model).unwrap();
        let want = 1.65f64 * 0.2f64.powf(0.575);
        assert!((want - 0.653_998).abs() < 1e-6);
        assert!(y.data().iter().all(|&v| (v as f64 - want).abs() < 1e-6));
    }

    #[test]
    fn latent_counter_is_resolution_free() {
        let model = small_model(3);
        let mut latent = None;
        for side in [40, 80, 160] {
            let mut counters = StageCounters::default();
            enhance_full_counted(&Tensor::full(Shape::new(1, 3, side, side), 0.4f32), &model, &mut counters).unwrap();
            assert_eq!(*latent.get_or_insert(counters.latent), counters.latent);
        }
    }
}
