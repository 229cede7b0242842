//! Frequency-decoupled feature extraction.
//!
//! A level's input is split into a Gaussian low band and its residual high
//! band; each band runs through its own [`LightUNet`], a small U-Net built
//! from depthwise-separable blocks (3×3 depthwise, 1×1 pointwise, ReLU).
//!
//! Network layout for `depth = d`, widths `C_k = base · growth^k`:
//!
//! ```text
//! stem        in  -> C0                      (full resolution)
//! enc k/0,1   C_{k-1} -> C_k -> C_k          after area ×½, k = 1..d
//! bottleneck  C_d -> C_d                     (only when d > 0)
//! dec k/0     C_k -> C_{k-1}                 after bilinear ×2 to the skip size
//!             + skip_{k-1}                   additive
//! dec k/1     C_{k-1} -> C_{k-1}             k = d..1
//! ```

use alloc::{format, string::String, vec::Vec};

use crate::{
    conv::{conv2d, ConvSpec},
    counter::OpCounter,
    filter::gaussian_blur3,
    params::{conv_schema, ParamSpec, ParamStore},
    resize::{resize, resize_macs, ResizeMode},
    tensor::{add, relu, sub},
    Error, Real, Result, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LightUNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// Channel multiplier per down stage.
    pub growth: usize,
}

impl Default for LightUNetConfig {
    fn default() -> Self {
        LightUNetConfig {
            in_channels: 3,
            base_channels: 16,
            depth: 2,
            growth: 4,
        }
    }
}

impl LightUNetConfig {
    /// Channel width at encoder stage `k` (0 = full resolution).
    pub fn width(&self, k: usize) -> usize {
        self.base_channels * self.growth.pow(k as u32)
    }

    /// Smallest spatial extent for which every stage keeps at least 4 pixels.
    pub fn min_size(&self) -> usize {
        4 << self.depth
    }

    /// Canonical block list: `(name, in_channels, out_channels)` in execution order.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        out.push((String::from("stem"), self.in_channels, self.width(0)));
        for k in 1..=self.depth {
            out.push((format!("enc{k}/0"), self.width(k - 1), self.width(k)));
            out.push((format!("enc{k}/1"), self.width(k), self.width(k)));
        }
        if self.depth > 0 {
            out.push((String::from("bottleneck"), self.width(self.depth), self.width(self.depth)));
        }
        for k in (1..=self.depth).rev() {
            out.push((format!("dec{k}/0"), self.width(k), self.width(k - 1)));
            out.push((format!("dec{k}/1"), self.width(k - 1), self.width(k - 1)));
        }
        out
    }

    pub fn schema(&self, prefix: &str, out: &mut Vec<ParamSpec>) {
        for (name, cin, cout) in self.blocks() {
            conv_schema(out, &format!("{prefix}{name}/dw"), [cin, 1, 3, 3], true);
            conv_schema(out, &format!("{prefix}{name}/pw"), [cout, cin, 1, 1], true);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut specs = Vec::new();
        self.schema("", &mut specs);
        specs.iter().map(ParamSpec::len).sum()
    }
}

/// Depthwise 3×3 → pointwise 1×1 → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock<T: Real = f32> {
    pub depthwise: ConvSpec<T>,
    pub pointwise: ConvSpec<T>,
}

impl<T: Real> SeparableBlock<T> {
    pub fn forward(&self, x: &Tensor<T>, ops: &mut OpCounter) -> Result<Tensor<T>> {
        let d = conv2d(x, &self.depthwise)?;
        ops.record_conv(&self.depthwise, d.shape());
        let p = conv2d(&d, &self.pointwise)?;
        ops.record_conv(&self.pointwise, p.shape());
        ops.record_elementwise(p.len());
        Ok(relu(&p))
    }

    pub fn map_weights(&self, f: impl Fn(&ConvSpec<T>) -> ConvSpec<T>) -> Self {
        SeparableBlock {
            depthwise: f(&self.depthwise),
            pointwise: f(&self.pointwise),
        }
    }
}

impl SeparableBlock<f32> {
    fn load(store: &ParamStore, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(SeparableBlock {
            depthwise: store.conv(&format!("{prefix}/dw"), [cin, 1, 3, 3], cin, 1, true)?,
            pointwise: store.conv(&format!("{prefix}/pw"), [cout, cin, 1, 1], 1, 0, true)?,
        })
    }

    fn save(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert_conv(&format!("{prefix}/dw"), &self.depthwise)?;
        store.insert_conv(&format!("{prefix}/pw"), &self.pointwise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightUNet<T: Real = f32> {
    pub config: LightUNetConfig,
    /// Blocks in [`LightUNetConfig::blocks`] order.
    pub blocks: Vec<SeparableBlock<T>>,
}

impl LightUNet<f32> {
    /// Load every block under `prefix` (e.g. `"level0/low/"`).
    pub fn load(store: &ParamStore, prefix: &str, config: LightUNetConfig) -> Result<Self> {
        let blocks = config
            .blocks()
            .iter()
            .map(|(name, cin, cout)| SeparableBlock::load(store, &format!("{prefix}{name}"), *cin, *cout))
            .collect::<Result<_>>()?;
        Ok(LightUNet { config, blocks })
    }

    pub fn save(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for ((name, _, _), block) in self.config.blocks().iter().zip(&self.blocks) {
            block.save(store, &format!("{prefix}{name}"))?;
        }
        Ok(())
    }
}

impl<T: Real> LightUNet<T> {
    pub fn forward(&self, x: &Tensor<T>, ops: &mut OpCounter) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if x.shape().channels != cfg.in_channels {
            return Err(Error::shape(
                "light_unet_forward",
                format!("input has {} channels, network expects {}", x.shape().channels, cfg.in_channels),
            ));
        }
        let mut blocks = self.blocks.iter();
        let mut next = || blocks.next().ok_or(Error::Usage("LightUNet block list shorter than its config"));

        let mut cur = next()?.forward(x, ops)?;
        let mut skips = Vec::with_capacity(cfg.depth + 1);
        for _ in 1..=cfg.depth {
            let s = cur.shape();
            let (h, w) = (s.height.div_ceil(2), s.width.div_ceil(2));
            skips.push(cur);
            let prev = skips.last().expect("just pushed");
            ops.record_macs(resize_macs(s, h, w, ResizeMode::Area));
            cur = resize(prev, h, w, ResizeMode::Area)?;
            cur = next()?.forward(&cur, ops)?;
            cur = next()?.forward(&cur, ops)?;
        }
        if cfg.depth > 0 {
            cur = next()?.forward(&cur, ops)?;
        }
        while let Some(skip) = skips.pop() {
            let s = skip.shape();
            ops.record_macs(resize_macs(cur.shape(), s.height, s.width, ResizeMode::Bilinear));
            cur = resize(&cur, s.height, s.width, ResizeMode::Bilinear)?;
            cur = next()?.forward(&cur, ops)?;
            ops.record_elementwise(cur.len());
            cur = add(&cur, &skip)?;
            cur = next()?.forward(&cur, ops)?;
        }
        Ok(cur)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.depthwise.param_count() + b.pointwise.param_count())
            .sum()
    }
}

/// Load the branch under `prefix` from `store` and run it on `x`.
pub fn light_unet_forward(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    config: LightUNetConfig,
) -> Result<Tensor> {
    LightUNet::load(store, prefix, config)?.forward(x, &mut OpCounter::default())
}

/// Branch outputs for the low and high bands; always equal in shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPair<T: Real = f32> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
}

impl<T: Real> BandPair<T> {
    pub fn new(low: Tensor<T>, high: Tensor<T>) -> Result<Self> {
        if low.shape() != high.shape() {
            return Err(Error::shape(
                "band pair",
                format!("low {} vs high {}", low.shape(), high.shape()),
            ));
        }
        Ok(BandPair { low, high })
    }
}

/// Split `x` into `(blur(x), x - blur(x))`.
pub fn decompose<T: Real>(x: &Tensor<T>, sigma: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let low = gaussian_blur3(x, sigma)?;
    let high = sub(x, &low)?;
    Ok((low, high))
}

/// Decompose, then run the two independent branches.
pub fn extract_bands<T: Real>(
    x: &Tensor<T>,
    low_net: &LightUNet<T>,
    high_net: &LightUNet<T>,
    sigma: T,
    ops: &mut OpCounter,
) -> Result<BandPair<T>> {
    let (low, high) = decompose(x, sigma)?;
    ops.record_macs(9 * x.len() as u64);
    ops.record_elementwise(x.len());
    let low = low_net.forward(&low, ops)?;
    let high = high_net.forward(&high, ops)?;
    BandPair::new(low, high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{filter::gaussian_kernel3, model::init_store, Shape};

    fn random_net(cfg: LightUNetConfig, seed: u64) -> LightUNet {
        let mut specs = Vec::new();
        cfg.schema("", &mut specs);
        LightUNet::load(&init_store(&specs, seed), "", cfg).unwrap()
    }

    fn image(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, c, h, w), |_, c, y, x| {
            0.5 + 0.4 * ((c * 7 + y * 3 + x * 5) as f32 * 0.37).sin()
        })
        .unwrap()
    }

    #[test]
    fn decompose_is_exact_partition() {
        let x = image(3, 9, 11);
        let (low, high) = decompose(&x, 1.0).unwrap();
        assert_eq!(add(&low, &high).unwrap(), x);

        let c = Tensor::full(Shape::new(1, 3, 4, 4), 0.25f32);
        let (low, high) = decompose(&c, 1.0).unwrap();
        assert!(low.max_abs_diff(&c).unwrap() < 1e-7);
        assert!(high.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn impulse_high_band_center() {
        let x = Tensor::from_fn(Shape::new(1, 1, 5, 5), |_, _, y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 }).unwrap();
        let (_, high) = decompose(&x, 1.0f32).unwrap();
        let k = gaussian_kernel3(1.0f32).unwrap();
        assert!((high.at(0, 0, 2, 2) - (1.0 - k[1][1])).abs() < 1e-7);
    }

    #[test]
    fn default_widths_and_count() {
        let cfg = LightUNetConfig::default();
        assert_eq!((cfg.width(0), cfg.width(1), cfg.width(2)), (16, 64, 256));
        assert_eq!(cfg.blocks().len(), 10);
        assert_eq!(cfg.param_count(), 186_046);
    }

    #[test]
    fn output_shape_for_odd_sizes() {
        let cfg = LightUNetConfig { base_channels: 4, growth: 2, ..Default::default() };
        let net = random_net(cfg, 3);
        for (h, w) in [(16, 16), (17, 23), (31, 16)] {
            let out = net.forward(&image(3, h, w), &mut OpCounter::default()).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 4, h, w));
        }
    }

    #[test]
    fn zero_network_gives_zero() {
        let cfg = LightUNetConfig { base_channels: 4, growth: 2, ..Default::default() };
        let mut specs = Vec::new();
        cfg.schema("", &mut specs);
        let mut store = ParamStore::new();
        for s in &specs {
            store.insert(s.name.clone(), crate::NamedTensor::new(s.dims.clone(), alloc::vec![0.0; s.len()]).unwrap()).unwrap();
        }
        let net = LightUNet::load(&store, "", cfg).unwrap();
        let out = net.forward(&image(3, 16, 16), &mut OpCounter::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_zero_matches_manual_composition() {
        let cfg = LightUNetConfig { depth: 0, ..Default::default() };
        let net = random_net(cfg, 11);
        let x = image(3, 12, 10);
        let out = net.forward(&x, &mut OpCounter::default()).unwrap();
        let b = &net.blocks[0];
        let manual = relu(&conv2d(&conv2d(&x, &b.depthwise).unwrap(), &b.pointwise).unwrap());
        assert_eq!(out, manual);
    }

    #[test]
    fn missing_parameter_is_named() {
        let cfg = LightUNetConfig::default();
        let err = light_unet_forward(&image(3, 16, 16), &ParamStore::new(), "level0/low/", cfg).unwrap_err();
        assert_eq!(err, Error::MissingParam("level0/low/stem/dw/weight".into()));
    }

    #[test]
    fn swapping_branches_swaps_bands() {
        let cfg = LightUNetConfig { base_channels: 4, growth: 2, depth: 1, ..Default::default() };
        let (a, b) = (random_net(cfg, 1), random_net(cfg, 2));
        let x = image(3, 16, 16);
        let ab = extract_bands(&x, &a, &b, 1.0, &mut OpCounter::default()).unwrap();
        let (low, high) = decompose(&x, 1.0).unwrap();
        let ba = BandPair::new(b.forward(&low, &mut OpCounter::default()).unwrap(), a.forward(&high, &mut OpCounter::default()).unwrap()).unwrap();
        assert_eq!(ab.low, a.forward(&low, &mut OpCounter::default()).unwrap());
        assert_eq!(ab.high, b.forward(&high, &mut OpCounter::default()).unwrap());
        let swapped = extract_bands(&x, &b, &a, 1.0, &mut OpCounter::default()).unwrap();
        assert_eq!(swapped, ba);
    }
}
