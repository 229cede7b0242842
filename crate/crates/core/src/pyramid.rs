//! Latent base construction and the inverse feature pyramid.
//!
//! The native image is area-downsampled to `base_size²`. Each level then runs
//! decompose → two branches → Clifford fusion, producing a feature map `f_i`
//! at that level's size. Between levels a 3-channel state is carried:
//!
//! ```text
//! next_state = up(state) + up(to_state(f_i))      (bilinear, 1×1 projection)
//! ```
//!
//! Nothing between [`build_base`] and the final upsample depends on the native
//! resolution. The 3×3 blur at the base level therefore covers
//! `3 · H / base_size` native rows (see [`effective_receptive_field`]).

use alloc::{format, vec::Vec};

use crate::{
    clifford::{fuse, FusionParams},
    conv::{conv2d, ConvSpec},
    counter::{OpCounter, StageCounters},
    frequency::{extract_bands, LightUNet},
    resize::{resize, resize_macs, ResizeMode},
    tensor::{add, concat_channels},
    Error, Model, Real, Result, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    pub base_size: usize,
    pub level_sizes: Vec<usize>,
    pub base_channels: usize,
    pub sigma: f32,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            base_size: 64,
            level_sizes: alloc::vec![64, 128, 256],
            base_channels: 16,
            sigma: 1.0,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_sizes.first() != Some(&self.base_size) {
            return Err(Error::param(
                "level_sizes",
                format!("first level must equal base size {}", self.base_size),
            ));
        }
        if self.level_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("level_sizes", "sizes must be strictly increasing"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::param("sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Parameters of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel<T: Real = f32> {
    pub low: LightUNet<T>,
    pub high: LightUNet<T>,
    pub fusion: FusionParams<T>,
    /// 1×1 projection of `f_i` to 3 channels; absent on the last level.
    pub to_state: Option<ConvSpec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOutput {
    /// `f_1..f_n`, each `(batch, base_channels, level, level)`.
    pub features: Vec<Tensor>,
    /// Bicubic upsamples of the features, concatenated in level order.
    pub native_concat: Tensor,
}

/// Area-downsample an RGB image to the square latent base.
pub fn build_base(x_low: &Tensor, cfg: &PyramidConfig, ops: &mut OpCounter) -> Result<Tensor> {
    let s = x_low.shape();
    if s.channels != 3 {
        return Err(Error::shape(
            "build_base",
            format!("expected an RGB image with 3 channels, got {}", s.channels),
        ));
    }
    ops.record_macs(resize_macs(s, cfg.base_size, cfg.base_size, ResizeMode::Area));
    resize(x_low, cfg.base_size, cfg.base_size, ResizeMode::Area)
}

/// Run level `level_index` on `state`; returns `f_i` and, except on the last
/// level, the state for the next level.
pub fn run_level<T: Real>(
    state: &Tensor<T>,
    level_index: usize,
    level: &PyramidLevel<T>,
    cfg: &PyramidConfig,
    ops: &mut OpCounter,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let size = *cfg.level_sizes.get(level_index).ok_or_else(|| {
        Error::param("level_index", format!("{level_index} >= {} levels", cfg.level_sizes.len()))
    })?;
    let s = state.shape();
    if s.height != size || s.width != size {
        return Err(Error::PipelineOrder {
            level: level_index,
            expected: size,
            found: (s.height, s.width),
        });
    }
    let bands = extract_bands(state, &level.low, &level.high, T::of(cfg.sigma as f64), ops)?;
    let f = fuse(&bands, &level.fusion, ops)?;

    let Some(&next) = cfg.level_sizes.get(level_index + 1) else {
        return Ok((f, None));
    };
    let proj = level
        .to_state
        .as_ref()
        .ok_or(Error::Usage("non-final pyramid level has no state projection"))?;
    let residual = conv2d(&f, proj)?;
    ops.record_conv(proj, residual.shape());
    ops.record_macs(resize_macs(s, next, next, ResizeMode::Bilinear) * 2);
    let up_state = resize(state, next, next, ResizeMode::Bilinear)?;
    let up_residual = resize(&residual, next, next, ResizeMode::Bilinear)?;
    ops.record_elementwise(up_state.len());
    Ok((f, Some(add(&up_state, &up_residual)?)))
}

/// All level features from the latent base.
pub fn latent_features<T: Real>(
    base: &Tensor<T>,
    levels: &[PyramidLevel<T>],
    cfg: &PyramidConfig,
    ops: &mut OpCounter,
) -> Result<Vec<Tensor<T>>> {
    if levels.len() != cfg.level_sizes.len() {
        return Err(Error::param(
            "levels",
            format!("{} level parameter sets for {} sizes", levels.len(), cfg.level_sizes.len()),
        ));
    }
    let mut features = Vec::with_capacity(levels.len());
    let mut state = base.clone();
    for (i, level) in levels.iter().enumerate() {
        let (f, next) = run_level(&state, i, level, cfg, ops)?;
        features.push(f);
        if let Some(next) = next {
            state = next;
        }
    }
    Ok(features)
}

/// Full pyramid with the native-resolution concatenation materialized.
///
/// This is the reference path; [`crate::enhance_full`] streams the native
/// stage instead of allocating `3 · base_channels` full-size planes.
pub fn run_pyramid(x_low: &Tensor, model: &Model, counters: &mut StageCounters) -> Result<PyramidOutput> {
    let cfg = model.config.pyramid_config();
    let s = x_low.shape();
    let base = build_base(x_low, &cfg, &mut counters.base)?;
    let features = latent_features(&base, &model.levels, &cfg, &mut counters.latent)?;
    let mut upsampled = Vec::with_capacity(features.len());
    for f in &features {
        counters
            .heads
            .record_macs(resize_macs(f.shape(), s.height, s.width, ResizeMode::Bicubic));
        upsampled.push(resize(f, s.height, s.width, ResizeMode::Bicubic)?);
    }
    let refs: Vec<&Tensor> = upsampled.iter().collect();
    let native_concat = concat_channels(&refs)?;
    Ok(PyramidOutput {
        features,
        native_concat,
    })
}

/// Native-pixel footprint `(rows, cols)` of one 3×3 kernel applied at the
/// latent base.
pub fn effective_receptive_field(cfg: &PyramidConfig, native: (usize, usize)) -> (f64, f64) {
    let base = cfg.base_size as f64;
    (3.0 * native.0 as f64 / base, 3.0 * native.1 as f64 / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ModelConfig, Shape};

    #[test]
    fn receptive_field_examples() {
        let cfg = PyramidConfig::default();
        assert_eq!(effective_receptive_field(&cfg, (4320, 7680)), (202.5, 360.0));
        assert_eq!(effective_receptive_field(&cfg, (2160, 3840)), (101.25, 180.0));
        assert_eq!(effective_receptive_field(&cfg, (64, 64)), (3.0, 3.0));
    }

    #[test]
    fn base_examples() {
        let cfg = PyramidConfig::default();
        let mut ops = OpCounter::default();
        let gray = Tensor::full(Shape::new(1, 3, 100, 150), 0.3f32);
        let b = build_base(&gray, &cfg, &mut ops).unwrap();
        assert_eq!(b.shape(), Shape::new(1, 3, 64, 64));
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        let blocks = Tensor::from_fn(Shape::new(1, 3, 128, 128), |_, c, y, x| ((y / 2 * 64 + x / 2 + c) % 17) as f32 / 17.0).unwrap();
        let b = build_base(&blocks, &cfg, &mut ops).unwrap();
        for (y, x) in [(0, 0), (5, 9), (63, 63)] {
            assert!((b.at(0, 1, y, x) - blocks.at(0, 1, 2 * y, 2 * x)).abs() < 1e-6);
        }

        let id = Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, c, y, x| (c + y * x) as f32 * 1e-4).unwrap();
        assert_eq!(build_base(&id, &cfg, &mut ops).unwrap(), id);

        let gray1 = Tensor::<f32>::zeros(Shape::new(1, 1, 64, 64));
        assert!(matches!(build_base(&gray1, &cfg, &mut ops), Err(Error::Shape { .. })));
    }

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() };
        Model::seeded(cfg, seed).unwrap()
    }

    #[test]
    fn level_shapes_and_order_errors() {
        let model = small_model(5);
        let cfg = model.config.pyramid_config();
        assert_eq!(cfg.level_sizes, [16, 32, 64]);
        let state = Tensor::full(Shape::new(1, 3, 16, 16), 0.2f32);
        let (f, next) = run_level(&state, 0, &model.levels[0], &cfg, &mut OpCounter::default()).unwrap();
        assert_eq!(f.shape(), Shape::new(1, 4, 16, 16));
        assert_eq!(next.unwrap().shape(), Shape::new(1, 3, 32, 32));
        let (_, last) = run_level(&Tensor::full(Shape::new(1, 3, 64, 64), 0.2f32), 2, &model.levels[2], &cfg, &mut OpCounter::default()).unwrap();
        assert!(last.is_none());
        let err = run_level(&state, 1, &model.levels[1], &cfg, &mut OpCounter::default()).unwrap_err();
        assert_eq!(err, Error::PipelineOrder { level: 1, expected: 32, found: (16, 16) });
    }

    #[test]
    fn zero_model_passes_state_through() {
        let model = Model::zeros(ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() }).unwrap();
        let cfg = model.config.pyramid_config();
        let state = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| (c + y + x) as f32 * 0.01).unwrap();
        let (f, next) = run_level(&state, 0, &model.levels[0], &cfg, &mut OpCounter::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let up = resize(&state, 32, 32, ResizeMode::Bilinear).unwrap();
        assert_eq!(next.unwrap(), up);
    }

    #[test]
    fn pyramid_output_shape_and_determinism() {
        let model = small_model(9);
        let x = Tensor::from_fn(Shape::new(1, 3, 70, 90), |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 23) as f32 / 23.0).unwrap();
        let a = run_pyramid(&x, &model, &mut StageCounters::default()).unwrap();
        assert_eq!(a.native_concat.shape(), Shape::new(1, 12, 70, 90));
        let sizes: Vec<_> = a.features.iter().map(|f| f.shape().height).collect();
        assert_eq!(sizes, [16, 32, 64]);
        // channel order f1, f2, f3
        let f2_up = resize(&a.features[1], 70, 90, ResizeMode::Bicubic).unwrap();
        assert_eq!(a.native_concat.channel_range(4, 4).unwrap(), f2_up);
        let b = run_pyramid(&x, &model, &mut StageCounters::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PyramidConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.level_sizes = alloc::vec![64, 64, 256];
        assert!(cfg.validate().is_err());
        cfg.level_sizes = alloc::vec![32, 128];
        assert!(cfg.validate().is_err());
    }
}
