//! Model configuration, parameter schema and seeded initialization.
//!
//! Parameter names:
//!
//! ```text
//! level{i}/low/{block}/dw|pw/weight|bias     LightUNet, low band
//! level{i}/high/{block}/dw|pw/weight|bias    LightUNet, high band
//! level{i}/fusion/proj_low|proj_high/weight|bias
//! level{i}/fusion/raw_w1|raw_w2
//! level{i}/to_state/weight|bias              all but the last level
//! head/gamma|gain/conv|out/weight|bias
//! ```

use alloc::{format, vec, vec::Vec};

use crate::{
    clifford::FusionParams,
    frequency::{LightUNet, LightUNetConfig},
    params::{conv_schema, NamedTensor, ParamSpec, ParamStore},
    pyramid::{PyramidConfig, PyramidLevel},
    reconstruct::HeadParams,
    rng::Lcg,
    Error, Result,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Side of the square latent base.
    pub base_size: usize,
    /// Pyramid levels; level `i` runs at `base_size · 2^i`.
    pub levels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub growth: usize,
    /// Hidden width of each parameter head.
    pub head_channels: usize,
    /// Output channels of each head before the channel mean.
    pub head_outputs: usize,
    pub sigma: f32,
    pub proj_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_size: 64,
            levels: 3,
            base_channels: 16,
            depth: 2,
            growth: 4,
            head_channels: 8,
            head_outputs: 4,
            sigma: 1.0,
            proj_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_size", self.base_size),
            ("levels", self.levels),
            ("base_channels", self.base_channels),
            ("growth", self.growth),
            ("head_channels", self.head_channels),
            ("head_outputs", self.head_outputs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be >= 1"));
            }
        }
        let min = self.unet_config().min_size();
        if self.base_size < min {
            return Err(Error::param(
                "base_size",
                format!("{} is below the U-Net minimum of {min}", self.base_size),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::param("sigma", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_size << i).collect()
    }

    pub fn unet_config(&self) -> LightUNetConfig {
        LightUNetConfig {
            in_channels: 3,
            base_channels: self.base_channels,
            depth: self.depth,
            growth: self.growth,
        }
    }

    pub fn pyramid_config(&self) -> PyramidConfig {
        PyramidConfig {
            base_size: self.base_size,
            level_sizes: self.level_sizes(),
            base_channels: self.base_channels,
            sigma: self.sigma,
        }
    }

    /// Channels of the native feature concatenation fed to the heads.
    pub fn head_in_channels(&self) -> usize {
        self.levels * self.base_channels
    }
}

/// Fill every declared parameter with `U(-1/√fan_in, 1/√fan_in)` drawn from
/// one LCG stream in declaration order.
pub fn init_store(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = Lcg::new(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let bound = 1.0 / num_traits::Float::sqrt(spec.fan_in.max(1) as f64);
        let data = (0..spec.len()).map(|_| rng.uniform(-bound, bound) as f32).collect();
        let t = NamedTensor {
            dims: spec.dims.clone(),
            data,
        };
        // Schemas never repeat names.
        store.insert(spec.name.clone(), t).expect("duplicate name in schema");
    }
    store
}

fn zero_store(specs: &[ParamSpec]) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in specs {
        let t = NamedTensor {
            dims: spec.dims.clone(),
            data: vec![0.0; spec.len()],
        };
        store.insert(spec.name.clone(), t).expect("duplicate name in schema");
    }
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub levels: Vec<PyramidLevel>,
    pub heads: HeadParams,
}

impl Model {
    pub fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let unet = cfg.unet_config();
        let mut out = Vec::new();
        for i in 0..cfg.levels {
            unet.schema(&format!("level{i}/low/"), &mut out);
            unet.schema(&format!("level{i}/high/"), &mut out);
            FusionParams::schema(&format!("level{i}/fusion/"), cfg.base_channels, cfg.proj_bias, &mut out);
            if i + 1 < cfg.levels {
                conv_schema(&mut out, &format!("level{i}/to_state"), [3, cfg.base_channels, 1, 1], true);
            }
        }
        HeadParams::schema("head/", cfg.head_in_channels(), cfg.head_channels, cfg.head_outputs, &mut out);
        out
    }

    /// Parameters of level `i` alone, read from `level{i}/...` names.
    pub fn load_level(cfg: &ModelConfig, store: &ParamStore, i: usize) -> Result<PyramidLevel> {
        let unet = cfg.unet_config();
        let to_state = if i + 1 < cfg.levels {
            Some(store.conv(&format!("level{i}/to_state"), [3, cfg.base_channels, 1, 1], 1, 0, true)?)
        } else {
            None
        };
        Ok(PyramidLevel {
            low: LightUNet::load(store, &format!("level{i}/low/"), unet)?,
            high: LightUNet::load(store, &format!("level{i}/high/"), unet)?,
            fusion: FusionParams::load(store, &format!("level{i}/fusion/"), cfg.base_channels, cfg.proj_bias)?,
            to_state,
        })
    }

    pub fn from_store(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let levels = (0..cfg.levels)
            .map(|i| Self::load_level(&cfg, store, i))
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadParams::load(store, "head/", cfg.head_in_channels(), cfg.head_channels, cfg.head_outputs)?;
        Ok(Model { config: cfg, levels, heads })
    }

    /// Parameters in canonical schema order.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (i, level) in self.levels.iter().enumerate() {
            level.low.save(&mut store, &format!("level{i}/low/"))?;
            level.high.save(&mut store, &format!("level{i}/high/"))?;
            level.fusion.save(&mut store, &format!("level{i}/fusion/"))?;
            if let Some(p) = &level.to_state {
                store.insert_conv(&format!("level{i}/to_state"), p)?;
            }
        }
        self.heads.save(&mut store, "head/")?;
        Ok(store)
    }

    pub fn seeded(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::from_store(cfg, &init_store(&Self::schema(&cfg), seed))
    }

    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_store(cfg, &zero_store(&Self::schema(&cfg)))
    }

    /// Zero both heads so every pixel gets the midpoint Γ and G.
    pub fn zero_heads(&mut self) {
        let cfg = self.config;
        let specs: Vec<ParamSpec> = {
            let mut out = Vec::new();
            HeadParams::schema("head/", cfg.head_in_channels(), cfg.head_channels, cfg.head_outputs, &mut out);
            out
        };
        self.heads = HeadParams::load(&zero_store(&specs), "head/", cfg.head_in_channels(), cfg.head_channels, cfg.head_outputs)
            .expect("head schema matches its loader");
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.heads.gamma.conv.param_count()
            + self.heads.gamma.out.param_count()
            + self.heads.gain.conv.param_count()
            + self.heads.gain.out.param_count();
        for level in &self.levels {
            n += level.low.param_count() + level.high.param_count();
            n += level.fusion.proj_low.param_count() + level.fusion.proj_high.param_count() + 2;
            n += level.to_state.as_ref().map_or(0, |p| p.param_count());
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        let cfg = ModelConfig::default();
        let schema_total: usize = Model::schema(&cfg).iter().map(ParamSpec::len).sum();
        let model = Model::seeded(cfg, 0).unwrap();
        assert_eq!(model.param_count(), schema_total);
        assert_eq!(schema_total, 1_124_608);
        let rel = (schema_total as f64 - 1.14e6) / 1.14e6;
        assert!(rel.abs() <= 0.15);
    }

    #[test]
    fn store_round_trip_preserves_order() {
        let cfg = ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() };
        let model = Model::seeded(cfg, 3).unwrap();
        let store = model.to_store().unwrap();
        let names: Vec<_> = store.names().collect();
        let schema: Vec<_> = Model::schema(&cfg).into_iter().map(|s| s.name).collect();
        assert_eq!(names, schema);
        assert_eq!(Model::from_store(cfg, &store).unwrap(), model);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() };
        let specs = Model::schema(&cfg);
        let a = init_store(&specs, 7);
        assert_eq!(a, init_store(&specs, 7));
        assert_ne!(a, init_store(&specs, 8));
        for spec in &specs {
            let bound = 1.0 / (spec.fan_in as f32).sqrt();
            assert!(a.get(&spec.name).unwrap().data.iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let cfg = ModelConfig { base_channels: 4, growth: 2, head_channels: 4, base_size: 16, ..Default::default() };
        let full = Model::seeded(cfg, 1).unwrap().to_store().unwrap();
        let mut partial = ParamStore::new();
        for (name, t) in full.iter().filter(|(n, _)| *n != "level1/fusion/raw_w2") {
            partial.insert(name, t.clone()).unwrap();
        }
        assert_eq!(
            Model::from_store(cfg, &partial).unwrap_err(),
            Error::MissingParam("level1/fusion/raw_w2".into())
        );
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { base_size: 8, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { levels: 0, ..Default::default() }.validate().is_err());
        assert_eq!(ModelConfig::default().level_sizes(), [64, 128, 256]);
    }
}
