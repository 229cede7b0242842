//! Cl(2,0) geometric fusion of low- and high-band features.
//!
//! Basis `{1, e1, e2, e12}` with `e1² = e2² = 1`, `e1e2 = -e2e1`, `e12 = e1e2`
//! (so `e12² = -1`). Each band is projected to 12 channels by a 1×1 conv and
//! read as three manifolds of `(s, v1, v2, b)` per pixel. The similarity mask
//! is the sigmoid of the manifold-averaged scalar part `⟨M_L M_H†⟩₀`, which
//! reduces to the Euclidean dot product of the four coefficients.
//!
//! The mask then blends the *original* band tensors:
//! `F = w1 · L · S + w2 · H · (1 − S)` with `(w1, w2) = softmax(raw_w1, raw_w2)`.

use alloc::{format, vec::Vec};
use core::ops::{Add, Mul, Neg, Sub};

use crate::{
    conv::{conv2d, ConvSpec},
    counter::OpCounter,
    frequency::BandPair,
    params::{conv_schema, NamedTensor, ParamSpec, ParamStore},
    tensor::sigmoid_scalar,
    Error, Real, Result, Shape, Tensor,
};

pub const MANIFOLDS: usize = 3;
pub const BLADES: usize = 4;
pub const FIELD_CHANNELS: usize = MANIFOLDS * BLADES;

/// `s + v1·e1 + v2·e2 + b·e12`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Multivector<T: Real = f64> {
    pub s: T,
    pub v1: T,
    pub v2: T,
    pub b: T,
}

impl<T: Real> Multivector<T> {
    pub const fn new(s: T, v1: T, v2: T, b: T) -> Self {
        Multivector { s, v1, v2, b }
    }

    pub fn scalar(s: T) -> Self {
        Multivector::new(s, T::zero(), T::zero(), T::zero())
    }

    /// Negates the bivector part.
    pub fn reversion(self) -> Self {
        Multivector { b: -self.b, ..self }
    }

    pub fn components(self) -> [T; 4] {
        [self.s, self.v1, self.v2, self.b]
    }

    pub fn from_components(c: [T; 4]) -> Self {
        Multivector::new(c[0], c[1], c[2], c[3])
    }

    pub fn norm_squared(self) -> T {
        scalar_inner(self, self)
    }
}

/// Full Cl(2,0) geometric product.
pub fn geometric_product<T: Real>(a: Multivector<T>, b: Multivector<T>) -> Multivector<T> {
    Multivector {
        s: a.s * b.s + a.v1 * b.v1 + a.v2 * b.v2 - a.b * b.b,
        v1: a.s * b.v1 + a.v1 * b.s - a.v2 * b.b + a.b * b.v2,
        v2: a.s * b.v2 + a.v2 * b.s + a.v1 * b.b - a.b * b.v1,
        b: a.s * b.b + a.b * b.s + a.v1 * b.v2 - a.v2 * b.v1,
    }
}

/// `⟨mL · mH†⟩₀` in closed form: the sum of coefficient products.
#[inline]
pub fn scalar_inner<T: Real>(ml: Multivector<T>, mh: Multivector<T>) -> T {
    ml.s * mh.s + ml.v1 * mh.v1 + ml.v2 * mh.v2 + ml.b * mh.b
}

impl<T: Real> Mul for Multivector<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        geometric_product(self, rhs)
    }
}

impl<T: Real> Add for Multivector<T> {
    type Output = Self;
    fn add(self, r: Self) -> Self {
        Multivector::new(self.s + r.s, self.v1 + r.v1, self.v2 + r.v2, self.b + r.b)
    }
}

impl<T: Real> Sub for Multivector<T> {
    type Output = Self;
    fn sub(self, r: Self) -> Self {
        Multivector::new(self.s - r.s, self.v1 - r.v1, self.v2 - r.v2, self.b - r.b)
    }
}

impl<T: Real> Neg for Multivector<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Multivector::new(-self.s, -self.v1, -self.v2, -self.b)
    }
}

/// A 12-channel tensor read as three manifolds of per-pixel multivectors.
/// Channel `4m + k` holds blade `k` (`s, v1, v2, b`) of manifold `m`.
#[derive(Clone, Copy, Debug)]
pub struct MultivectorField<'a, T: Real = f32> {
    tensor: &'a Tensor<T>,
}

impl<'a, T: Real> MultivectorField<'a, T> {
    pub fn new(tensor: &'a Tensor<T>) -> Result<Self> {
        let c = tensor.shape().channels;
        if c != FIELD_CHANNELS {
            return Err(Error::shape(
                "multivector field",
                format!("expected {FIELD_CHANNELS} channels (3 manifolds x 4 blades), got {c}"),
            ));
        }
        Ok(MultivectorField { tensor })
    }

    pub fn manifolds(&self) -> usize {
        MANIFOLDS
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn at(&self, n: usize, manifold: usize, y: usize, x: usize) -> Multivector<T> {
        let c = manifold * BLADES;
        Multivector::new(
            self.tensor.at(n, c, y, x),
            self.tensor.at(n, c + 1, y, x),
            self.tensor.at(n, c + 2, y, x),
            self.tensor.at(n, c + 3, y, x),
        )
    }
}

/// Manifold-averaged `⟨M_L M_H†⟩₀` per pixel, before the sigmoid.
pub fn correlation_map<T: Real>(low12: &Tensor<T>, high12: &Tensor<T>) -> Result<Tensor<T>> {
    MultivectorField::new(low12)?;
    MultivectorField::new(high12)?;
    if low12.shape() != high12.shape() {
        return Err(Error::shape(
            "similarity_map",
            format!("low {} vs high {}", low12.shape(), high12.shape()),
        ));
    }
    let s = low12.shape();
    let mut out = Tensor::zeros(s.with_channels(1));
    let third = T::one() / T::of(MANIFOLDS as f64);
    for n in 0..s.batch {
        let dst = out.plane_mut(n, 0);
        for m in 0..MANIFOLDS {
            for k in 0..BLADES {
                let c = m * BLADES + k;
                for ((d, &l), &h) in dst.iter_mut().zip(low12.plane(n, c)).zip(high12.plane(n, c)) {
                    *d = *d + l * h;
                }
            }
        }
        for d in dst.iter_mut() {
            *d = *d * third;
        }
    }
    Ok(out)
}

/// `S_map = σ(mean_m ⟨M_L,m M_H,m†⟩₀)`, shape `(batch, 1, H, W)`.
pub fn similarity_map<T: Real>(low12: &Tensor<T>, high12: &Tensor<T>) -> Result<Tensor<T>> {
    // Saturated sigmoids are pulled back to the nearest representable values
    // inside (0, 1) so neither band is ever fully discarded.
    let hi = T::one() - T::epsilon() / T::of(2.0);
    let lo = T::min_positive_value();
    Ok(correlation_map(low12, high12)?.map(|c| sigmoid_scalar(c).max(lo).min(hi)))
}

/// Projections and mixing logits for one fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T: Real = f32> {
    pub proj_low: ConvSpec<T>,
    pub proj_high: ConvSpec<T>,
    pub raw_w1: T,
    pub raw_w2: T,
}

/// Two-way softmax `(e^a, e^b) / (e^a + e^b)`, evaluated without overflow.
pub fn softmax_pair<T: Real>(a: T, b: T) -> (T, T) {
    let w1 = sigmoid_scalar(a - b);
    (w1, T::one() - w1)
}

impl<T: Real> FusionParams<T> {
    pub fn weights(&self) -> (T, T) {
        softmax_pair(self.raw_w1, self.raw_w2)
    }
}

impl FusionParams<f32> {
    pub fn schema(prefix: &str, channels: usize, bias: bool, out: &mut Vec<ParamSpec>) {
        conv_schema(out, &format!("{prefix}proj_low"), [FIELD_CHANNELS, channels, 1, 1], bias);
        conv_schema(out, &format!("{prefix}proj_high"), [FIELD_CHANNELS, channels, 1, 1], bias);
        out.push(ParamSpec::new(format!("{prefix}raw_w1"), &[1], 1));
        out.push(ParamSpec::new(format!("{prefix}raw_w2"), &[1], 1));
    }

    pub fn load(store: &ParamStore, prefix: &str, channels: usize, bias: bool) -> Result<Self> {
        let dims = [FIELD_CHANNELS, channels, 1, 1];
        Ok(FusionParams {
            proj_low: store.conv(&format!("{prefix}proj_low"), dims, 1, 0, bias)?,
            proj_high: store.conv(&format!("{prefix}proj_high"), dims, 1, 0, bias)?,
            raw_w1: store.require_dims(&format!("{prefix}raw_w1"), &[1])?.data[0],
            raw_w2: store.require_dims(&format!("{prefix}raw_w2"), &[1])?.data[0],
        })
    }

    pub fn save(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert_conv(&format!("{prefix}proj_low"), &self.proj_low)?;
        store.insert_conv(&format!("{prefix}proj_high"), &self.proj_high)?;
        store.insert(format!("{prefix}raw_w1"), NamedTensor::scalar(self.raw_w1))?;
        store.insert(format!("{prefix}raw_w2"), NamedTensor::scalar(self.raw_w2))
    }
}

/// `w1 · L · S + w2 · H · (1 − S)` with `S` broadcast over channels.
pub fn aggregate<T: Real>(bands: &BandPair<T>, weights: (T, T), s_map: &Tensor<T>) -> Result<Tensor<T>> {
    let s = bands.low.shape();
    if s_map.shape() != s.with_channels(1) {
        return Err(Error::shape(
            "fuse",
            format!("mask {} does not match bands {s}", s_map.shape()),
        ));
    }
    let (w1, w2) = weights;
    let mut out = bands.low.clone();
    for n in 0..s.batch {
        let mask = s_map.plane(n, 0);
        for c in 0..s.channels {
            let high = bands.high.plane(n, c);
            for ((o, &h), &m) in out.plane_mut(n, c).iter_mut().zip(high).zip(mask) {
                *o = w1 * *o * m + w2 * h * (T::one() - m);
            }
        }
    }
    Ok(out)
}

/// Project both bands, build the similarity mask, and aggregate.
pub fn fuse<T: Real>(bands: &BandPair<T>, params: &FusionParams<T>, ops: &mut OpCounter) -> Result<Tensor<T>> {
    let low12 = conv2d(&bands.low, &params.proj_low)?;
    ops.record_conv(&params.proj_low, low12.shape());
    let high12 = conv2d(&bands.high, &params.proj_high)?;
    ops.record_conv(&params.proj_high, high12.shape());
    let s_map = similarity_map(&low12, &high12)?;
    ops.record_macs((low12.len()) as u64);
    ops.record_elementwise(s_map.len() + bands.low.len());
    aggregate(bands, params.weights(), &s_map)
}
