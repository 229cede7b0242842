//! Dense rank-4 tensors in (batch, channels, height, width) row-major order,
//! plus the elementwise and channel-reduction kernels.

use alloc::{format, vec, vec::Vec};
use core::fmt;

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one (height, width) plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub const fn with_spatial(self, height: usize, width: usize) -> Self {
        Shape {
            height,
            width,
            ..self
        }
    }

    fn check(&self, op: &'static str) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::shape(op, format!("all dimensions must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Immutable dense tensor. Every public constructor rejects non-finite data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.check("tensor")?;
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor", index });
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// If any dimension is zero or `value` is not finite.
    pub fn full(shape: Shape, value: T) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1, got {shape}");
        assert!(value.is_finite(), "tensor fill value must be finite");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    /// Crate-internal constructor for kernel outputs whose length and
    /// finiteness follow from construction.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((n * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The (height, width) plane of channel `c` in batch item `n`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_raw(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn channel_range(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.channels {
            return Err(Error::shape(
                "channel_range",
                format!("channels {start}..{} out of {}", start + count, self.shape.channels),
            ));
        }
        let shape = self.shape.with_channels(count);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.batch {
            for c in start..start + count {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor::from_raw(shape, data))
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }
}

/// Concatenate along the channel axis, in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.batch != first.batch || s.height != first.height || s.width != first.width {
            return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
        }
        channels += s.channels;
    }
    let shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..shape.batch {
        for p in parts {
            for c in 0..p.shape().channels {
                data.extend_from_slice(p.plane(n, c));
            }
        }
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Logistic function, evaluated so that neither branch overflows.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// `scale * x + shift` per element.
pub fn affine<T: Real>(input: &Tensor<T>, scale: T, shift: T) -> Tensor<T> {
    input.map(|v| scale * v + shift)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y)
}

/// Elementwise binary op. `b` may equal `a` in shape, hold a single value, or
/// have one channel that is broadcast across `a`'s channels.
fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_raw(sa, data));
    }
    if sb.len() == 1 {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if sb == sa.with_channels(1) {
        let mut out = a.clone();
        for n in 0..sa.batch {
            let mask = b.plane(n, 0);
            for c in 0..sa.channels {
                for (o, &m) in out.plane_mut(n, c).iter_mut().zip(mask) {
                    *o = f(*o, m);
                }
            }
        }
        return Ok(out);
    }
    Err(Error::shape(op, format!("cannot combine {sa} with {sb}")))
}

/// Per-pixel arithmetic mean over channels; output has one channel.
pub fn channel_mean<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::of(s.channels as f64);
    let mut out = Tensor::zeros(s.with_channels(1));
    for n in 0..s.batch {
        let dst = out.plane_mut(n, 0);
        for c in 0..s.channels {
            for (o, &v) in dst.iter_mut().zip(input.plane(n, c)) {
                *o = *o + v;
            }
        }
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

/// Per-pixel maximum over channels; output has one channel.
pub fn channel_max<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let mut data = Vec::with_capacity(s.batch * s.plane());
    for n in 0..s.batch {
        let start = data.len();
        data.extend_from_slice(input.plane(n, 0));
        let dst = &mut data[start..];
        for c in 1..s.channels {
            for (o, &v) in dst.iter_mut().zip(input.plane(n, c)) {
                *o = o.max(v);
            }
        }
    }
    Tensor::from_raw(s.with_channels(1), data)
}
