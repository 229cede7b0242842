//! Separable resampling with the half-pixel (`align_corners = false`)
//! convention.
//!
//! * bilinear: source coordinate clamped at 0, neighbours clamped to the edge;
//! * bicubic: Catmull-Rom (`a = -0.5`) with edge-clamped taps;
//! * area: adaptive average pooling over `[floor(i·in/out), ceil((i+1)·in/out))`.
//!
//! Each axis is resampled independently through a sparse weight table
//! ([`AxisWeights`]), horizontal pass first.

use alloc::{format, vec, vec::Vec};

use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    Bilinear,
    Bicubic,
    Area,
}

pub const CUBIC_A: f64 = -0.5;

/// Catmull-Rom weights for the four taps at offsets -1, 0, 1, 2 from
/// `floor(src)`, given the fractional part `t`.
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let a = CUBIC_A;
    let near = |x: f64| ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Sparse resampling matrix for one axis, stored row-compressed.
#[derive(Clone, Debug)]
pub struct AxisWeights<T: Real = f32> {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Real> AxisWeights<T> {
    pub fn new(in_len: usize, out_len: usize, mode: ResizeMode) -> Self {
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        let scale = in_len as f64 / out_len as f64;
        let last = in_len as isize - 1;
        for i in 0..out_len {
            match mode {
                ResizeMode::Bilinear => {
                    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(in_len - 1);
                    let i1 = (i0 + 1).min(in_len - 1);
                    let frac = src - i0 as f64;
                    indices.extend([i0, i1]);
                    weights.extend([T::of(1.0 - frac), T::of(frac)]);
                }
                ResizeMode::Bicubic => {
                    let src = (i as f64 + 0.5) * scale - 0.5;
                    let base = src.floor();
                    let w = cubic_weights(src - base);
                    for (k, wk) in w.iter().enumerate() {
                        let idx = (base as isize - 1 + k as isize).clamp(0, last);
                        indices.push(idx as usize);
                        weights.push(T::of(*wk));
                    }
                }
                ResizeMode::Area => {
                    let start = i * in_len / out_len;
                    let end = ((i + 1) * in_len).div_ceil(out_len);
                    let inv = T::of(1.0 / (end - start) as f64);
                    for idx in start..end {
                        indices.push(idx);
                        weights.push(inv);
                    }
                }
            }
            offsets.push(indices.len());
        }
        AxisWeights {
            offsets,
            indices,
            weights,
        }
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn taps(&self, i: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    pub fn total_taps(&self) -> usize {
        self.indices.len()
    }

    /// Resample each of `rows` contiguous rows of width `in_w` along x.
    pub fn apply_horizontal(&self, src: &[T], in_w: usize, dst: &mut [T]) {
        let out_w = self.out_len();
        for (src_row, dst_row) in src.chunks_exact(in_w).zip(dst.chunks_exact_mut(out_w)) {
            for (x, d) in dst_row.iter_mut().enumerate() {
                let (idx, w) = self.taps(x);
                let mut acc = T::zero();
                for (&i, &wi) in idx.iter().zip(w) {
                    acc = acc + wi * src_row[i];
                }
                *d = acc;
            }
        }
    }

    /// Produce output row `y` of a vertical pass over a `(rows, width)` plane.
    #[inline]
    pub fn apply_vertical_row(&self, src: &[T], width: usize, y: usize, dst: &mut [T]) {
        dst.fill(T::zero());
        let (idx, w) = self.taps(y);
        for (&i, &wi) in idx.iter().zip(w) {
            let row = &src[i * width..][..width];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = *d + wi * s;
            }
        }
    }
}

/// Multiply-accumulates performed by [`resize`] for the given shapes.
pub fn resize_macs(input: crate::Shape, out_h: usize, out_w: usize, mode: ResizeMode) -> u64 {
    let h = AxisWeights::<f32>::new(input.width, out_w, mode).total_taps();
    let v = AxisWeights::<f32>::new(input.height, out_h, mode).total_taps();
    ((input.batch * input.channels) * (input.height * h + v * out_w)) as u64
}

pub fn resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(
            "resize",
            format!("output size must be >= 1x1, got {out_h}x{out_w}"),
        ));
    }
    let s = input.shape();
    let horizontal = AxisWeights::<T>::new(s.width, out_w, mode);
    let vertical = AxisWeights::<T>::new(s.height, out_h, mode);
    let out_shape = s.with_spatial(out_h, out_w);
    let mut out = Tensor::zeros(out_shape);
    let mut tmp = vec![T::zero(); s.height * out_w];
    for n in 0..s.batch {
        for c in 0..s.channels {
            horizontal.apply_horizontal(input.plane(n, c), s.width, &mut tmp);
            let dst = out.plane_mut(n, c);
            for (y, row) in dst.chunks_exact_mut(out_w).enumerate() {
                vertical.apply_vertical_row(&tmp, out_w, y, row);
            }
        }
    }
    Ok(out)
}
