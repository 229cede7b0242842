//! Brute-force reference implementations.
//!
//! Everything here is written directly from the defining formulas with plain
//! loops over `f64`, sharing no kernel code with the engine. They are slow on
//! purpose and only meant for small randomized cases.

use cpe_core::{Multivector, Shape, Tensor};

/// Naive zero-padded grouped convolution. `weight` dims are `[O, I/groups, kh, kw]`.
pub fn conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&[f64]>,
    groups: usize,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let s = input.shape();
    let w = weight.shape();
    let (o_ch, ipg, kh, kw) = (w.batch, w.channels, w.height, w.width);
    let oh = (s.height + 2 * padding - kh) / stride + 1;
    let ow = (s.width + 2 * padding - kw) / stride + 1;
    let opg = o_ch / groups;
    let out = Shape::new(s.batch, o_ch, oh, ow);
    Tensor::from_fn(out, |n, o, y, x| {
        let g = o / opg;
        let mut acc = bias.map_or(0.0, |b| b[o]);
        for i in 0..ipg {
            let c = g * ipg + i;
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (y * stride + ky) as isize - padding as isize;
                    let ix = (x * stride + kx) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                        continue;
                    }
                    acc += weight.at(o, i, ky, kx) * input.at(n, c, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
    .expect("oracle shapes are valid")
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * n - 2 - i };
    }
    i as usize
}

/// 3×3 Gaussian weights straight from the exponential, normalized.
pub fn gaussian_weights(sigma: f64) -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, w) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 1.0, dx as f64 - 1.0);
            *w = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().flatten().sum();
    k.iter_mut().flatten().for_each(|w| *w /= total);
    k
}

/// Reflect-padded 3×3 Gaussian blur.
pub fn gaussian_blur3(input: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let s = input.shape();
    let k = gaussian_weights(sigma);
    Tensor::from_fn(s, |n, c, y, x| {
        let mut acc = 0.0;
        for (dy, row) in k.iter().enumerate() {
            for (dx, &w) in row.iter().enumerate() {
                let iy = mirror(y as isize + dy as isize - 1, s.height);
                let ix = mirror(x as isize + dx as isize - 1, s.width);
                acc += w * input.at(n, c, iy, ix);
            }
        }
        acc
    })
    .expect("oracle shapes are valid")
}

/// Half-pixel-centered source coordinate for output index `i`.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

fn catmull_rom(d: f64) -> f64 {
    let d = d.abs();
    if d <= 1.0 {
        1.5 * d * d * d - 2.5 * d * d + 1.0
    } else if d < 2.0 {
        -0.5 * d * d * d + 2.5 * d * d - 4.0 * d + 2.0
    } else {
        0.0
    }
}

/// Taps `(index, weight)` for one output index along one axis.
fn axis_taps(i: usize, in_len: usize, out_len: usize, mode: cpe_core::ResizeMode) -> Vec<(usize, f64)> {
    use cpe_core::ResizeMode::*;
    match mode {
        Bilinear => {
            let src = source_coord(i, in_len, out_len).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = if lo + 1 < in_len { lo + 1 } else { lo };
            let t = src - lo as f64;
            vec![(lo, 1.0 - t), (hi, t)]
        }
        Bicubic => {
            let src = source_coord(i, in_len, out_len);
            let f = src.floor() as isize;
            (f - 1..=f + 2)
                .map(|j| {
                    let idx = j.clamp(0, in_len as isize - 1) as usize;
                    (idx, catmull_rom(src - j as f64))
                })
                .collect()
        }
        Area => {
            // Adaptive average pooling bins.
            let start = (i * in_len) / out_len;
            let end = ((i + 1) * in_len + out_len - 1) / out_len;
            let w = 1.0 / (end - start) as f64;
            (start..end).map(|j| (j, w)).collect()
        }
    }
}

/// Per-pixel separable resampling, evaluated as a full 2D tap product.
pub fn resize(input: &Tensor<f64>, out_h: usize, out_w: usize, mode: cpe_core::ResizeMode) -> Tensor<f64> {
    let s = input.shape();
    Tensor::from_fn(s.with_spatial(out_h, out_w), |n, c, y, x| {
        let ty = axis_taps(y, s.height, out_h, mode);
        let tx = axis_taps(x, s.width, out_w, mode);
        let mut acc = 0.0;
        for &(iy, wy) in &ty {
            for &(ix, wx) in &tx {
                acc += wy * wx * input.at(n, c, iy, ix);
            }
        }
        acc
    })
    .expect("oracle shapes are valid")
}

pub fn channel_mean(input: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape();
    Tensor::from_fn(s.with_channels(1), |n, _, y, x| {
        (0..s.channels).map(|c| input.at(n, c, y, x)).sum::<f64>() / s.channels as f64
    })
    .expect("oracle shapes are valid")
}

pub fn channel_max(input: &Tensor<f64>) -> Tensor<f64> {
    let s = input.shape();
    Tensor::from_fn(s.with_channels(1), |n, _, y, x| {
        (0..s.channels)
            .map(|c| input.at(n, c, y, x))
            .fold(f64::NEG_INFINITY, f64::max)
    })
    .expect("oracle shapes are valid")
}

/// Cl(2,0) geometric product via basis-blade bitmasks: bit 0 is e1, bit 1 is
/// e2. The sign counts the transpositions needed to sort the concatenated
/// blades; repeated vectors square to +1.
pub fn blade_product(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    // Component order is 1, e1, e2, e12 which is bitmask order 0, 1, 2, 3.
    let sign = |x: usize, y: usize| -> f64 {
        let mut swaps = 0;
        let mut x = x >> 1;
        while x != 0 {
            swaps += (x & y).count_ones();
            x >>= 1;
        }
        if swaps % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    };
    let mut out = [0.0; 4];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i ^ j] += sign(i, j) * ai * bj;
        }
    }
    out
}

pub fn blade_product_mv(a: Multivector<f64>, b: Multivector<f64>) -> Multivector<f64> {
    Multivector::from_components(blade_product(a.components(), b.components()))
}
