//! Full-reference image quality metrics, computed in `f64`.

use alloc::{format, vec, vec::Vec};

use crate::{Error, Real, Result, Tensor};

/// Returned for identical inputs instead of `+∞`.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_shapes<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 · log10(1 / MSE)` for signals in `[0, 1]`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * libm_log10(mse)).min(PSNR_CAP_DB))
}

fn libm_log10(x: f64) -> f64 {
    num_traits::Float::log10(x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                num_traits::Float::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..][..w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in k.iter().enumerate() {
            let row = &tmp[(y + i) * ow..][..ow];
            for (o, &v) in out[y * ow..][..ow].iter_mut().zip(row) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Mean SSIM over channels and all fully-contained windows.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let s = a.shape();
    if s.height < cfg.window || s.width < cfg.window {
        return Err(Error::param(
            "ssim",
            format!("image {}x{} smaller than the {} window", s.height, s.width, cfg.window),
        ));
    }
    let k = cfg.kernel_1d();
    let c1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
    let c2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);
    let (mut total, mut count) = (0.0, 0usize);
    for n in 0..s.batch {
        for c in 0..s.channels {
            let x: Vec<f64> = a.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = b.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mx = filter_valid(&x, s.height, s.width, &k);
            let my = filter_valid(&y, s.height, s.width, &k);
            let mxx = filter_valid(&prod(&x, &x), s.height, s.width, &k);
            let myy = filter_valid(&prod(&y, &y), s.height, s.width, &k);
            let mxy = filter_valid(&prod(&x, &y), s.height, s.width, &k);
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = mxx[i] - ux * ux;
                let vy = myy[i] - uy * uy;
                let cov = mxy[i] - ux * uy;
                let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
                let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
