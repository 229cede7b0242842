//! Fixed 3×3 Gaussian low-pass with reflect padding.

use alloc::{format, vec};

use crate::{Error, Real, Result, Tensor};

/// Normalized 3×3 samples of `exp(-(dx² + dy²) / (2σ²))`, indexed `[dy+1][dx+1]`.
pub fn gaussian_kernel3<T: Real>(sigma: T) -> Result<[[T; 3]; 3]> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::param(
            "sigma",
            format!("must be a positive finite real, got {sigma:?}"),
        ));
    }
    let two_var = T::of(2.0) * sigma * sigma;
    let mut k = [[T::zero(); 3]; 3];
    let mut sum = T::zero();
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, w) in row.iter_mut().enumerate() {
            let r2 = T::of(((dy as f64 - 1.0).powi(2)) + (dx as f64 - 1.0).powi(2));
            *w = (-r2 / two_var).exp();
            sum = sum + *w;
        }
    }
    for w in k.iter_mut().flatten() {
        *w = *w / sum;
    }
    Ok(k)
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge
/// sample (`-1 → 1`, `n → n - 2`). Degenerates to clamping when `n == 1`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Depthwise 3×3 Gaussian blur; output shape equals input shape.
pub fn gaussian_blur3<T: Real>(input: &Tensor<T>, sigma: T) -> Result<Tensor<T>> {
    let k = gaussian_kernel3(sigma)?;
    let s = input.shape();
    let (h, w) = (s.height, s.width);
    let mut out = Tensor::zeros(s);
    let mut rows = vec![T::zero(); 3 * (w + 2)];
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                // Three horizontally reflect-padded source rows.
                for (r, dy) in (-1isize..=1).enumerate() {
                    let sy = reflect(y as isize + dy, h);
                    let row = &src[sy * w..][..w];
                    let padded = &mut rows[r * (w + 2)..][..w + 2];
                    padded[1..=w].copy_from_slice(row);
                    padded[0] = row[reflect(-1, w)];
                    padded[w + 1] = row[reflect(w as isize, w)];
                }
                let out_row = &mut dst[y * w..][..w];
                for (x, o) in out_row.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (r, krow) in k.iter().enumerate() {
                        let p = &rows[r * (w + 2) + x..][..3];
                        acc = acc + krow[0] * p[0] + krow[1] * p[1] + krow[2] * p[2];
                    }
                    *o = acc;
                }
            }
        }
    }
    Ok(out)
}
