//! Grouped 2D convolution with symmetric zero padding.
//!
//! Covers dense, depthwise (`groups == in_channels`) and pointwise (1×1)
//! layers. The inner loops are row `axpy`s over contiguous memory so they
//! auto-vectorize; accumulation order is fixed, so results are deterministic.

use alloc::{format, vec, vec::Vec};

use crate::{Error, Real, Result, Shape, Tensor};

/// A convolution layer: kernel `(out_ch, in_ch / groups, kH, kW)` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = weight.shape();
        if groups == 0 || w.batch % groups != 0 {
            return Err(Error::param(
                "groups",
                format!("{} output channels not divisible by {groups} groups", w.batch),
            ));
        }
        if w.height % 2 == 0 || w.width % 2 == 0 {
            return Err(Error::param(
                "kernel",
                format!("kernel {}x{} must have odd extents", w.height, w.width),
            ));
        }
        if stride == 0 {
            return Err(Error::param("stride", "stride must be >= 1"));
        }
        if let Some(b) = &bias {
            if b.len() != w.batch {
                return Err(Error::shape(
                    "conv bias",
                    format!("{} values for {} output channels", b.len(), w.batch),
                ));
            }
        }
        Ok(ConvSpec {
            weight,
            bias,
            groups,
            stride,
            padding,
        })
    }

    /// Stride 1 with `(k - 1) / 2` padding, so spatial size is preserved.
    pub fn same(weight: Tensor<T>, bias: Option<Vec<T>>, groups: usize) -> Result<Self> {
        let pad = (weight.shape().height - 1) / 2;
        if weight.shape().height != weight.shape().width {
            return Err(Error::param("kernel", "same-padding needs a square kernel"));
        }
        Self::new(weight, bias, groups, 1, pad)
    }

    /// Same layer with weights converted to another precision.
    pub fn cast<U: Real>(&self) -> ConvSpec<U> {
        ConvSpec {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.as_f64())).collect()),
            groups: self.groups,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_per_group(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group() * self.groups
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape().height, self.weight.shape().width)
    }

    pub fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.groups == self.out_channels() && self.groups > 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_size() == (1, 1) && self.groups == 1
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Multiply-accumulates needed to produce an output of `out` shape.
    pub fn macs(&self, out: Shape) -> u64 {
        let (kh, kw) = self.kernel_size();
        (out.len() * self.in_per_group() * kh * kw) as u64
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {input} has {} channels, kernel expects {}",
                    input.channels,
                    self.in_channels()
                ),
            ));
        }
        let (kh, kw) = self.kernel_size();
        let (ph, pw) = (input.height + 2 * self.padding, input.width + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Shape::new(
            input.batch,
            self.out_channels(),
            (ph - kh) / self.stride + 1,
            (pw - kw) / self.stride + 1,
        ))
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    let in_shape = input.shape();
    let (kh, kw) = spec.kernel_size();
    let out_per_group = spec.out_channels() / spec.groups;
    let in_per_group = spec.in_per_group();
    let pad = spec.padding as isize;
    let stride = spec.stride;
    let (ih, iw) = (in_shape.height as isize, in_shape.width as isize);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let weights = spec.weight.data();

    let mut data = vec![T::zero(); out_shape.len()];
    let plane = out_shape.plane();
    for n in 0..out_shape.batch {
        for oc in 0..spec.out_channels() {
            let out = &mut data[(n * out_shape.channels + oc) * plane..][..plane];
            if let Some(b) = &spec.bias {
                out.fill(b[oc]);
            }
            let group = oc / out_per_group;
            for icg in 0..in_per_group {
                let src = input.plane(n, group * in_per_group + icg);
                let wbase = (oc * in_per_group + icg) * kh * kw;
                if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                    axpy(weights[wbase], src, out);
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = weights[wbase + ky * kw + kx];
                        let dx = kx as isize - pad;
                        for oy in 0..oh {
                            let iy = (oy * stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let src_row = &src[iy as usize * in_shape.width..][..in_shape.width];
                            let dst_row = &mut out[oy * ow..][..ow];
                            if stride == 1 {
                                let lo = (-dx).max(0) as usize;
                                let hi = ((iw - dx).min(ow as isize)).max(0) as usize;
                                if lo < hi {
                                    let s = (lo as isize + dx) as usize;
                                    axpy(w, &src_row[s..s + (hi - lo)], &mut dst_row[lo..hi]);
                                }
                            } else {
                                for (ox, d) in dst_row.iter_mut().enumerate() {
                                    let ix = (ox * stride) as isize + dx;
                                    if ix >= 0 && ix < iw {
                                        *d = *d + w * src_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, data))
}

/// Per-pixel linear map across channels (1×1 kernel, one group).
pub fn pointwise_conv<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    if !spec.is_pointwise() {
        let (kh, kw) = spec.kernel_size();
        return Err(Error::shape(
            "pointwise_conv",
            format!("kernel {kh}x{kw} with {} groups is not pointwise", spec.groups),
        ));
    }
    conv2d(input, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn box_kernel_on_ones() {
        let spec = ConvSpec::same(ones(Shape::new(1, 1, 3, 3)), None, 1).unwrap();
        let out = conv2d(&ones(Shape::new(1, 1, 3, 3)), &spec).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn(Shape::new(2, 1, 3, 4), |n, _, y, x| (n * 12 + y * 4 + x) as f32).unwrap();
        let spec = ConvSpec::new(ones(Shape::new(1, 1, 1, 1)), None, 1, 1, 0).unwrap();
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn depthwise_sign_flip() {
        let x = Tensor::new(Shape::new(1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let w = Tensor::new(Shape::new(2, 1, 1, 1), vec![1.0, -1.0]).unwrap();
        let spec = ConvSpec::new(w, None, 2, 1, 0).unwrap();
        assert!(spec.is_depthwise());
        let out = conv2d(&x, &spec).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, -5.0, -6.0, -7.0, -8.0]);
    }

    #[test]
    fn pointwise_sum_and_difference() {
        let x = Tensor::new(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let w = Tensor::new(Shape::new(2, 2, 1, 1), vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let out = pointwise_conv(&x, &ConvSpec::new(w, None, 1, 1, 0).unwrap()).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, -9.0, -18.0]);
    }

    #[test]
    fn pointwise_identity_and_bias() {
        let x = Tensor::from_fn(Shape::new(1, 12, 3, 3), |_, c, y, x| (c * 9 + y * 3 + x) as f32 * 0.1).unwrap();
        let eye = Tensor::from_fn(Shape::new(12, 12, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 }).unwrap();
        let out = pointwise_conv(&x, &ConvSpec::new(eye, None, 1, 1, 0).unwrap()).unwrap();
        assert_eq!(out, x);

        let zero = Tensor::zeros(Shape::new(2, 12, 1, 1));
        let spec = ConvSpec::new(zero, Some(vec![0.5, 0.5]), 1, 1, 0).unwrap();
        let out = pointwise_conv(&x, &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn errors() {
        let spec = ConvSpec::same(ones(Shape::new(1, 2, 3, 3)), None, 1).unwrap();
        let err = conv2d(&ones(Shape::new(1, 3, 4, 4)), &spec).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
        assert!(ConvSpec::same(ones(Shape::new(3, 1, 3, 3)), None, 2).is_err());
        assert!(ConvSpec::same(ones(Shape::new(1, 1, 2, 2)), None, 1).is_err());
        assert!(pointwise_conv(&ones(Shape::new(1, 2, 4, 4)), &spec).is_err());
    }

    #[test]
    fn strided_output_size() {
        let spec = ConvSpec::new(ones(Shape::new(1, 1, 3, 3)), None, 1, 2, 1).unwrap();
        let out = conv2d(&ones(Shape::new(1, 1, 5, 5)), &spec).unwrap();
        assert_eq!((out.shape().height, out.shape().width), (3, 3));
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
    }
}
