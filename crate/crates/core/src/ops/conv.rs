//! 2-d cross-correlation (no kernel flip) lowered to GEMM through im2col.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let op = "conv2d";
        let [_, c, h, w] = match *input_shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape(op, "input NCHW", format!("{input_shape:?}"))),
        };
        let [o, wc, kh, kw] = match *weight_shape {
            [o, c, kh, kw] => [o, c, kh, kw],
            _ => return Err(Error::shape(op, "weight OIKK", format!("{weight_shape:?}"))),
        };
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d: stride must be >= 1".into()));
        }
        if wc != c {
            return Err(Error::shape(
                op,
                format!("input channels (dim 1) = weight in-channels {wc}"),
                format!("input channels {c}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                op,
                format!("padded input at least kernel {kh}x{kw}"),
                format!("{h}x{w} with padding {padding}"),
            ));
        }
        Ok(ConvGeometry {
            in_channels: c,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when im2col is the identity (1×1 kernel, unit stride, no padding).
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let p = g.padding as isize;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix >= 0 && ix < g.in_w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let p = g.padding as isize;
    let s = g.stride;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        b.ensure_shape("conv2d_forward bias", &[g.out_channels])?;
    }
    let n = input.shape()[0];
    let mut out = vec![T::zero(); n * g.out_len()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let w = MatRef::new(weight.data(), g.out_channels, g.col_rows());
    for b in 0..n {
        let image = &input.data()[b * g.in_len()..(b + 1) * g.in_len()];
        let dst = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        let rhs = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        gemm(w, MatRef::new(rhs, g.col_rows(), g.col_cols()), T::zero(), dst);
        if let Some(bias) = bias {
            let plane = g.out_h * g.out_w;
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new([n, g.out_channels, g.out_h, g.out_w], out)
}

fn check_grad_out<T: Scalar>(g: &ConvGeometry, n: usize, grad_out: &Tensor<T>) -> Result<()> {
    grad_out.ensure_shape("conv2d_backward grad_out", &[n, g.out_channels, g.out_h, g.out_w])
}

/// Gradient w.r.t. the input: the transposed convolution of `grad_out` with `weight`.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input_shape, weight.shape(), stride, padding)?;
    let n = input_shape[0];
    check_grad_out(&g, n, grad_out)?;
    let mut grad_in = vec![T::zero(); n * g.in_len()];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let wt = MatRef::new(weight.data(), g.out_channels, g.col_rows()).t();
    for b in 0..n {
        let go = &grad_out.data()[b * g.out_len()..(b + 1) * g.out_len()];
        let dst = &mut grad_in[b * g.in_len()..(b + 1) * g.in_len()];
        if g.is_pointwise() {
            gemm(wt, MatRef::new(go, g.out_channels, g.col_cols()), T::zero(), dst);
        } else {
            gemm(wt, MatRef::new(go, g.out_channels, g.col_cols()), T::zero(), &mut cols);
            col2im_add(&g, &cols, dst);
        }
    }
    Tensor::new(input_shape, grad_in)
}

/// Gradients w.r.t. weight and bias.
pub fn conv2d_backward_params<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(cached_input.shape(), weight_shape, stride, padding)?;
    let n = cached_input.shape()[0];
    check_grad_out(&g, n, grad_out)?;
    let mut grad_w = vec![T::zero(); g.out_channels * g.col_rows()];
    let mut grad_b = vec![T::zero(); g.out_channels];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let plane = g.out_h * g.out_w;
    for b in 0..n {
        let image = &cached_input.data()[b * g.in_len()..(b + 1) * g.in_len()];
        let go = &grad_out.data()[b * g.out_len()..(b + 1) * g.out_len()];
        let rhs = if g.is_pointwise() {
            image
        } else {
            im2col(&g, image, &mut cols);
            &cols
        };
        gemm(
            MatRef::new(go, g.out_channels, g.col_cols()),
            MatRef::new(rhs, g.col_rows(), g.col_cols()).t(),
            T::one(),
            &mut grad_w,
        );
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += go[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    Ok((Tensor::new(weight_shape, grad_w)?, Tensor::new([g.out_channels], grad_b)?))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let gi = conv2d_backward_input(grad_out, cached_input.shape(), weight, stride, padding)?;
    let (gw, gb) = conv2d_backward_params(grad_out, cached_input, weight.shape(), stride, padding)?;
    Ok((gi, gw, gb))
}
