//! Slice-level kernels behind the tape ops: GEMM, patch expansion for
//! convolution, and max pooling.

use crate::error::{Error, Result};
use crate::Real;

/// A row-major matrix view, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [Real],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [Real], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical transpose of this view without copying.
    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        let c = self.cols as isize;
        if self.transposed {
            (self.cols, self.rows, 1, c)
        } else {
            (self.rows, self.cols, c, 1)
        }
    }
}

/// `out = beta * out + a * b` where `out` is row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [Real], beta: Real) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `out` does not alias the inputs (&mut borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length of a strided window sweep.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Resolved shapes of one 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {input:?} and {weight:?}"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} has {c} channels but weight {weight:?} expects {ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("only square kernels are supported, weight {weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {input:?} (padding {padding})"),
            ));
        }
        Ok(Conv2dGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel: kh,
            stride,
            padding,
            out_height: conv_output_len(h, kh, stride, padding),
            out_width: conv_output_len(w, kw, stride, padding),
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Rows of the patch matrix: one per (channel, ki, kj).
    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn patch_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Expands one image `[C, H, W]` into its `[C*k*k, Ho*Wo]` patch matrix.
    fn im2col(&self, image: &[Real], col: &mut [Real]) {
        let k = self.kernel;
        let p = self.patch_cols();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oh in 0..self.out_height {
                        let ih = (oh * self.stride + ki) as isize - pad;
                        let line = &mut dst[oh * self.out_width..(oh + 1) * self.out_width];
                        if ih < 0 || ih >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - pad;
                            *v = if iw < 0 || iw >= self.width as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto one image gradient.
    fn col2im(&self, col: &[Real], image: &mut [Real]) {
        let k = self.kernel;
        let p = self.patch_cols();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oh in 0..self.out_height {
                        let ih = (oh * self.stride + ki) as isize - pad;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane
                            [ih as usize * self.width..(ih as usize + 1) * self.width];
                        let line = &src[oh * self.out_width..(oh + 1) * self.out_width];
                        for (ow, g) in line.iter().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - pad;
                            if iw >= 0 && iw < self.width as isize {
                                dst[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, input: &[Real], weight: &[Real]) -> Vec<Real> {
        let (kr, p, co) = (self.patch_rows(), self.patch_cols(), self.out_channels);
        let mut out = vec![0.0; self.batch * co * p];
        let mut col = vec![0.0; kr * p];
        let w = Mat::new(weight, co, kr);
        for n in 0..self.batch {
            self.im2col(&input[n * self.image_len()..(n + 1) * self.image_len()], &mut col);
            gemm(w, Mat::new(&col, kr, p), &mut out[n * co * p..(n + 1) * co * p], 0.0);
        }
        out
    }

    /// Accumulates input and/or weight gradients for upstream `grad_out`.
    pub(crate) fn backward(
        &self,
        input: &[Real],
        weight: &[Real],
        grad_out: &[Real],
        mut grad_input: Option<&mut [Real]>,
        mut grad_weight: Option<&mut [Real]>,
    ) {
        let (kr, p, co) = (self.patch_rows(), self.patch_cols(), self.out_channels);
        let mut col = vec![0.0; kr * p];
        let w = Mat::new(weight, co, kr);
        for n in 0..self.batch {
            let g = Mat::new(&grad_out[n * co * p..(n + 1) * co * p], co, p);
            if let Some(gw) = grad_weight.as_deref_mut() {
                self.im2col(&input[n * self.image_len()..(n + 1) * self.image_len()], &mut col);
                gemm(g, Mat::new(&col, kr, p).t(), gw, 1.0);
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                gemm(w.t(), g, &mut col, 0.0);
                self.col2im(
                    &col,
                    &mut gi[n * self.image_len()..(n + 1) * self.image_len()],
                );
            }
        }
    }
}

/// Max pooling over `[N, C, H, W]`; returns the pooled values and, for each
/// output element, the flat input index that supplied it. Ties resolve to the
/// first window element in row-major order.
pub(crate) fn maxpool_forward(
    input: &[Real],
    shape: &[usize],
    k: usize,
    stride: usize,
) -> (Vec<Real>, Vec<usize>, [usize; 4]) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = Real::NEG_INFINITY;
                let mut best_idx = base + oh * stride * w + ow * stride;
                for ki in 0..k {
                    let row = base + (oh * stride + ki) * w + ow * stride;
                    for kj in 0..k {
                        let v = input[row + kj];
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, [n, c, ho, wo])
}
