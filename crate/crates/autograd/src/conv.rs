//! Strided "valid" 2-D convolution (cross-correlation) on NHWC tensors.
//!
//! Weights are laid out `[KH, KW, C_in, C_out]`. The forward map, its input
//! gradient and its weight gradient are three faces of one trilinear form
//! `F(x, w, g) = <conv(x, w), g>`, so each one's backward rule is expressed
//! with the other two.

use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x_shape: [usize; 4], w_shape: &[usize], stride: usize) -> Self {
        let [n, h, w, cin] = x_shape;
        let &[kh, kw, wcin, cout] = w_shape else {
            panic!("conv weight must be [KH, KW, C_in, C_out], got {w_shape:?}")
        };
        assert_eq!(cin, wcin, "conv: input has {cin} channels, weight expects {wcin}");
        assert!(stride >= 1, "conv stride must be positive");
        assert!(h >= kh && w >= kw, "conv: input {h}x{w} smaller than kernel {kh}x{kw}");
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        Self { n, h, w, cin, kh, kw, cout, stride, ho, wo }
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.ho * self.wo
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.cout]
    }

    fn in_shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.cin]
    }

    /// Patch matrix `[Ho*Wo, KH*KW*C_in]` of sample `b`.
    fn im2col(&self, x: &[f64], b: usize, cols: &mut [f64]) {
        let k = self.k();
        let c = self.cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = oy * self.stride + ky;
                    for kx in 0..self.kw {
                        let ix = ox * self.stride + kx;
                        let s = ((b * self.h + iy) * self.w + ix) * c;
                        row[(ky * self.kw + kx) * c..][..c].copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch matrix back into sample `b` of `x`.
    fn col2im(&self, cols: &[f64], b: usize, x: &mut [f64]) {
        let k = self.k();
        let c = self.cin;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = oy * self.stride + ky;
                    for kx in 0..self.kw {
                        let ix = ox * self.stride + kx;
                        let d = ((b * self.h + iy) * self.w + ix) * c;
                        for (xv, cv) in x[d..d + c].iter_mut().zip(&row[(ky * self.kw + kx) * c..][..c]) {
                            *xv += cv;
                        }
                    }
                }
            }
        }
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major dense matrices, where
/// `op(A)` is `m×k` and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements, and the
    // strides above address exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward_value(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let g = Geometry::new(x.dims4(), w.shape(), stride);
    let (rows, k) = (g.rows(), g.k());
    let mut out = vec![0.0; g.n * rows * g.cout];
    let mut cols = vec![0.0; rows * k];
    for b in 0..g.n {
        g.im2col(x.data(), b, &mut cols);
        gemm(rows, k, g.cout, &cols, false, w.data(), false, 0.0, &mut out[b * rows * g.cout..][..rows * g.cout]);
    }
    Tensor::new(&g.out_shape(), out)
}

fn input_grad_value(gy: &Tensor, w: &Tensor, stride: usize, x_shape: [usize; 4]) -> Tensor {
    let g = Geometry::new(x_shape, w.shape(), stride);
    assert_eq!(gy.dims4(), g.out_shape(), "conv input-grad: output gradient shape");
    let (rows, k) = (g.rows(), g.k());
    let mut dx = vec![0.0; x_shape.iter().product()];
    let mut cols = vec![0.0; rows * k];
    for b in 0..g.n {
        let gyb = &gy.data()[b * rows * g.cout..][..rows * g.cout];
        gemm(rows, g.cout, k, gyb, false, w.data(), true, 0.0, &mut cols);
        g.col2im(&cols, b, &mut dx);
    }
    Tensor::new(&g.in_shape(), dx)
}

fn weight_grad_value(x: &Tensor, gy: &Tensor, stride: usize, w_shape: &[usize]) -> Tensor {
    let g = Geometry::new(x.dims4(), w_shape, stride);
    assert_eq!(gy.dims4(), g.out_shape(), "conv weight-grad: output gradient shape");
    let (rows, k) = (g.rows(), g.k());
    let mut dw = vec![0.0; k * g.cout];
    let mut cols = vec![0.0; rows * k];
    for b in 0..g.n {
        g.im2col(x.data(), b, &mut cols);
        let gyb = &gy.data()[b * rows * g.cout..][..rows * g.cout];
        gemm(k, rows, g.cout, &cols, true, gyb, false, 1.0, &mut dw);
    }
    Tensor::new(w_shape, dw)
}

/// Valid cross-correlation of `x` `[N,H,W,C_in]` with `w` `[KH,KW,C_in,C_out]`.
pub fn conv2d(x: &Var, w: &Var, stride: usize) -> Var {
    let value = forward_value(x.value(), w.value(), stride);
    Var::from_op(value, "conv2d", vec![x.clone(), w.clone()], move |ctx| {
        let [x, w] = [&ctx.inputs[0], &ctx.inputs[1]];
        vec![
            ctx.needs[0].then(|| conv2d_input_grad(ctx.grad, w, stride, x.value().dims4())),
            ctx.needs[1].then(|| conv2d_weight_grad(x, ctx.grad, stride, w.shape())),
        ]
    })
}

/// Gradient of `<conv2d(x, w), gy>` with respect to `x` (a transposed convolution).
pub fn conv2d_input_grad(gy: &Var, w: &Var, stride: usize, x_shape: [usize; 4]) -> Var {
    let value = input_grad_value(gy.value(), w.value(), stride, x_shape);
    Var::from_op(value, "conv2d_input_grad", vec![gy.clone(), w.clone()], move |ctx| {
        let [gy, w] = [&ctx.inputs[0], &ctx.inputs[1]];
        vec![
            ctx.needs[0].then(|| conv2d(ctx.grad, w, stride)),
            ctx.needs[1].then(|| conv2d_weight_grad(ctx.grad, gy, stride, w.shape())),
        ]
    })
}

/// Gradient of `<conv2d(x, w), gy>` with respect to `w`.
pub fn conv2d_weight_grad(x: &Var, gy: &Var, stride: usize, w_shape: &[usize]) -> Var {
    let value = weight_grad_value(x.value(), gy.value(), stride, w_shape);
    Var::from_op(value, "conv2d_weight_grad", vec![x.clone(), gy.clone()], move |ctx| {
        let [x, gy] = [&ctx.inputs[0], &ctx.inputs[1]];
        vec![
            ctx.needs[0].then(|| conv2d_input_grad(gy, ctx.grad, stride, x.value().dims4())),
            ctx.needs[1].then(|| conv2d(x, ctx.grad, stride)),
        ]
    })
}
