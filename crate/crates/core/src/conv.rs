//! im2col convolution kernels backed by `matrixmultiply`.
//!
//! Inputs are expected to be padded already; every convolution here is
//! "valid" over its input.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the element counts implied by the
    // shapes and strides above.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, dilation: usize) -> Result<Self> {
        if stride == 0 || dilation == 0 || k == 0 {
            return Err(dim_err!("conv: stride, dilation and kernel must be positive"));
        }
        let span = dilation * (k - 1) + 1;
        if h < span || w < span {
            return Err(dim_err!(
                "conv: input {}x{} smaller than dilated kernel span {}",
                h,
                w,
                span
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            k,
            stride,
            dilation,
            oh: (h - span) / stride + 1,
            ow: (w - span) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ky * g.dilation;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = kx * g.dilation;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[x0..x0 + g.ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[x0 + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let ohw = g.cols();
    for c in 0..g.cin {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ky * g.dilation;
                    let x0 = kx * g.dilation;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.ow {
                        dst[x0 + ox * g.stride] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv_shapes(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<()> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(dim_err!("conv: expected rank-4 input and weight, got {:?} and {:?}", x.shape(), w.shape()));
    }
    let (_, cin, _, _) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    if wcin != cin {
        return Err(dim_err!("conv: input has {} channels, weight expects {}", cin, wcin));
    }
    if kh != kw {
        return Err(dim_err!("conv: only square kernels are supported"));
    }
    if let Some(b) = b {
        if b.len() != cout {
            return Err(dim_err!("conv: bias has {} entries for {} outputs", b.len(), cout));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor> {
    check_conv_shapes(x, w, b)?;
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, dilation)?;
    let ohw = g.cols();
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let mut cols = vec![0.0; g.rows() * ohw];
    for s in 0..n {
        im2col(&x.data()[s * cin * h * wd..(s + 1) * cin * h * wd], &g, &mut cols);
        let dst = &mut out.data_mut()[s * cout * ohw..(s + 1) * cout * ohw];
        if let Some(b) = b {
            for (co, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        gemm(cout, g.rows(), ohw, w.data(), false, &cols, false, 1.0, dst);
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    dilation: usize,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let g = ConvGeom::new(cin, h, wd, k, stride, dilation).expect("geometry validated in forward");
    let ohw = g.cols();
    let rows = g.rows();
    let mut gx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut gw = need.1.then(|| Tensor::zeros(w.shape()));
    let mut gb = need.2.then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![0.0; rows * ohw];
    let mut gcols = vec![0.0; if need.0 { rows * ohw } else { 0 }];
    let in_len = cin * h * wd;
    for s in 0..n {
        let go = &gout.data()[s * cout * ohw..(s + 1) * cout * ohw];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
            gemm(cout, ohw, rows, go, false, &cols, true, 1.0, gw.data_mut());
        }
        if let Some(gb) = gb.as_mut() {
            for (co, row) in go.chunks(ohw).enumerate() {
                gb.data_mut()[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, cout, ohw, w.data(), true, go, false, 0.0, &mut gcols);
            col2im(&gcols, &g, &mut gx.data_mut()[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}
