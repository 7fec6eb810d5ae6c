//! im2col convolution kernels shared by the autodiff graph.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `C (+)= op(A) * op(B)` with `op(A)` of size `m x k` and `op(B)` of size `k x n`.
///
/// A transposed `A` is stored `k x m` row-major, a transposed `B` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, kc, k) = match kernel.shape()[..] {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => bail!(Dimension, "kernel must be [out, in, k, k], got {:?}", kernel.shape()),
        };
        if k % 2 == 0 {
            bail!(Config, "kernel size {} is even", k);
        }
        if kc != c_in {
            bail!(
                Dimension,
                "kernel expects {} input channels, input has {}",
                kc,
                c_in
            );
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if hp < k || wp < k {
            bail!(Dimension, "{}x{} input with padding {} smaller than kernel {}", h, w, padding, k);
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            pad: padding,
            ho: hp - k + 1,
            wo: wp - k + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let shift = kx as isize - g.pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.w as isize - shift).min(g.wo as isize)).max(0) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.cols();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let src = &src_row[oy * g.wo..(oy + 1) * g.wo];
                    let shift = kx as isize - g.pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.w as isize - shift).min(g.wo as isize)).max(0) as usize;
                    for ox in lo..hi {
                        dst[(ox as isize + shift) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeom,
) -> Result<Tensor> {
    if let Some(b) = bias {
        if b.len() != g.c_out {
            bail!(Dimension, "bias has {} entries for {} output channels", b.len(), g.c_out);
        }
    }
    let n = g.cols();
    let mut out = vec![0.0; g.c_out * n];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(n).zip(b.data()) {
            row.fill(bv);
        }
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), g);
        &owned
    };
    gemm(g.c_out, g.rows(), n, kernel.data(), false, cols, false, &mut out, bias.is_some());
    Ok(Tensor::from_parts(vec![g.c_out, g.ho, g.wo], out))
}

/// Accumulates input and kernel gradients; `dbias` gets the per-channel sums.
pub(crate) fn backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeom,
    dout: &[f64],
    dinput: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let n = g.cols();
    if let Some(db) = dbias {
        for (acc, row) in db.iter_mut().zip(dout.chunks(n)) {
            *acc += row.iter().sum::<f64>();
        }
    }
    if let Some(dk) = dkernel {
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            input.data()
        } else {
            owned = im2col(input.data(), g);
            &owned
        };
        gemm(g.c_out, n, g.rows(), dout, false, cols, true, dk, true);
    }
    if let Some(dx) = dinput {
        if g.is_pointwise() {
            gemm(g.rows(), g.c_out, n, kernel.data(), true, dout, false, dx, true);
        } else {
            let mut dcols = vec![0.0; g.rows() * n];
            gemm(g.rows(), g.c_out, n, kernel.data(), true, dout, false, &mut dcols, false);
            col2im_add(&dcols, g, dx);
        }
    }
}
