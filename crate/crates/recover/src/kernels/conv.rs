//! 2D convolution forward/backward via im2col + GEMM, with a direct path for
//! depthwise kernels. Layout is channels-first, no batch axis.

use crate::num::Scalar;
use crate::profiler::track;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvMeta {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        ConvMeta { k, stride, pad, groups: 1 }
    }

    pub fn depthwise(k: usize, stride: usize, pad: usize, channels: usize) -> Self {
        ConvMeta { k, stride, pad, groups: channels }
    }

    #[inline]
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }
}

fn record_flops(ci: usize, co: usize, k: usize, ho: usize, wo: usize, groups: usize) {
    track::conv(2 * (k * k * (ci / groups) * co * ho * wo) as u64);
}

/// Unfold `x` into a `(ci*k*k, ho*wo)` column matrix.
fn im2col<T: Scalar>(x: &Tensor<T>, m: &ConvMeta, ho: usize, wo: usize) -> Tensor<T> {
    let (ci, h, w) = x.dims3();
    let k = m.k;
    let mut cols = Tensor::zeros(vec![ci * k * k, ho * wo]);
    let cd = cols.data_mut();
    let xd = x.data();
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k) + ky) * k + kx;
                let out_row = &mut cd[row * ho * wo..(row + 1) * ho * wo];
                let ox_lo = if kx >= m.pad { 0 } else { (m.pad - kx).div_ceil(m.stride) };
                let ox_hi = if w + m.pad <= kx {
                    0
                } else {
                    ((w + m.pad - kx - 1) / m.stride + 1).min(wo)
                };
                for oy in 0..ho {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xd[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let dst = &mut out_row[oy * wo..(oy + 1) * wo];
                    if m.stride == 1 {
                        // Contiguous span once the horizontal bounds are clipped.
                        if ox_lo < ox_hi {
                            let ix_lo = ox_lo + kx - m.pad;
                            dst[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * m.stride + kx - m.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `(ci*k*k, ho*wo)` column-gradient back onto the input layout.
fn col2im<T: Scalar>(dcols: &Tensor<T>, in_shape: (usize, usize, usize), m: &ConvMeta, ho: usize, wo: usize) -> Tensor<T> {
    let (ci, h, w) = in_shape;
    let k = m.k;
    let mut dx = Tensor::zeros(vec![ci, h, w]);
    let dxd = dx.data_mut();
    let cd = dcols.data();
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k) + ky) * k + kx;
                let src_row = &cd[row * ho * wo..(row + 1) * ho * wo];
                // Horizontal bounds are independent of the row; hoist them.
                let ox_lo = if kx >= m.pad { 0 } else { (m.pad - kx).div_ceil(m.stride) };
                let ox_hi = if w + m.pad <= kx {
                    0
                } else {
                    ((w + m.pad - kx - 1) / m.stride + 1).min(wo)
                };
                for oy in 0..ho {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxd[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let src = &src_row[oy * wo..(oy + 1) * wo];
                    if m.stride == 1 {
                        let ix0 = ox_lo + kx - m.pad;
                        let n = ox_hi.saturating_sub(ox_lo);
                        let d = &mut dst[ix0..ix0 + n];
                        let s = &src[ox_lo..ox_lo + n];
                        for i in 0..n {
                            d[i] = d[i] + s[i];
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * m.stride + kx - m.pad;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Forward convolution. Returns the output and, when `keep_cols` is set, the
/// im2col buffer for reuse in the backward pass.
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    m: &ConvMeta,
    keep_cols: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let (ci, h, wid) = x.dims3();
    let co = w.shape()[0];
    assert_eq!(w.shape()[1], ci / m.groups, "weight fan-in mismatch");
    assert_eq!(w.shape()[2], m.k);
    let ho = m.out_dim(h);
    let wo = m.out_dim(wid);
    record_flops(ci, co, m.k, ho, wo, m.groups);

    let mut y = Tensor::zeros(vec![co, ho, wo]);
    let mut cols_out = None;
    if m.groups == 1 {
        let cols = im2col(x, m, ho, wo);
        let kk = ci * m.k * m.k;
        unsafe {
            T::gemm(
                co,
                kk,
                ho * wo,
                T::one(),
                w.data().as_ptr(),
                kk as isize,
                1,
                cols.data().as_ptr(),
                (ho * wo) as isize,
                1,
                T::zero(),
                y.data_mut().as_mut_ptr(),
                (ho * wo) as isize,
                1,
            );
        }
        if keep_cols {
            cols_out = Some(cols);
        }
    } else {
        assert_eq!(m.groups, ci, "only dense or depthwise convolutions are supported");
        let mult = co / ci;
        let k = m.k;
        let yd = y.data_mut();
        let xd = x.data();
        let wd = w.data();
        for c_out in 0..co {
            let c_in = c_out / mult;
            let wbase = c_out * k * k;
            let ybase = c_out * ho * wo;
            for oy in 0..ho {
                for ky in 0..k {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xd[(c_in * h + iy as usize) * wid..(c_in * h + iy as usize + 1) * wid];
                    for kx in 0..k {
                        let wv = wd[wbase + ky * k + kx];
                        let dst = &mut yd[ybase + oy * wo..ybase + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix >= 0 && ix < wid as isize {
                                *d = *d + wv * src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = b {
        assert_eq!(bias.len(), co);
        let yd = y.data_mut();
        for c in 0..co {
            let bv = bias.data()[c];
            for v in &mut yd[c * ho * wo..(c + 1) * ho * wo] {
                *v = *v + bv;
            }
        }
    }
    (y, cols_out)
}

/// Backward convolution: gradients for input (skipped unless `need_dx`),
/// weights, and bias.
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    m: &ConvMeta,
    cols: Option<&Tensor<T>>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (ci, h, wid) = x.dims3();
    let (co, ho, wo) = dy.dims3();
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![co]);
    for c in 0..co {
        db.data_mut()[c] = dy.plane_view(c).iter().copied().sum();
    }

    if m.groups == 1 {
        let kk = ci * m.k * m.k;
        let owned;
        let cols = match cols {
            Some(c) => c,
            None => {
                owned = im2col(x, m, ho, wo);
                &owned
            }
        };
        // dW (co, kk) = dY (co, n) * cols^T (n, kk)
        unsafe {
            T::gemm(
                co,
                ho * wo,
                kk,
                T::one(),
                dy.data().as_ptr(),
                (ho * wo) as isize,
                1,
                cols.data().as_ptr(),
                1,
                (ho * wo) as isize,
                T::zero(),
                dw.data_mut().as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        let dx = if need_dx {
            // dCols (kk, n) = W^T (kk, co) * dY (co, n)
            let mut dcols = Tensor::zeros(vec![kk, ho * wo]);
            unsafe {
                T::gemm(
                    kk,
                    co,
                    ho * wo,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    kk as isize,
                    dy.data().as_ptr(),
                    (ho * wo) as isize,
                    1,
                    T::zero(),
                    dcols.data_mut().as_mut_ptr(),
                    (ho * wo) as isize,
                    1,
                );
            }
            Some(col2im(&dcols, (ci, h, wid), m, ho, wo))
        } else {
            None
        };
        (dx, dw, db)
    } else {
        assert_eq!(m.groups, ci);
        let mult = co / ci;
        let k = m.k;
        let mut dx = Tensor::zeros(vec![ci, h, wid]);
        let xd = x.data();
        let wd = w.data();
        let dyd = dy.data();
        let dwd = dw.data_mut();
        let dxd = dx.data_mut();
        for c_out in 0..co {
            let c_in = c_out / mult;
            let wbase = c_out * k * k;
            let ybase = c_out * ho * wo;
            for oy in 0..ho {
                for ky in 0..k {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = iy as usize;
                    for kx in 0..k {
                        let wv = wd[wbase + ky * k + kx];
                        let mut wgrad = T::zero();
                        for ox in 0..wo {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix >= 0 && ix < wid as isize {
                                let g = dyd[ybase + oy * wo + ox];
                                let xi = (c_in * h + row) * wid + ix as usize;
                                wgrad = wgrad + g * xd[xi];
                                dxd[xi] = dxd[xi] + g * wv;
                            }
                        }
                        dwd[wbase + ky * k + kx] = dwd[wbase + ky * k + kx] + wgrad;
                    }
                }
            }
        }
        (need_dx.then_some(dx), dw, db)
    }
}

trait PlaneView<T> {
    fn plane_view(&self, c: usize) -> &[T];
}

impl<T: Scalar> PlaneView<T> for Tensor<T> {
    fn plane_view(&self, c: usize) -> &[T] {
        let (_, h, w) = self.dims3();
        &self.data()[c * h * w..(c + 1) * h * w]
    }
}
