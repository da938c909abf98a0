//! Spatial resampling kernels: 2x2 average pooling and bilinear resize.

use crate::num::Scalar;
use crate::profiler::track;
use crate::tensor::Tensor;

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avgpool2_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let (ho, wo) = (h / 2, w / 2);
    track::pooling(4 * (c * ho * wo) as u64);
    let mut y = Tensor::zeros(vec![c, ho, wo]);
    let quarter = T::from_f64(0.25);
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            let r0 = &xd[(ch * h + 2 * oy) * w..(ch * h + 2 * oy + 1) * w];
            let r1 = &xd[(ch * h + 2 * oy + 1) * w..(ch * h + 2 * oy + 2) * w];
            let dst = &mut yd[(ch * ho + oy) * wo..(ch * ho + oy + 1) * wo];
            for ox in 0..wo {
                dst[ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avgpool2_bwd<T: Scalar>(dy: &Tensor<T>, in_shape: (usize, usize, usize)) -> Tensor<T> {
    let (c, h, w) = in_shape;
    let (_, ho, wo) = dy.dims3();
    let mut dx = Tensor::zeros(vec![c, h, w]);
    let quarter = T::from_f64(0.25);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dyd[(ch * ho + oy) * wo + ox] * quarter;
                for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dxd[(ch * h + 2 * oy + sy) * w + 2 * ox + sx] =
                        dxd[(ch * h + 2 * oy + sy) * w + 2 * ox + sx] + g;
                }
            }
        }
    }
    dx
}

#[inline]
fn src_coord<T: Scalar>(dst: usize, scale: f64, limit: usize) -> (usize, usize, T) {
    // Pixel-center mapping, clamped to the valid range.
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(limit - 1);
    (i0, i1, T::from_f64(s - i0 as f64))
}

/// Bilinear resize of a `(c, h, w)` tensor to `(c, oh, ow)`.
pub fn resize_bilinear_fwd<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.dims3();
    let mut y = Tensor::zeros(vec![c, oh, ow]);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let xd = x.data();
    let yd = y.data_mut();
    for oy in 0..oh {
        let (y0, y1, fy) = src_coord::<T>(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coord::<T>(ox, sx, w);
            let one = T::one();
            for ch in 0..c {
                let base = ch * h * w;
                let v = xd[base + y0 * w + x0] * (one - fy) * (one - fx)
                    + xd[base + y0 * w + x1] * (one - fy) * fx
                    + xd[base + y1 * w + x0] * fy * (one - fx)
                    + xd[base + y1 * w + x1] * fy * fx;
                yd[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear_fwd`], scattering gradients back to `(c, h, w)`.
pub fn resize_bilinear_bwd<T: Scalar>(dy: &Tensor<T>, in_shape: (usize, usize, usize)) -> Tensor<T> {
    let (c, h, w) = in_shape;
    let (_, oh, ow) = dy.dims3();
    let mut dx = Tensor::zeros(vec![c, h, w]);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for oy in 0..oh {
        let (y0, y1, fy) = src_coord::<T>(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coord::<T>(ox, sx, w);
            let one = T::one();
            for ch in 0..c {
                let g = dyd[(ch * oh + oy) * ow + ox];
                let base = ch * h * w;
                dxd[base + y0 * w + x0] = dxd[base + y0 * w + x0] + g * (one - fy) * (one - fx);
                dxd[base + y0 * w + x1] = dxd[base + y0 * w + x1] + g * (one - fy) * fx;
                dxd[base + y1 * w + x0] = dxd[base + y1 * w + x0] + g * fy * (one - fx);
                dxd[base + y1 * w + x1] = dxd[base + y1 * w + x1] + g * fy * fx;
            }
        }
    }
    dx
}

/// Bilinear point sample of one `(h, w)` plane with zero padding outside.
#[inline]
pub fn sample_plane_zero<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let yf = y.to_f64();
    let xf = x.to_f64();
    if yf <= -1.0 || xf <= -1.0 || yf >= h as f64 || xf >= w as f64 {
        return T::zero();
    }
    let y0 = yf.floor();
    let x0 = xf.floor();
    let fy = T::from_f64(yf - y0);
    let fx = T::from_f64(xf - x0);
    let one = T::one();
    let mut acc = T::zero();
    for (dy, wy) in [(0isize, one - fy), (1, fy)] {
        let iy = y0 as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for (dx, wx) in [(0isize, one - fx), (1, fx)] {
            let ix = x0 as isize + dx;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            acc = acc + plane[iy as usize * w + ix as usize] * wy * wx;
        }
    }
    acc
}
