//! Normalization kernels with learnable affine parameters.
//!
//! `instance_norm` normalizes each channel over its spatial extent;
//! `channel_norm` normalizes across channels at each spatial position
//! (the layer-norm variant used by the large-kernel backbone).

use crate::num::Scalar;
use crate::tensor::Tensor;

pub struct NormSaved<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
}

pub fn instance_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, NormSaved<T>) {
    let (c, h, w) = x.dims3();
    let n = T::from_f64((h * w) as f64);
    let mut y = Tensor::zeros(vec![c, h, w]);
    let mut xhat = Tensor::zeros(vec![c, h, w]);
    let mut invstd = vec![T::zero(); c];
    for ch in 0..c {
        let src = x.plane(ch);
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = (var + eps).sqrt().recip();
        invstd[ch] = is;
        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        let xh = xhat.plane_mut(ch);
        for (i, &v) in src.iter().enumerate() {
            xh[i] = (v - mean) * is;
        }
        let dst = y.plane_mut(ch);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = xh[i] * g + b;
        }
    }
    (y, NormSaved { xhat, invstd })
}

pub fn instance_norm_bwd<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = dy.dims3();
    let n = T::from_f64((h * w) as f64);
    let mut dx = Tensor::zeros(vec![c, h, w]);
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let g = gamma.data()[ch];
        let is = saved.invstd[ch];
        let dyp = &dy.data()[ch * h * w..(ch + 1) * h * w];
        let xh = saved.xhat.plane(ch);
        let sum_dy = dyp.iter().copied().sum::<T>();
        let sum_dy_xh = dyp.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
        dgamma.data_mut()[ch] = sum_dy_xh;
        dbeta.data_mut()[ch] = sum_dy;
        let mean_dy = sum_dy / n;
        let mean_dy_xh = sum_dy_xh / n;
        let dxp = dx.plane_mut(ch);
        for i in 0..dxp.len() {
            dxp[i] = g * is * (dyp[i] - mean_dy - xh[i] * mean_dy_xh);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn channel_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, NormSaved<T>) {
    let (c, h, w) = x.dims3();
    let hw = h * w;
    let n = T::from_f64(c as f64);
    let mut y = Tensor::zeros(vec![c, h, w]);
    let mut xhat = Tensor::zeros(vec![c, h, w]);
    let mut invstd = vec![T::zero(); hw];
    let xd = x.data();
    for p in 0..hw {
        let mut mean = T::zero();
        for ch in 0..c {
            mean = mean + xd[ch * hw + p];
        }
        mean = mean / n;
        let mut var = T::zero();
        for ch in 0..c {
            let d = xd[ch * hw + p] - mean;
            var = var + d * d;
        }
        var = var / n;
        let is = (var + eps).sqrt().recip();
        invstd[p] = is;
        for ch in 0..c {
            let xh = (xd[ch * hw + p] - mean) * is;
            xhat.data_mut()[ch * hw + p] = xh;
            y.data_mut()[ch * hw + p] = xh * gamma.data()[ch] + beta.data()[ch];
        }
    }
    (y, NormSaved { xhat, invstd })
}

pub fn channel_norm_bwd<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &NormSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = dy.dims3();
    let hw = h * w;
    let n = T::from_f64(c as f64);
    let mut dx = Tensor::zeros(vec![c, h, w]);
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    let dyd = dy.data();
    let xh = saved.xhat.data();
    for p in 0..hw {
        let is = saved.invstd[p];
        let mut sum_gdy = T::zero();
        let mut sum_gdy_xh = T::zero();
        for ch in 0..c {
            let gdy = dyd[ch * hw + p] * gamma.data()[ch];
            sum_gdy = sum_gdy + gdy;
            sum_gdy_xh = sum_gdy_xh + gdy * xh[ch * hw + p];
        }
        let mean_gdy = sum_gdy / n;
        let mean_gdy_xh = sum_gdy_xh / n;
        for ch in 0..c {
            let gdy = dyd[ch * hw + p] * gamma.data()[ch];
            dx.data_mut()[ch * hw + p] = is * (gdy - mean_gdy - xh[ch * hw + p] * mean_gdy_xh);
        }
    }
    for ch in 0..c {
        let mut dg = T::zero();
        let mut db = T::zero();
        for p in 0..hw {
            dg = dg + dyd[ch * hw + p] * xh[ch * hw + p];
            db = db + dyd[ch * hw + p];
        }
        dgamma.data_mut()[ch] = dg;
        dbeta.data_mut()[ch] = db;
    }
    (dx, dgamma, dbeta)
}
