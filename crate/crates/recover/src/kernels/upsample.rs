//! Convex 8x upsampling: each fine pixel is a softmax-weighted combination of
//! the 3x3 coarse neighborhood of its parent cell, with flow values scaled by
//! 8 to convert grid units into pixel units. The neighborhood is clamped at
//! borders so a constant field upsamples to a constant field.

use crate::num::Scalar;
use crate::tensor::Tensor;

pub const UP: usize = 8;
pub const TAPS: usize = 9;
pub const MASK_CHANNELS: usize = TAPS * UP * UP;

#[inline]
fn tap_offset(t: usize) -> (isize, isize) {
    ((t / 3) as isize - 1, (t % 3) as isize - 1)
}

/// Softmax over the 9-tap axis of a `(9*64, h, w)` mask tensor.
fn softmax_taps<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let (cm, h, w) = mask.dims3();
    assert_eq!(cm, MASK_CHANNELS, "upsample mask must have {MASK_CHANNELS} channels");
    let hw = h * w;
    let group = UP * UP * hw;
    let mut soft = Tensor::zeros(vec![cm, h, w]);
    let md = mask.data();
    let sd = soft.data_mut();
    for g in 0..group {
        let mut mx = T::neg_infinity();
        for t in 0..TAPS {
            mx = mx.max(md[t * group + g]);
        }
        let mut z = T::zero();
        for t in 0..TAPS {
            let e = (md[t * group + g] - mx).exp();
            sd[t * group + g] = e;
            z = z + e;
        }
        for t in 0..TAPS {
            sd[t * group + g] = sd[t * group + g] / z;
        }
    }
    soft
}

/// Returns the upsampled `(c, 8h, 8w)` field plus the softmax probabilities
/// saved for the backward pass.
pub fn convex_upsample_fwd<T: Scalar>(flow: &Tensor<T>, mask: &Tensor<T>, value_scale: T) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = flow.dims3();
    let soft = softmax_taps(mask);
    let mut out = Tensor::zeros(vec![c, h * UP, w * UP]);
    let hw = h * w;
    let group = UP * UP * hw;
    let sd = soft.data();
    let fd = flow.data();
    let od = out.data_mut();
    let (oh, ow) = (h * UP, w * UP);
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            for sub in 0..UP * UP {
                let (di, dj) = (sub / UP, sub % UP);
                let oy = i * UP + di;
                let ox = j * UP + dj;
                for ch in 0..c {
                    let mut acc = T::zero();
                    for t in 0..TAPS {
                        let (ty, tx) = tap_offset(t);
                        let ny = (i as isize + ty).clamp(0, h as isize - 1) as usize;
                        let nx = (j as isize + tx).clamp(0, w as isize - 1) as usize;
                        acc = acc + sd[t * group + sub * hw + cell] * fd[(ch * h + ny) * w + nx];
                    }
                    od[(ch * oh + oy) * ow + ox] = acc * value_scale;
                }
            }
        }
    }
    (out, soft)
}

/// Gradients for the coarse flow and the (pre-softmax) mask logits.
pub fn convex_upsample_bwd<T: Scalar>(
    flow: &Tensor<T>,
    soft: &Tensor<T>,
    dy: &Tensor<T>,
    value_scale: T,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = flow.dims3();
    let hw = h * w;
    let group = UP * UP * hw;
    let (oh, ow) = (h * UP, w * UP);
    let mut dflow = Tensor::zeros(vec![c, h, w]);
    let mut dmask = Tensor::zeros(vec![MASK_CHANNELS, h, w]);
    let sd = soft.data();
    let fd = flow.data();
    let dyd = dy.data();
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            for sub in 0..UP * UP {
                let (di, dj) = (sub / UP, sub % UP);
                let oy = i * UP + di;
                let ox = j * UP + dj;
                // dprob[t] = scale * sum_c dy[c] * flow[c, nbr_t]
                let mut dprob = [T::zero(); TAPS];
                for t in 0..TAPS {
                    let (ty, tx) = tap_offset(t);
                    let ny = (i as isize + ty).clamp(0, h as isize - 1) as usize;
                    let nx = (j as isize + tx).clamp(0, w as isize - 1) as usize;
                    let p = sd[t * group + sub * hw + cell];
                    let mut acc = T::zero();
                    for ch in 0..c {
                        let g = dyd[(ch * oh + oy) * ow + ox] * value_scale;
                        acc = acc + g * fd[(ch * h + ny) * w + nx];
                        let df = &mut dflow.data_mut()[(ch * h + ny) * w + nx];
                        *df = *df + g * p;
                    }
                    dprob[t] = acc;
                }
                // Softmax backward within the 9-tap group.
                let mut dot = T::zero();
                for t in 0..TAPS {
                    dot = dot + sd[t * group + sub * hw + cell] * dprob[t];
                }
                for t in 0..TAPS {
                    let p = sd[t * group + sub * hw + cell];
                    dmask.data_mut()[t * group + sub * hw + cell] = p * (dprob[t] - dot);
                }
            }
        }
    }
    (dflow, dmask)
}
