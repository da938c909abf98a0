//! All-pairs correlation pyramid, lookup sampling, and the three cost-volume
//! lifecycle modes (active, fading, removed).

use crate::kernels::resample::{avgpool2_fwd, sample_plane_zero};
use crate::num::Scalar;
use crate::profiler::track;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RADIUS: usize = 4;

/// Dense per-frame feature grid at 1/8 input resolution, shape `(d, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar>(pub Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Self {
        let (_, h, w) = data.dims3();
        assert!(h >= 1 && w >= 1, "feature grid must be non-empty");
        assert!(data.all_finite(), "feature map contains non-finite values");
        FeatureMap(data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims3()
    }
}

/// Multi-level all-pairs correlation tensors. Level `l` has shape
/// `(h*w, h/2^l, w/2^l)` (floor division).
#[derive(Debug, Clone)]
pub struct CostVolumePyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
    pub radius: usize,
}

impl<T: Scalar> CostVolumePyramid<T> {
    pub fn motion_channels(&self) -> usize {
        self.levels.len() * (2 * self.radius + 1) * (2 * self.radius + 1)
    }
}

/// Lifecycle of the cost volume under the removal training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostVolumeMode {
    Active,
    Fading { p: f64 },
    Removed,
}

impl CostVolumeMode {
    pub fn describe(&self) -> String {
        match self {
            CostVolumeMode::Active => "active".into(),
            CostVolumeMode::Fading { p } => format!("fading(p={p})"),
            CostVolumeMode::Removed => "removed".into(),
        }
    }

    pub fn is_removed(&self) -> bool {
        matches!(self, CostVolumeMode::Removed)
    }
}

/// Level-0 all-pairs correlation: entry `[(i*w+j), k, l]` is
/// `<f1[:,i,j], f2[:,k,l]> / sqrt(d)`.
pub fn correlate_level0<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = f1.dims3();
    assert_eq!(f1.shape(), f2.shape(), "correlate requires same-shape feature maps");
    let hw = h * w;
    track::correlate(2 * (d as u64) * (hw as u64) * (hw as u64));
    let mut g = Tensor::zeros(vec![hw, h, w]);
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    // G (hw, hw) = F1^T (hw, d) * F2 (d, hw), scaled by 1/sqrt(d).
    unsafe {
        T::gemm(
            hw,
            d,
            hw,
            inv_sqrt_d,
            f1.data().as_ptr(),
            1,
            hw as isize,
            f2.data().as_ptr(),
            hw as isize,
            1,
            T::zero(),
            g.data_mut().as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    g
}

/// Gradients of [`correlate_level0`] with respect to both feature maps.
pub fn correlate_bwd<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    dg: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (d, h, w) = f1.dims3();
    let hw = h * w;
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    let mut df1 = Tensor::zeros(f1.shape().to_vec());
    let mut df2 = Tensor::zeros(f2.shape().to_vec());
    unsafe {
        // dF1 (d, hw) = F2 (d, hw) * dG^T (hw, hw)
        T::gemm(
            d,
            hw,
            hw,
            inv_sqrt_d,
            f2.data().as_ptr(),
            hw as isize,
            1,
            dg.data().as_ptr(),
            1,
            hw as isize,
            T::zero(),
            df1.data_mut().as_mut_ptr(),
            hw as isize,
            1,
        );
        // dF2 (d, hw) = F1 (d, hw) * dG (hw, hw)
        T::gemm(
            d,
            hw,
            hw,
            inv_sqrt_d,
            f1.data().as_ptr(),
            hw as isize,
            1,
            dg.data().as_ptr(),
            hw as isize,
            1,
            T::zero(),
            df2.data_mut().as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    (df1, df2)
}

/// Build the full correlation pyramid.
pub fn correlate<T: Scalar>(
    f1: &FeatureMap<T>,
    f2: &FeatureMap<T>,
    levels: usize,
    radius: usize,
) -> CostVolumePyramid<T> {
    assert!(levels >= 1);
    let mut out = Vec::with_capacity(levels);
    out.push(correlate_level0(&f1.0, &f2.0));
    for l in 1..levels {
        out.push(avgpool2_fwd(&out[l - 1]));
    }
    CostVolumePyramid { levels: out, radius }
}

/// Displacement-limited correlation with offsets `|di|,|dj| <= d_max`;
/// shape `((2*d_max+1)^2, h, w)`, zero where the target is out of bounds.
pub fn correlate_limited<T: Scalar>(f1: &FeatureMap<T>, f2: &FeatureMap<T>, d_max: usize) -> Tensor<T> {
    let (d, h, w) = f1.dims();
    assert_eq!(f1.0.shape(), f2.0.shape());
    let side = 2 * d_max + 1;
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(vec![side * side, h, w]);
    let f1d = f1.0.data();
    let f2d = f2.0.data();
    let od = out.data_mut();
    let hw = h * w;
    for (off_idx, (di, dj)) in offsets(d_max).enumerate() {
        for i in 0..h {
            let ti = i as isize + di;
            if ti < 0 || ti >= h as isize {
                continue;
            }
            for j in 0..w {
                let tj = j as isize + dj;
                if tj < 0 || tj >= w as isize {
                    continue;
                }
                let mut acc = T::zero();
                let p = i * w + j;
                let q = ti as usize * w + tj as usize;
                for c in 0..d {
                    acc = acc + f1d[c * hw + p] * f2d[c * hw + q];
                }
                od[off_idx * hw + p] = acc * inv_sqrt_d;
            }
        }
    }
    out
}

fn offsets(r: usize) -> impl Iterator<Item = (isize, isize)> {
    let r = r as isize;
    (-r..=r).flat_map(move |di| (-r..=r).map(move |dj| (di, dj)))
}

/// Sample every pyramid level on the `(2r+1)^2` grid centered at
/// `(x + flow(x)) / 2^l` for each pixel `x`; zero padding outside the volume.
/// Output channel layout: level-major, then row-major offset.
pub fn lookup_raw<T: Scalar>(levels: &[&Tensor<T>], flow: &Tensor<T>, radius: usize) -> Tensor<T> {
    assert!(!levels.is_empty(), "lookup requires a non-empty pyramid");
    let (two, h, w) = flow.dims3();
    assert_eq!(two, 2, "flow must have two channels");
    let side = 2 * radius + 1;
    let n_levels = levels.len();
    let mut out = Tensor::zeros(vec![n_levels * side * side, h, w]);
    track::lookup((n_levels * side * side * h * w) as u64);
    let hw = h * w;
    let u = &flow.data()[..hw];
    let v = &flow.data()[hw..];
    let od = out.data_mut();
    for (l, level) in levels.iter().enumerate() {
        let (cells, lh, lw) = level.dims3();
        assert_eq!(cells, hw, "pyramid level cell count mismatch");
        let scale = 1.0 / (1 << l) as f64;
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let cx = (j as f64 + u[p].to_f64()) * scale;
                let cy = (i as f64 + v[p].to_f64()) * scale;
                if !(cx.is_finite() && cy.is_finite()) {
                    continue;
                }
                let plane = level.plane(p);
                for (oi, (dy, dx)) in offsets(radius).enumerate() {
                    let ch = l * side * side + oi;
                    od[ch * hw + p] = sample_plane_zero(
                        plane,
                        lh,
                        lw,
                        T::from_f64(cy + dy as f64),
                        T::from_f64(cx + dx as f64),
                    );
                }
            }
        }
    }
    out
}

/// Scatter lookup gradients back onto the pyramid levels.
pub fn lookup_bwd<T: Scalar>(
    levels: &[&Tensor<T>],
    flow: &Tensor<T>,
    radius: usize,
    dy_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let (_, h, w) = flow.dims3();
    let side = 2 * radius + 1;
    let hw = h * w;
    let u = &flow.data()[..hw];
    let v = &flow.data()[hw..];
    let mut dlevels: Vec<Tensor<T>> =
        levels.iter().map(|l| Tensor::zeros(l.shape().to_vec())).collect();
    let dyd = dy_out.data();
    for (l, level) in levels.iter().enumerate() {
        let (_, lh, lw) = level.dims3();
        let scale = 1.0 / (1 << l) as f64;
        let dl = dlevels[l].data_mut();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let cx = (j as f64 + u[p].to_f64()) * scale;
                let cy = (i as f64 + v[p].to_f64()) * scale;
                if !(cx.is_finite() && cy.is_finite()) {
                    continue;
                }
                for (oi, (dyo, dxo)) in offsets(radius).enumerate() {
                    let ch = l * side * side + oi;
                    let g = dyd[ch * hw + p];
                    if g == T::zero() {
                        continue;
                    }
                    let sy = cy + dyo as f64;
                    let sx = cx + dxo as f64;
                    if sy <= -1.0 || sx <= -1.0 || sy >= lh as f64 || sx >= lw as f64 {
                        continue;
                    }
                    let y0 = sy.floor();
                    let x0 = sx.floor();
                    let fy = sy - y0;
                    let fx = sx - x0;
                    for (ddy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                        let iy = y0 as isize + ddy;
                        if iy < 0 || iy >= lh as isize {
                            continue;
                        }
                        for (ddx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                            let ix = x0 as isize + ddx;
                            if ix < 0 || ix >= lw as isize {
                                continue;
                            }
                            let idx = (p * lh + iy as usize) * lw + ix as usize;
                            dl[idx] = dl[idx] + g * T::from_f64(wy * wx);
                        }
                    }
                }
            }
        }
    }
    dlevels
}

/// Convenience wrapper around [`lookup_raw`] for a materialized pyramid.
pub fn lookup<T: Scalar>(pyramid: &CostVolumePyramid<T>, flow: &Tensor<T>) -> Tensor<T> {
    let refs: Vec<&Tensor<T>> = pyramid.levels.iter().collect();
    lookup_raw(&refs, flow, pyramid.radius)
}

/// Per-pixel Bernoulli(1-p) mask of length `h*w`, no rescaling. At `p = 1`
/// the mask is identically zero, making the faded path bitwise equivalent to
/// the removed one.
pub fn fading_mask<T: Scalar>(h: usize, w: usize, p: f64, seed: u64) -> Tensor<T> {
    let mut rng = crate::rng::rng_from(seed, &[crate::rng::tag("fading-mask")]);
    let data = (0..h * w)
        .map(|_| if rng.gen::<f64>() < 1.0 - p { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(vec![h * w], data)
}

/// Apply a lifecycle mode to sampled motion features.
///
/// `active` is the identity; `fading(p)` masks per pixel without the usual
/// `1/(1-p)` rescale; `removed` yields zeros of the same shape (callers are
/// expected to skip correlate/lookup entirely in that mode).
pub fn apply_mode<T: Scalar>(features: &Tensor<T>, mode: CostVolumeMode, seed: u64) -> Tensor<T> {
    match mode {
        CostVolumeMode::Active => features.clone(),
        CostVolumeMode::Fading { p } => {
            assert!((0.0..=1.0).contains(&p), "drop probability must be in [0, 1]");
            let (c, h, w) = features.dims3();
            track::costvol_elementwise((c * h * w) as u64);
            let mask = fading_mask::<T>(h, w, p, seed);
            let mut out = features.clone();
            for ch in 0..c {
                let plane = out.plane_mut(ch);
                for (v, m) in plane.iter_mut().zip(mask.data()) {
                    *v = *v * *m;
                }
            }
            out
        }
        CostVolumeMode::Removed => Tensor::zeros(features.shape().to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_feature(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = rng_from(seed, &[]);
        let data = (0..d * h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        FeatureMap::new(Tensor::from_vec(vec![d, h, w], data))
    }

    /// Triple-loop reference for the level-0 volume.
    fn brute_force_level0(f1: &FeatureMap<f64>, f2: &FeatureMap<f64>) -> Tensor<f64> {
        let (d, h, w) = f1.dims();
        let hw = h * w;
        let mut out = Tensor::zeros(vec![hw, h, w]);
        for p in 0..hw {
            for q in 0..hw {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += f1.0.data()[c * hw + p] * f2.0.data()[c * hw + q];
                }
                out.data_mut()[p * hw + q] = acc / (d as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn correlate_matches_brute_force() {
        let f1 = random_feature(8, 2, 3, 0);
        let f2 = random_feature(8, 2, 3, 1);
        let pyr = correlate(&f1, &f2, 2, 4);
        let oracle = brute_force_level0(&f1, &f2);
        assert!(pyr.levels[0].max_abs_diff(&oracle) < 1e-5);
    }

    #[test]
    fn correlate_one_hot_features_give_scaled_identity() {
        // Distinct unit channel per pixel: diagonal pairs correlate at 1/sqrt(d).
        let (h, w) = (2, 2);
        let d = h * w;
        let mut data = vec![0.0f64; d * h * w];
        for p in 0..h * w {
            data[p * h * w + p] = 1.0;
        }
        let f = FeatureMap::new(Tensor::from_vec(vec![d, h, w], data));
        let pyr = correlate(&f, &f, 1, 4);
        let hw = h * w;
        for p in 0..hw {
            for q in 0..hw {
                let expect = if p == q { 1.0 / (d as f64).sqrt() } else { 0.0 };
                assert!((pyr.levels[0].data()[p * hw + q] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_f2_pools_to_constant_levels() {
        let f1 = random_feature(4, 4, 4, 2);
        let f2 = FeatureMap::new(Tensor::full(vec![4, 4, 4], 0.5f64));
        let pyr = correlate(&f1, &f2, 3, 4);
        let hw = 16;
        for p in 0..hw {
            let row0 = pyr.levels[0].plane(p);
            let first = row0[0];
            assert!(row0.iter().all(|&v| (v - first).abs() < 1e-12));
            for level in &pyr.levels[1..] {
                assert!(level.plane(p).iter().all(|&v| (v - first).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn pooling_consistency() {
        let f1 = random_feature(6, 4, 6, 3);
        let f2 = random_feature(6, 4, 6, 4);
        let pyr = correlate(&f1, &f2, 3, 4);
        for l in 0..pyr.levels.len() - 1 {
            let pooled = avgpool2_fwd(&pyr.levels[l]);
            assert!(pooled.max_abs_diff(&pyr.levels[l + 1]) < 1e-6);
        }
    }

    #[test]
    fn correlate_symmetry_and_scale() {
        let f1 = random_feature(5, 3, 2, 5);
        let f2 = random_feature(5, 3, 2, 6);
        let g12 = correlate_level0(&f1.0, &f2.0);
        let g21 = correlate_level0(&f2.0, &f1.0);
        let hw = 6;
        for p in 0..hw {
            for q in 0..hw {
                let a = g12.data()[p * hw + q];
                let b = g21.data()[q * hw + p];
                assert!((a - b).abs() < 1e-12);
            }
        }
        let scaled = FeatureMap::new(f1.0.map(|v| v * 3.0));
        let gs = correlate_level0(&scaled.0, &f2.0);
        for (a, b) in gs.data().iter().zip(g12.data()) {
            assert!((a - 3.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn limited_agrees_with_full_volume_interior() {
        let f1 = random_feature(8, 4, 5, 7);
        let f2 = random_feature(8, 4, 5, 8);
        let d_max = 1;
        let limited = correlate_limited(&f1, &f2, d_max);
        let full = correlate_level0(&f1.0, &f2.0);
        let (h, w) = (4, 5);
        let hw = h * w;
        let side = 2 * d_max + 1;
        for i in 0..h {
            for j in 0..w {
                for (oi, (di, dj)) in offsets(d_max).enumerate() {
                    let ti = i as isize + di;
                    let tj = j as isize + dj;
                    if ti < 0 || ti >= h as isize || tj < 0 || tj >= w as isize {
                        assert_eq!(limited.data()[oi * hw + i * w + j], 0.0);
                        continue;
                    }
                    let expect = full.data()[(i * w + j) * hw + ti as usize * w + tj as usize];
                    let got = limited.data()[oi * hw + i * w + j];
                    assert!((got - expect).abs() < 1e-10);
                }
                let _ = side;
            }
        }
    }

    #[test]
    fn limited_d0_is_pointwise_and_zero_input_gives_zero() {
        let f1 = random_feature(4, 3, 3, 9);
        let f2 = random_feature(4, 3, 3, 10);
        let lim = correlate_limited(&f1, &f2, 0);
        assert_eq!(lim.shape(), &[1, 3, 3]);
        let hw = 9;
        for p in 0..hw {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += f1.0.data()[c * hw + p] * f2.0.data()[c * hw + p];
            }
            assert!((lim.data()[p] - acc / 2.0).abs() < 1e-12);
        }
        let zeros = FeatureMap::new(Tensor::zeros(vec![4, 3, 3]));
        let lim0 = correlate_limited(&f1, &zeros, 2);
        assert!(lim0.data().iter().all(|&v| v == 0.0));
    }

    /// Scalar-loop bilinear sampling reference.
    fn lookup_oracle(levels: &[&Tensor<f64>], flow: &Tensor<f64>, radius: usize) -> Tensor<f64> {
        let (_, h, w) = flow.dims3();
        let side = 2 * radius + 1;
        let hw = h * w;
        let mut out = Tensor::zeros(vec![levels.len() * side * side, h, w]);
        for (l, level) in levels.iter().enumerate() {
            let (_, lh, lw) = level.dims3();
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let cx = (j as f64 + flow.data()[p]) / (1 << l) as f64;
                    let cy = (i as f64 + flow.data()[hw + p]) / (1 << l) as f64;
                    for (oi, (dy, dx)) in offsets(radius).enumerate() {
                        let sy = cy + dy as f64;
                        let sx = cx + dx as f64;
                        let mut acc = 0.0;
                        for iy in 0..lh {
                            for ix in 0..lw {
                                let wy = 1.0 - (sy - iy as f64).abs();
                                let wx = 1.0 - (sx - ix as f64).abs();
                                if wy > 0.0 && wx > 0.0 {
                                    acc += level.plane(p)[iy * lw + ix] * wy * wx;
                                }
                            }
                        }
                        out.data_mut()[(l * side * side + oi) * hw + p] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn lookup_matches_loop_oracle() {
        let f1 = random_feature(8, 3, 4, 11);
        let f2 = random_feature(8, 3, 4, 12);
        let pyr = correlate(&f1, &f2, 2, 1);
        let mut rng = rng_from(13, &[]);
        let flow_data: Vec<f64> = (0..2 * 12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let flow = Tensor::from_vec(vec![2, 3, 4], flow_data);
        let refs: Vec<&Tensor<f64>> = pyr.levels.iter().collect();
        let got = lookup_raw(&refs, &flow, 1);
        let want = lookup_oracle(&refs, &flow, 1);
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn lookup_r0_integer_flow_indexes_directly() {
        let f1 = random_feature(4, 3, 3, 14);
        let f2 = random_feature(4, 3, 3, 15);
        let pyr = correlate(&f1, &f2, 1, 0);
        // Constant integer flow (1, 0) stays in bounds for the left columns.
        let mut flow = Tensor::zeros(vec![2, 3, 3]);
        for p in 0..9 {
            flow.data_mut()[p] = 1.0;
        }
        let refs: Vec<&Tensor<f64>> = pyr.levels.iter().collect();
        let got = lookup_raw(&refs, &flow, 0);
        let hw = 9;
        for i in 0..3 {
            for j in 0..2 {
                let p = i * 3 + j;
                let direct = pyr.levels[0].data()[p * hw + i * 3 + (j + 1)];
                assert!((got.data()[p] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lookup_far_out_of_bounds_is_zero() {
        let f1 = random_feature(4, 3, 3, 16);
        let f2 = random_feature(4, 3, 3, 17);
        let pyr = correlate(&f1, &f2, 3, 2);
        let flow = Tensor::full(vec![2, 3, 3], 1e5f64);
        let refs: Vec<&Tensor<f64>> = pyr.levels.iter().collect();
        let got = lookup_raw(&refs, &flow, 2);
        assert!(got.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mode_behaviors() {
        let feats = random_feature(6, 4, 4, 18).0;
        let same = apply_mode(&feats, CostVolumeMode::Active, 0);
        assert_eq!(same, feats);
        let gone = apply_mode(&feats, CostVolumeMode::Fading { p: 1.0 }, 1);
        assert!(gone.data().iter().all(|&v| v == 0.0));
        let kept = apply_mode(&feats, CostVolumeMode::Fading { p: 0.0 }, 2);
        assert_eq!(kept, feats);
        let removed = apply_mode(&feats, CostVolumeMode::Removed, 3);
        assert_eq!(removed.shape(), feats.shape());
        assert!(removed.data().iter().all(|&v| v == 0.0));
        // Same seed, same mask.
        let a = apply_mode(&feats, CostVolumeMode::Fading { p: 0.5 }, 42);
        let b = apply_mode(&feats, CostVolumeMode::Fading { p: 0.5 }, 42);
        assert_eq!(a, b);
    }
}
