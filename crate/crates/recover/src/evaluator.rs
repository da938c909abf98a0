//! Endpoint-error metrics, region-partitioned reports, refinement-iteration
//! sweeps, and the downsample-upsample evaluation mode.

use crate::datasynth::Sample;
use crate::flowio::FlowField;
use crate::kernels::resample::{avgpool2_fwd, resize_bilinear_fwd};
use crate::netblocks::Model;
use crate::tensor::Tensor;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no valid pixels to evaluate")]
    EmptyValidSet,
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
}

/// Mean Euclidean endpoint error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64, EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::ShapeMismatch { pred: pred.dims(), gt: gt.dims() });
    }
    let (h, w) = gt.dims();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..hw {
        if !gt.valid[p] {
            continue;
        }
        let du = (pred.uv.data()[p] - gt.uv.data()[p]) as f64;
        let dv = (pred.uv.data()[hw + p] - gt.uv.data()[hw + p]) as f64;
        total += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::EmptyValidSet);
    }
    Ok(total / count as f64)
}

/// Mean EPE plus the count it was taken over; empty sets report NaN with
/// count 0 and are excluded from aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStat {
    pub epe: f64,
    pub count: usize,
}

impl RegionStat {
    fn from_sums(total: f64, count: usize) -> Self {
        RegionStat { epe: if count == 0 { f64::NAN } else { total / count as f64 }, count }
    }
}

/// EPE partitioned by the annotated regions: matched/unmatched (visibility),
/// rigid/non-rigid, and ground-truth magnitude buckets s0-10 / s10-40 / s40+
/// (half-open at 10 and 40).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionReport {
    pub total: RegionStat,
    pub matched: RegionStat,
    pub unmatched: RegionStat,
    pub rigid: RegionStat,
    pub nonrigid: RegionStat,
    pub s0_10: RegionStat,
    pub s10_40: RegionStat,
    pub s40p: RegionStat,
}

impl RegionReport {
    pub const CSV_HEADER: &'static str = "total,matched,unmatched,rigid,nonrigid,s0-10,s10-40,s40+,n_total,n_matched,n_unmatched,n_rigid,n_nonrigid,n_s0-10,n_s10-40,n_s40+";

    pub fn csv_row(&self) -> String {
        let f = |s: &RegionStat| {
            if s.count == 0 { "nan".to_string() } else { format!("{:.6}", s.epe) }
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(&self.total),
            f(&self.matched),
            f(&self.unmatched),
            f(&self.rigid),
            f(&self.nonrigid),
            f(&self.s0_10),
            f(&self.s10_40),
            f(&self.s40p),
            self.total.count,
            self.matched.count,
            self.unmatched.count,
            self.rigid.count,
            self.nonrigid.count,
            self.s0_10.count,
            self.s10_40.count,
            self.s40p.count,
        )
    }

    /// Count-weighted mean across {matched, unmatched}; equals `total.epe`.
    pub fn partition_mean(&self, parts: &[&RegionStat]) -> f64 {
        let total: f64 =
            parts.iter().filter(|s| s.count > 0).map(|s| s.epe * s.count as f64).sum();
        let count: usize = parts.iter().map(|s| s.count).sum();
        total / count as f64
    }
}

/// Aggregate per-pixel errors into the region partition of one sample.
pub fn region_report(pred: &FlowField, sample: &Sample) -> Result<RegionReport, EvalError> {
    let gt = &sample.gt_flow;
    if pred.dims() != gt.dims() {
        return Err(EvalError::ShapeMismatch { pred: pred.dims(), gt: gt.dims() });
    }
    let (h, w) = gt.dims();
    let hw = h * w;
    let mut sums = [0.0f64; 8];
    let mut counts = [0usize; 8];
    let mut any = false;
    for p in 0..hw {
        if !gt.valid[p] {
            continue;
        }
        any = true;
        let du = (pred.uv.data()[p] - gt.uv.data()[p]) as f64;
        let dv = (pred.uv.data()[hw + p] - gt.uv.data()[hw + p]) as f64;
        let e = (du * du + dv * dv).sqrt();
        let gu = gt.uv.data()[p] as f64;
        let gv = gt.uv.data()[hw + p] as f64;
        let mag = (gu * gu + gv * gv).sqrt();
        let mut add = |slot: usize| {
            sums[slot] += e;
            counts[slot] += 1;
        };
        add(0);
        if sample.occlusion[p] { add(2) } else { add(1) }
        if sample.rigid[p] { add(3) } else { add(4) }
        if mag < 10.0 {
            add(5)
        } else if mag < 40.0 {
            add(6)
        } else {
            add(7)
        }
    }
    if !any {
        return Err(EvalError::EmptyValidSet);
    }
    Ok(RegionReport {
        total: RegionStat::from_sums(sums[0], counts[0]),
        matched: RegionStat::from_sums(sums[1], counts[1]),
        unmatched: RegionStat::from_sums(sums[2], counts[2]),
        rigid: RegionStat::from_sums(sums[3], counts[3]),
        nonrigid: RegionStat::from_sums(sums[4], counts[4]),
        s0_10: RegionStat::from_sums(sums[5], counts[5]),
        s10_40: RegionStat::from_sums(sums[6], counts[6]),
        s40p: RegionStat::from_sums(sums[7], counts[7]),
    })
}

/// Merge per-sample reports into a pixel-weighted aggregate.
pub fn merge_reports(reports: &[RegionReport]) -> RegionReport {
    let merge = |get: &dyn Fn(&RegionReport) -> RegionStat| {
        let mut total = 0.0;
        let mut count = 0usize;
        for r in reports {
            let s = get(r);
            if s.count > 0 {
                total += s.epe * s.count as f64;
                count += s.count;
            }
        }
        RegionStat::from_sums(total, count)
    };
    RegionReport {
        total: merge(&|r| r.total),
        matched: merge(&|r| r.matched),
        unmatched: merge(&|r| r.unmatched),
        rigid: merge(&|r| r.rigid),
        nonrigid: merge(&|r| r.nonrigid),
        s0_10: merge(&|r| r.s0_10),
        s10_40: merge(&|r| r.s10_40),
        s40p: merge(&|r| r.s40p),
    }
}

/// Predict the flow for a sample with the model's configured iteration count.
pub fn predict_flow(model: &Model<f32>, sample: &Sample, iterations: usize) -> FlowField {
    let pred = model.infer(&sample.frame1.data, &sample.frame2.data, iterations);
    FlowField::all_valid(pred.final_flow().clone())
}

/// Re-run inference at each iteration count without retraining; returns
/// `(N, mean EPE)` rows over the given samples.
pub fn iteration_sweep(
    model: &Model<f32>,
    samples: &[Sample],
    iteration_counts: &[usize],
) -> Vec<(usize, f64)> {
    iteration_counts
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for s in samples {
                let pred = predict_flow(model, s, n);
                total += epe(&pred, &s.gt_flow).expect("valid sample");
            }
            (n, total / samples.len() as f64)
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[(usize, f64)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iterations,epe")?;
    for (n, e) in rows {
        writeln!(out, "{n},{e:.6}")?;
    }
    Ok(())
}

/// Downsample both frames by `factor` (2x average pooling per halving),
/// run inference, then bilinearly upsample the flow and scale its values by
/// `factor`.
pub fn infer_downsampled(
    model: &Model<f32>,
    frame1: &Tensor<f32>,
    frame2: &Tensor<f32>,
    factor: usize,
    iterations: usize,
) -> Tensor<f32> {
    assert!(factor >= 1 && factor.is_power_of_two(), "factor must be a power of two");
    let (_, h, w) = frame1.dims3();
    assert!(h % (8 * factor) == 0 && w % (8 * factor) == 0, "factor must divide the frame grid");
    let mut f1 = frame1.clone();
    let mut f2 = frame2.clone();
    let mut f = factor;
    while f > 1 {
        f1 = avgpool2_fwd(&f1);
        f2 = avgpool2_fwd(&f2);
        f /= 2;
    }
    let pred = model.infer(&f1, &f2, iterations);
    let up = resize_bilinear_fwd(pred.final_flow(), h, w);
    up.map(|v| v * factor as f32)
}

pub fn eval_downsampled(model: &Model<f32>, sample: &Sample, factor: usize, iterations: usize) -> FlowField {
    let flow = infer_downsampled(model, &sample.frame1.data, &sample.frame2.data, factor, iterations);
    FlowField::all_valid(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate, stage_recipes};
    use rand::Rng;

    fn flow_from(data: Vec<f32>, h: usize, w: usize) -> FlowField {
        FlowField::all_valid(Tensor::from_vec(vec![2, h, w], data))
    }

    #[test]
    fn epe_identity_and_345() {
        let gt = flow_from(vec![1.0; 2 * 6], 2, 3);
        assert_eq!(epe(&gt, &gt).unwrap(), 0.0);
        let mut shifted = gt.clone();
        for p in 0..6 {
            shifted.uv.data_mut()[p] += 3.0;
            shifted.uv.data_mut()[6 + p] += 4.0;
        }
        assert!((epe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn epe_matches_scalar_loop_oracle() {
        let mut rng = crate::rng::rng_from(21, &[]);
        for _ in 0..50 {
            let (h, w) = (5, 7);
            let hw = h * w;
            let a: Vec<f32> = (0..2 * hw).map(|_| rng.gen_range(-9.0..9.0)).collect();
            let b: Vec<f32> = (0..2 * hw).map(|_| rng.gen_range(-9.0..9.0)).collect();
            let pred = flow_from(a.clone(), h, w);
            let gt = flow_from(b.clone(), h, w);
            let mut oracle = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let du = (a[p] - b[p]) as f64;
                    let dv = (a[hw + p] - b[hw + p]) as f64;
                    oracle += (du * du + dv * dv).sqrt();
                }
            }
            oracle /= hw as f64;
            assert!((epe(&pred, &gt).unwrap() - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn epe_errors_on_empty_valid_set() {
        let mut gt = flow_from(vec![0.0; 8], 2, 2);
        gt.valid = vec![false; 4];
        let pred = flow_from(vec![0.0; 8], 2, 2);
        assert!(matches!(epe(&pred, &gt), Err(EvalError::EmptyValidSet)));
    }

    #[test]
    fn epe_is_permutation_invariant() {
        let mut rng = crate::rng::rng_from(22, &[]);
        let (h, w) = (4, 4);
        let hw = h * w;
        let a: Vec<f32> = (0..2 * hw).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f32> = (0..2 * hw).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let e1 = epe(&flow_from(a.clone(), h, w), &flow_from(b.clone(), h, w)).unwrap();
        // Apply the same pixel permutation (reversal) to both fields.
        let perm = |v: &[f32]| {
            let mut out = vec![0.0f32; 2 * hw];
            for p in 0..hw {
                out[p] = v[hw - 1 - p];
                out[hw + p] = v[hw + hw - 1 - p];
            }
            out
        };
        let e2 = epe(&flow_from(perm(&a), h, w), &flow_from(perm(&b), h, w)).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    /// Hand-constructed fixture: half the pixels at |gt|=5 with error 1, half
    /// at |gt|=50 with error 2.
    #[test]
    fn region_buckets_on_constructed_fixture() {
        let (h, w) = (2, 2);
        let gt_uv = vec![5.0, 5.0, 50.0, 50.0, 0.0, 0.0, 0.0, 0.0];
        let pred_uv = vec![6.0, 6.0, 52.0, 52.0, 0.0, 0.0, 0.0, 0.0];
        let sample = Sample {
            frame1: crate::flowio::Frame::new(Tensor::zeros(vec![3, h, w])).unwrap(),
            frame2: crate::flowio::Frame::new(Tensor::zeros(vec![3, h, w])).unwrap(),
            gt_flow: flow_from(gt_uv, h, w),
            occlusion: vec![false, false, true, true],
            rigid: vec![true, false, true, false],
        };
        let pred = flow_from(pred_uv, h, w);
        let r = region_report(&pred, &sample).unwrap();
        assert!((r.s0_10.epe - 1.0).abs() < 1e-9);
        assert_eq!(r.s0_10.count, 2);
        assert!((r.s40p.epe - 2.0).abs() < 1e-9);
        assert_eq!(r.s40p.count, 2);
        assert_eq!(r.s10_40.count, 0);
        assert!(r.s10_40.epe.is_nan());
        assert!((r.total.epe - 1.5).abs() < 1e-9);
        assert!((r.matched.epe - 1.0).abs() < 1e-9);
        assert!((r.unmatched.epe - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_motion_sample_sits_in_the_low_bucket() {
        let recipe = crate::datasynth::SceneRecipe {
            name: "static".into(),
            resolution: (48, 64),
            n_layers: 1,
            motion_model: crate::datasynth::MotionModel::GlobalRigid,
            max_displacement: 0.0,
            texture_spectrum: crate::datasynth::TextureSpectrum::Mid,
            occlusion_allowed: false,
            seed_base: 31,
        };
        let s = generate(&recipe, 0);
        let pred = FlowField::all_valid(Tensor::zeros(vec![2, 48, 64]));
        let r = region_report(&pred, &s).unwrap();
        assert_eq!(r.s0_10.count, 48 * 64);
        assert_eq!(r.s40p.count, 0);
        assert_eq!(r.total.epe, 0.0);
    }

    #[test]
    fn partitions_reproduce_total_on_random_samples() {
        for idx in 0..4 {
            let s = generate(&stage_recipes()[3], idx);
            // A noisy prediction.
            let mut rng = crate::rng::rng_from(idx, &[]);
            let (h, w) = s.dims();
            let pred_uv: Vec<f32> = s
                .gt_flow
                .uv
                .data()
                .iter()
                .map(|&v| v + rng.gen_range(-2.0..2.0))
                .collect();
            let pred = flow_from(pred_uv, h, w);
            let r = region_report(&pred, &s).unwrap();
            for parts in [
                [&r.matched, &r.unmatched].as_slice(),
                [&r.rigid, &r.nonrigid].as_slice(),
                [&r.s0_10, &r.s10_40, &r.s40p].as_slice(),
            ] {
                let m = r.partition_mean(parts);
                assert!(
                    (m - r.total.epe).abs() < 1e-6,
                    "partition mean {m} != total {}",
                    r.total.epe
                );
                let n: usize = parts.iter().map(|s| s.count).sum();
                assert_eq!(n, r.total.count);
            }
        }
    }

    #[test]
    fn merged_reports_stay_consistent() {
        let s1 = generate(&stage_recipes()[2], 0);
        let s2 = generate(&stage_recipes()[2], 1);
        let make = |s: &Sample| {
            let (h, w) = s.dims();
            let pred = flow_from(vec![0.25; 2 * h * w], h, w);
            region_report(&pred, s).unwrap()
        };
        let m = merge_reports(&[make(&s1), make(&s2)]);
        assert_eq!(m.total.count, 2 * 96 * 128);
        let pm = m.partition_mean(&[&m.matched, &m.unmatched]);
        assert!((pm - m.total.epe).abs() < 1e-6);
    }

    #[test]
    fn downsampled_eval_scaling_identity() {
        // If the model returned exactly f/2 at half resolution, the output is
        // exactly f. Checked against the resize/scale plumbing directly.
        let (h, w) = (16, 16);
        let half = Tensor::from_vec(vec![2, h / 2, w / 2], vec![1.5f32; 2 * (h / 2) * (w / 2)]);
        let up = resize_bilinear_fwd(&half, h, w).map(|v| v * 2.0);
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
        assert_eq!(up.shape(), &[2, h, w]);
    }
}
