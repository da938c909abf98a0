//! Mixture-of-Laplace negative log-likelihood and per-iteration sequence loss.

use crate::flowio::FlowField;
use crate::netblocks::TapedForward;
use crate::num::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::TrainError;

/// Per valid pixel and flow channel `c`, with `e = |pred_c - gt_c|`:
///
/// `NLL = -log( a * exp(-e/b1)/(2 b1) + (1-a) * exp(-e/b2)/(2 b2) )`
///
/// where `a = sigmoid(alpha_logit)` and `b_i = exp(s_i)`. Built from
/// log-space primitives so extreme logits and scales stay finite. Returns the
/// mean over valid pixels and channels as a tape node.
pub fn laplace_mixture_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    params: NodeId,
    gt_uv: &Tensor<T>,
    valid: &[bool],
) -> Result<NodeId, TrainError> {
    let (c, h, w) = gt_uv.dims3();
    assert_eq!(c, 2, "ground truth must have two channels");
    assert_eq!(valid.len(), h * w);
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(TrainError::EmptyValidSet);
    }

    let gt = tape.constant(gt_uv.clone());
    let diff = tape.sub(pred, gt);
    let e = tape.abs(diff);

    let alpha_logit = tape.slice_c(params, 0, 1);
    // ln a = -softplus(-logit); ln (1-a) = -softplus(logit)
    let neg_logit = tape.neg(alpha_logit);
    let sp_neg = tape.softplus(neg_logit);
    let ln_a = tape.neg(sp_neg);
    let sp_pos = tape.softplus(alpha_logit);
    let ln_1ma = tape.neg(sp_pos);

    let ln2 = T::from_f64(std::f64::consts::LN_2);
    let mut terms = Vec::with_capacity(2);
    for (i, ln_weight) in [(1usize, ln_a), (2usize, ln_1ma)] {
        let s = tape.slice_c(params, i, 1);
        let neg_s = tape.neg(s);
        let inv_b = tape.exp(neg_s);
        let inv_b2 = tape.broadcast_c(inv_b, 2);
        let e_over_b = tape.mul(e, inv_b2);
        let lw2 = tape.broadcast_c(ln_weight, 2);
        let s2 = tape.broadcast_c(s, 2);
        let t1 = tape.sub(lw2, e_over_b);
        let t2 = tape.sub(t1, s2);
        terms.push(tape.add_scalar(t2, -ln2));
    }
    let lse = tape.log_sum_exp2(terms[0], terms[1]);
    let nll = tape.neg(lse);

    let mut weights = Vec::with_capacity(2 * h * w);
    for _ in 0..2 {
        weights.extend(valid.iter().map(|&v| if v { T::one() } else { T::zero() }));
    }
    let denom = T::from_f64(2.0 * n_valid as f64);
    Ok(tape.masked_mean(nll, Tensor::from_vec(vec![2 * h * w], weights), denom))
}

/// Exponentially-weighted sum of per-iteration losses:
/// `sum_i gamma^(N-i) * L_i` for `i = 0..N`.
pub fn sequence_weights(n_terms: usize, gamma: f64) -> Vec<f64> {
    assert!(n_terms >= 1);
    (0..n_terms).map(|i| gamma.powi((n_terms - 1 - i) as i32)).collect()
}

pub fn sequence_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    forward: &TapedForward,
    gt_uv: &Tensor<T>,
    valid: &[bool],
    gamma: f64,
) -> Result<NodeId, TrainError> {
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
    let weights = sequence_weights(forward.flows.len(), gamma);
    let mut total: Option<NodeId> = None;
    for ((&flow, &mix), &wgt) in forward.flows.iter().zip(&forward.mixes).zip(&weights) {
        let term = laplace_mixture_loss_node(tape, flow, mix, gt_uv, valid)?;
        total = Some(match total {
            None if (wgt - 1.0).abs() < 1e-12 => term,
            None => tape.scale(term, T::from_f64(wgt)),
            Some(acc) => tape.add_scaled(acc, term, T::from_f64(wgt)),
        });
    }
    Ok(total.expect("at least one supervised flow"))
}

/// Spec-facing wrapper: evaluate the mixture loss for a concrete prediction.
pub fn laplace_mixture_loss(
    pred: &Tensor<f32>,
    params: &Tensor<f32>,
    gt: &FlowField,
) -> Result<f32, TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let p = tape.constant(pred.clone());
    let m = tape.constant(params.clone());
    let node = laplace_mixture_loss_node(&mut tape, p, m, &gt.uv, &gt.valid)?;
    Ok(tape.value(node).item())
}

/// Spec-facing wrapper over a materialized prediction bundle.
pub fn sequence_loss(
    bundle: &crate::netblocks::Prediction<f32>,
    gt: &FlowField,
    gamma: f64,
) -> Result<f32, TrainError> {
    let weights = sequence_weights(bundle.flows.len(), gamma);
    let mut total = 0.0;
    for ((flow, mix), wgt) in bundle.flows.iter().zip(&bundle.mixes).zip(&weights) {
        total += *wgt as f32 * laplace_mixture_loss(flow, mix, gt)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn loss_f64(pred: &Tensor<f64>, params: &Tensor<f64>, gt: &Tensor<f64>, valid: &[bool]) -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(pred.clone());
        let m = tape.constant(params.clone());
        let node = laplace_mixture_loss_node(&mut tape, p, m, gt, valid).unwrap();
        tape.value(node).item()
    }

    /// Direct (non-stabilized) float64 evaluation of the mixture NLL.
    fn naive_oracle(pred: &Tensor<f64>, params: &Tensor<f64>, gt: &Tensor<f64>, valid: &[bool]) -> f64 {
        let (_, h, w) = gt.dims3();
        let hw = h * w;
        let mut total = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            if !valid[p] {
                continue;
            }
            let a = 1.0 / (1.0 + (-params.data()[p]).exp());
            let b1 = params.data()[hw + p].exp();
            let b2 = params.data()[2 * hw + p].exp();
            for c in 0..2 {
                let e = (pred.data()[c * hw + p] - gt.data()[c * hw + p]).abs();
                let lik = a * (-e / b1).exp() / (2.0 * b1) + (1.0 - a) * (-e / b2).exp() / (2.0 * b2);
                total += -lik.ln();
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn collapsed_mixture_at_mode_gives_log_two() {
        // alpha -> 1 (logit 20), s1 = 0, pred == gt: NLL = ln 2 per channel.
        let pred = Tensor::from_vec(vec![2, 2, 2], vec![0.3; 8]);
        let gt = pred.clone();
        let mut params = Tensor::zeros(vec![3, 2, 2]);
        for p in 0..4 {
            params.data_mut()[p] = 20.0;
        }
        let l = loss_f64(&pred, &params, &gt, &[true; 4]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9, "got {l}");
    }

    #[test]
    fn collapsed_mixture_reduces_to_l1_plus_log_two() {
        let mut rng = crate::rng::rng_from(3, &[]);
        let pred = Tensor::from_vec(vec![2, 3, 3], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gt = Tensor::from_vec(vec![2, 3, 3], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut params = Tensor::zeros(vec![3, 3, 3]);
        for p in 0..9 {
            params.data_mut()[p] = 20.0;
        }
        let l = loss_f64(&pred, &params, &gt, &[true; 9]);
        let mean_abs = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / 18.0;
        assert!((l - (mean_abs + std::f64::consts::LN_2)).abs() < 1e-8);
    }

    #[test]
    fn matches_naive_float64_oracle_on_random_inputs() {
        let mut rng = crate::rng::rng_from(4, &[]);
        for trial in 0..120 {
            let (h, w) = (3, 4);
            let hw = h * w;
            let pred =
                Tensor::from_vec(vec![2, h, w], (0..2 * hw).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let gt =
                Tensor::from_vec(vec![2, h, w], (0..2 * hw).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let params = Tensor::from_vec(
                vec![3, h, w],
                (0..3 * hw).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            );
            let valid: Vec<bool> = (0..hw).map(|_| rng.gen_bool(0.85)).collect();
            if valid.iter().all(|&v| !v) {
                continue;
            }
            let stable = loss_f64(&pred, &params, &gt, &valid);
            let naive = naive_oracle(&pred, &params, &gt, &valid);
            assert!(
                (stable - naive).abs() < 1e-6,
                "trial {trial}: stable {stable} vs naive {naive}"
            );
        }
    }

    #[test]
    fn empty_valid_set_is_a_contract_error() {
        let pred = Tensor::zeros(vec![2, 2, 2]);
        let params = Tensor::zeros(vec![3, 2, 2]);
        let gt = FlowField::new(Tensor::zeros(vec![2, 2, 2]), vec![false; 4]);
        assert!(matches!(
            laplace_mixture_loss(&pred, &params, &gt),
            Err(TrainError::EmptyValidSet)
        ));
    }

    #[test]
    fn sequence_weights_match_direct_arithmetic() {
        let w = sequence_weights(4, 0.8);
        let expect = [0.512, 0.64, 0.8, 1.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // Per-term values (1,1,1,1) -> total 2.952.
        assert!((w.iter().sum::<f64>() - 2.952).abs() < 1e-12);
        // gamma = 1: every weight is 1.
        assert!(sequence_weights(5, 1.0).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn loss_is_finite_for_extreme_inputs() {
        let pred = Tensor::from_vec(vec![2, 1, 1], vec![1e4, -1e4]);
        let gt = Tensor::zeros(vec![2, 1, 1]);
        let params = Tensor::from_vec(vec![3, 1, 1], vec![-40.0, -8.0, 8.0]);
        let l = loss_f64(&pred, &params, &gt, &[true]);
        assert!(l.is_finite(), "loss {l} not finite");
    }
}
