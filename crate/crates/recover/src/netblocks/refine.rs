//! Recurrent refinement unit: motion encoder, convolutional GRU, flow/mixture
//! head, and the upsample-mask head.

use super::{Binding, ConvLayer, ConvShape, Init, ModelConfig, ParamStore};
use crate::num::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

const MOTION_DIM: usize = 64;
const LOG_SCALE_LIMIT: f64 = 8.0;

/// Clamp the two log-scale channels of a `(alpha_logit, s1, s2)` triple read
/// from `src` starting at channel `c0`.
pub(super) fn clamp_mix<T: Scalar>(tape: &mut Tape<T>, src: NodeId, c0: usize) -> NodeId {
    let alpha = tape.slice_c(src, c0, 1);
    let scales_raw = tape.slice_c(src, c0 + 1, 2);
    let scales = tape.clamp(
        scales_raw,
        T::from_f64(-LOG_SCALE_LIMIT),
        T::from_f64(LOG_SCALE_LIMIT),
    );
    tape.concat(&[alpha, scales])
}

/// State carried across refinement iterations.
#[derive(Debug, Clone, Copy)]
pub struct RefinementState {
    pub hidden: NodeId,
    pub flow: NodeId,
    pub iteration: usize,
}

/// One refinement step's outputs.
pub struct StepOutput {
    pub state: RefinementState,
    /// Mixture parameters `(alpha_logit, s1, s2)` for the new flow.
    pub mix: NodeId,
}

impl RefinementUnit {
    pub fn initial_state(hidden: NodeId, flow: NodeId) -> RefinementState {
        RefinementState { hidden, flow, iteration: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementUnit {
    corr1: ConvLayer,
    corr2: ConvLayer,
    flow1: ConvLayer,
    flow2: ConvLayer,
    merge: ConvLayer,
    convz: ConvLayer,
    convr: ConvLayer,
    convq: ConvLayer,
    head1: ConvLayer,
    head2: ConvLayer,
    mask1: ConvLayer,
    mask2: ConvLayer,
}

impl RefinementUnit {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let corr_in = cfg.motion_input_channels();
        let hd = cfg.hidden_dim;
        let gru_in = hd + cfg.context_dim + MOTION_DIM;
        RefinementUnit {
            corr1: ConvLayer::build(store, rng, "refine.corr1", corr_in, 96, 1, 1, 0, 1, Init::He),
            corr2: ConvLayer::build(store, rng, "refine.corr2", 96, 64, 3, 1, 1, 1, Init::He),
            flow1: ConvLayer::build(store, rng, "refine.flow1", 2, 32, 7, 1, 3, 1, Init::He),
            flow2: ConvLayer::build(store, rng, "refine.flow2", 32, 16, 3, 1, 1, 1, Init::He),
            merge: ConvLayer::build(store, rng, "refine.merge", 80, MOTION_DIM - 2, 3, 1, 1, 1, Init::He),
            convz: ConvLayer::build(store, rng, "refine.convz", gru_in, hd, 3, 1, 1, 1, Init::He),
            convr: ConvLayer::build(store, rng, "refine.convr", gru_in, hd, 3, 1, 1, 1, Init::He),
            convq: ConvLayer::build(store, rng, "refine.convq", gru_in, hd, 3, 1, 1, 1, Init::He),
            head1: ConvLayer::build(store, rng, "refine.head1", hd, 96, 3, 1, 1, 1, Init::He),
            // Zero-initialized so iteration 0 starts from the context
            // network's initial flow.
            head2: ConvLayer::build(store, rng, "refine.head2", 96, 5, 3, 1, 1, 1, Init::Zero),
            mask1: ConvLayer::build(store, rng, "refine.mask1", hd, 96, 3, 1, 1, 1, Init::He),
            mask2: ConvLayer::build(store, rng, "refine.mask2", 96, 576, 1, 1, 0, 1, Init::Normal(1e-3)),
        }
    }

    /// Encode sampled cost features and the current (detached) flow into the
    /// motion feature block.
    pub fn encode_motion<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        cost_features: NodeId,
        flow_detached: &Tensor<T>,
    ) -> NodeId {
        let mut c = self.corr1.forward(tape, bind, cost_features);
        c = tape.relu(c);
        c = self.corr2.forward(tape, bind, c);
        c = tape.relu(c);
        let flow_node = tape.constant(flow_detached.clone());
        let mut f = self.flow1.forward(tape, bind, flow_node);
        f = tape.relu(f);
        f = self.flow2.forward(tape, bind, f);
        f = tape.relu(f);
        let cat = tape.concat(&[c, f]);
        let mut m = self.merge.forward(tape, bind, cat);
        m = tape.relu(m);
        tape.concat(&[m, flow_node])
    }

    /// Gated-recurrent update followed by the flow/mixture head.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        state: RefinementState,
        context: NodeId,
        motion: NodeId,
    ) -> StepOutput {
        let x = tape.concat(&[context, motion]);
        let hx = tape.concat(&[state.hidden, x]);
        let z = self.convz.forward(tape, bind, hx);
        let z = tape.sigmoid(z);
        let r = self.convr.forward(tape, bind, hx);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, state.hidden);
        let rhx = tape.concat(&[rh, x]);
        let q = self.convq.forward(tape, bind, rhx);
        let q = tape.tanh(q);
        // h' = (1 - z) * h + z * q
        let neg_z = tape.neg(z);
        let one_minus_z = tape.add_scalar(neg_z, T::one());
        let keep = tape.mul(one_minus_z, state.hidden);
        let update = tape.mul(z, q);
        let hidden = tape.add(keep, update);

        let mut head = self.head1.forward(tape, bind, hidden);
        head = tape.relu(head);
        let head = self.head2.forward(tape, bind, head);
        let delta = tape.slice_c(head, 0, 2);
        let mix = clamp_mix(tape, head, 2);
        let flow = tape.add(state.flow, delta);
        StepOutput {
            state: RefinementState { hidden, flow, iteration: state.iteration + 1 },
            mix,
        }
    }

    /// Predict convex-upsampling mask logits from a hidden state.
    pub fn upsample_mask<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, hidden: NodeId) -> NodeId {
        let mut m = self.mask1.forward(tape, bind, hidden);
        m = tape.relu(m);
        self.mask2.forward(tape, bind, m)
    }

    pub fn motion_encoder_shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) {
        out.push(self.corr1.shape_at(h, w));
        out.push(self.corr2.shape_at(h, w));
        out.push(self.flow1.shape_at(h, w));
        out.push(self.flow2.shape_at(h, w));
        out.push(self.merge.shape_at(h, w));
    }

    pub fn gru_shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) {
        out.push(self.convz.shape_at(h, w));
        out.push(self.convr.shape_at(h, w));
        out.push(self.convq.shape_at(h, w));
        out.push(self.head1.shape_at(h, w));
        out.push(self.head2.shape_at(h, w));
    }

    pub fn mask_shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) {
        out.push(self.mask1.shape_at(h, w));
        out.push(self.mask2.shape_at(h, w));
    }
}
