//! Full-model assembly honoring the cost-volume lifecycle mode.

use super::backbones::{ContextNet, FeatureEncoder};
use super::refine::{RefinementState, RefinementUnit};
use super::{bind_store, Binding, ConfigError, ConvShape, ModelConfig, ParamStore};
use crate::costvolume::{fading_mask, CostVolumeMode};
use crate::num::Scalar;
use crate::rng::{derive_seed, rng_from, tag};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Node handles produced by one taped forward pass. Index 0 of `flows`/`mixes`
/// is the upsampled initial prediction; the last entry is the final flow.
pub struct TapedForward {
    pub flows: Vec<NodeId>,
    pub mixes: Vec<NodeId>,
}

impl TapedForward {
    pub fn final_flow(&self) -> NodeId {
        *self.flows.last().expect("forward produced no flows")
    }
}

/// Materialized prediction: per-iteration full-resolution flows and mixture
/// parameters, index 0 being the upsampled initial flow.
#[derive(Debug, Clone)]
pub struct Prediction<T: Scalar> {
    pub flows: Vec<Tensor<T>>,
    pub mixes: Vec<Tensor<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn final_flow(&self) -> &Tensor<T> {
        self.flows.last().expect("prediction holds no flows")
    }
}

impl Prediction<f32> {
    pub fn final_flow_field(&self) -> crate::flowio::FlowField {
        crate::flowio::FlowField::all_valid(self.final_flow().clone())
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    cnet: ContextNet,
    fnet: Option<FeatureEncoder>,
    refine: RefinementUnit,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, &[tag("model-init")]);
        let cnet = ContextNet::build(&mut store, &mut rng, &cfg);
        let fnet = if cfg.mode.is_removed() {
            None
        } else {
            Some(FeatureEncoder::build(&mut store, &mut rng, &cfg)?)
        };
        let refine = RefinementUnit::build(&mut store, &mut rng, &cfg);
        Ok(Model { cfg, store, cnet, fnet, refine })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn refinement(&self) -> &RefinementUnit {
        &self.refine
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn feature_param_count(&self) -> usize {
        self.store.count_prefix("fnet.")
    }

    pub fn has_feature_encoder(&self) -> bool {
        self.fnet.is_some()
    }

    /// Switch to fading mode (or raise its drop probability).
    pub fn set_fading(&mut self, p: f64) {
        assert!(
            !self.cfg.mode.is_removed(),
            "cannot fade a model whose cost volume was already removed"
        );
        self.cfg.mode = CostVolumeMode::Fading { p };
    }

    /// Irreversibly drop the feature encoder and switch to removed mode.
    /// Returns the number of dropped parameters.
    pub fn cut_off(&mut self) -> usize {
        self.fnet = None;
        self.cfg.mode = CostVolumeMode::Removed;
        self.store.drop_prefix("fnet.")
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        bind_store(&self.store, tape, trainable)
    }

    /// Taped forward pass. `fade_seed` feeds the per-iteration dropout masks
    /// when the mode is fading; it is unused otherwise.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        frame1: &Tensor<T>,
        frame2: &Tensor<T>,
        iterations: usize,
        fade_seed: u64,
    ) -> TapedForward {
        let (c1, fh, fw) = frame1.dims3();
        let (c2, fh2, fw2) = frame2.dims3();
        assert_eq!(c1, 3, "frames must have 3 channels");
        assert_eq!((c1, fh, fw), (c2, fh2, fw2), "frame shapes must match");
        assert!(fh % 8 == 0 && fw % 8 == 0, "frame dimensions must be divisible by 8");
        let (h, w) = (fh / 8, fw / 8);

        // Inputs normalized from [0, 1] to [-1, 1].
        let norm = |t: &Tensor<T>| t.map(|v| v + v - T::one());
        let n1 = norm(frame1);
        let n2 = norm(frame2);
        let mut stacked_data = Vec::with_capacity(2 * n1.len());
        stacked_data.extend_from_slice(n1.data());
        stacked_data.extend_from_slice(n2.data());
        let stacked = tape.constant(Tensor::from_vec(vec![6, fh, fw], stacked_data));

        let parts = self.cnet.forward(tape, bind, stacked);

        // Feature branch: materialize the correlation pyramid unless removed.
        let levels: Option<Vec<NodeId>> = match (&self.fnet, self.cfg.mode) {
            (_, CostVolumeMode::Removed) | (None, _) => None,
            (Some(fnet), _) => {
                let f1 = tape.constant(n1);
                let f2 = tape.constant(n2);
                let feat1 = fnet.forward(tape, bind, f1);
                let feat2 = fnet.forward(tape, bind, f2);
                let mut lv = vec![tape.correlate(feat1, feat2)];
                for l in 1..self.cfg.levels {
                    lv.push(tape.avgpool2(lv[l - 1]));
                }
                Some(lv)
            }
        };

        let mut flows = Vec::with_capacity(iterations + 1);
        let mut mixes = Vec::with_capacity(iterations + 1);

        let mask0 = self.refine.upsample_mask(tape, bind, parts.hidden0);
        flows.push(tape.convex_upsample(parts.flow0, mask0, T::from_f64(8.0)));
        mixes.push(tape.resize_bilinear(parts.mix0, fh, fw));

        let mut state = RefinementState { hidden: parts.hidden0, flow: parts.flow0, iteration: 0 };
        for it in 0..iterations {
            // The flow entering an iteration is detached, matching the
            // per-iteration supervision scheme.
            let flow_value = tape.value(state.flow).clone();
            state.flow = tape.constant(flow_value.clone());

            let cost_features = match &levels {
                None => tape.constant(Tensor::zeros(vec![
                    self.cfg.motion_input_channels(),
                    h,
                    w,
                ])),
                Some(lv) => {
                    let raw = tape.lookup(lv, flow_value.clone(), self.cfg.radius);
                    match self.cfg.mode {
                        CostVolumeMode::Active => raw,
                        CostVolumeMode::Fading { p } => {
                            let seed = derive_seed(fade_seed, &[tag("fade-iter"), it as u64]);
                            tape.mul_mask(raw, fading_mask(h, w, p, seed))
                        }
                        CostVolumeMode::Removed => unreachable!(),
                    }
                }
            };

            let motion = self.refine.encode_motion(tape, bind, cost_features, &flow_value);
            let out = self.refine.step(tape, bind, state, parts.context, motion);
            state = out.state;

            let mask = self.refine.upsample_mask(tape, bind, state.hidden);
            flows.push(tape.convex_upsample(state.flow, mask, T::from_f64(8.0)));
            mixes.push(tape.resize_bilinear(out.mix, fh, fw));
        }

        TapedForward { flows, mixes }
    }

    /// Inference forward pass on an internally-owned tape; gradients are
    /// neither tracked nor kept.
    pub fn infer(&self, frame1: &Tensor<T>, frame2: &Tensor<T>, iterations: usize) -> Prediction<T> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false);
        let fwd = self.forward_taped(&mut tape, &bind, frame1, frame2, iterations, 0);
        Prediction {
            flows: fwd.flows.iter().map(|&id| tape.value(id).clone()).collect(),
            mixes: fwd.mixes.iter().map(|&id| tape.value(id).clone()).collect(),
        }
    }
}

/// Conv shapes per component at a given input resolution.
pub struct ConvLayout {
    pub context: Vec<ConvShape>,
    pub feature_encoder: Vec<ConvShape>,
    pub refinement_step: Vec<ConvShape>,
    pub upsampler: Vec<ConvShape>,
}

/// Enumerate the architecture's convolutions for the analytic profiler.
pub fn conv_layout(cfg: &ModelConfig, height: usize, width: usize) -> ConvLayout {
    let probe: Model<f32> = Model::new(cfg.clone(), 0).expect("invalid config");
    let (h, w) = (height / 8, width / 8);
    let context = probe.cnet.conv_shapes(height, width);
    let feature_encoder =
        probe.fnet.as_ref().map(|f| f.conv_shapes(height, width)).unwrap_or_default();
    let mut refinement_step = Vec::new();
    probe.refine.motion_encoder_shapes(h, w, &mut refinement_step);
    probe.refine.gru_shapes(h, w, &mut refinement_step);
    let mut upsampler = Vec::new();
    probe.refine.mask_shapes(h, w, &mut upsampler);
    ConvLayout { context, feature_encoder, refinement_step, upsampler }
}
