//! Trainable network components: context backbones, the feature encoder, the
//! recurrent refinement unit, convex upsampling, and full-model assembly.

mod backbones;
mod model;
mod refine;

pub use backbones::{ContextNet, FeatureEncoder};
pub use model::{conv_layout, ConvLayout, Model, Prediction, TapedForward};
pub use refine::{RefinementState, RefinementUnit, StepOutput};

use crate::costvolume::CostVolumeMode;
use crate::kernels::conv::ConvMeta;
use crate::num::Scalar;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Small,
    Medium,
    Large,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Small => write!(f, "small"),
            Backbone::Medium => write!(f, "medium"),
            Backbone::Large => write!(f, "large"),
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "small" => Ok(Backbone::Small),
            "medium" => Ok(Backbone::Medium),
            "large" => Ok(Backbone::Large),
            other => Err(ConfigError::UnknownBackbone(other.to_string())),
        }
    }
}

impl Backbone {
    /// Inference-time refinement iteration defaults per backbone family.
    pub fn default_eval_iterations(&self) -> usize {
        match self {
            Backbone::Small | Backbone::Large => 4,
            Backbone::Medium => 8,
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Channels of the correlation features (`d`).
    pub feature_dim: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    /// Refinement step count used during training.
    pub iterations: usize,
    /// Pyramid level count.
    pub levels: usize,
    /// Lookup radius.
    pub radius: usize,
    pub mode: CostVolumeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Medium,
            feature_dim: 64,
            context_dim: 64,
            hidden_dim: 64,
            iterations: 4,
            levels: crate::costvolume::DEFAULT_LEVELS,
            radius: crate::costvolume::DEFAULT_RADIUS,
            mode: CostVolumeMode::Active,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.feature_dim < 8 || self.context_dim < 8 || self.hidden_dim < 8 {
            return Err(ConfigError::DimensionTooSmall);
        }
        if self.levels < 1 {
            return Err(ConfigError::Invalid("levels must be >= 1".into()));
        }
        if let CostVolumeMode::Fading { p } = self.mode {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid("fading probability must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Channel count of the sampled motion features fed to the refinement unit.
    pub fn motion_input_channels(&self) -> usize {
        self.levels * (2 * self.radius + 1) * (2 * self.radius + 1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown backbone: {0}")]
    UnknownBackbone(String),
    #[error("feature/context/hidden dimensions must be >= 8")]
    DimensionTooSmall,
    #[error("feature encoder cannot be constructed in removed mode")]
    EncoderRemoved,
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Index of a parameter tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Named parameter tensors. Entries are never re-indexed; dropping a
/// component leaves tombstones so other components keep their ids.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Option<Tensor<T>>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, Some(t)));
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.entries[id].1.as_ref().expect("parameter was dropped")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.entries[id].1.as_mut().expect("parameter was dropped")
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    pub fn is_live(&self, id: ParamId) -> bool {
        self.entries[id].1.is_some()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    /// Live (name, tensor) pairs in declaration order.
    pub fn iter_live(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, (n, t))| t.as_ref().map(|t| (i, n.as_str(), t)))
    }

    pub fn param_count(&self) -> usize {
        self.iter_live().map(|(_, _, t)| t.len()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter_live().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.len()).sum()
    }

    /// Tombstone every parameter under `prefix`; returns dropped element count.
    pub fn drop_prefix(&mut self, prefix: &str) -> usize {
        let mut dropped = 0;
        for (n, t) in &mut self.entries {
            if n.starts_with(prefix) {
                if let Some(tensor) = t.take() {
                    dropped += tensor.len();
                }
            }
        }
        dropped
    }
}

/// Weight initialization styles.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal scaled by fan-in.
    He,
    /// Normal with a fixed standard deviation.
    Normal(f64),
    Zero,
}

/// Map of store entries to tape nodes for one forward pass.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id].expect("parameter not bound (dropped?)")
    }

    /// Bound (parameter, node) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.map(|n| (i, n)))
    }
}

/// Bind every live parameter as a tape input. Trainable bindings become
/// leaves; inference bindings become constants.
pub fn bind_store<T: Scalar>(store: &ParamStore<T>, tape: &mut Tape<T>, trainable: bool) -> Binding {
    let mut nodes = Vec::with_capacity(store.slots());
    for i in 0..store.slots() {
        if store.is_live(i) {
            let t = store.get(i).clone();
            nodes.push(Some(if trainable { tape.leaf(t) } else { tape.constant(t) }));
        } else {
            nodes.push(None);
        }
    }
    Binding { nodes }
}

/// Convolution layer: weights plus metadata, parameters held by the store.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub meta: ConvMeta,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        init: Init,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zero => 0.0,
        };
        let n = c_out * (c_in / groups) * k * k;
        let data: Vec<T> =
            (0..n).map(|_| T::from_f64(rng::normal(rng) * std)).collect();
        let w = store.add(
            format!("{name}.w"),
            Tensor::from_vec(vec![c_out, c_in / groups, k, k], data),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        ConvLayer { w, b: Some(b), meta: ConvMeta { k, stride, pad, groups }, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        tape.conv2d(x, bind.node(self.w), self.b.map(|b| bind.node(b)), self.meta)
    }

    pub fn shape_at(&self, h_in: usize, w_in: usize) -> ConvShape {
        ConvShape {
            k: self.meta.k,
            c_in: self.c_in,
            c_out: self.c_out,
            groups: self.meta.groups,
            h_out: self.meta.out_dim(h_in),
            w_out: self.meta.out_dim(w_in),
        }
    }
}

/// Normalization layer with learnable scale/shift.
#[derive(Debug, Clone, Copy)]
pub enum NormKind {
    /// Normalize each channel over its spatial extent.
    Instance,
    /// Normalize across channels at each position.
    Channel,
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub kind: NormKind,
}

impl NormLayer {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kind: NormKind,
    ) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::full(vec![channels], T::one()));
        let beta = store.add(format!("{name}.be"), Tensor::zeros(vec![channels]));
        NormLayer { gamma, beta, kind }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let eps = T::from_f64(1e-5);
        match self.kind {
            NormKind::Instance => {
                tape.instance_norm(x, bind.node(self.gamma), bind.node(self.beta), eps)
            }
            NormKind::Channel => {
                tape.channel_norm(x, bind.node(self.gamma), bind.node(self.beta), eps)
            }
        }
    }
}

/// Static description of one convolution at a given input resolution,
/// consumed by the analytic profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}
