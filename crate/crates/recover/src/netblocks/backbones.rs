//! Context-network backbones (three families at desk scale) and the per-frame
//! feature encoder. All of them downsample exactly 8x.
//!
//! Families follow their archetypes in block structure, not in depth:
//! `medium` stacks plain residual blocks, `small` uses depthwise-separable
//! inverted residuals with the final would-be downsampling block forced to
//! stride 1, and `large` uses 7x7 depthwise blocks with pointwise expansion
//! and per-channel normalization, with the last downsampling steps replaced
//! by stride-1 convolutions.

use super::{Backbone, Binding, ConvLayer, ConvShape, Init, ModelConfig, NormKind, NormLayer, ParamStore};
use crate::num::Scalar;
use crate::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;

/// Plain residual block: two 3x3 convolutions with an identity (or projected)
/// shortcut.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvLayer,
    n1: NormLayer,
    conv2: ConvLayer,
    n2: NormLayer,
    proj: Option<ConvLayer>,
}

impl ResBlock {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv1 =
            ConvLayer::build(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, 1, Init::He);
        let n1 = NormLayer::build(store, &format!("{name}.n1"), c_out, NormKind::Instance);
        let conv2 =
            ConvLayer::build(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 1, Init::He);
        let n2 = NormLayer::build(store, &format!("{name}.n2"), c_out, NormKind::Instance);
        let proj = (stride != 1 || c_in != c_out).then(|| {
            ConvLayer::build(store, rng, &format!("{name}.proj"), c_in, c_out, 1, stride, 0, 1, Init::He)
        });
        ResBlock { conv1, n1, conv2, n2, proj }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let mut y = self.conv1.forward(tape, bind, x);
        y = self.n1.forward(tape, bind, y);
        y = tape.relu(y);
        y = self.conv2.forward(tape, bind, y);
        y = self.n2.forward(tape, bind, y);
        let shortcut = match &self.proj {
            Some(p) => p.forward(tape, bind, x),
            None => x,
        };
        let sum = tape.add(y, shortcut);
        tape.relu(sum)
    }

    fn shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) -> (usize, usize) {
        let s1 = self.conv1.shape_at(h, w);
        out.push(s1);
        out.push(self.conv2.shape_at(s1.h_out, s1.w_out));
        if let Some(p) = &self.proj {
            out.push(p.shape_at(h, w));
        }
        (s1.h_out, s1.w_out)
    }
}

/// Depthwise-separable inverted residual block.
#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: ConvLayer,
    n1: NormLayer,
    dw: ConvLayer,
    n2: NormLayer,
    project: ConvLayer,
    n3: NormLayer,
    skip: bool,
}

impl InvertedResidual {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
        stride: usize,
    ) -> Self {
        let mid = c_in * expansion;
        let expand =
            ConvLayer::build(store, rng, &format!("{name}.exp"), c_in, mid, 1, 1, 0, 1, Init::He);
        let n1 = NormLayer::build(store, &format!("{name}.n1"), mid, NormKind::Instance);
        let dw = ConvLayer::build(store, rng, &format!("{name}.dw"), mid, mid, 3, stride, 1, mid, Init::He);
        let n2 = NormLayer::build(store, &format!("{name}.n2"), mid, NormKind::Instance);
        let project =
            ConvLayer::build(store, rng, &format!("{name}.proj"), mid, c_out, 1, 1, 0, 1, Init::He);
        let n3 = NormLayer::build(store, &format!("{name}.n3"), c_out, NormKind::Instance);
        InvertedResidual { expand, n1, dw, n2, project, n3, skip: stride == 1 && c_in == c_out }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let mut y = self.expand.forward(tape, bind, x);
        y = self.n1.forward(tape, bind, y);
        y = tape.hard_swish(y);
        y = self.dw.forward(tape, bind, y);
        y = self.n2.forward(tape, bind, y);
        y = tape.hard_swish(y);
        y = self.project.forward(tape, bind, y);
        y = self.n3.forward(tape, bind, y);
        if self.skip {
            tape.add(y, x)
        } else {
            y
        }
    }

    fn shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) -> (usize, usize) {
        out.push(self.expand.shape_at(h, w));
        let s = self.dw.shape_at(h, w);
        out.push(s);
        out.push(self.project.shape_at(s.h_out, s.w_out));
        (s.h_out, s.w_out)
    }
}

/// Large-kernel block: 7x7 depthwise, channel norm, 4x pointwise expansion.
#[derive(Debug, Clone)]
struct LargeBlock {
    dw: ConvLayer,
    norm: NormLayer,
    pw1: ConvLayer,
    pw2: ConvLayer,
}

impl LargeBlock {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        let dw = ConvLayer::build(store, rng, &format!("{name}.dw"), c, c, 7, 1, 3, c, Init::He);
        let norm = NormLayer::build(store, &format!("{name}.norm"), c, NormKind::Channel);
        let pw1 = ConvLayer::build(store, rng, &format!("{name}.pw1"), c, 4 * c, 1, 1, 0, 1, Init::He);
        let pw2 = ConvLayer::build(store, rng, &format!("{name}.pw2"), 4 * c, c, 1, 1, 0, 1, Init::He);
        LargeBlock { dw, norm, pw1, pw2 }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: NodeId) -> NodeId {
        let mut y = self.dw.forward(tape, bind, x);
        y = self.norm.forward(tape, bind, y);
        y = self.pw1.forward(tape, bind, y);
        y = tape.gelu(y);
        y = self.pw2.forward(tape, bind, y);
        tape.add(y, x)
    }

    fn shapes(&self, h: usize, w: usize, out: &mut Vec<ConvShape>) -> (usize, usize) {
        out.push(self.dw.shape_at(h, w));
        out.push(self.pw1.shape_at(h, w));
        out.push(self.pw2.shape_at(h, w));
        (h, w)
    }
}

#[derive(Debug, Clone)]
enum Trunk {
    Medium {
        stem: (ConvLayer, NormLayer),
        blocks: Vec<ResBlock>,
    },
    Small {
        stem: (ConvLayer, NormLayer),
        blocks: Vec<InvertedResidual>,
    },
    Large {
        stem: (ConvLayer, NormLayer),
        stage1: Vec<LargeBlock>,
        down: (ConvLayer, NormLayer),
        stage2: Vec<LargeBlock>,
        // Would-be downsampling convolution running at stride 1.
        keep: (ConvLayer, NormLayer),
        stage3: Vec<LargeBlock>,
    },
}

/// Context branch: consumes the stacked frames (6 channels), emits context
/// features, the initial hidden state, the initial flow, and its mixture
/// parameters, all on the 1/8 grid.
#[derive(Debug, Clone)]
pub struct ContextNet {
    trunk: Trunk,
    head: ConvLayer,
    context_dim: usize,
    hidden_dim: usize,
}

/// Slices of the context head output.
pub struct ContextParts {
    pub context: NodeId,
    pub hidden0: NodeId,
    pub flow0: NodeId,
    pub mix0: NodeId,
}

impl ContextNet {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let trunk = match cfg.backbone {
            Backbone::Medium => {
                let stem = (
                    ConvLayer::build(store, rng, "cnet.stem", 6, 32, 3, 2, 1, 1, Init::He),
                    NormLayer::build(store, "cnet.stem_n", 32, NormKind::Instance),
                );
                let blocks = vec![
                    ResBlock::build(store, rng, "cnet.b1", 32, 48, 2),
                    ResBlock::build(store, rng, "cnet.b2", 48, 48, 1),
                    ResBlock::build(store, rng, "cnet.b3", 48, 64, 2),
                    ResBlock::build(store, rng, "cnet.b4", 64, 64, 1),
                ];
                Trunk::Medium { stem, blocks }
            }
            Backbone::Small => {
                let stem = (
                    ConvLayer::build(store, rng, "cnet.stem", 6, 16, 3, 2, 1, 1, Init::He),
                    NormLayer::build(store, "cnet.stem_n", 16, NormKind::Instance),
                );
                let blocks = vec![
                    InvertedResidual::build(store, rng, "cnet.ir1", 16, 24, 3, 2),
                    InvertedResidual::build(store, rng, "cnet.ir2", 24, 24, 3, 1),
                    InvertedResidual::build(store, rng, "cnet.ir3", 24, 40, 3, 2),
                    InvertedResidual::build(store, rng, "cnet.ir4", 40, 40, 3, 1),
                    // The block that would downsample to 1/16 keeps stride 1.
                    InvertedResidual::build(store, rng, "cnet.ir5", 40, 64, 3, 1),
                ];
                Trunk::Small { stem, blocks }
            }
            Backbone::Large => {
                let stem = (
                    ConvLayer::build(store, rng, "cnet.stem", 6, 48, 4, 4, 0, 1, Init::He),
                    NormLayer::build(store, "cnet.stem_n", 48, NormKind::Channel),
                );
                let stage1 = vec![
                    LargeBlock::build(store, rng, "cnet.s1a", 48),
                    LargeBlock::build(store, rng, "cnet.s1b", 48),
                ];
                let down = (
                    ConvLayer::build(store, rng, "cnet.down", 48, 80, 2, 2, 0, 1, Init::He),
                    NormLayer::build(store, "cnet.down_n", 80, NormKind::Channel),
                );
                let stage2 = vec![
                    LargeBlock::build(store, rng, "cnet.s2a", 80),
                    LargeBlock::build(store, rng, "cnet.s2b", 80),
                ];
                let keep = (
                    ConvLayer::build(store, rng, "cnet.keep", 80, 96, 3, 1, 1, 1, Init::He),
                    NormLayer::build(store, "cnet.keep_n", 96, NormKind::Channel),
                );
                let stage3 = vec![
                    LargeBlock::build(store, rng, "cnet.s3a", 96),
                    LargeBlock::build(store, rng, "cnet.s3b", 96),
                ];
                Trunk::Large { stem, stage1, down, stage2, keep, stage3 }
            }
        };
        let trunk_out = match cfg.backbone {
            Backbone::Medium | Backbone::Small => 64,
            Backbone::Large => 96,
        };
        let head_out = cfg.context_dim + cfg.hidden_dim + 2 + 3;
        let head = ConvLayer::build(store, rng, "cnet.head", trunk_out, head_out, 1, 1, 0, 1, Init::He);
        // Flow and mixture rows start at zero so the initial prediction is
        // the zero field, matching the delta-flow head policy.
        let zero_from = (cfg.context_dim + cfg.hidden_dim) * trunk_out;
        let w = store.get_mut(head.w);
        for v in &mut w.data_mut()[zero_from..] {
            *v = T::zero();
        }
        ContextNet { trunk, head, context_dim: cfg.context_dim, hidden_dim: cfg.hidden_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, frames: NodeId) -> ContextParts {
        let trunk_out = match &self.trunk {
            Trunk::Medium { stem, blocks } => {
                let mut y = stem.0.forward(tape, bind, frames);
                y = stem.1.forward(tape, bind, y);
                y = tape.relu(y);
                for b in blocks {
                    y = b.forward(tape, bind, y);
                }
                y
            }
            Trunk::Small { stem, blocks } => {
                let mut y = stem.0.forward(tape, bind, frames);
                y = stem.1.forward(tape, bind, y);
                y = tape.hard_swish(y);
                for b in blocks {
                    y = b.forward(tape, bind, y);
                }
                y
            }
            Trunk::Large { stem, stage1, down, stage2, keep, stage3 } => {
                let mut y = stem.0.forward(tape, bind, frames);
                y = stem.1.forward(tape, bind, y);
                for b in stage1 {
                    y = b.forward(tape, bind, y);
                }
                y = down.0.forward(tape, bind, y);
                y = down.1.forward(tape, bind, y);
                for b in stage2 {
                    y = b.forward(tape, bind, y);
                }
                y = keep.0.forward(tape, bind, y);
                y = keep.1.forward(tape, bind, y);
                for b in stage3 {
                    y = b.forward(tape, bind, y);
                }
                y
            }
        };
        let head = self.head.forward(tape, bind, trunk_out);
        let (cd, hd) = (self.context_dim, self.hidden_dim);
        let context_raw = tape.slice_c(head, 0, cd);
        let context = tape.relu(context_raw);
        let hidden_raw = tape.slice_c(head, cd, hd);
        let hidden0 = tape.tanh(hidden_raw);
        let flow0 = tape.slice_c(head, cd + hd, 2);
        let mix0 = super::refine::clamp_mix(tape, head, cd + hd + 2);
        ContextParts { context, hidden0, flow0, mix0 }
    }

    pub fn conv_shapes(&self, h_in: usize, w_in: usize) -> Vec<ConvShape> {
        let mut out = Vec::new();
        let (mut h, mut w);
        match &self.trunk {
            Trunk::Medium { stem, blocks } => {
                let s = stem.0.shape_at(h_in, w_in);
                out.push(s);
                h = s.h_out;
                w = s.w_out;
                for b in blocks {
                    let (nh, nw) = b.shapes(h, w, &mut out);
                    h = nh;
                    w = nw;
                }
            }
            Trunk::Small { stem, blocks } => {
                let s = stem.0.shape_at(h_in, w_in);
                out.push(s);
                h = s.h_out;
                w = s.w_out;
                for b in blocks {
                    let (nh, nw) = b.shapes(h, w, &mut out);
                    h = nh;
                    w = nw;
                }
            }
            Trunk::Large { stem, stage1, down, stage2, keep, stage3 } => {
                let s = stem.0.shape_at(h_in, w_in);
                out.push(s);
                h = s.h_out;
                w = s.w_out;
                for b in stage1 {
                    let (nh, nw) = b.shapes(h, w, &mut out);
                    h = nh;
                    w = nw;
                }
                let d = down.0.shape_at(h, w);
                out.push(d);
                h = d.h_out;
                w = d.w_out;
                for b in stage2 {
                    let (nh, nw) = b.shapes(h, w, &mut out);
                    h = nh;
                    w = nw;
                }
                let k = keep.0.shape_at(h, w);
                out.push(k);
                h = k.h_out;
                w = k.w_out;
                for b in stage3 {
                    let (nh, nw) = b.shapes(h, w, &mut out);
                    h = nh;
                    w = nw;
                }
            }
        }
        out.push(self.head.shape_at(h, w));
        out
    }
}

/// Per-frame feature encoder (weights shared across the two frames),
/// 8x stride, `d` output channels.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    stem: (ConvLayer, NormLayer),
    blocks: Vec<ResBlock>,
    out: ConvLayer,
}

impl FeatureEncoder {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<Self, super::ConfigError> {
        if cfg.mode.is_removed() {
            return Err(super::ConfigError::EncoderRemoved);
        }
        let stem = (
            ConvLayer::build(store, rng, "fnet.stem", 3, 24, 3, 2, 1, 1, Init::He),
            NormLayer::build(store, "fnet.stem_n", 24, NormKind::Instance),
        );
        let blocks = vec![
            ResBlock::build(store, rng, "fnet.b1", 24, 32, 2),
            ResBlock::build(store, rng, "fnet.b2", 32, 32, 1),
            ResBlock::build(store, rng, "fnet.b3", 32, 48, 2),
            ResBlock::build(store, rng, "fnet.b4", 48, 48, 1),
        ];
        let out = ConvLayer::build(store, rng, "fnet.out", 48, cfg.feature_dim, 1, 1, 0, 1, Init::He);
        Ok(FeatureEncoder { stem, blocks, out })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, frame: NodeId) -> NodeId {
        let mut y = self.stem.0.forward(tape, bind, frame);
        y = self.stem.1.forward(tape, bind, y);
        y = tape.relu(y);
        for b in &self.blocks {
            y = b.forward(tape, bind, y);
        }
        self.out.forward(tape, bind, y)
    }

    pub fn conv_shapes(&self, h_in: usize, w_in: usize) -> Vec<ConvShape> {
        let mut out = Vec::new();
        let s = self.stem.0.shape_at(h_in, w_in);
        out.push(s);
        let (mut h, mut w) = (s.h_out, s.w_out);
        for b in &self.blocks {
            let (nh, nw) = b.shapes(h, w, &mut out);
            h = nh;
            w = nw;
        }
        out.push(self.out.shape_at(h, w));
        out
    }
}
