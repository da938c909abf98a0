//! Optical flow estimation with cost-volume removal during training.

/// Fingerprint of this library's source tree, for cache invalidation.
pub const SRC_FINGERPRINT: &str = env!("RECOVER_SRC_FINGERPRINT");

pub mod costvolume;
pub mod datasynth;
pub mod evaluator;
pub mod flowio;
pub mod kernels;
pub mod netblocks;
pub mod num;
pub mod profiler;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod viz;
pub mod tensor;
