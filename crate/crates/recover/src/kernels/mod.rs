//! Low-level compute kernels shared by the tape ops and inference paths.

pub mod conv;
pub mod norm;
pub mod resample;
pub mod upsample;
