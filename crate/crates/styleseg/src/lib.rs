//! Source-conditioned instance normalization (SCIN) for segmentation, at
//! desk scale.
//!
//! The crate bundles four things:
//!
//! - a small conditional-normalization segmentation network (a 7-block
//!   U-Net whose instance-norm affine parameters are selected per source,
//!   per group, or generated from the image itself),
//! - a deterministic generator of multi-cohort phantom datasets whose
//!   labels differ only by annotation style,
//! - a training/evaluation harness (BCE loss, decoupled weight decay,
//!   affine and contrast augmentation, per-cohort threshold selection),
//! - the parameter-similarity analysis that discovers annotation-style
//!   subgroups from the learned scale/shift vectors.
//!
//! Start with the `examples/` directory: each major capability has one
//! runnable example. The `styleseg` binary exposes the same pipeline as
//! subcommands (`gen-data`, `train`, `eval`, `finetune`, `analyze`,
//! `recipe`).

pub mod analysis;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod metrics;
pub mod model;
pub mod recipes;
pub mod rng;
pub mod train;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{instance_stats, Padding, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
