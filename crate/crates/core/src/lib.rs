//! Implicit 4D matching fields at desk scale.
//!
//! The pipeline: extract per-cell descriptors for a source/target image pair,
//! correlate them into a 4D cosine cost volume, embed that volume into a
//! K-channel cost feature volume, and train a coordinate MLP that scores any
//! continuous (source point, target point) pair. Dense correspondences are
//! then read out by synchronous PatchMatch sampling alternated with
//! gradient-based refinement of the target coordinates.
//!
//! Modules follow the pipeline order:
//! - [`tensor`]: dense tensors with reverse-mode autodiff,
//! - [`features`]: descriptor grids and the cosine cost volume,
//! - [`cost_embed`]: the conv + self-attention volume embedder and
//!   quadlinear lookup,
//! - [`field_model`]: positional encoding, the conditioned MLP, checkpoints,
//! - [`training`]: sampled classification + end-point-error objective,
//! - [`flow`] / [`inference`]: flow fields, PatchMatch, coordinate descent,
//!   and the exhaustive oracle,
//! - [`eval`]: datasets, synthetic pairs, PCK, field-slice export.
//!
//! The `nemf` CLI in the companion crate wires these into train / infer /
//! eval / export-field / gen-synthetic subcommands.

pub mod cost_embed;
pub mod error;
pub mod eval;
pub mod features;
pub mod field_model;
pub mod flow;
pub mod inference;
pub mod tensor;
pub mod training;

pub use error::{NemfError, NemfResult};
