//! Desk-scale airway-tree segmentation pipeline over 3D voxel grids.
//!
//! The crate covers the whole loop: synthetic airway phantoms with exact
//! ground truth ([`phantom`]), a 3D encoder-decoder segmentation network with
//! dilated-convolution feature extractors and channel attention ([`backbone`]),
//! a tube-sensitive dice-family loss with closed-form derivatives ([`loss`]),
//! fineness-weighted cuboid sampling with iterative coarse/fine alternation
//! ([`sampler`]), teacher-student semi-supervised training ([`semisup`]),
//! connected-component post-processing with branch reconnection ([`postproc`]),
//! and skeleton-based structural metrics ([`metrics`]).
//!
//! All numeric code is generic over the scalar type through [`scalar::Real`]
//! (`f32` for training speed, `f64` for gradient oracles); concrete aliases
//! are exported at the crate root.

pub mod augment;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod postproc;
pub mod runlog;
pub mod sampler;
pub mod scalar;
pub mod seed;
pub mod semisup;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{NvError, Result};
pub use scalar::Real;

/// Single-precision volume, the training dtype.
pub type Volume32 = volume::Volume<f32>;
/// Double-precision volume, used by gradient and quadrature oracles.
pub type Volume64 = volume::Volume<f64>;
/// Single-precision model.
pub type Model32 = backbone::Model<f32>;
/// Double-precision model.
pub type Model64 = backbone::Model<f64>;
/// Single-precision paired airway/background confidence grids.
pub type ConfidenceMaps32 = backbone::ConfidenceMaps<f32>;
/// Double-precision paired airway/background confidence grids.
pub type ConfidenceMaps64 = backbone::ConfidenceMaps<f64>;
