//! Deformable registration of noisy 3D volumes under a low-rank similarity
//! loss anchored to the fixed image's slice-wise truncated SVD.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod ablation;
pub mod cli;
pub mod deform;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod lowrank;
pub mod noise;
pub mod phantom;
pub mod register;
pub mod scalar;
pub mod selftest;
pub mod similarity;
pub mod volume;

pub use deform::Ddf;
pub use error::{Error, Result};
pub use lowrank::{LowRankProjector, SliceAxis};
pub use noise::{NoiseKind, NoiseSpec};
pub use register::{LossKind, RegConfig, RegResult};
pub use scalar::Real;
pub use volume::{Dims, LabelMap, Volume};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Ddf32 = Ddf<f32>;
pub type Ddf64 = Ddf<f64>;
pub type Projector32 = LowRankProjector<f32>;
pub type Projector64 = LowRankProjector<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
