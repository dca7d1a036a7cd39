//! Diffusion-based contrastive learning for implicit-feedback
//! recommendation, where the forward process is driven by metadata-aware
//! "informative" noise instead of plain Gaussian noise.
//!
//! The numerical core is generic over [`scalar::Scalar`]; the aliases below
//! fix the precision used by the command-line tool and checkpoints.

pub mod error;
pub mod linalg;
pub mod nncore;
pub mod scalar;
pub mod data;
pub mod evaluation;
pub mod objectives;
pub mod metadata;
pub mod psnet;
pub mod diffusion;
pub mod config;
pub mod model;
pub mod trainer;
pub mod analysis;
pub mod checkpoint;

pub use error::{Error, Result};

/// Working precision for training and checkpoints.
pub type Real = f32;
pub type RealMatrix = linalg::Matrix<Real>;
pub type Model = model::InfoDcl<Real>;
pub type RealTrainer = trainer::Trainer<Real>;
pub type RealCheckpoint = checkpoint::Checkpoint<Real>;
