//! Thin-shell simulation, ACAP deformation features and reduced-order learned
//! dynamics.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acap;
pub mod checkpoint;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod latent;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod sim;
pub mod sparse;

pub use error::{Error, Result};
pub use mesh::{Adjacency, CotanWeights, DihedralPair, TriMesh};
pub use sim::{GraspSet, MaterialKind, ShellSim, SimConfig, SimState, Sphere};
