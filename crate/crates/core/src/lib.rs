//! Spatio-temporally consistent as-consistent-as-possible (TS-ACAP) deformation
//! features for thin-shell mesh sequences, and the coarse-to-fine detail
//! synthesis pipeline built on top of them.

pub mod error;
pub mod harness;
pub mod defgrad;
pub mod mesh;
pub mod neuralnet;
pub mod postprocess;
pub mod reconstruct;
pub mod tsacap;

pub use error::{Error, Result};
pub use mesh::{Mesh, MeshSequence, Vec3};
