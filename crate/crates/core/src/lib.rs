//! Real-time soft-tissue deformation with regularized Kelvinlets.
//!
//! The crate bundles the pieces needed to build and evaluate grasp-driven
//! deformation models on tetrahedral meshes:
//!
//! - [`mesh`]: tetrahedral meshes, surface extraction, normals, region labels
//!   and lumped volume weights.
//! - [`kelvinlet`]: regularized Kelvinlet fields and the multi-grasp
//!   coefficient solve.
//! - [`fem`]: linear-elastic and Mooney-Rivlin (with gravity) quasi-static
//!   solvers used as ground truth.
//! - [`sampling`]: grasp location and displacement distributions.
//! - [`dataset`]: FEM sample generation and on-disk storage.
//! - [`neural`]: a per-node DeepSet surrogate trained as a plain regressor,
//!   as a Kelvinlet residual, or with a Kelvinlet regularizer.
//! - [`metrics`]: weighted field norms and the deformation capture mean.
//! - [`service`]: the interactive grasp session protocol.
//!
//! All quantities are SI: meters, Pascals, kg/m³.

pub mod dataset;
pub mod error;
pub mod fem;
pub mod field;
pub mod kelvinlet;
pub mod mesh;
pub mod metrics;
pub mod neural;
pub mod sampling;
pub mod service;

pub use error::{Error, Result};
pub use field::{DisplacementField, Vec3};
pub use kelvinlet::{Grasp, KelvinletParams, KelvinletSolution};
pub use mesh::{RegionSpec, TetMesh};
