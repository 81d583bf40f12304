//! Equivariant flow matching for 3D point clouds and small molecules.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: point clouds, rotations, permutations, Zero-CoM projection.
//! - [`alignment`]: exact linear assignment, Kabsch, and the alternating
//!   rotation/permutation solver for the equivariant optimal transport plan.
//! - [`paths`]: OT, VP and EOT conditional probability paths and their
//!   target vector fields, composed per modality into a [`paths::HybridPath`].
//! - [`vectorfield`]: a small E(3)-equivariant graph network with
//!   hand-written reverse-mode gradients.
//! - [`training`]: the conditional flow matching loss and an Adam loop.
//! - [`sampling`]: ODE integrators (Euler, midpoint, RK4, Dormand–Prince)
//!   with NFE accounting, and feature discretization.
//! - [`metrics`]: bond inference, stability, uniqueness and the
//!   information-alignment estimators.
//! - [`data`]: XYZ I/O, feature encoding and a synthetic toy dataset.
//!
//! Coordinates are stored as rows (`[f64; 3]` per point). A rotation `R`
//! acts on a point `p` as the column-vector product `R·p`; see
//! [`geometry::Rotation::rotate`].

// Index loops mirror the math; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
mod linalg;
pub mod metrics;
pub mod paths;
pub mod rng;
pub mod sampling;
pub mod training;
pub mod vectorfield;

pub use error::{Error, Result};
pub use geometry::{Permutation, PointCloud, Rotation};
