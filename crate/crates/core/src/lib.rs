//! Dense shape correspondence between deformable triangle meshes.
//!
//! A per-point descriptor network is trained without ground truth by
//! penalizing structural defects (non-bijectivity, non-orthogonality,
//! non-commutativity with the Laplacian and with descriptor multiplication
//! operators) of the functional maps its descriptors induce. The crate also
//! carries the axiomatic regularized baseline, spectral ICP refinement and a
//! geodesic-error evaluation harness.

pub mod descriptors;
pub mod eigen;
pub mod error;
pub mod eval;
pub mod fmap;
pub mod io;
pub mod kdtree;
pub mod mesh;
pub mod network;
pub mod penalties;
pub mod pipeline;
pub mod pointmap;
pub mod spectral;
pub mod synthetic;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use mesh::{load_mesh, EdgeGraph, MeshFormat, TriangleMesh};
pub use spectral::{compute_basis, cotan_laplacian, LaplaceBasis};
