//! Simplicial finite elements for Poisson, Stokes and Laplace eigenvalue problems:
//! Crouzeix-Raviart (CR), enriched Crouzeix-Raviart (ECR), lowest-order
//! Raviart-Thomas (RT0) and piecewise constants (P0), plus numerical checks of
//! the exact identities linking ECR and RT0 discrete solutions.

pub mod analysis;
pub mod assembly;
pub mod condense;
pub mod elements;
pub mod equivalence;
pub mod error;
pub mod linsolve;
pub mod mesh;
pub mod problems;
pub mod quadrature;

pub use error::{Error, MeshError, QuadratureError, Result, SolverError};
