use thiserror::Error;

/// Failures while building, reading or querying a mesh.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("subdivision count must be positive")]
    ZeroSubdivisions,
    #[error("criss-cross splitting is only defined for squares")]
    UnsupportedVariant,
    #[error("malformed mesh header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cell {cell} references vertex {vertex}, but the mesh has {n_vertices} vertices")]
    VertexOutOfRange {
        cell: usize,
        vertex: usize,
        n_vertices: usize,
    },
    #[error("cell {cell} is degenerate (measure {measure:e})")]
    DegenerateCell { cell: usize, measure: f64 },
    #[error("facet {facet} is shared by more than two cells")]
    NonManifoldFacet { facet: usize },
    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mesh has no cells")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("no quadrature rules for dimension {0}")]
    UnsupportedDimension(usize),
    #[error("degree {degree} exceeds the supported maximum {max}")]
    UnsupportedDegree { degree: usize, max: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("requested {requested} eigenpairs but only {available} finite eigenvalues exist")]
    TooManyEigenpairs { requested: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Crate-level error.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("incompatible Neumann data: load and boundary flux sum to {residual:e}")]
    IncompatibleData { residual: f64 },
    #[error("normal jump {jump:e} across facet {facet} exceeds tolerance {tolerance:e}")]
    JumpViolation {
        facet: usize,
        jump: f64,
        tolerance: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
