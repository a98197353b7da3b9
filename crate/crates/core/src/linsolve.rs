//! Sparse storage, direct solvers and generalized symmetric eigensolvers.
//!
//! Factorizations come from `faer` (sparse Cholesky for SPD blocks, sparse LU
//! for the indefinite saddle systems), followed by a few steps of iterative
//! refinement and an explicit residual check.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SolverError;

/// Compressed sparse row matrix with sorted, duplicate-free columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed in their input
    /// order, so the result is bitwise reproducible for a fixed triplet sequence.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        // Stable sort keeps duplicates in input order.
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self::from_triplets(d.len(), d.len(), d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect())
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[j] += v * y[i];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.triplets().map(|(i, j, v)| (j, i, v)).collect())
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t: Vec<_> = self.triplets().collect();
        t.extend(other.triplets().map(|(i, j, v)| (i, j, s * v)));
        Self::from_triplets(self.nrows, self.ncols, t)
    }

    /// Keeps the listed rows and columns, renumbered in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut t = Vec::new();
        for (new_i, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                if col_map[j] != usize::MAX {
                    t.push((new_i, col_map[j], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), t)
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows())
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm of `A - A^T`.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        self.triplets().map(|(i, j, v)| (v - self.get(j, i)).abs()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, SolverError> {
        let t: Vec<_> = self.triplets().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| SolverError::Factorization(format!("{e:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Relative residual target for linear solves and eigenpair residuals.
    pub tolerance: f64,
    /// Iteration cap for refinement steps and subspace iteration.
    pub max_iterations: usize,
    /// Eigenvalues are sought near this shift (0 = smallest).
    pub shift: f64,
    /// Default number of eigenpairs for drivers that do not pass `k` explicitly.
    pub eigenpairs: usize,
    /// Problems up to this size use dense eigensolvers.
    pub dense_threshold: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 1000,
            shift: 0.0,
            eigenpairs: 1,
            dense_threshold: 2000,
            seed: 0x5eed,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(SolverError::Dimension(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Symmetric indefinite block system
///
/// ```text
/// [ A   B^T  P^T  0  ] [x]   [f]
/// [ B   0    0    Q^T] [y] = [g]
/// [ P   0    0    0  ] [m] = [p]
/// [ 0   Q    0    0  ] [n]   [q]
/// ```
///
/// where each row of `P` (`Q`) is a scalar constraint on the primal (dual) unknowns.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub a: SparseMatrix,
    pub b: SparseMatrix,
    pub rhs_primal: Vec<f64>,
    pub rhs_dual: Vec<f64>,
    pub primal_constraints: Vec<Constraint>,
    pub dual_constraints: Vec<Constraint>,
}

/// Scalar linear constraint `sum_i c_i x_i = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coefficients: Vec<(usize, f64)>,
    pub value: f64,
}

impl Constraint {
    pub fn new(coefficients: Vec<(usize, f64)>) -> Self {
        Self { coefficients, value: 0.0 }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().map(|&(i, c)| c * x[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    /// Multipliers of the primal constraints followed by those of the dual constraints.
    pub multipliers: Vec<f64>,
    pub relative_residual: f64,
}

impl SaddleSystem {
    pub fn n_primal(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_dual(&self) -> usize {
        self.b.nrows()
    }

    pub fn size(&self) -> usize {
        self.n_primal() + self.n_dual() + self.primal_constraints.len() + self.dual_constraints.len()
    }

    pub fn check_dimensions(&self) -> Result<(), SolverError> {
        let (m, p) = (self.n_primal(), self.n_dual());
        let bad = |s: String| Err(SolverError::Dimension(s));
        if self.a.ncols() != m {
            return bad(format!("A is {}x{}", m, self.a.ncols()));
        }
        if self.b.ncols() != m {
            return bad(format!("B has {} columns, expected {m}", self.b.ncols()));
        }
        if self.rhs_primal.len() != m || self.rhs_dual.len() != p {
            return bad("right-hand side length mismatch".into());
        }
        for c in &self.primal_constraints {
            if c.coefficients.iter().any(|&(i, _)| i >= m) {
                return bad("primal constraint index out of range".into());
            }
        }
        for c in &self.dual_constraints {
            if c.coefficients.iter().any(|&(i, _)| i >= p) {
                return bad("dual constraint index out of range".into());
            }
        }
        Ok(())
    }

    /// The full symmetric matrix in the unknown order `[x, y, m, n]`.
    pub fn full_matrix(&self) -> SparseMatrix {
        let (m, p) = (self.n_primal(), self.n_dual());
        let np = self.primal_constraints.len();
        let mut t: Vec<(usize, usize, f64)> = self.a.triplets().collect();
        for (i, j, v) in self.b.triplets() {
            t.push((m + i, j, v));
            t.push((j, m + i, v));
        }
        for (r, c) in self.primal_constraints.iter().enumerate() {
            for &(i, v) in &c.coefficients {
                t.push((m + p + r, i, v));
                t.push((i, m + p + r, v));
            }
        }
        for (r, c) in self.dual_constraints.iter().enumerate() {
            for &(i, v) in &c.coefficients {
                t.push((m + p + np + r, m + i, v));
                t.push((m + i, m + p + np + r, v));
            }
        }
        let n = self.size();
        SparseMatrix::from_triplets(n, n, t)
    }

    pub fn full_rhs(&self) -> Vec<f64> {
        let mut r = self.rhs_primal.clone();
        r.extend_from_slice(&self.rhs_dual);
        r.extend(self.primal_constraints.iter().map(|c| c.value));
        r.extend(self.dual_constraints.iter().map(|c| c.value));
        r
    }

    fn split(&self, z: Vec<f64>, relative_residual: f64) -> SaddleSolution {
        let (m, p) = (self.n_primal(), self.n_dual());
        SaddleSolution {
            primal: z[..m].to_vec(),
            dual: z[m..m + p].to_vec(),
            multipliers: z[m + p..].to_vec(),
            relative_residual,
        }
    }
}

/// Sparse Cholesky factor of an SPD matrix.
pub struct SpdFactor {
    matrix: SparseMatrix,
    llt: Llt<usize, f64>,
}

impl SpdFactor {
    pub fn new(a: &SparseMatrix) -> Result<Self, SolverError> {
        if a.nrows() != a.ncols() {
            return Err(SolverError::Dimension(format!("matrix is {}x{}", a.nrows(), a.ncols())));
        }
        let llt = a.to_faer()?.sp_cholesky(Side::Lower).map_err(|_| SolverError::NotPositiveDefinite)?;
        Ok(Self {
            matrix: a.clone(),
            llt,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// One application of the factor, no refinement.
    pub fn apply_inverse(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve(&self, b: &[f64], config: &SolverConfig) -> Result<Vec<f64>, SolverError> {
        refine(&self.matrix, b, config, |r| self.apply_inverse(r))
    }
}

/// Sparse LU factor of a saddle system.
pub struct SaddleFactor {
    system: SaddleSystem,
    matrix: SparseMatrix,
    lu: Lu<usize, f64>,
}

impl SaddleFactor {
    pub fn new(system: &SaddleSystem) -> Result<Self, SolverError> {
        system.check_dimensions()?;
        let matrix = system.full_matrix();
        let lu = matrix
            .to_faer()?
            .sp_lu()
            .map_err(|e| SolverError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            system: system.clone(),
            matrix,
            lu,
        })
    }

    pub fn system(&self) -> &SaddleSystem {
        &self.system
    }

    pub fn apply_inverse(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// Direct solve plus one refinement step, without a residual check.
    pub fn apply_refined(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.apply_inverse(b);
        let ax = self.matrix.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let dx = self.apply_inverse(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
        x
    }

    /// Solves the full system for a stacked right-hand side `[f, g, p, q]`.
    pub fn solve_full(&self, rhs: &[f64], config: &SolverConfig) -> Result<Vec<f64>, SolverError> {
        refine(&self.matrix, rhs, config, |r| self.apply_inverse(r))
    }

    /// Solves with new block right-hand sides; constraint values are kept.
    pub fn solve_blocks(
        &self,
        rhs_primal: &[f64],
        rhs_dual: &[f64],
        config: &SolverConfig,
    ) -> Result<SaddleSolution, SolverError> {
        let mut rhs = rhs_primal.to_vec();
        rhs.extend_from_slice(rhs_dual);
        rhs.extend(self.system.primal_constraints.iter().map(|c| c.value));
        rhs.extend(self.system.dual_constraints.iter().map(|c| c.value));
        let z = self.solve_full(&rhs, config)?;
        let res = relative_residual(&self.matrix, &z, &rhs);
        Ok(self.system.split(z, res))
    }
}

/// Normwise backward error `|b - A x|_inf / (|A|_inf |x|_inf + |b|_inf)`.
fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r = ax.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    let scale = a.norm_inf() * max_abs(x) + max_abs(b);
    if scale == 0.0 {
        r
    } else {
        r / scale
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

// Direct solve followed by iterative refinement until the residual target is met.
fn refine(
    a: &SparseMatrix,
    b: &[f64],
    config: &SolverConfig,
    inverse: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>, SolverError> {
    config.validate()?;
    if norm(b) == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let a_norm = a.norm_inf();
    let mut x = inverse(b);
    let steps = config.max_iterations.clamp(1, 10);
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NotPositiveDefinite);
        }
        let ax = a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let res = max_abs(&r) / (a_norm * max_abs(&x) + max_abs(b));
        if res <= config.tolerance {
            return Ok(x);
        }
        if res >= 0.5 * best {
            // Refinement stalled.
            return Err(SolverError::NotConverged {
                iterations: steps,
                residual: res.min(best),
            });
        }
        best = res;
        let dx = inverse(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    }
    let res = relative_residual(a, &x, b);
    if res <= config.tolerance {
        Ok(x)
    } else {
        Err(SolverError::NotConverged {
            iterations: steps,
            residual: res,
        })
    }
}

/// Solves `A x = b` for SPD `A` with `||Ax - b|| <= tol ||b||`.
pub fn solve_spd(a: &SparseMatrix, b: &[f64], config: &SolverConfig) -> Result<Vec<f64>, SolverError> {
    if b.len() != a.nrows() {
        return Err(SolverError::Dimension(format!("rhs length {} vs {}", b.len(), a.nrows())));
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    SpdFactor::new(a)?.solve(b, config)
}

pub fn solve_saddle(system: &SaddleSystem, config: &SolverConfig) -> Result<SaddleSolution, SolverError> {
    system.check_dimensions()?;
    let rhs = system.full_rhs();
    if norm(&rhs) == 0.0 {
        return Ok(system.split(vec![0.0; rhs.len()], 0.0));
    }
    let factor = SaddleFactor::new(system)?;
    factor.solve_blocks(&system.rhs_primal, &system.rhs_dual, config)
}

/// Eigenpairs of `A x = lambda M x`, ascending, with `x_i^T M x_j = delta_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// The `k` smallest finite eigenpairs of `A x = lambda M x` (`A` SPD, `M` PSD).
///
/// Works on `A^{-1} M`, whose largest eigenvalues `1/lambda` are the wanted ones;
/// directions in the kernel of `M` map to zero and never appear.
pub fn eig_smallest(
    a: &SparseMatrix,
    m: &SparseMatrix,
    k: usize,
    config: &SolverConfig,
) -> Result<EigenPairs, SolverError> {
    config.validate()?;
    let n = a.nrows();
    if a.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(SolverError::Dimension("A and M must be square of equal size".into()));
    }
    if k == 0 {
        return Ok(EigenPairs {
            values: vec![],
            vectors: vec![],
        });
    }
    let shifted = if config.shift != 0.0 {
        a.add_scaled(m, -config.shift)
    } else {
        a.clone()
    };
    let mut pairs = if n <= config.dense_threshold {
        dense_generalized(&shifted.to_dense(), &m.to_dense(), k)?
    } else {
        let factor = SpdFactor::new(&shifted)?;
        eig_smallest_operator(n, k, |x| factor.apply_inverse(&m.mul_vec(x)), |x| m.mul_vec(x), config)?
    };
    pairs.values.iter_mut().for_each(|l| *l += config.shift);
    Ok(pairs)
}

fn dense_generalized(a: &DMatrix<f64>, m: &DMatrix<f64>, k: usize) -> Result<EigenPairs, SolverError> {
    // M x = mu A x, normalized in A; rescale to unit M-norm.
    let mut pairs = dense_generalized_pencil(a, m, k)?;
    for x in &mut pairs.vectors {
        let v = to_dvector(x);
        let s = v.dot(&(m * &v)).sqrt();
        x.iter_mut().for_each(|c| *c /= s);
    }
    Ok(pairs)
}

/// Largest eigenpairs of an operator `T` that is self-adjoint and positive
/// semidefinite in the `M` inner product, reported as `lambda = 1/mu`.
///
/// `apply` evaluates `T x` (typically `A^{-1} M x`), `apply_m` evaluates `M x`.
/// Small problems assemble `T` densely; larger ones use block subspace iteration
/// with Rayleigh-Ritz projection.
pub fn eig_smallest_operator(
    n: usize,
    k: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_m: impl Fn(&[f64]) -> Vec<f64>,
    config: &SolverConfig,
) -> Result<EigenPairs, SolverError> {
    config.validate()?;
    if k == 0 {
        return Ok(EigenPairs {
            values: vec![],
            vectors: vec![],
        });
    }
    if k > n {
        return Err(SolverError::TooManyEigenpairs {
            requested: k,
            available: n,
        });
    }
    if n <= config.dense_threshold {
        return dense_operator(n, k, &apply, &apply_m);
    }
    subspace_iteration(n, k, &apply, &apply_m, config)
}

// Projects onto the whole space: with E = I, Ritz matrix M T and Gram matrix M.
fn dense_operator(
    n: usize,
    k: usize,
    apply: &impl Fn(&[f64]) -> Vec<f64>,
    apply_m: &impl Fn(&[f64]) -> Vec<f64>,
) -> Result<EigenPairs, SolverError> {
    let mut t = DMatrix::zeros(n, n);
    let mut mm = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let tj = apply(&e);
        let mj = apply_m(&e);
        for i in 0..n {
            t[(i, j)] = tj[i];
            mm[(i, j)] = mj[i];
        }
        e[j] = 0.0;
    }
    // M T is symmetric; solve (M T) x = mu M x through the SPD part of M.
    let mt = &mm * &t;
    let mt = (&mt + mt.transpose()) * 0.5;
    let pairs = dense_generalized_pencil(&mm, &mt, k)?;
    Ok(pairs)
}

// Largest eigenpairs of `H x = mu M x` for SPD `M`, returned as `lambda = 1/mu`.
fn dense_generalized_pencil(m: &DMatrix<f64>, h: &DMatrix<f64>, k: usize) -> Result<EigenPairs, SolverError> {
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or(SolverError::NotPositiveDefinite)?;
    let l = chol.l();
    let tri = |x: &DMatrix<f64>| {
        l.solve_lower_triangular(x)
            .ok_or_else(|| SolverError::Factorization("triangular solve".into()))
    };
    let c = tri(&tri(h)?.transpose())?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mu_max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let finite: Vec<usize> = order
        .into_iter()
        .filter(|&i| mu_max > 0.0 && eig.eigenvalues[i] > 1e-11 * mu_max)
        .collect();
    if finite.len() < k {
        return Err(SolverError::TooManyEigenpairs {
            requested: k,
            available: finite.len(),
        });
    }
    let lt = l.transpose();
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    for &i in &finite[..k] {
        let w = eig.eigenvectors.column(i).into_owned();
        let x = lt
            .solve_upper_triangular(&w)
            .ok_or_else(|| SolverError::Factorization("triangular solve".into()))?;
        let s = x.dot(&(m * &x)).sqrt();
        values.push(1.0 / eig.eigenvalues[i]);
        vectors.push((x / s).iter().copied().collect());
    }
    Ok(EigenPairs { values, vectors })
}

fn subspace_iteration(
    n: usize,
    k: usize,
    apply: &impl Fn(&[f64]) -> Vec<f64>,
    apply_m: &impl Fn(&[f64]) -> Vec<f64>,
    config: &SolverConfig,
) -> Result<EigenPairs, SolverError> {
    let p = (2 * k).max(k + 8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut block: Vec<Vec<f64>> = (0..p)
        .map(|_| apply(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
        .collect();
    let tol = config.tolerance.max(1e-11);
    let mut last_residual = f64::INFINITY;
    for _ in 0..config.max_iterations {
        let q = m_orthonormalize(block, apply_m);
        if q.len() < k {
            return Err(SolverError::TooManyEigenpairs {
                requested: k,
                available: q.len(),
            });
        }
        let w: Vec<Vec<f64>> = q.iter().map(|x| apply(x)).collect();
        let mw: Vec<Vec<f64>> = w.iter().map(|x| apply_m(x)).collect();
        let r = q.len();
        // Ritz matrix Q^T M T Q.
        let h = DMatrix::from_fn(r, r, |i, j| 0.5 * (dot(&q[i], &mw[j]) + dot(&q[j], &mw[i])));
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let combine = |basis: &[Vec<f64>], col: usize| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (b, vec) in basis.iter().enumerate() {
                let c = eig.eigenvectors[(b, col)];
                out.iter_mut().zip(vec).for_each(|(o, v)| *o += c * v);
            }
            out
        };
        let ritz: Vec<Vec<f64>> = order.iter().map(|&c| combine(&q, c)).collect();
        let images: Vec<Vec<f64>> = order.iter().map(|&c| combine(&w, c)).collect();
        let mus: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c]).collect();
        if mus[k - 1] <= 0.0 {
            return Err(SolverError::TooManyEigenpairs {
                requested: k,
                available: mus.iter().filter(|&&m| m > 0.0).count(),
            });
        }
        let mut worst = 0.0f64;
        for i in 0..k {
            let res: Vec<f64> = images[i].iter().zip(&ritz[i]).map(|(a, b)| a - mus[i] * b).collect();
            let mres = dot(&res, &apply_m(&res)).max(0.0).sqrt();
            worst = worst.max(mres / mus[i]);
        }
        last_residual = worst;
        if worst <= tol {
            return Ok(EigenPairs {
                values: mus[..k].iter().map(|m| 1.0 / m).collect(),
                vectors: ritz.into_iter().take(k).collect(),
            });
        }
        block = images;
    }
    Err(SolverError::NotConverged {
        iterations: config.max_iterations,
        residual: last_residual,
    })
}

// Twice-repeated modified Gram-Schmidt in the M inner product; drops dependent columns.
fn m_orthonormalize(block: Vec<Vec<f64>>, apply_m: &impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(block.len());
    let mut mq: Vec<Vec<f64>> = Vec::with_capacity(block.len());
    for mut v in block {
        let original = dot(&v, &apply_m(&v)).max(0.0).sqrt();
        if original == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for (qi, mqi) in q.iter().zip(&mq) {
                let c = dot(mqi, &v);
                v.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
            }
        }
        let mv = apply_m(&v);
        let nv = dot(&v, &mv).max(0.0).sqrt();
        if nv <= 1e-10 * original {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= nv);
        q.push(v);
        mq.push(mv.into_iter().map(|a| a / nv).collect());
    }
    q
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `A x - lambda M x` relative to `||A x||`.
pub fn eigen_residual(a: &SparseMatrix, m: &SparseMatrix, lambda: f64, x: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let mx = m.mul_vec(x);
    let r: Vec<f64> = ax.iter().zip(&mx).map(|(p, q)| p - lambda * q).collect();
    norm(&r) / norm(&ax)
}

pub(crate) fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}
