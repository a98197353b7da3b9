//! Basis functions and local matrices for CR, ECR, RT0 and P0.
//!
//! All bases live in physical coordinates and are normalized by averages:
//! facet basis functions have unit average on their own facet and zero average
//! on the others, and the ECR bubble has unit cell average.
//!
//! * CR: `phi_j = 1 - n lambda_j`.
//! * ECR: `phi_K = (n+2)/2 - n(n+1)^2(n+2)/(2H) |x - mid(K)|^2` and
//!   `phi_j = 1 - n lambda_j - phi_K/(n+1)`; local ordering is the `n+1` facet
//!   functions followed by the bubble.
//! * RT0: `psi_i = s_i (x - a_i) / (n |K|)`, unit flux through facet `i`
//!   measured against the global facet normal (`s_i` is the cell's sign).

use nalgebra::DMatrix;

use crate::mesh::{CellGeometry, Point, MAX_DIM};
use crate::quadrature::QuadratureRule;

/// Maximum number of local scalar basis functions (ECR in 3D).
pub const MAX_LOCAL: usize = MAX_DIM + 2;

/// Values and gradients of a local scalar basis at one point.
#[derive(Debug, Clone, Copy)]
pub struct ScalarBasisEval {
    pub len: usize,
    pub values: [f64; MAX_LOCAL],
    pub grads: [Point; MAX_LOCAL],
}

impl ScalarBasisEval {
    pub fn values(&self) -> &[f64] {
        &self.values[..self.len]
    }

    pub fn grads(&self) -> &[Point] {
        &self.grads[..self.len]
    }
}

/// Values and divergences of the local RT0 basis at one point.
#[derive(Debug, Clone, Copy)]
pub struct VectorBasisEval {
    pub len: usize,
    pub values: [Point; MAX_DIM + 1],
    pub divs: [f64; MAX_DIM + 1],
}

impl VectorBasisEval {
    pub fn values(&self) -> &[Point] {
        &self.values[..self.len]
    }

    pub fn divs(&self) -> &[f64] {
        &self.divs[..self.len]
    }
}

/// `n(n+1)^2(n+2)/H`: the bubble gradient is `-factor * (x - mid(K))`.
pub fn bubble_gradient_factor(geom: &CellGeometry) -> f64 {
    let n = geom.dim as f64;
    n * (n + 1.0).powi(2) * (n + 2.0) / geom.edge_sum
}

/// `||grad phi_K||^2_{L2(K)} = n^2 (n+1)^2 (n+2) |K| / H`.
pub fn bubble_energy(geom: &CellGeometry) -> f64 {
    let n = geom.dim as f64;
    n * n * (n + 1.0).powi(2) * (n + 2.0) * geom.measure / geom.edge_sum
}

/// `int_K |x - mid(K)|^2 dx = |K| H / ((n+1)^2 (n+2))`.
pub fn centroid_second_moment(geom: &CellGeometry) -> f64 {
    let n = geom.dim as f64;
    geom.measure * geom.edge_sum / ((n + 1.0).powi(2) * (n + 2.0))
}

pub fn bubble_eval(geom: &CellGeometry, x: &[f64]) -> (f64, Point) {
    let n = geom.dim;
    let c = bubble_gradient_factor(geom);
    let mut r2 = 0.0;
    let mut grad = [0.0; MAX_DIM];
    for d in 0..n {
        let dx = x[d] - geom.centroid[d];
        r2 += dx * dx;
        grad[d] = -c * dx;
    }
    ((n as f64 + 2.0) / 2.0 - 0.5 * c * r2, grad)
}

pub fn cr_eval(geom: &CellGeometry, x: &[f64]) -> ScalarBasisEval {
    let n = geom.dim;
    let nf = n as f64;
    let lam = geom.barycentric(x);
    let mut out = ScalarBasisEval {
        len: n + 1,
        values: [0.0; MAX_LOCAL],
        grads: [[0.0; MAX_DIM]; MAX_LOCAL],
    };
    for j in 0..=n {
        out.values[j] = 1.0 - nf * lam[j];
        for d in 0..n {
            out.grads[j][d] = -nf * geom.bary_grads[j][d];
        }
    }
    out
}

pub fn ecr_eval(geom: &CellGeometry, x: &[f64]) -> ScalarBasisEval {
    let n = geom.dim;
    let mut out = cr_eval(geom, x);
    let (bv, bg) = bubble_eval(geom, x);
    let share = 1.0 / (n as f64 + 1.0);
    for j in 0..=n {
        out.values[j] -= share * bv;
        for d in 0..n {
            out.grads[j][d] -= share * bg[d];
        }
    }
    out.len = n + 2;
    out.values[n + 1] = bv;
    out.grads[n + 1] = bg;
    out
}

/// RT0 basis on a cell; `signs[i]` orients facet `i` (opposite vertex `i`).
pub fn rt0_eval(geom: &CellGeometry, signs: &[f64], x: &[f64]) -> VectorBasisEval {
    let n = geom.dim;
    let scale = 1.0 / (n as f64 * geom.measure);
    let mut out = VectorBasisEval {
        len: n + 1,
        values: [[0.0; MAX_DIM]; MAX_DIM + 1],
        divs: [0.0; MAX_DIM + 1],
    };
    for i in 0..=n {
        for d in 0..n {
            out.values[i][d] = signs[i] * scale * (x[d] - geom.vertices[i][d]);
        }
        out.divs[i] = signs[i] / geom.measure;
    }
    out
}

/// Cell averages of the local ECR basis: zero for facet functions, one for the bubble.
pub fn ecr_cell_averages(dim: usize) -> Vec<f64> {
    let mut a = vec![0.0; dim + 2];
    a[dim + 1] = 1.0;
    a
}

/// Cell averages of the local CR basis: `1/(n+1)` each.
pub fn cr_cell_averages(dim: usize) -> Vec<f64> {
    vec![1.0 / (dim + 1) as f64; dim + 1]
}

/// Element matrices on one cell.
#[derive(Debug, Clone)]
pub struct LocalMatrices {
    pub ecr_stiffness: DMatrix<f64>,
    pub ecr_mass: DMatrix<f64>,
    pub cr_stiffness: DMatrix<f64>,
    pub cr_mass: DMatrix<f64>,
    /// `(psi_a, psi_b)_K`.
    pub rt_mass: DMatrix<f64>,
    /// `int_K psi_a[i] psi_b[j]`, stored at `[a * (n+1) + b][i][j]`.
    pub rt_products: Vec<[[f64; MAX_DIM]; MAX_DIM]>,
    /// `int_K div psi_a = s_a`.
    pub rt_div: Vec<f64>,
    /// `int_K psi_a`.
    pub rt_integrals: Vec<Point>,
    /// `int_K d phi_j / d x_d` for the ECR basis, stored at `[j][d]`.
    pub ecr_gradient_integrals: Vec<Point>,
    pub cr_gradient_integrals: Vec<Point>,
    pub p0_mass: f64,
}

/// Local matrices by quadrature; `rule` must be exact to degree 4 (ECR mass).
pub fn local_matrices(geom: &CellGeometry, signs: &[f64], rule: &QuadratureRule) -> LocalMatrices {
    assert!(rule.exact_degree >= 4, "local matrices need a degree-4 rule");
    let n = geom.dim;
    let ne = n + 2;
    let nc = n + 1;
    let mut ecr_k = DMatrix::zeros(ne, ne);
    let mut ecr_m = DMatrix::zeros(ne, ne);
    let mut cr_k = DMatrix::zeros(nc, nc);
    let mut cr_m = DMatrix::zeros(nc, nc);
    let mut rt_products = vec![[[0.0; MAX_DIM]; MAX_DIM]; nc * nc];
    let mut ecr_gi = vec![[0.0; MAX_DIM]; ne];
    let mut cr_gi = vec![[0.0; MAX_DIM]; nc];
    let mut rt_integrals = vec![[0.0; MAX_DIM]; nc];

    for (x, w) in rule.on_cell(geom) {
        let e = ecr_eval(geom, &x);
        let c = cr_eval(geom, &x);
        let r = rt0_eval(geom, signs, &x);
        for a in 0..ne {
            for d in 0..n {
                ecr_gi[a][d] += w * e.grads[a][d];
            }
            for b in a..ne {
                ecr_k[(a, b)] += w * dot(&e.grads[a], &e.grads[b], n);
                ecr_m[(a, b)] += w * e.values[a] * e.values[b];
            }
        }
        for a in 0..nc {
            for d in 0..n {
                cr_gi[a][d] += w * c.grads[a][d];
                rt_integrals[a][d] += w * r.values[a][d];
            }
            for b in a..nc {
                cr_k[(a, b)] += w * dot(&c.grads[a], &c.grads[b], n);
                cr_m[(a, b)] += w * c.values[a] * c.values[b];
            }
            for b in 0..nc {
                let p = &mut rt_products[a * nc + b];
                for i in 0..n {
                    for j in 0..n {
                        p[i][j] += w * r.values[a][i] * r.values[b][j];
                    }
                }
            }
        }
    }
    symmetrize_upper(&mut ecr_k);
    symmetrize_upper(&mut ecr_m);
    symmetrize_upper(&mut cr_k);
    symmetrize_upper(&mut cr_m);
    // Make the RT products exactly transpose-consistent: P[b][a] = P[a][b]^T.
    for a in 0..nc {
        for b in a..nc {
            let p = rt_products[a * nc + b];
            let mut t = [[0.0; MAX_DIM]; MAX_DIM];
            for i in 0..n {
                for j in 0..n {
                    t[j][i] = p[i][j];
                }
            }
            rt_products[b * nc + a] = t;
        }
    }
    let rt_mass = DMatrix::from_fn(nc, nc, |a, b| (0..n).map(|i| rt_products[a * nc + b][i][i]).sum());

    LocalMatrices {
        ecr_stiffness: ecr_k,
        ecr_mass: ecr_m,
        cr_stiffness: cr_k,
        cr_mass: cr_m,
        rt_mass,
        rt_products,
        rt_div: signs[..nc].to_vec(),
        rt_integrals,
        ecr_gradient_integrals: ecr_gi,
        cr_gradient_integrals: cr_gi,
        p0_mass: geom.measure,
    }
}

fn symmetrize_upper(m: &mut DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64], n: usize) -> f64 {
    (0..n).map(|d| a[d] * b[d]).sum()
}
