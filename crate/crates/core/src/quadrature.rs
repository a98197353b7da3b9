//! Quadrature on the reference simplex.
//!
//! Degree 1 uses the centroid rule. Higher degrees use Stroud's conical
//! product rules: Gauss-Jacobi points in collapsed coordinates, which have
//! strictly positive weights and interior points for every degree.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::QuadratureError;
use crate::mesh::{CellGeometry, FacetGeometry, Point, MAX_DIM};

pub const MAX_DEGREE: usize = 21;

/// Points in barycentric coordinates with weights summing to the reference volume `1/n!`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dim: usize,
    pub points: Vec<[f64; MAX_DIM + 1]>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn reference_volume(&self) -> f64 {
        1.0 / factorial(self.dim)
    }

    /// `(x_q, w_q)` pairs mapped onto a cell; weights sum to the cell measure.
    pub fn on_cell<'a>(&'a self, geom: &'a CellGeometry) -> impl Iterator<Item = (Point, f64)> + 'a {
        debug_assert_eq!(self.dim, geom.dim);
        let scale = geom.measure / self.reference_volume();
        self.points
            .iter()
            .zip(&self.weights)
            .map(move |(p, &w)| (geom.point(&p[..=geom.dim]), w * scale))
    }

    /// `(x_q, w_q)` pairs mapped onto a facet; weights sum to the facet measure.
    pub fn on_facet<'a>(&'a self, geom: &'a FacetGeometry) -> impl Iterator<Item = (Point, f64)> + 'a {
        debug_assert_eq!(self.dim + 1, geom.dim);
        let scale = geom.measure / self.reference_volume();
        self.points
            .iter()
            .zip(&self.weights)
            .map(move |(p, &w)| (geom.point(&p[..geom.dim]), w * scale))
    }

    pub fn integrate_cell(&self, geom: &CellGeometry, f: impl Fn(&Point) -> f64) -> f64 {
        self.on_cell(geom).map(|(x, w)| w * f(&x)).sum()
    }

    pub fn integrate_facet(&self, geom: &FacetGeometry, f: impl Fn(&Point) -> f64) -> f64 {
        self.on_facet(geom).map(|(x, w)| w * f(&x)).sum()
    }
}

/// A rule on the reference `dim`-simplex exact for polynomials of total degree `degree`.
///
/// `dim` may be 1 (segment, used for 2D facets), 2 or 3.
pub fn rule_for_degree(dim: usize, degree: usize) -> Result<QuadratureRule, QuadratureError> {
    if !(1..=3).contains(&dim) {
        return Err(QuadratureError::UnsupportedDimension(dim));
    }
    if degree > MAX_DEGREE {
        return Err(QuadratureError::UnsupportedDegree {
            degree,
            max: MAX_DEGREE,
        });
    }
    if degree <= 1 {
        let mut p = [0.0; MAX_DIM + 1];
        for c in p.iter_mut().take(dim + 1) {
            *c = 1.0 / (dim + 1) as f64;
        }
        return Ok(QuadratureRule {
            dim,
            points: vec![p],
            weights: vec![1.0 / factorial(dim)],
            exact_degree: 1,
        });
    }
    let m = degree / 2 + 1;
    let (xs, ws) = conical_product(dim, m);
    let points = xs
        .into_iter()
        .map(|x| {
            let mut p = [0.0; MAX_DIM + 1];
            p[0] = 1.0 - x.iter().sum::<f64>();
            p[1..=dim].copy_from_slice(&x);
            p
        })
        .collect();
    Ok(QuadratureRule {
        dim,
        points,
        weights: ws,
        exact_degree: 2 * m - 1,
    })
}

/// Shared, lazily built rules; used by the assembly and error routines.
pub fn cached_rule(dim: usize, degree: usize) -> Arc<QuadratureRule> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<QuadratureRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap();
    guard
        .entry((dim, degree))
        .or_insert_with(|| Arc::new(rule_for_degree(dim, degree).expect("supported quadrature rule")))
        .clone()
}

// Collapsed coordinates: x_1 = t, (x_2..x_n) = (1 - t) y with y on the (n-1)-simplex,
// so the first direction carries the weight (1 - t)^(n-1).
fn conical_product(dim: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (ts, wts) = gauss_jacobi_unit(m, (dim - 1) as f64);
    if dim == 1 {
        return (ts.into_iter().map(|t| vec![t]).collect(), wts);
    }
    let (ys, wys) = conical_product(dim - 1, m);
    let mut xs = Vec::with_capacity(ts.len() * ys.len());
    let mut ws = Vec::with_capacity(ts.len() * ys.len());
    for (t, wt) in ts.iter().zip(&wts) {
        for (y, wy) in ys.iter().zip(&wys) {
            let mut x = Vec::with_capacity(dim);
            x.push(*t);
            x.extend(y.iter().map(|yi| (1.0 - t) * yi));
            xs.push(x);
            ws.push(wt * wy);
        }
    }
    (xs, ws)
}

/// Gauss-Jacobi rule for `int_0^1 (1 - t)^alpha g(t) dt` with `m` points (Golub-Welsch).
fn gauss_jacobi_unit(m: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let beta = 0.0;
    let ab = alpha + beta;
    let mut jac = DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        let kf = k as f64;
        let denom = (2.0 * kf + ab) * (2.0 * kf + ab + 2.0);
        jac[(k, k)] = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / denom
        };
        if k + 1 < m {
            let n = kf + 1.0;
            let s = 2.0 * n + ab;
            let num = 4.0 * n * (n + alpha) * (n + beta) * (n + ab);
            let off = (num / (s * s * (s + 1.0) * (s - 1.0))).sqrt();
            jac[(k, k + 1)] = off;
            jac[(k + 1, k)] = off;
        }
    }
    // mu_0 = int_{-1}^{1} (1-x)^alpha dx for integer alpha.
    let mu0 = 2f64.powf(ab + 1.0) / (alpha + 1.0);
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            let w = mu0 * v0 * v0 * 2f64.powf(-alpha - 1.0);
            ((1.0 + x) / 2.0, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    // int over the reference simplex of prod x_i^{a_i} = prod a_i! / (sum a_i + n)!
    fn monomial_integral(exps: &[usize]) -> f64 {
        let n = exps.len();
        let total: usize = exps.iter().sum();
        exps.iter().map(|&a| factorial(a)).product::<f64>() / factorial(total + n)
    }

    fn apply(rule: &QuadratureRule, exps: &[usize]) -> f64 {
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * exps.iter().enumerate().map(|(i, &a)| p[i + 1].powi(a as i32)).product::<f64>())
            .sum()
    }

    fn exponents(dim: usize, max_total: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|e: Vec<usize>| {
                    let used: usize = e.iter().sum();
                    (0..=max_total - used).map(move |a| {
                        let mut e = e.clone();
                        e.push(a);
                        e
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn centroid_rule() {
        let r = rule_for_degree(2, 1).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r.weights[0] - 0.5).abs() < 1e-16);
        assert!((r.points[0][1] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn closed_form_examples() {
        let r = rule_for_degree(2, 4).unwrap();
        assert!((apply(&r, &[2, 2]) - 1.0 / 180.0).abs() < 1e-14);
        let r = rule_for_degree(3, 2).unwrap();
        assert!((apply(&r, &[2, 0, 0]) - 1.0 / 60.0).abs() < 1e-14);
    }

    #[test]
    fn exactness_sweep() {
        for dim in 1..=3 {
            for degree in 1..=12 {
                let r = rule_for_degree(dim, degree).unwrap();
                assert!(r.exact_degree >= degree);
                assert!(r.weights.iter().all(|&w| w > 0.0));
                let total: f64 = r.weights.iter().sum();
                assert!((total - 1.0 / factorial(dim)).abs() < 1e-14);
                for e in exponents(dim, r.exact_degree) {
                    let exact = monomial_integral(&e);
                    let got = apply(&r, &e);
                    assert!(
                        (got - exact).abs() <= 1e-12 * exact,
                        "dim {dim} degree {degree} exps {e:?}: {got} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn points_are_inside() {
        for dim in 1..=3 {
            let r = rule_for_degree(dim, 8).unwrap();
            for p in &r.points {
                assert!(p[..=dim].iter().all(|&l| l > 0.0 && l < 1.0));
            }
        }
    }

    #[test]
    fn unsupported() {
        assert_eq!(rule_for_degree(4, 2).unwrap_err(), QuadratureError::UnsupportedDimension(4));
        assert!(matches!(rule_for_degree(2, 99), Err(QuadratureError::UnsupportedDegree { .. })));
    }

    #[test]
    fn cell_weights_sum_to_measure() {
        let g = CellGeometry::from_vertices(
            3,
            &[[0.1, 0.0, 0.2], [1.3, 0.1, 0.0], [0.2, 0.9, 0.1], [0.3, 0.2, 1.1]],
        );
        let r = rule_for_degree(3, 4).unwrap();
        let total: f64 = r.on_cell(&g).map(|(_, w)| w).sum();
        assert!((total - g.measure).abs() < 1e-14 * g.measure);
    }
}
