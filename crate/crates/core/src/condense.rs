//! ECR Poisson by static condensation.
//!
//! In the hierarchical basis (CR facet functions plus the zero-facet-average
//! bubble) the ECR stiffness is block diagonal: the bubbles decouple from the
//! linear part and from each other. The ECR solution is the CR solution plus
//! one independent bubble per cell.

use rayon::prelude::*;

use crate::assembly::{all_local_matrices, assemble_poisson, DofMap, Family, ScalarLoad};
use crate::elements::{bubble_energy, bubble_eval, cr_eval, dot};
use crate::error::Result;
use crate::linsolve::{solve_spd, SolverConfig, SparseMatrix};
use crate::mesh::{CellGeometry, SimplexMesh};
use crate::problems::{solve_poisson, BrokenField};
use crate::quadrature::cached_rule;

/// Coefficient of the cell bubble for a cellwise-constant load `f`.
pub fn solve_bubble_local(geom: &CellGeometry, f: f64) -> f64 {
    // (f, phi_K) = f |K| because the bubble has unit average.
    f * geom.measure / bubble_energy(geom)
}

/// `(load, phi_K)` by quadrature.
fn bubble_load(mesh: &SimplexMesh, k: usize, load: &ScalarLoad) -> f64 {
    let g = mesh.geometry(k);
    if load.is_piecewise_constant() {
        return load.cell_average(mesh, k) * g.measure;
    }
    let rule = cached_rule(mesh.dim(), crate::assembly::LOAD_DEGREE);
    rule.integrate_cell(g, |x| load.value(k, x) * bubble_eval(g, x).0)
}

#[derive(Debug, Clone)]
pub struct CondensedSolution {
    /// Linear part.
    pub cr: BrokenField,
    /// Bubble coefficient per cell in the hierarchical basis.
    pub bubbles: Vec<f64>,
    /// Recombined field in the nodal ECR basis.
    pub ecr: BrokenField,
}

/// Solves ECR Poisson (homogeneous Dirichlet) through one CR solve and
/// independent per-cell bubble solves.
pub fn solve_ecr_condensed(mesh: &SimplexMesh, load: &ScalarLoad, config: &SolverConfig) -> Result<CondensedSolution> {
    let cr = solve_poisson(mesh, load, Family::Cr, config)?;
    let bubbles: Vec<f64> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| bubble_load(mesh, k, load) / bubble_energy(mesh.geometry(k)))
        .collect();

    // Nodal facet functions are phi_j^CR - phi_K/(n+1), so facet coefficients carry
    // over and the nodal bubble coefficient is the mean facet value plus the bubble.
    let n = mesh.dim();
    let dofs = DofMap::new(mesh, Family::Ecr, 1);
    let mut c = vec![0.0; dofs.n_global()];
    c[..mesh.n_facets()].copy_from_slice(&cr.coefficients);
    for (k, b) in bubbles.iter().enumerate() {
        let mean = mesh.cell_facets(k).iter().map(|&f| cr.coefficients[f]).sum::<f64>() / (n + 1) as f64;
        c[dofs.bubble(k).unwrap()] = mean + b;
    }
    Ok(CondensedSolution {
        ecr: BrokenField::new(dofs, c),
        cr,
        bubbles,
    })
}

/// Monolithic ECR solve, for comparison with [`solve_ecr_condensed`].
pub fn solve_ecr_monolithic(mesh: &SimplexMesh, load: &ScalarLoad, config: &SolverConfig) -> Result<BrokenField> {
    let sys = assemble_poisson(mesh, Family::Ecr, load)?;
    let x = solve_spd(&sys.matrix, &sys.rhs, config)?;
    Ok(BrokenField::from_free(sys.dofs, &x))
}

/// Global ECR stiffness in the hierarchical basis, facets first, then cell bubbles.
pub fn hierarchical_stiffness(mesh: &SimplexMesh) -> SparseMatrix {
    let n = mesh.dim();
    let nf = mesh.n_facets();
    let locals = all_local_matrices(mesh);
    let rule = cached_rule(n, 2);
    let per_cell: Vec<Vec<(usize, usize, f64)>> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| {
            let g = mesh.geometry(k);
            let facets = mesh.cell_facets(k);
            let mut coupling = vec![0.0; n + 1];
            for (x, w) in rule.on_cell(g) {
                let cr = cr_eval(g, &x);
                let (_, gb) = bubble_eval(g, &x);
                for (j, gj) in cr.grads().iter().enumerate() {
                    coupling[j] += w * dot(gj, &gb, n);
                }
            }
            let mut t = Vec::with_capacity((n + 2) * (n + 2));
            for a in 0..=n {
                for b in 0..=n {
                    t.push((facets[a], facets[b], locals[k].cr_stiffness[(a, b)]));
                }
                t.push((facets[a], nf + k, coupling[a]));
                t.push((nf + k, facets[a], coupling[a]));
            }
            t.push((nf + k, nf + k, bubble_energy(g)));
            t
        })
        .collect();
    let size = nf + mesh.n_cells();
    SparseMatrix::from_triplets(size, size, per_cell.into_iter().flatten().collect())
}

/// Largest bubble/linear and bubble/bubble coupling of [`hierarchical_stiffness`],
/// relative to its largest entry.
pub fn hierarchical_coupling(mesh: &SimplexMesh) -> f64 {
    let a = hierarchical_stiffness(mesh);
    let nf = mesh.n_facets();
    let mut worst = 0.0f64;
    for (i, j, v) in a.triplets() {
        if (i >= nf || j >= nf) && i != j {
            worst = worst.max(v.abs());
        }
    }
    worst / a.max_abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxVariant};

    #[test]
    fn reference_bubble() {
        let tri = SimplexMesh::new(2, vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![vec![0, 1, 2]]).unwrap();
        assert!((solve_bubble_local(tri.geometry(0), 1.0) - 1.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn bubbles_decouple() {
        for (dim, variant) in [(2, BoxVariant::CrissCross), (3, BoxVariant::Diagonal)] {
            let mesh = build_box_mesh(dim, 2, variant).unwrap();
            assert!(hierarchical_coupling(&mesh) < 1e-13);
        }
    }

    #[test]
    fn condensed_matches_monolithic() {
        let cfg = SolverConfig::default();
        let mesh = build_box_mesh(2, 4, BoxVariant::Diagonal).unwrap();
        for load in [ScalarLoad::Constant(1.0), ScalarLoad::function(|x| (3.0 * x[0]).sin() + x[1] * x[1])] {
            let c = solve_ecr_condensed(&mesh, &load, &cfg).unwrap();
            let m = solve_ecr_monolithic(&mesh, &load, &cfg).unwrap();
            let scale = m.coefficients.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in c.ecr.coefficients.iter().zip(&m.coefficients) {
                assert!((a - b).abs() <= 1e-10 * scale, "{a} {b}");
            }
            for k in 0..mesh.n_cells() {
                for &f in mesh.cell_facets(k) {
                    assert!((c.ecr.coefficients[f] - c.cr.coefficients[f]).abs() < 1e-15);
                }
            }
        }
    }
}
