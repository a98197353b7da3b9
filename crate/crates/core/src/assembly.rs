//! Global numbering, sparse assembly and constraints for every discrete problem.
//!
//! Scalar global numbering: CR and RT0 use facet indices, P0 uses cell
//! indices, ECR puts facets first and then one bubble per cell. Vector fields
//! stack components, so component `c` of scalar DOF `i` is `c * n_scalar + i`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elements::{cr_eval, ecr_eval, local_matrices, LocalMatrices};
use crate::error::{Error, MeshError, Result};
use crate::linsolve::{Constraint, SaddleSystem, SparseMatrix};
use crate::mesh::{Point, SimplexMesh};
use crate::quadrature::cached_rule;

/// Quadrature degree for loads that are not piecewise constant.
pub const LOAD_DEGREE: usize = 8;
/// Quadrature degree of the local matrices.
pub const MATRIX_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Cr,
    Ecr,
    Rt0,
    P0,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Cr => "cr",
            Family::Ecr => "ecr",
            Family::Rt0 => "rt0",
            Family::P0 => "p0",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Global numbering of a (possibly vector-valued) field plus its free/fixed split.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    family: Family,
    components: usize,
    n_scalar: usize,
    n_facets: usize,
    cell_dofs: Vec<Vec<usize>>,
    boundary: Vec<usize>,
    free: Vec<usize>,
    free_of: Vec<Option<usize>>,
}

impl DofMap {
    /// Numbering with every DOF free.
    pub fn new(mesh: &SimplexMesh, family: Family, components: usize) -> Self {
        let nf = mesh.n_facets();
        let nc = mesh.n_cells();
        let n_scalar = match family {
            Family::Cr | Family::Rt0 => nf,
            Family::Ecr => nf + nc,
            Family::P0 => nc,
        };
        let cell_dofs = (0..nc)
            .map(|k| match family {
                Family::Cr | Family::Rt0 => mesh.cell_facets(k).to_vec(),
                Family::Ecr => {
                    let mut d = mesh.cell_facets(k).to_vec();
                    d.push(nf + k);
                    d
                }
                Family::P0 => vec![k],
            })
            .collect();
        let boundary = match family {
            Family::P0 => vec![],
            _ => mesh.boundary_facets().collect(),
        };
        let total = components * n_scalar;
        Self {
            family,
            components,
            n_scalar,
            n_facets: nf,
            cell_dofs,
            boundary,
            free: (0..total).collect(),
            free_of: (0..total).map(Some).collect(),
        }
    }

    /// Numbering with boundary facet DOFs of every component removed.
    pub fn dirichlet(mesh: &SimplexMesh, family: Family, components: usize) -> Self {
        let mut map = Self::new(mesh, family, components);
        let mut fixed = vec![false; map.n_scalar];
        for &f in &map.boundary {
            fixed[f] = true;
        }
        let ns = map.n_scalar;
        map.set_free(|g| !fixed[g % ns]);
        map
    }

    fn set_free(&mut self, keep: impl Fn(usize) -> bool) {
        let total = self.n_global();
        self.free = (0..total).filter(|&g| keep(g)).collect();
        self.free_of = vec![None; total];
        for (r, &g) in self.free.iter().enumerate() {
            self.free_of[g] = Some(r);
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn n_scalar(&self) -> usize {
        self.n_scalar
    }

    pub fn n_global(&self) -> usize {
        self.components * self.n_scalar
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Scalar global indices of the local DOFs of cell `k`, in local order.
    pub fn cell_dofs(&self, k: usize) -> &[usize] {
        &self.cell_dofs[k]
    }

    pub fn global(&self, component: usize, scalar: usize) -> usize {
        component * self.n_scalar + scalar
    }

    /// Index of the ECR bubble of cell `k`.
    pub fn bubble(&self, k: usize) -> Option<usize> {
        (self.family == Family::Ecr).then_some(self.n_facets + k)
    }

    pub fn boundary_facets(&self) -> &[usize] {
        &self.boundary
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    pub fn free_index(&self, global: usize) -> Option<usize> {
        self.free_of[global]
    }

    /// Full coefficient vector from free values; fixed DOFs are zero.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        assert_eq!(free_values.len(), self.n_free());
        let mut out = vec![0.0; self.n_global()];
        for (&g, &v) in self.free.iter().zip(free_values) {
            out[g] = v;
        }
        out
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&g| full[g]).collect()
    }
}

/// A scalar load term.
#[derive(Clone)]
pub enum ScalarLoad {
    Constant(f64),
    /// One value per cell.
    Cellwise(Vec<f64>),
    Function(Arc<dyn Fn(&Point) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalarLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarLoad::Constant(c) => write!(f, "Constant({c})"),
            ScalarLoad::Cellwise(v) => write!(f, "Cellwise({} cells)", v.len()),
            ScalarLoad::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl ScalarLoad {
    pub fn function(f: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        ScalarLoad::Function(Arc::new(f))
    }

    pub fn zero() -> Self {
        ScalarLoad::Constant(0.0)
    }

    pub fn is_piecewise_constant(&self) -> bool {
        !matches!(self, ScalarLoad::Function(_))
    }

    pub fn check(&self, mesh: &SimplexMesh) -> Result<()> {
        if let ScalarLoad::Cellwise(v) = self {
            if v.len() != mesh.n_cells() {
                return Err(Error::InvalidInput(format!(
                    "cellwise load has {} values for {} cells",
                    v.len(),
                    mesh.n_cells()
                )));
            }
        }
        Ok(())
    }

    /// Cell average; exact for piecewise constants, degree-8 quadrature otherwise.
    pub fn cell_average(&self, mesh: &SimplexMesh, k: usize) -> f64 {
        match self {
            ScalarLoad::Constant(c) => *c,
            ScalarLoad::Cellwise(v) => v[k],
            ScalarLoad::Function(f) => {
                let g = mesh.geometry(k);
                cached_rule(mesh.dim(), LOAD_DEGREE).integrate_cell(g, |x| f(x)) / g.measure
            }
        }
    }

    pub fn cell_averages(&self, mesh: &SimplexMesh) -> Vec<f64> {
        (0..mesh.n_cells()).map(|k| self.cell_average(mesh, k)).collect()
    }

    /// The piecewise-constant projection of this load.
    pub fn projected(&self, mesh: &SimplexMesh) -> ScalarLoad {
        match self {
            ScalarLoad::Function(_) => ScalarLoad::Cellwise(self.cell_averages(mesh)),
            other => other.clone(),
        }
    }

    pub fn value(&self, k: usize, x: &Point) -> f64 {
        match self {
            ScalarLoad::Constant(c) => *c,
            ScalarLoad::Cellwise(v) => v[k],
            ScalarLoad::Function(f) => f(x),
        }
    }
}

/// Local matrices of every cell, computed in parallel and returned in cell order.
pub fn all_local_matrices(mesh: &SimplexMesh) -> Vec<LocalMatrices> {
    let rule = cached_rule(mesh.dim(), MATRIX_DEGREE);
    (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| local_matrices(mesh.geometry(k), mesh.cell_facet_signs(k), &rule))
        .collect()
}

fn ensure_nonempty(mesh: &SimplexMesh) -> Result<()> {
    if mesh.n_cells() == 0 {
        return Err(MeshError::Empty.into());
    }
    Ok(())
}

/// Full (unreduced) scalar stiffness or mass for CR or ECR.
pub fn assemble_scalar_matrix(
    mesh: &SimplexMesh,
    locals: &[LocalMatrices],
    family: Family,
    mass: bool,
) -> SparseMatrix {
    let dofs = DofMap::new(mesh, family, 1);
    let mut t = Vec::new();
    for (k, lm) in locals.iter().enumerate() {
        let m = match (family, mass) {
            (Family::Ecr, false) => &lm.ecr_stiffness,
            (Family::Ecr, true) => &lm.ecr_mass,
            (Family::Cr, false) => &lm.cr_stiffness,
            (Family::Cr, true) => &lm.cr_mass,
            _ => panic!("scalar matrices exist for CR and ECR only"),
        };
        let d = dofs.cell_dofs(k);
        for a in 0..d.len() {
            for b in 0..d.len() {
                t.push((d[a], d[b], m[(a, b)]));
            }
        }
    }
    SparseMatrix::from_triplets(dofs.n_scalar(), dofs.n_scalar(), t)
}

/// Projected mass `(Pi_0 u, Pi_0 v)` for CR or ECR, full numbering.
pub fn assemble_projected_mass(mesh: &SimplexMesh, family: Family) -> SparseMatrix {
    let dofs = DofMap::new(mesh, family, 1);
    let n = mesh.dim();
    let mut t = Vec::new();
    for k in 0..mesh.n_cells() {
        let vol = mesh.geometry(k).measure;
        let d = dofs.cell_dofs(k);
        match family {
            Family::Ecr => t.push((d[n + 1], d[n + 1], vol)),
            Family::Cr => {
                let a = 1.0 / (n + 1) as f64;
                for &i in d {
                    for &j in d {
                        t.push((i, j, vol * a * a));
                    }
                }
            }
            _ => panic!("projected mass exists for CR and ECR only"),
        }
    }
    SparseMatrix::from_triplets(dofs.n_scalar(), dofs.n_scalar(), t)
}

/// `(f, phi_i)` for every scalar CR/ECR basis function, full numbering.
pub fn load_vector(mesh: &SimplexMesh, family: Family, load: &ScalarLoad) -> Vec<f64> {
    let dofs = DofMap::new(mesh, family, 1);
    let n = mesh.dim();
    let per_cell: Vec<Vec<f64>> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|k| {
            let g = mesh.geometry(k);
            match load {
                ScalarLoad::Function(f) => {
                    let rule = cached_rule(n, LOAD_DEGREE);
                    let mut out = vec![0.0; dofs.cell_dofs(k).len()];
                    for (x, w) in rule.on_cell(g) {
                        let fx = f(&x);
                        let vals = match family {
                            Family::Ecr => ecr_eval(g, &x),
                            _ => cr_eval(g, &x),
                        };
                        for (o, v) in out.iter_mut().zip(vals.values()) {
                            *o += w * fx * v;
                        }
                    }
                    out
                }
                _ => {
                    // Exact: int phi = |K| * avg_K phi.
                    let fk = load.cell_average(mesh, k) * g.measure;
                    match family {
                        Family::Ecr => {
                            let mut out = vec![0.0; n + 2];
                            out[n + 1] = fk;
                            out
                        }
                        _ => vec![fk / (n + 1) as f64; n + 1],
                    }
                }
            }
        })
        .collect();
    let mut rhs = vec![0.0; dofs.n_scalar()];
    for (k, local) in per_cell.iter().enumerate() {
        for (&d, v) in dofs.cell_dofs(k).iter().zip(local) {
            rhs[d] += v;
        }
    }
    rhs
}

/// `int_K f` per cell.
pub fn cell_integrals(mesh: &SimplexMesh, load: &ScalarLoad) -> Vec<f64> {
    (0..mesh.n_cells())
        .map(|k| load.cell_average(mesh, k) * mesh.geometry(k).measure)
        .collect()
}

/// Reduced SPD system of a primal problem.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub dofs: DofMap,
}

/// ECR or CR Poisson problem with homogeneous Dirichlet data.
pub fn assemble_poisson(mesh: &SimplexMesh, family: Family, load: &ScalarLoad) -> Result<LinearSystem> {
    ensure_nonempty(mesh)?;
    load.check(mesh)?;
    let locals = all_local_matrices(mesh);
    let dofs = DofMap::dirichlet(mesh, family, 1);
    let full = assemble_scalar_matrix(mesh, &locals, family, false);
    let rhs = dofs.restrict(&load_vector(mesh, family, load));
    Ok(LinearSystem {
        matrix: full.submatrix(dofs.free_dofs(), dofs.free_dofs()),
        rhs,
        dofs,
    })
}

pub fn assemble_poisson_ecr(mesh: &SimplexMesh, load: &ScalarLoad) -> Result<LinearSystem> {
    assemble_poisson(mesh, Family::Ecr, load)
}

/// Saddle system with the numbering of its flux and scalar unknowns.
#[derive(Debug, Clone)]
pub struct MixedSystem {
    pub saddle: SaddleSystem,
    /// RT0 numbering of the primal unknowns (one row per component for tensors).
    pub flux: DofMap,
    /// P0 numbering of the dual unknowns.
    pub scalar: DofMap,
    /// Prescribed flux coefficients, indexed by global flux DOF (Neumann only).
    pub fixed_flux: Vec<(usize, f64)>,
}

impl MixedSystem {
    /// Full flux coefficient vector from a primal solution.
    pub fn flux_coefficients(&self, primal: &[f64]) -> Vec<f64> {
        let mut full = self.flux.expand(primal);
        for &(g, v) in &self.fixed_flux {
            full[g] = v;
        }
        full
    }
}

fn rt_mass_triplets(mesh: &SimplexMesh, locals: &[LocalMatrices]) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for (k, lm) in locals.iter().enumerate() {
        let d = mesh.cell_facets(k);
        for a in 0..d.len() {
            for b in 0..d.len() {
                t.push((d[a], d[b], lm.rt_mass[(a, b)]));
            }
        }
    }
    t
}

fn div_triplets(mesh: &SimplexMesh) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for k in 0..mesh.n_cells() {
        for (&f, &s) in mesh.cell_facets(k).iter().zip(mesh.cell_facet_signs(k)) {
            t.push((k, f, s));
        }
    }
    t
}

/// `(sigma, tau) + (u, div tau) = 0`, `(div sigma, v) = -(f, v)` with RT0 x P0.
pub fn assemble_mixed_poisson_rt(mesh: &SimplexMesh, load: &ScalarLoad) -> Result<MixedSystem> {
    ensure_nonempty(mesh)?;
    load.check(mesh)?;
    let locals = all_local_matrices(mesh);
    let (nf, nc) = (mesh.n_facets(), mesh.n_cells());
    let a = SparseMatrix::from_triplets(nf, nf, rt_mass_triplets(mesh, &locals));
    let b = SparseMatrix::from_triplets(nc, nf, div_triplets(mesh));
    let rhs_dual = cell_integrals(mesh, load).into_iter().map(|v| -v).collect();
    Ok(MixedSystem {
        saddle: SaddleSystem {
            a,
            b,
            rhs_primal: vec![0.0; nf],
            rhs_dual,
            primal_constraints: vec![],
            dual_constraints: vec![],
        },
        flux: DofMap::new(mesh, Family::Rt0, 1),
        scalar: DofMap::new(mesh, Family::P0, 1),
        fixed_flux: vec![],
    })
}

/// Stokes system with velocity in Dirichlet ECR (or CR) and pressure in zero-mean P0.
#[derive(Debug, Clone)]
pub struct StokesSystem {
    pub saddle: SaddleSystem,
    pub velocity: DofMap,
    pub pressure: DofMap,
}

/// `(grad u, grad v) + (div v, p) = (f, v)`, `(div u, q) = 0`, `int p = 0`.
pub fn assemble_stokes(mesh: &SimplexMesh, family: Family, load: &[ScalarLoad]) -> Result<StokesSystem> {
    ensure_nonempty(mesh)?;
    let n = mesh.dim();
    if load.len() != n {
        return Err(Error::InvalidInput(format!("Stokes load needs {n} components, got {}", load.len())));
    }
    for l in load {
        l.check(mesh)?;
    }
    let locals = all_local_matrices(mesh);
    let velocity = DofMap::dirichlet(mesh, family, n);
    let pressure = DofMap::new(mesh, Family::P0, 1);
    let scalar = assemble_scalar_matrix(mesh, &locals, family, false);
    let ns = velocity.n_scalar();
    let mut t = Vec::new();
    for c in 0..n {
        for (i, j, v) in scalar.triplets() {
            t.push((c * ns + i, c * ns + j, v));
        }
    }
    let a_full = SparseMatrix::from_triplets(n * ns, n * ns, t);
    let mut bt = Vec::new();
    for (k, lm) in locals.iter().enumerate() {
        let grads = match family {
            Family::Ecr => &lm.ecr_gradient_integrals,
            _ => &lm.cr_gradient_integrals,
        };
        for (a, &d) in velocity.cell_dofs(k).iter().enumerate() {
            for c in 0..n {
                bt.push((k, velocity.global(c, d), grads[a][c]));
            }
        }
    }
    let b_full = SparseMatrix::from_triplets(mesh.n_cells(), n * ns, bt);
    let mut rhs_full = Vec::with_capacity(n * ns);
    for l in load {
        rhs_full.extend(load_vector(mesh, family, l));
    }
    let free = velocity.free_dofs();
    let all_cells: Vec<usize> = (0..mesh.n_cells()).collect();
    let mean = Constraint::new((0..mesh.n_cells()).map(|k| (k, mesh.geometry(k).measure)).collect());
    Ok(StokesSystem {
        saddle: SaddleSystem {
            a: a_full.submatrix(free, free),
            b: b_full.submatrix(&all_cells, free),
            rhs_primal: velocity.restrict(&rhs_full),
            rhs_dual: vec![0.0; mesh.n_cells()],
            primal_constraints: vec![],
            dual_constraints: vec![mean],
        },
        velocity,
        pressure,
    })
}

pub fn assemble_stokes_ecr(mesh: &SimplexMesh, load: &[ScalarLoad]) -> Result<StokesSystem> {
    assemble_stokes(mesh, Family::Ecr, load)
}

/// `(dev sigma, dev tau) + (u, div tau) = 0`, `(div sigma, v) = -(f, v)`, `int tr sigma = 0`.
///
/// Tensor row `i` is an RT0 field; unknown `(i, facet)` sits at `i * n_facets + facet`,
/// and the velocity component `i` on cell `k` at `i * n_cells + k`.
pub fn assemble_pseudostress_rt(mesh: &SimplexMesh, load: &[ScalarLoad]) -> Result<MixedSystem> {
    ensure_nonempty(mesh)?;
    let n = mesh.dim();
    if load.len() != n {
        return Err(Error::InvalidInput(format!("Stokes load needs {n} components, got {}", load.len())));
    }
    for l in load {
        l.check(mesh)?;
    }
    let locals = all_local_matrices(mesh);
    let (nf, nc) = (mesh.n_facets(), mesh.n_cells());
    let inv_n = 1.0 / n as f64;
    let mut t = Vec::new();
    let mut trace = vec![0.0; n * nf];
    for (k, lm) in locals.iter().enumerate() {
        let d = mesh.cell_facets(k);
        let nl = d.len();
        for a in 0..nl {
            for i in 0..n {
                trace[i * nf + d[a]] += lm.rt_integrals[a][i];
            }
            for b in 0..nl {
                let p = &lm.rt_products[a * nl + b];
                for i in 0..n {
                    for j in 0..n {
                        let mut v = -inv_n * p[i][j];
                        if i == j {
                            v += lm.rt_mass[(a, b)];
                        }
                        t.push((i * nf + d[a], j * nf + d[b], v));
                    }
                }
            }
        }
    }
    let a = SparseMatrix::from_triplets(n * nf, n * nf, t);
    let mut bt = Vec::new();
    for i in 0..n {
        for (k, f, s) in div_triplets(mesh) {
            bt.push((i * nc + k, i * nf + f, s));
        }
    }
    let b = SparseMatrix::from_triplets(n * nc, n * nf, bt);
    let mut rhs_dual = Vec::with_capacity(n * nc);
    for l in load {
        rhs_dual.extend(cell_integrals(mesh, l).into_iter().map(|v| -v));
    }
    let tr = Constraint::new(trace.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect());
    Ok(MixedSystem {
        saddle: SaddleSystem {
            a,
            b,
            rhs_primal: vec![0.0; n * nf],
            rhs_dual,
            primal_constraints: vec![tr],
            dual_constraints: vec![],
        },
        flux: DofMap::new(mesh, Family::Rt0, n),
        scalar: DofMap::new(mesh, Family::P0, n),
        fixed_flux: vec![],
    })
}

/// Outward boundary flux data `g = du/dnu`.
#[derive(Clone)]
pub enum BoundaryFlux {
    /// `g(x, outward_normal)`.
    Function(Arc<dyn Fn(&Point, &Point) -> f64 + Send + Sync>),
    /// Average outward flux per facet (ignored on interior facets).
    Facetwise(Vec<f64>),
}

impl fmt::Debug for BoundaryFlux {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryFlux::Function(_) => f.write_str("Function(..)"),
            BoundaryFlux::Facetwise(v) => write!(f, "Facetwise({} facets)", v.len()),
        }
    }
}

impl BoundaryFlux {
    pub fn function(g: impl Fn(&Point, &Point) -> f64 + Send + Sync + 'static) -> Self {
        BoundaryFlux::Function(Arc::new(g))
    }

    /// Average outward flux on each facet; zero on interior facets.
    pub fn facet_averages(&self, mesh: &SimplexMesh) -> Result<Vec<f64>> {
        let mut out = vec![0.0; mesh.n_facets()];
        match self {
            BoundaryFlux::Facetwise(v) => {
                if v.len() != mesh.n_facets() {
                    return Err(Error::InvalidInput(format!(
                        "facetwise flux has {} values for {} facets",
                        v.len(),
                        mesh.n_facets()
                    )));
                }
                for f in mesh.boundary_facets() {
                    out[f] = v[f];
                }
            }
            BoundaryFlux::Function(g) => {
                let rule = cached_rule(mesh.dim() - 1, 4);
                for f in mesh.boundary_facets() {
                    let fg = mesh.facet_geometry_of(f);
                    let k = mesh.facet_cells(f).next().unwrap();
                    let s = mesh.cell_facet_signs(k)[mesh.local_facet_index(k, f).unwrap()];
                    let nu = [s * fg.normal[0], s * fg.normal[1], s * fg.normal[2]];
                    out[f] = rule.integrate_facet(fg, |x| g(x, &nu)) / fg.measure;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeumannForm {
    PrimalEcr,
    PrimalCr,
    MixedRt,
}

/// Assembled pure-Neumann problem; `u` is fixed by a zero-mean constraint.
#[derive(Debug, Clone)]
pub enum NeumannSystem {
    /// Primal form: `saddle.b` is empty and the mean of `u` is a primal constraint.
    Primal { saddle: SaddleSystem, dofs: DofMap },
    Mixed(MixedSystem),
}

/// Sum of `int f` and `int g` over the boundary; zero for compatible data.
pub fn neumann_compatibility(mesh: &SimplexMesh, load: &ScalarLoad, flux: &[f64]) -> f64 {
    let fi: f64 = cell_integrals(mesh, load).iter().sum();
    let gi: f64 = mesh.boundary_facets().map(|f| flux[f] * mesh.facet_geometry_of(f).measure).sum();
    fi + gi
}

/// `(grad u, grad v) = (f, v) + <g, v>` in mean-zero spaces, or its mixed form
/// with `tau . nu = g` imposed through facet averages.
pub fn assemble_neumann(
    mesh: &SimplexMesh,
    load: &ScalarLoad,
    flux: &BoundaryFlux,
    form: NeumannForm,
) -> Result<NeumannSystem> {
    ensure_nonempty(mesh)?;
    load.check(mesh)?;
    let g = flux.facet_averages(mesh)?;
    let residual = neumann_compatibility(mesh, load, &g);
    let scale = cell_integrals(mesh, load).iter().map(|v| v.abs()).sum::<f64>()
        + mesh
            .boundary_facets()
            .map(|f| (g[f] * mesh.facet_geometry_of(f).measure).abs())
            .sum::<f64>();
    if residual.abs() > 1e-10 * scale.max(1.0) {
        return Err(Error::IncompatibleData { residual });
    }
    let locals = all_local_matrices(mesh);
    let n = mesh.dim();
    match form {
        NeumannForm::PrimalEcr | NeumannForm::PrimalCr => {
            let family = if form == NeumannForm::PrimalEcr {
                Family::Ecr
            } else {
                Family::Cr
            };
            let dofs = DofMap::new(mesh, family, 1);
            let a = assemble_scalar_matrix(mesh, &locals, family, false);
            let mut rhs = load_vector(mesh, family, load);
            // Boundary facet functions have unit average on their own facet only.
            for f in mesh.boundary_facets() {
                rhs[f] += g[f] * mesh.facet_geometry_of(f).measure;
            }
            let mut mean = vec![0.0; dofs.n_scalar()];
            for k in 0..mesh.n_cells() {
                let vol = mesh.geometry(k).measure;
                let d = dofs.cell_dofs(k);
                match family {
                    Family::Ecr => mean[d[n + 1]] += vol,
                    _ => d.iter().for_each(|&i| mean[i] += vol / (n + 1) as f64),
                }
            }
            let m = dofs.n_scalar();
            Ok(NeumannSystem::Primal {
                saddle: SaddleSystem {
                    a,
                    b: SparseMatrix::zeros(0, m),
                    rhs_primal: rhs,
                    rhs_dual: vec![],
                    primal_constraints: vec![Constraint::new(mean.into_iter().enumerate().collect())],
                    dual_constraints: vec![],
                },
                dofs,
            })
        }
        NeumannForm::MixedRt => {
            let (nf, nc) = (mesh.n_facets(), mesh.n_cells());
            let a_full = SparseMatrix::from_triplets(nf, nf, rt_mass_triplets(mesh, &locals));
            let b_full = SparseMatrix::from_triplets(nc, nf, div_triplets(mesh));
            let mut flux_map = DofMap::new(mesh, Family::Rt0, 1);
            let mut is_boundary = vec![false; nf];
            let mut fixed = Vec::new();
            let mut x_fixed = vec![0.0; nf];
            for f in mesh.boundary_facets() {
                is_boundary[f] = true;
                let k = mesh.facet_cells(f).next().unwrap();
                let s = mesh.cell_facet_signs(k)[mesh.local_facet_index(k, f).unwrap()];
                let v = s * g[f] * mesh.facet_geometry_of(f).measure;
                x_fixed[f] = v;
                fixed.push((f, v));
            }
            flux_map.set_free(|f| !is_boundary[f]);
            let free = flux_map.free_dofs().to_vec();
            let ax = a_full.mul_vec(&x_fixed);
            let bx = b_full.mul_vec(&x_fixed);
            let rhs_primal = free.iter().map(|&f| -ax[f]).collect();
            let rhs_dual = cell_integrals(mesh, load)
                .iter()
                .zip(&bx)
                .map(|(fi, b)| -fi - b)
                .collect();
            let all_cells: Vec<usize> = (0..nc).collect();
            let mean = Constraint::new((0..nc).map(|k| (k, mesh.geometry(k).measure)).collect());
            Ok(NeumannSystem::Mixed(MixedSystem {
                saddle: SaddleSystem {
                    a: a_full.submatrix(&free, &free),
                    b: b_full.submatrix(&all_cells, &free),
                    rhs_primal,
                    rhs_dual,
                    primal_constraints: vec![],
                    dual_constraints: vec![mean],
                },
                flux: flux_map,
                scalar: DofMap::new(mesh, Family::P0, 1),
                fixed_flux: fixed,
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MassKind {
    /// `(u, v)`.
    Full,
    /// `(Pi_0 u, Pi_0 v)`.
    Projected,
}

/// Stiffness and mass pencil with Dirichlet facet DOFs removed.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub stiffness: SparseMatrix,
    pub mass: SparseMatrix,
    pub dofs: DofMap,
}

pub fn assemble_eigen(mesh: &SimplexMesh, family: Family, mass: MassKind) -> Result<EigenSystem> {
    ensure_nonempty(mesh)?;
    if !matches!(family, Family::Cr | Family::Ecr) {
        return Err(Error::InvalidInput(format!("no primal eigenproblem for {family}")));
    }
    let locals = all_local_matrices(mesh);
    let dofs = DofMap::dirichlet(mesh, family, 1);
    let a = assemble_scalar_matrix(mesh, &locals, family, false);
    let m = match mass {
        MassKind::Full => assemble_scalar_matrix(mesh, &locals, family, true),
        MassKind::Projected => assemble_projected_mass(mesh, family),
    };
    let free = dofs.free_dofs();
    Ok(EigenSystem {
        stiffness: a.submatrix(free, free),
        mass: m.submatrix(free, free),
        dofs,
    })
}

/// Diagonal P0 mass `|K|`.
pub fn p0_mass(mesh: &SimplexMesh) -> SparseMatrix {
    SparseMatrix::from_diagonal(&(0..mesh.n_cells()).map(|k| mesh.geometry(k).measure).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsolve::{solve_saddle, solve_spd, SolverConfig};
    use crate::mesh::{build_box_mesh, BoxVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square(m: usize) -> SimplexMesh {
        build_box_mesh(2, m, BoxVariant::Diagonal).unwrap()
    }

    #[test]
    fn two_triangle_dimensions() {
        let mesh = unit_square(1);
        let sys = assemble_poisson_ecr(&mesh, &ScalarLoad::Constant(1.0)).unwrap();
        assert_eq!(sys.dofs.n_free(), 3);
        assert_eq!(sys.matrix.nrows(), 3);
        let mixed = assemble_mixed_poisson_rt(&mesh, &ScalarLoad::Constant(1.0)).unwrap();
        assert_eq!(mixed.saddle.n_primal(), 5);
        assert_eq!(mixed.saddle.n_dual(), 2);
    }

    #[test]
    fn poisson_zero_load_and_energy() {
        let mesh = unit_square(3);
        let cfg = SolverConfig::default();
        let zero = assemble_poisson_ecr(&mesh, &ScalarLoad::zero()).unwrap();
        let u = solve_spd(&zero.matrix, &zero.rhs, &cfg).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
        let one = assemble_poisson_ecr(&mesh, &ScalarLoad::Constant(1.0)).unwrap();
        let u = solve_spd(&one.matrix, &one.rhs, &cfg).unwrap();
        let energy: f64 = u.iter().zip(&one.rhs).map(|(a, b)| a * b).sum();
        assert!(energy > 0.0);
        assert!(one.matrix.asymmetry() == 0.0);
    }

    #[test]
    fn assembly_is_bitwise_deterministic() {
        let mesh = unit_square(4);
        let a = assemble_poisson(&mesh, Family::Ecr, &ScalarLoad::function(|x| x[0].sin())).unwrap();
        let b = assemble_poisson(&mesh, Family::Ecr, &ScalarLoad::function(|x| x[0].sin())).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.rhs, b.rhs);
    }

    #[test]
    fn interior_jump_averages_vanish() {
        let mesh = unit_square(3);
        let dofs = DofMap::dirichlet(&mesh, Family::Ecr, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let free: Vec<f64> = (0..dofs.n_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coef = dofs.expand(&free);
        let rule = cached_rule(1, 4);
        for f in mesh.interior_facets() {
            let fg = mesh.facet_geometry_of(f);
            let sides: Vec<f64> = mesh
                .facet_cells(f)
                .map(|k| {
                    let g = mesh.geometry(k);
                    rule.integrate_facet(fg, |x| {
                        let e = ecr_eval(g, x);
                        dofs.cell_dofs(k).iter().zip(e.values()).map(|(&d, v)| coef[d] * v).sum()
                    })
                })
                .collect();
            assert!((sides[0] - sides[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_divergence_matches_load() {
        let mesh = unit_square(2);
        let load = ScalarLoad::Cellwise((0..mesh.n_cells()).map(|k| 1.0 + k as f64).collect());
        let sys = assemble_mixed_poisson_rt(&mesh, &load).unwrap();
        let s = solve_saddle(&sys.saddle, &SolverConfig::default()).unwrap();
        for k in 0..mesh.n_cells() {
            let div: f64 = mesh
                .cell_facets(k)
                .iter()
                .zip(mesh.cell_facet_signs(k))
                .map(|(&f, &sg)| sg * s.primal[f])
                .sum::<f64>()
                / mesh.geometry(k).measure;
            assert!((div + 1.0 + k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn stokes_constraints_hold() {
        let mesh = unit_square(3);
        let load = [ScalarLoad::Constant(1.0), ScalarLoad::function(|x| x[0] * x[1])];
        let sys = assemble_stokes_ecr(&mesh, &load).unwrap();
        let s = solve_saddle(&sys.saddle, &SolverConfig::default()).unwrap();
        let div = sys.saddle.b.mul_vec(&s.primal);
        assert!(div.iter().all(|v| v.abs() < 1e-10));
        assert!(sys.saddle.dual_constraints[0].evaluate(&s.dual).abs() < 1e-12);
    }

    #[test]
    fn pseudostress_constraints_hold() {
        let mesh = unit_square(2);
        let load = [ScalarLoad::Constant(1.0), ScalarLoad::Constant(0.0)];
        let sys = assemble_pseudostress_rt(&mesh, &load).unwrap();
        let s = solve_saddle(&sys.saddle, &SolverConfig::default()).unwrap();
        assert!(sys.saddle.primal_constraints[0].evaluate(&s.primal).abs() < 1e-10);
        let div = sys.saddle.b.mul_vec(&s.primal);
        for (i, d) in div.iter().enumerate() {
            let expected = if i < mesh.n_cells() { -mesh.geometry(i).measure } else { 0.0 };
            assert!((d - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn neumann_rejects_incompatible_data() {
        let mesh = unit_square(2);
        let err = assemble_neumann(
            &mesh,
            &ScalarLoad::Constant(1.0),
            &BoundaryFlux::Facetwise(vec![0.0; mesh.n_facets()]),
            NeumannForm::PrimalEcr,
        )
        .unwrap_err();
        assert!(matches!(err, Error::IncompatibleData { .. }));
    }

    #[test]
    fn projected_mass_single_cell() {
        let mesh = unit_square(1);
        let m = assemble_projected_mass(&mesh, Family::Ecr);
        let nf = mesh.n_facets();
        for k in 0..2 {
            assert!((m.get(nf + k, nf + k) - 0.5).abs() < 1e-15);
        }
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn eigen_stiffness_is_spd() {
        let mesh = unit_square(4);
        for family in [Family::Cr, Family::Ecr] {
            let sys = assemble_eigen(&mesh, family, MassKind::Full).unwrap();
            assert!(crate::linsolve::SpdFactor::new(&sys.stiffness).is_ok());
        }
    }
}
