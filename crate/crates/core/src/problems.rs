//! Discrete fields, exact-solution fixtures and end-to-end solvers.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_eigen, assemble_mixed_poisson_rt, assemble_neumann, assemble_poisson, assemble_pseudostress_rt,
    assemble_stokes, p0_mass, BoundaryFlux, DofMap, Family, MassKind, NeumannForm, NeumannSystem, ScalarLoad,
};
use crate::elements::{cr_eval, ecr_eval, rt0_eval};
use crate::error::{Error, Result};
use crate::linsolve::{eig_smallest, eig_smallest_operator, solve_saddle, solve_spd, SaddleFactor, SolverConfig};
use crate::mesh::{Point, SimplexMesh, MAX_DIM};

/// Reference point used to fix eigenvector signs.
pub const SIGN_REFERENCE_POINT: Point = [0.4913, 0.5087, 0.4971];

/// Broken scalar or vector field in CR, ECR or P0, stored with full global numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenField {
    pub dofs: DofMap,
    pub coefficients: Vec<f64>,
}

impl BrokenField {
    pub fn new(dofs: DofMap, coefficients: Vec<f64>) -> Self {
        assert_eq!(coefficients.len(), dofs.n_global());
        Self { dofs, coefficients }
    }

    pub fn zeros(dofs: DofMap) -> Self {
        let n = dofs.n_global();
        Self::new(dofs, vec![0.0; n])
    }

    pub fn from_free(dofs: DofMap, free_values: &[f64]) -> Self {
        let c = dofs.expand(free_values);
        Self::new(dofs, c)
    }

    pub fn family(&self) -> Family {
        self.dofs.family()
    }

    pub fn components(&self) -> usize {
        self.dofs.components()
    }

    fn local(&self, k: usize, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.dofs
            .cell_dofs(k)
            .iter()
            .map(move |&d| self.coefficients[self.dofs.global(c, d)])
    }

    /// Value of component `c` at `x` in cell `k`.
    pub fn value(&self, mesh: &SimplexMesh, k: usize, c: usize, x: &[f64]) -> f64 {
        let g = mesh.geometry(k);
        match self.family() {
            Family::P0 => self.coefficients[self.dofs.global(c, k)],
            Family::Ecr => self.local(k, c).zip(ecr_eval(g, x).values()).map(|(a, b)| a * b).sum(),
            Family::Cr => self.local(k, c).zip(cr_eval(g, x).values()).map(|(a, b)| a * b).sum(),
            Family::Rt0 => panic!("RT0 coefficients live in RtField"),
        }
    }

    /// Broken gradient of component `c` at `x` in cell `k`.
    pub fn gradient(&self, mesh: &SimplexMesh, k: usize, c: usize, x: &[f64]) -> Point {
        let g = mesh.geometry(k);
        let eval = match self.family() {
            Family::P0 => return [0.0; MAX_DIM],
            Family::Ecr => ecr_eval(g, x),
            Family::Cr => cr_eval(g, x),
            Family::Rt0 => panic!("RT0 coefficients live in RtField"),
        };
        let mut out = [0.0; MAX_DIM];
        for (a, gr) in self.local(k, c).zip(eval.grads()) {
            for d in 0..mesh.dim() {
                out[d] += a * gr[d];
            }
        }
        out
    }

    /// Cell average of component `c`: the bubble coefficient for ECR.
    pub fn cell_average(&self, mesh: &SimplexMesh, k: usize, c: usize) -> f64 {
        match self.family() {
            Family::P0 => self.coefficients[self.dofs.global(c, k)],
            Family::Ecr => self.coefficients[self.dofs.global(c, self.dofs.bubble(k).unwrap())],
            Family::Cr => self.local(k, c).sum::<f64>() / (mesh.dim() + 1) as f64,
            Family::Rt0 => panic!("RT0 coefficients live in RtField"),
        }
    }

    /// Broken divergence of a vector field (`components == dim`).
    pub fn divergence(&self, mesh: &SimplexMesh, k: usize, x: &[f64]) -> f64 {
        (0..mesh.dim()).map(|c| self.gradient(mesh, k, c, x)[c]).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.coefficients.iter_mut().for_each(|v| *v *= s);
    }
}

/// `rows` RT0 fields sharing the facet numbering; row `i` of facet `f` is at `i * n_facets + f`.
///
/// On each cell a row is `sigma(x) = sigma(mid K) + (div sigma / n)(x - mid K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtField {
    pub rows: usize,
    pub n_facets: usize,
    pub coefficients: Vec<f64>,
}

impl RtField {
    pub fn new(rows: usize, n_facets: usize, coefficients: Vec<f64>) -> Self {
        assert_eq!(coefficients.len(), rows * n_facets);
        Self {
            rows,
            n_facets,
            coefficients,
        }
    }

    pub fn zeros(rows: usize, n_facets: usize) -> Self {
        Self::new(rows, n_facets, vec![0.0; rows * n_facets])
    }

    /// Flux of row `i` through facet `f` against the facet's global normal.
    pub fn flux(&self, row: usize, f: usize) -> f64 {
        self.coefficients[row * self.n_facets + f]
    }

    pub fn value(&self, mesh: &SimplexMesh, k: usize, row: usize, x: &[f64]) -> Point {
        let g = mesh.geometry(k);
        let basis = rt0_eval(g, mesh.cell_facet_signs(k), x);
        let mut out = [0.0; MAX_DIM];
        for (&f, psi) in mesh.cell_facets(k).iter().zip(basis.values()) {
            let c = self.flux(row, f);
            for d in 0..mesh.dim() {
                out[d] += c * psi[d];
            }
        }
        out
    }

    /// Cellwise constant divergence of row `i`.
    pub fn divergence(&self, mesh: &SimplexMesh, k: usize, row: usize) -> f64 {
        mesh.cell_facets(k)
            .iter()
            .zip(mesh.cell_facet_signs(k))
            .map(|(&f, &s)| s * self.flux(row, f))
            .sum::<f64>()
            / mesh.geometry(k).measure
    }

    /// `(value at mid K, radial coefficient)` of row `i` on cell `k`.
    pub fn cell_form(&self, mesh: &SimplexMesh, k: usize, row: usize) -> (Point, f64) {
        let g = mesh.geometry(k);
        (
            self.value(mesh, k, row, &g.centroid),
            self.divergence(mesh, k, row) / mesh.dim() as f64,
        )
    }

    pub fn scale(&mut self, s: f64) {
        self.coefficients.iter_mut().for_each(|v| *v *= s);
    }
}

type ScalarFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;

/// Analytic solution with its gradient and load `f = -Laplace u`.
#[derive(Clone)]
pub struct ExactSolution {
    pub label: String,
    pub dim: usize,
    pub u: ScalarFn,
    pub gradient: VectorFn,
    pub load: ScalarFn,
    /// Dirichlet eigenvalue when `u` is an eigenfunction.
    pub eigenvalue: Option<f64>,
}

impl fmt::Debug for ExactSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExactSolution")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("eigenvalue", &self.eigenvalue)
            .finish()
    }
}

impl ExactSolution {
    /// `prod_i sin(pi x_i)` on the unit box, `f = n pi^2 u`.
    pub fn sine(dim: usize) -> Self {
        let u = move |x: &Point| (0..dim).map(|i| (PI * x[i]).sin()).product::<f64>();
        let gradient = move |x: &Point| {
            let mut g = [0.0; MAX_DIM];
            for (d, gd) in g.iter_mut().enumerate().take(dim) {
                *gd = (0..dim)
                    .map(|i| if i == d { PI * (PI * x[i]).cos() } else { (PI * x[i]).sin() })
                    .product();
            }
            g
        };
        let nf = dim as f64;
        Self {
            label: format!("sine{dim}d"),
            dim,
            u: Arc::new(u),
            gradient: Arc::new(gradient),
            load: Arc::new(move |x| nf * PI * PI * u(x)),
            eigenvalue: Some(nf * PI * PI),
        }
    }

    /// First Dirichlet eigenfunction of the unit box with unit L2 norm.
    pub fn first_eigenfunction(dim: usize) -> Self {
        let s = Self::sine(dim);
        let c = 2f64.powf(dim as f64 / 2.0);
        let (u, g, f) = (s.u.clone(), s.gradient.clone(), s.load.clone());
        Self {
            label: format!("eigen{dim}d"),
            dim,
            u: Arc::new(move |x| c * u(x)),
            gradient: Arc::new(move |x| {
                let v = g(x);
                [c * v[0], c * v[1], c * v[2]]
            }),
            load: Arc::new(move |x| c * f(x)),
            eigenvalue: s.eigenvalue,
        }
    }

    /// `u = x_1^2 + x_2^2`, `f = -4`, boundary flux `g = grad u . nu`.
    pub fn neumann_quadratic(dim: usize) -> Self {
        Self {
            label: "neumann-quadratic".into(),
            dim,
            u: Arc::new(|x| x[0] * x[0] + x[1] * x[1]),
            gradient: Arc::new(|x| [2.0 * x[0], 2.0 * x[1], 0.0]),
            load: Arc::new(|_| -4.0),
            eigenvalue: None,
        }
    }

    pub fn scalar_load(&self) -> ScalarLoad {
        ScalarLoad::Function(self.load.clone())
    }

    /// `g(x, nu) = grad u(x) . nu`.
    pub fn boundary_flux(&self) -> BoundaryFlux {
        let g = self.gradient.clone();
        let dim = self.dim;
        BoundaryFlux::function(move |x, nu| {
            let gr = g(x);
            (0..dim).map(|d| gr[d] * nu[d]).sum()
        })
    }
}

/// CR or ECR Poisson solution with homogeneous Dirichlet data.
pub fn solve_poisson(mesh: &SimplexMesh, load: &ScalarLoad, family: Family, config: &SolverConfig) -> Result<BrokenField> {
    let sys = assemble_poisson(mesh, family, load)?;
    let x = solve_spd(&sys.matrix, &sys.rhs, config)?;
    Ok(BrokenField::from_free(sys.dofs, &x))
}

#[derive(Debug, Clone)]
pub struct MixedSolution {
    pub sigma: RtField,
    pub u: BrokenField,
}

pub fn solve_poisson_mixed(mesh: &SimplexMesh, load: &ScalarLoad, config: &SolverConfig) -> Result<MixedSolution> {
    let sys = assemble_mixed_poisson_rt(mesh, load)?;
    let s = solve_saddle(&sys.saddle, config)?;
    Ok(MixedSolution {
        sigma: RtField::new(1, mesh.n_facets(), sys.flux_coefficients(&s.primal)),
        u: BrokenField::new(sys.scalar, s.dual),
    })
}

#[derive(Debug, Clone)]
pub struct StokesSolution {
    pub velocity: BrokenField,
    pub pressure: BrokenField,
}

/// Stokes with ECR (or CR) velocity and zero-mean P0 pressure.
pub fn solve_stokes(
    mesh: &SimplexMesh,
    load: &[ScalarLoad],
    family: Family,
    config: &SolverConfig,
) -> Result<StokesSolution> {
    let sys = assemble_stokes(mesh, family, load)?;
    let s = solve_saddle(&sys.saddle, config)?;
    Ok(StokesSolution {
        velocity: BrokenField::from_free(sys.velocity, &s.primal),
        pressure: BrokenField::new(sys.pressure, s.dual),
    })
}

/// Pseudostress RT0 tensor (rows) and P0 velocity.
pub fn solve_stokes_mixed(mesh: &SimplexMesh, load: &[ScalarLoad], config: &SolverConfig) -> Result<MixedSolution> {
    let sys = assemble_pseudostress_rt(mesh, load)?;
    let s = solve_saddle(&sys.saddle, config)?;
    Ok(MixedSolution {
        sigma: RtField::new(mesh.dim(), mesh.n_facets(), sys.flux_coefficients(&s.primal)),
        u: BrokenField::new(sys.scalar, s.dual),
    })
}

#[derive(Debug, Clone)]
pub enum NeumannSolution {
    Primal(BrokenField),
    Mixed(MixedSolution),
}

pub fn solve_neumann(
    mesh: &SimplexMesh,
    load: &ScalarLoad,
    flux: &BoundaryFlux,
    form: NeumannForm,
    config: &SolverConfig,
) -> Result<NeumannSolution> {
    match assemble_neumann(mesh, load, flux, form)? {
        NeumannSystem::Primal { saddle, dofs } => {
            let s = solve_saddle(&saddle, config)?;
            Ok(NeumannSolution::Primal(BrokenField::new(dofs, s.primal)))
        }
        NeumannSystem::Mixed(sys) => {
            let s = solve_saddle(&sys.saddle, config)?;
            Ok(NeumannSolution::Mixed(MixedSolution {
                sigma: RtField::new(1, mesh.n_facets(), sys.flux_coefficients(&s.primal)),
                u: BrokenField::new(sys.scalar, s.dual),
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EigenMethod {
    Ecr,
    Cr,
    /// RT0 x P0 saddle eigenproblem.
    RtMixed,
    /// ECR stiffness against the projected mass.
    RtEquivalent,
}

impl EigenMethod {
    pub fn name(self) -> &'static str {
        match self {
            EigenMethod::Ecr => "ecr",
            EigenMethod::Cr => "cr",
            EigenMethod::RtMixed => "rt-mixed",
            EigenMethod::RtEquivalent => "rt-equiv",
        }
    }
}

impl fmt::Display for EigenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EigenMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecr" => Ok(EigenMethod::Ecr),
            "cr" => Ok(EigenMethod::Cr),
            "rt" | "rt-mixed" | "rtmixed" => Ok(EigenMethod::RtMixed),
            "rt-equiv" | "rtequiv" | "rt-equivalent" => Ok(EigenMethod::RtEquivalent),
            other => Err(Error::InvalidInput(format!("unknown eigen method `{other}`"))),
        }
    }
}

/// One eigenpair. `scalar` is the CR/ECR eigenfunction, or `u_RT` for the mixed
/// method, which also carries `flux = sigma_RT`.
#[derive(Debug, Clone)]
pub struct EigenMode {
    pub value: f64,
    pub scalar: BrokenField,
    pub flux: Option<RtField>,
}

/// The `k` smallest Dirichlet Laplace eigenpairs.
///
/// Normalization: `||u|| = 1` for CR/ECR and the mixed method, `||Pi_0 phi|| = 1` for
/// the projected-mass form. Signs make the cell average at [`SIGN_REFERENCE_POINT`] positive.
pub fn solve_eigen(mesh: &SimplexMesh, method: EigenMethod, k: usize, config: &SolverConfig) -> Result<Vec<EigenMode>> {
    let mut modes = match method {
        EigenMethod::Ecr | EigenMethod::Cr | EigenMethod::RtEquivalent => {
            let (family, mass) = match method {
                EigenMethod::Ecr => (Family::Ecr, MassKind::Full),
                EigenMethod::Cr => (Family::Cr, MassKind::Full),
                _ => (Family::Ecr, MassKind::Projected),
            };
            let sys = assemble_eigen(mesh, family, mass)?;
            let pairs = eig_smallest(&sys.stiffness, &sys.mass, k, config)?;
            pairs
                .values
                .into_iter()
                .zip(pairs.vectors)
                .map(|(value, v)| EigenMode {
                    value,
                    scalar: BrokenField::from_free(sys.dofs.clone(), &v),
                    flux: None,
                })
                .collect::<Vec<_>>()
        }
        EigenMethod::RtMixed => solve_mixed_eigen(mesh, k, config)?,
    };
    for m in &mut modes {
        let s = sign_of(mesh, &m.scalar);
        if s < 0.0 {
            m.scalar.scale(-1.0);
            if let Some(f) = &mut m.flux {
                f.scale(-1.0);
            }
        }
    }
    Ok(modes)
}

// S u = lambda M0 u with S = B A^{-1} B^T; S^{-1} y is a saddle solve with rhs [0, -y].
fn solve_mixed_eigen(mesh: &SimplexMesh, k: usize, config: &SolverConfig) -> Result<Vec<EigenMode>> {
    let sys = assemble_mixed_poisson_rt(mesh, &ScalarLoad::zero())?;
    let factor = SaddleFactor::new(&sys.saddle)?;
    let m0 = p0_mass(mesh);
    let nf = mesh.n_facets();
    let nc = mesh.n_cells();
    let inverse = |y: &[f64]| -> Vec<f64> {
        let mut rhs = vec![0.0; nf];
        rhs.extend(y.iter().map(|v| -v));
        let z = factor.apply_refined(&rhs);
        z[nf..].to_vec()
    };
    let pairs = eig_smallest_operator(nc, k, |x| inverse(&m0.mul_vec(x)), |x| m0.mul_vec(x), config)?;
    let mut modes = Vec::with_capacity(k);
    for (value, u) in pairs.values.into_iter().zip(pairs.vectors) {
        // Recover sigma with a checked solve of the source problem g = -lambda M0 u.
        let g: Vec<f64> = m0.mul_vec(&u).into_iter().map(|v| -value * v).collect();
        let s = factor.solve_blocks(&vec![0.0; nf], &g, config)?;
        modes.push(EigenMode {
            value,
            scalar: BrokenField::new(sys.scalar.clone(), u),
            flux: Some(RtField::new(1, nf, s.primal)),
        });
    }
    Ok(modes)
}

/// Sign of the cell average at the reference point, falling back to the first
/// cell whose average is clearly nonzero.
pub fn sign_of(mesh: &SimplexMesh, field: &BrokenField) -> f64 {
    let avgs: Vec<f64> = (0..mesh.n_cells()).map(|k| field.cell_average(mesh, k, 0)).collect();
    let max = avgs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut p = [0.0; MAX_DIM];
    p[..mesh.dim()].copy_from_slice(&SIGN_REFERENCE_POINT[..mesh.dim()]);
    if let Some(k) = mesh.locate(&p) {
        if avgs[k].abs() > 1e-6 * max {
            return avgs[k].signum();
        }
    }
    avgs.iter()
        .find(|v| v.abs() > 1e-6 * max)
        .map(|v| v.signum())
        .unwrap_or(1.0)
}
