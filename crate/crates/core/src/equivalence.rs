//! Numerical checks of the exact relations between ECR, CR and RT0 solutions.
//!
//! For piecewise-constant loads the broken ECR gradient is an RT0 field and
//! coincides with the mixed flux; the cell averages of the ECR solution coincide
//! with the mixed scalar. Analogous relations hold for the Stokes pseudostress,
//! for CR through a local correction, and for the Laplace eigenproblem.

use serde::{Deserialize, Serialize};

use crate::analysis::{gradient_rt_distance, integrate, ConvergenceTable, ERROR_DEGREE};
use crate::assembly::{DofMap, Family, NeumannForm, ScalarLoad};
use crate::elements::{bubble_gradient_factor, rt0_eval};
use crate::error::{Error, Result};
use crate::linsolve::SolverConfig;
use crate::mesh::{Point, SimplexMesh, MAX_DIM};
use crate::problems::{
    solve_eigen, solve_neumann, solve_poisson, solve_poisson_mixed, solve_stokes, solve_stokes_mixed, BrokenField,
    EigenMethod, ExactSolution, NeumannSolution, RtField,
};
use crate::quadrature::cached_rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative L2 residuals of the Poisson relations.
    pub poisson: f64,
    /// Relative residual of the pseudostress relation.
    pub stokes: f64,
    /// Scaled residual of the weak velocity relation.
    pub weak: f64,
    /// Relative pointwise residuals of the CR relations.
    pub pointwise: f64,
    /// Interior normal jumps relative to the field's max norm.
    pub jump: f64,
    /// Cellwise divergence residuals.
    pub divergence: f64,
    /// Size of the trace-mean gauge shift.
    pub gauge: f64,
    pub eigenvalue: f64,
    pub eigenvector: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            poisson: 1e-9,
            stokes: 1e-8,
            weak: 1e-8,
            pointwise: 1e-9,
            jump: 1e-10,
            divergence: 1e-11,
            gauge: 1e-10,
            eigenvalue: 1e-10,
            eigenvector: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EquivalenceConfig {
    pub solver: SolverConfig,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheck {
    pub name: String,
    pub absolute: f64,
    pub relative: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ResidualCheck {
    /// `absolute / max(norm_a, norm_b)`; `0/0` passes with a note.
    pub fn relative(name: &str, absolute: f64, norm_a: f64, norm_b: f64, tolerance: f64) -> Self {
        Self::scaled(name, absolute, norm_a.max(norm_b), tolerance)
    }

    pub fn scaled(name: &str, absolute: f64, scale: f64, tolerance: f64) -> Self {
        let (relative, note) = if scale > 0.0 {
            (absolute / scale, None)
        } else if absolute == 0.0 {
            (0.0, Some("both sides vanish".to_string()))
        } else {
            (f64::INFINITY, Some("zero reference scale".to_string()))
        };
        Self {
            name: name.to_string(),
            absolute,
            relative,
            tolerance,
            pass: relative <= tolerance,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identity: String,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    pub n_cells: usize,
    pub checks: Vec<ResidualCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_normal_jump: Option<f64>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl IdentityReport {
    fn new(identity: &str, mesh: &SimplexMesh) -> Self {
        Self {
            identity: identity.to_string(),
            dim: mesh.dim(),
            level: None,
            n_cells: mesh.n_cells(),
            checks: vec![],
            max_normal_jump: None,
            pass: true,
            notes: vec![],
        }
    }

    fn push(&mut self, check: ResidualCheck) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn with_level(mut self, level: usize) -> Self {
        self.level = Some(level);
        self
    }

    pub fn check(&self, name: &str) -> Option<&ResidualCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Names of failing checks.
    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }
}

fn require_piecewise_constant(loads: &[&ScalarLoad]) -> Result<()> {
    if loads.iter().all(|l| l.is_piecewise_constant()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(
            "equivalence checks need piecewise-constant loads; project the load first".into(),
        ))
    }
}

/// Cellwise averages of every component.
pub fn project_p0(mesh: &SimplexMesh, field: &BrokenField) -> BrokenField {
    let n = field.components();
    let dofs = DofMap::new(mesh, Family::P0, n);
    let mut c = vec![0.0; dofs.n_global()];
    for comp in 0..n {
        for k in 0..mesh.n_cells() {
            c[dofs.global(comp, k)] = field.cell_average(mesh, k, comp);
        }
    }
    BrokenField::new(dofs, c)
}

/// Cellwise averages of an analytic function (degree-8 quadrature).
pub fn project_p0_function(mesh: &SimplexMesh, f: &dyn Fn(&Point) -> f64) -> BrokenField {
    let rule = cached_rule(mesh.dim(), ERROR_DEGREE);
    let c = (0..mesh.n_cells())
        .map(|k| {
            let g = mesh.geometry(k);
            rule.integrate_cell(g, |x| f(x)) / g.measure
        })
        .collect();
    BrokenField::new(DofMap::new(mesh, Family::P0, 1), c)
}

/// Largest normal jump of a cellwise vector field over interior facets, sampled at
/// facet quadrature points, and the largest sampled magnitude of the field.
pub fn max_normal_jump(mesh: &SimplexMesh, field: impl Fn(usize, &Point) -> Point) -> (f64, f64) {
    let n = mesh.dim();
    let rule = cached_rule(n - 1, 2);
    let mut jump = 0.0f64;
    let mut size = 0.0f64;
    for f in 0..mesh.n_facets() {
        let fg = mesh.facet_geometry_of(f);
        let cells: Vec<usize> = mesh.facet_cells(f).collect();
        for (x, _) in rule.on_facet(fg) {
            let vals: Vec<Point> = cells.iter().map(|&k| field(k, &x)).collect();
            for v in &vals {
                size = size.max((0..n).map(|d| v[d] * v[d]).sum::<f64>().sqrt());
            }
            if vals.len() == 2 {
                let j: f64 = (0..n).map(|d| (vals[0][d] - vals[1][d]) * fg.normal[d]).sum();
                jump = jump.max(j.abs());
            }
        }
    }
    (jump, size)
}

/// The broken gradient of each ECR component as an RT0 row.
///
/// Fails with [`Error::JumpViolation`] when an interior normal jump exceeds
/// `tolerance` times the gradient's max norm.
pub fn ecr_gradient_as_rt(mesh: &SimplexMesh, u: &BrokenField, tolerance: f64) -> Result<RtField> {
    if u.family() != Family::Ecr {
        return Err(Error::InvalidInput(format!("expected an ECR field, got {}", u.family())));
    }
    let n = mesh.dim();
    let rows = u.components();
    let nf = mesh.n_facets();
    let mut coef = vec![0.0; rows * nf];
    for row in 0..rows {
        let (_, size) = max_normal_jump(mesh, |k, x| u.gradient(mesh, k, row, x));
        for f in 0..nf {
            let fg = mesh.facet_geometry_of(f);
            // grad u . nu is constant on each facet, so the centroid value gives the flux.
            let sides: Vec<f64> = mesh
                .facet_cells(f)
                .map(|k| {
                    let g = u.gradient(mesh, k, row, &fg.centroid);
                    (0..n).map(|d| g[d] * fg.normal[d]).sum::<f64>()
                })
                .collect();
            if sides.len() == 2 {
                let jump = (sides[0] - sides[1]).abs();
                if jump > tolerance * size.max(f64::MIN_POSITIVE) {
                    return Err(Error::JumpViolation {
                        facet: f,
                        jump,
                        tolerance: tolerance * size,
                    });
                }
            }
            let mean = sides.iter().sum::<f64>() / sides.len() as f64;
            coef[row * nf + f] = mean * fg.measure;
        }
    }
    Ok(RtField::new(rows, nf, coef))
}

/// `sum_K int_K |a - b|^2`, `|a|^2`, `|b|^2` and the largest pointwise `|a - b|` and
/// `|a|` over rule points, for cellwise row-stacked vector fields.
#[derive(Debug, Clone, Copy, Default)]
struct Comparison {
    diff: f64,
    norm_a: f64,
    norm_b: f64,
    max_diff: f64,
    max_a: f64,
    max_b: f64,
}

fn compare_fields(
    mesh: &SimplexMesh,
    degree: usize,
    rows: usize,
    f: impl Fn(usize, &Point) -> ([Point; MAX_DIM], [Point; MAX_DIM]),
) -> Comparison {
    let n = mesh.dim();
    let rule = cached_rule(n, degree);
    let mut c = Comparison::default();
    for k in 0..mesh.n_cells() {
        for (x, w) in rule.on_cell(mesh.geometry(k)) {
            let (a, b) = f(k, &x);
            let (mut d2, mut a2, mut b2) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                for d in 0..n {
                    d2 += (a[r][d] - b[r][d]).powi(2);
                    a2 += a[r][d].powi(2);
                    b2 += b[r][d].powi(2);
                }
            }
            c.diff += w * d2;
            c.norm_a += w * a2;
            c.norm_b += w * b2;
            c.max_diff = c.max_diff.max(d2.sqrt());
            c.max_a = c.max_a.max(a2.sqrt());
            c.max_b = c.max_b.max(b2.sqrt());
        }
    }
    c.diff = c.diff.sqrt();
    c.norm_a = c.norm_a.sqrt();
    c.norm_b = c.norm_b.sqrt();
    c
}

fn p0_distance(mesh: &SimplexMesh, a: &BrokenField, b: &BrokenField) -> (f64, f64, f64) {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for c in 0..a.components() {
        for k in 0..mesh.n_cells() {
            let vol = mesh.geometry(k).measure;
            let (x, y) = (a.cell_average(mesh, k, c), b.cell_average(mesh, k, c));
            d += vol * (x - y).powi(2);
            na += vol * x * x;
            nb += vol * y * y;
        }
    }
    (d.sqrt(), na.sqrt(), nb.sqrt())
}

fn single_row(p: Point) -> [Point; MAX_DIM] {
    [p, [0.0; MAX_DIM], [0.0; MAX_DIM]]
}

/// Cellwise divergence of the broken ECR gradient: `-n * factor * bubble coefficient`.
fn ecr_laplacian(mesh: &SimplexMesh, u: &BrokenField, k: usize, c: usize) -> f64 {
    let g = mesh.geometry(k);
    // Only the bubble's quadratic term has a nonzero Laplacian; the nodal facet
    // functions carry -1/(n+1) of it each.
    let d = u.dofs.cell_dofs(k);
    let n = mesh.dim();
    let mut bubble_part = u.coefficients[u.dofs.global(c, d[n + 1])];
    for &j in &d[..=n] {
        bubble_part -= u.coefficients[u.dofs.global(c, j)] / (n + 1) as f64;
    }
    -(n as f64) * bubble_gradient_factor(g) * bubble_part
}

/// Compares the ECR and RT0 Poisson solutions for a piecewise-constant load.
pub fn check_poisson_identity(mesh: &SimplexMesh, load: &ScalarLoad, config: &EquivalenceConfig) -> Result<IdentityReport> {
    require_piecewise_constant(&[load])?;
    let tol = &config.tolerances;
    let u = solve_poisson(mesh, load, Family::Ecr, &config.solver)?;
    let mixed = solve_poisson_mixed(mesh, load, &config.solver)?;
    let mut report = IdentityReport::new("poisson", mesh);

    let cmp = compare_fields(mesh, 2, 1, |k, x| {
        (
            single_row(mixed.sigma.value(mesh, k, 0, x)),
            single_row(u.gradient(mesh, k, 0, x)),
        )
    });
    report.push(ResidualCheck::relative("sigma", cmp.diff, cmp.norm_a, cmp.norm_b, tol.poisson));
    let (d, na, nb) = p0_distance(mesh, &mixed.u, &project_p0(mesh, &u));
    report.push(ResidualCheck::relative("u", d, na, nb, tol.poisson));

    let (jump, size) = max_normal_jump(mesh, |k, x| u.gradient(mesh, k, 0, x));
    report.max_normal_jump = Some(jump);
    report.push(ResidualCheck::scaled("normal_jump", jump, size, tol.jump));

    let f = load.cell_averages(mesh);
    let fmax = f.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let div = (0..mesh.n_cells())
        .map(|k| (ecr_laplacian(mesh, &u, k, 0) + f[k]).abs())
        .fold(0.0, f64::max);
    report.push(ResidualCheck::scaled("divergence", div, fmax, tol.divergence));
    Ok(report)
}

/// Row `i` of `grad_NC u + p id` at `x`.
fn pseudostress_of(mesh: &SimplexMesh, u: &BrokenField, p: &BrokenField, k: usize, x: &Point) -> [Point; MAX_DIM] {
    let mut t = [[0.0; MAX_DIM]; MAX_DIM];
    let pk = p.cell_average(mesh, k, 0);
    for (i, row) in t.iter_mut().enumerate().take(mesh.dim()) {
        *row = u.gradient(mesh, k, i, x);
        row[i] += pk;
    }
    t
}

/// `int tr tau / (n |Omega|)` for a cellwise tensor field (cellwise linear, degree 2 exact).
fn trace_mean(mesh: &SimplexMesh, t: impl Fn(usize, &Point) -> [Point; MAX_DIM]) -> f64 {
    let n = mesh.dim();
    integrate(mesh, 2, |k, x| {
        let v = t(k, x);
        (0..n).map(|i| v[i][i]).sum()
    }) / (n as f64 * mesh.total_measure())
}

fn shift_trace(mut t: [Point; MAX_DIM], s: f64, n: usize) -> [Point; MAX_DIM] {
    for (i, row) in t.iter_mut().enumerate().take(n) {
        row[i] -= s;
    }
    t
}

/// Compares the ECR Stokes solution with the RT0 pseudostress solution.
pub fn check_stokes_identity(mesh: &SimplexMesh, load: &[ScalarLoad], config: &EquivalenceConfig) -> Result<IdentityReport> {
    require_piecewise_constant(&load.iter().collect::<Vec<_>>())?;
    let tol = &config.tolerances;
    let n = mesh.dim();
    let stokes = solve_stokes(mesh, load, Family::Ecr, &config.solver)?;
    let mixed = solve_stokes_mixed(mesh, load, &config.solver)?;
    let (u, p) = (&stokes.velocity, &stokes.pressure);
    let sigma = &mixed.sigma;
    let mut report = IdentityReport::new("stokes", mesh);

    let sigma_at = |k: usize, x: &Point| {
        let mut t = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in t.iter_mut().enumerate().take(n) {
            *row = sigma.value(mesh, k, i, x);
        }
        t
    };
    let primal_at = |k: usize, x: &Point| pseudostress_of(mesh, u, p, k, x);
    let shift_sigma = trace_mean(mesh, sigma_at);
    let shift_primal = trace_mean(mesh, primal_at);
    let cmp = compare_fields(mesh, 2, n, |k, x| {
        (
            shift_trace(sigma_at(k, x), shift_sigma, n),
            shift_trace(primal_at(k, x), shift_primal, n),
        )
    });
    report.push(ResidualCheck::relative("sigma", cmp.diff, cmp.norm_a, cmp.norm_b, tol.stokes));
    let gauge_scale = cmp.max_a.max(cmp.max_b);
    report.push(ResidualCheck::scaled(
        "gauge_shift",
        shift_sigma.abs().max(shift_primal.abs()),
        gauge_scale,
        tol.gauge,
    ));

    // Weak velocity relation against every RT basis tensor (row j, facet f):
    // (u_RT - Pi_0 u_ECR, div tau) = (div_NC u_ECR, tr tau / n).
    let u0 = project_p0(mesh, u);
    let rule = cached_rule(n, 2);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for j in 0..n {
        for f in 0..mesh.n_facets() {
            let (mut lhs, mut rhs, mut size) = (0.0, 0.0, 0.0);
            for k in mesh.facet_cells(f) {
                let i = mesh.local_facet_index(k, f).unwrap();
                let s = mesh.cell_facet_signs(k)[i];
                let g = mesh.geometry(k);
                let urt = mixed.u.cell_average(mesh, k, j);
                lhs += s * (urt - u0.cell_average(mesh, k, j));
                size += (s * urt).abs();
                rhs += rule.integrate_cell(g, |x| {
                    let psi = rt0_eval(g, mesh.cell_facet_signs(k), x).values[i];
                    u.divergence(mesh, k, x) * psi[j] / n as f64
                });
            }
            worst = worst.max((lhs - rhs).abs());
            scale = scale.max(size).max(lhs.abs()).max(rhs.abs());
        }
    }
    report.push(ResidualCheck::scaled("weak_velocity", worst, scale, tol.weak));

    // Cell averages of the broken divergence vanish.
    let mut div_avg = 0.0f64;
    let mut grad_scale = 0.0f64;
    for k in 0..mesh.n_cells() {
        let g = mesh.geometry(k);
        div_avg = div_avg.max((rule.integrate_cell(g, |x| u.divergence(mesh, k, x)) / g.measure).abs());
        for c in 0..n {
            let gr = u.gradient(mesh, k, c, &g.centroid);
            grad_scale = grad_scale.max((0..n).map(|d| gr[d].abs()).fold(0.0, f64::max));
        }
    }
    report.push(ResidualCheck::scaled("mean_divergence", div_avg, grad_scale, tol.divergence));

    let mut jump = 0.0f64;
    let mut size = 0.0f64;
    for row in 0..n {
        let (j, s) = max_normal_jump(mesh, |k, x| pseudostress_of(mesh, u, p, k, x)[row]);
        jump = jump.max(j);
        size = size.max(s);
    }
    report.max_normal_jump = Some(jump);
    report.push(ResidualCheck::scaled("normal_jump", jump, size, tol.jump));
    Ok(report)
}

/// `sigma_RT = grad u_CR - (f_K / n)(x - mid K)` on every cell.
pub fn check_marini_identity(mesh: &SimplexMesh, load: &ScalarLoad, config: &EquivalenceConfig) -> Result<IdentityReport> {
    require_piecewise_constant(&[load])?;
    let n = mesh.dim();
    let u = solve_poisson(mesh, load, Family::Cr, &config.solver)?;
    let mixed = solve_poisson_mixed(mesh, load, &config.solver)?;
    let f = load.cell_averages(mesh);
    let mut report = IdentityReport::new("marini", mesh);
    let cmp = compare_fields(mesh, 4, 1, |k, x| {
        let m = mesh.geometry(k).centroid;
        let mut rhs = u.gradient(mesh, k, 0, x);
        for d in 0..n {
            rhs[d] -= f[k] / n as f64 * (x[d] - m[d]);
        }
        (single_row(mixed.sigma.value(mesh, k, 0, x)), single_row(rhs))
    });
    let tol = config.tolerances.pointwise;
    report.push(ResidualCheck::relative("pointwise", cmp.max_diff, cmp.max_a, cmp.max_b, tol));
    report.push(ResidualCheck::relative("l2", cmp.diff, cmp.norm_a, cmp.norm_b, tol));
    Ok(report)
}

/// `Pi_0 [dev(f (x) (x - M)) (x - M)] = f avg|x - M|^2 - (1/2) avg[(x - M)(x - M)^T] f` in 2D.
pub fn cgs_velocity_correction(mesh: &SimplexMesh, k: usize, f: [f64; 2]) -> [f64; 2] {
    let g = mesh.geometry(k);
    let m = g.centroid;
    // Second moments of a triangle about its centroid: (1/12) sum_i (a_i - M)(a_i - M)^T.
    let mut s = [[0.0; 2]; 2];
    for a in &g.vertices[..3] {
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += (a[i] - m[i]) * (a[j] - m[j]) / 12.0;
            }
        }
    }
    let r2 = s[0][0] + s[1][1];
    [
        f[0] * r2 - 0.5 * (s[0][0] * f[0] + s[0][1] * f[1]),
        f[1] * r2 - 0.5 * (s[1][0] * f[0] + s[1][1] * f[1]),
    ]
}

/// The two CR/RT0 Stokes relations in 2D:
/// `sigma_RT = grad u_CR - (f/2) (x) (x - M) + p_CR id` and
/// `u_RT = Pi_0 u_CR + (1/4) Pi_0(dev(f (x) (x - M))(x - M))`.
pub fn check_cgs_identity(mesh: &SimplexMesh, load: &[ScalarLoad], config: &EquivalenceConfig) -> Result<IdentityReport> {
    if mesh.dim() != 2 {
        return Err(Error::InvalidInput("the CR Stokes relation is two-dimensional".into()));
    }
    require_piecewise_constant(&load.iter().collect::<Vec<_>>())?;
    let tol = config.tolerances.pointwise;
    let stokes = solve_stokes(mesh, load, Family::Cr, &config.solver)?;
    let mixed = solve_stokes_mixed(mesh, load, &config.solver)?;
    let (u, p) = (&stokes.velocity, &stokes.pressure);
    let f: Vec<[f64; 2]> = (0..mesh.n_cells())
        .map(|k| [load[0].cell_average(mesh, k), load[1].cell_average(mesh, k)])
        .collect();
    let mut report = IdentityReport::new("cgs", mesh);

    let sigma_at = |k: usize, x: &Point| {
        let mut t = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in t.iter_mut().enumerate().take(2) {
            *row = mixed.sigma.value(mesh, k, i, x);
        }
        t
    };
    let primal_at = |k: usize, x: &Point| {
        let m = mesh.geometry(k).centroid;
        let mut t = pseudostress_of(mesh, u, p, k, x);
        for (i, row) in t.iter_mut().enumerate().take(2) {
            for d in 0..2 {
                row[d] -= 0.5 * f[k][i] * (x[d] - m[d]);
            }
        }
        t
    };
    // The correction term has zero cell mean, so it leaves the trace mean unchanged.
    let (s1, s2) = (trace_mean(mesh, sigma_at), trace_mean(mesh, primal_at));
    let cmp = compare_fields(mesh, 4, 2, |k, x| (shift_trace(sigma_at(k, x), s1, 2), shift_trace(primal_at(k, x), s2, 2)));
    report.push(ResidualCheck::relative("sigma_pointwise", cmp.max_diff, cmp.max_a, cmp.max_b, tol));
    report.push(ResidualCheck::relative("sigma_l2", cmp.diff, cmp.norm_a, cmp.norm_b, tol));

    let u0 = project_p0(mesh, u);
    let (mut diff, mut max_a, mut max_b) = (0.0f64, 0.0f64, 0.0f64);
    for (k, fk) in f.iter().enumerate() {
        let corr = cgs_velocity_correction(mesh, k, *fk);
        for i in 0..2 {
            let a = mixed.u.cell_average(mesh, k, i);
            let b = u0.cell_average(mesh, k, i) + 0.25 * corr[i];
            diff = diff.max((a - b).abs());
            max_a = max_a.max(a.abs());
            max_b = max_b.max(b.abs());
        }
    }
    report.push(ResidualCheck::relative("velocity_pointwise", diff, max_a, max_b, tol));
    Ok(report)
}

/// Normalized copy with the sign fixed by the first cell whose average is clearly nonzero.
fn align(mesh: &SimplexMesh, scalar: &BrokenField) -> f64 {
    let avgs: Vec<f64> = (0..mesh.n_cells()).map(|k| scalar.cell_average(mesh, k, 0)).collect();
    let max = avgs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    avgs.iter().find(|v| v.abs() > 1e-6 * max).map(|v| v.signum()).unwrap_or(1.0)
}

/// Mixed RT0 eigenpairs against ECR with projected mass.
pub fn check_eigen_equivalence(mesh: &SimplexMesh, k: usize, config: &EquivalenceConfig) -> Result<IdentityReport> {
    let tol = &config.tolerances;
    let want = (k + 1).min(mesh.n_cells());
    if k > want {
        return Err(Error::InvalidInput(format!(
            "{k} eigenpairs requested but only {} finite eigenvalues exist",
            mesh.n_cells()
        )));
    }
    let mixed = solve_eigen(mesh, EigenMethod::RtMixed, want, &config.solver)?;
    let equiv = solve_eigen(mesh, EigenMethod::RtEquivalent, want, &config.solver)?;
    let mut report = IdentityReport::new("eigen", mesh);
    for i in 0..k {
        let (a, b) = (mixed[i].value, equiv[i].value);
        report.push(ResidualCheck::relative(
            &format!("lambda_{}", i + 1),
            (a - b).abs(),
            a.abs(),
            b.abs(),
            tol.eigenvalue,
        ));
        let gap = |j: usize| (mixed[j].value - a).abs() / a.abs();
        let simple = (i == 0 || gap(i - 1) >= 1e-6) && (i + 1 >= want || gap(i + 1) >= 1e-6);
        if !simple {
            report
                .notes
                .push(format!("eigenvalue {} is not simple; vector comparison skipped", i + 1));
            continue;
        }
        let mut u_rt = mixed[i].scalar.clone();
        let mut sigma = mixed[i].flux.clone().expect("mixed modes carry a flux");
        let s = align(mesh, &u_rt);
        u_rt.scale(s);
        sigma.scale(s);
        let mut phi = equiv[i].scalar.clone();
        phi.scale(align(mesh, &phi));
        let (d, na, nb) = p0_distance(mesh, &u_rt, &project_p0(mesh, &phi));
        report.push(ResidualCheck::relative(&format!("u_{}", i + 1), d, na, nb, tol.eigenvector));
        let cmp = compare_fields(mesh, 2, 1, |kk, x| {
            (single_row(sigma.value(mesh, kk, 0, x)), single_row(phi.gradient(mesh, kk, 0, x)))
        });
        report.push(ResidualCheck::relative(
            &format!("sigma_{}", i + 1),
            cmp.diff,
            cmp.norm_a,
            cmp.norm_b,
            tol.eigenvector,
        ));
    }
    Ok(report)
}

/// Per level: `||grad u - grad_NC u_ECR||`, `||grad u - sigma_RT||`, their distance
/// `||grad_NC u_ECR - sigma_RT||`, and both first eigenvalues.
pub fn eigen_error_comparison(
    meshes: &[SimplexMesh],
    levels: &[usize],
    exact: &ExactSolution,
    config: &SolverConfig,
) -> Result<ConvergenceTable> {
    assert_eq!(meshes.len(), levels.len());
    let mut table = ConvergenceTable::new(levels.to_vec(), meshes.iter().map(|m| m.h_max()).collect());
    let (mut e_ecr, mut e_rt, mut dist, mut l_ecr, mut l_rt) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut dofs_ecr, mut dofs_rt) = (vec![], vec![]);
    for mesh in meshes {
        let ecr = solve_eigen(mesh, EigenMethod::Ecr, 1, config)?.remove(0);
        let rt = solve_eigen(mesh, EigenMethod::RtMixed, 1, config)?.remove(0);
        let sigma = rt.flux.as_ref().unwrap();
        e_ecr.push(crate::analysis::broken_h1_error(mesh, &ecr.scalar, &[&*exact.gradient], ERROR_DEGREE));
        e_rt.push(crate::analysis::rt_error(mesh, sigma, 0, &*exact.gradient, ERROR_DEGREE));
        dist.push(gradient_rt_distance(mesh, &ecr.scalar, 0, sigma, 0));
        l_ecr.push(ecr.value);
        l_rt.push(rt.value);
        dofs_ecr.push(ecr.scalar.dofs.n_free());
        dofs_rt.push(mesh.n_facets() + mesh.n_cells());
    }
    table.add_dofs("ecr", dofs_ecr);
    table.add_dofs("rt", dofs_rt);
    table.add_column("grad_error_ecr", e_ecr, true);
    table.add_column("grad_error_rt", e_rt, true);
    table.add_column("ecr_rt_distance", dist, true);
    table.add_column("lambda_ecr", l_ecr, false);
    table.add_column("lambda_rt", l_rt, false);
    Ok(table)
}

/// Neumann fixture `u = x_1^2 + x_2^2`: errors of RT, ECR and CR per level and the
/// constant `beta = ||grad_NC(u - u_CR)|| / h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannWitness {
    pub h: Vec<f64>,
    pub rt_error: Vec<f64>,
    pub ecr_error: Vec<f64>,
    pub cr_error: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NeumannWitness {
    /// `max beta / min beta - 1`.
    pub fn beta_spread(&self) -> f64 {
        let max = self.beta.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.beta.iter().cloned().fold(f64::MAX, f64::min);
        max / min - 1.0
    }
}

pub fn neumann_witness(meshes: &[SimplexMesh], config: &SolverConfig) -> Result<NeumannWitness> {
    let mut w = NeumannWitness {
        h: vec![],
        rt_error: vec![],
        ecr_error: vec![],
        cr_error: vec![],
        beta: vec![],
    };
    for mesh in meshes {
        let exact = ExactSolution::neumann_quadratic(mesh.dim());
        let load = ScalarLoad::Constant(-4.0);
        let flux = exact.boundary_flux();
        let grad = &*exact.gradient;
        let primal_error = |form| -> Result<f64> {
            match solve_neumann(mesh, &load, &flux, form, config)? {
                NeumannSolution::Primal(u) => Ok(crate::analysis::broken_h1_error(mesh, &u, &[grad], ERROR_DEGREE)),
                NeumannSolution::Mixed(_) => unreachable!(),
            }
        };
        let rt = match solve_neumann(mesh, &load, &flux, NeumannForm::MixedRt, config)? {
            NeumannSolution::Mixed(m) => crate::analysis::rt_error(mesh, &m.sigma, 0, grad, ERROR_DEGREE),
            NeumannSolution::Primal(_) => unreachable!(),
        };
        let h = mesh.h_max();
        let cr = primal_error(NeumannForm::PrimalCr)?;
        w.h.push(h);
        w.rt_error.push(rt);
        w.ecr_error.push(primal_error(NeumannForm::PrimalEcr)?);
        w.cr_error.push(cr);
        w.beta.push(cr / h);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_box_mesh, BoxVariant, CellGeometry};

    fn square(m: usize) -> SimplexMesh {
        build_box_mesh(2, m, BoxVariant::Diagonal).unwrap()
    }

    #[test]
    fn p0_projection_basics() {
        let mesh = square(2);
        let c = project_p0_function(&mesh, &|_| 3.5);
        assert!(c.coefficients.iter().all(|&v| (v - 3.5).abs() < 1e-14));
        let tri = SimplexMesh::new(2, vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![vec![0, 1, 2]]).unwrap();
        let x = project_p0_function(&tri, &|p| p[0]);
        assert!((x.coefficients[0] - 1.0 / 3.0).abs() < 1e-15);
        let u = solve_poisson(&mesh, &ScalarLoad::Constant(1.0), Family::Ecr, &SolverConfig::default()).unwrap();
        let once = project_p0(&mesh, &u);
        assert_eq!(project_p0(&mesh, &once), once);
    }

    #[test]
    fn bubble_gradient_is_radial_rt_field() {
        let tri = SimplexMesh::new(2, vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![vec![0, 1, 2]]).unwrap();
        let dofs = DofMap::new(&tri, Family::Ecr, 1);
        let mut c = vec![0.0; dofs.n_global()];
        c[dofs.bubble(0).unwrap()] = 1.0;
        let u = BrokenField::new(dofs, c);
        let rt = ecr_gradient_as_rt(&tri, &u, 1e-10).unwrap();
        for x in [[0.2, 0.3, 0.0], [0.6, 0.1, 0.0]] {
            let v = rt.value(&tri, 0, 0, &x);
            assert!((v[0] + 18.0 * (x[0] - 1.0 / 3.0)).abs() < 1e-13);
            assert!((v[1] + 18.0 * (x[1] - 1.0 / 3.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_round_trip_and_linear_case() {
        let mesh = square(3);
        let u = solve_poisson(&mesh, &ScalarLoad::Constant(2.0), Family::Ecr, &SolverConfig::default()).unwrap();
        let rt = ecr_gradient_as_rt(&mesh, &u, 1e-10).unwrap();
        let rule = cached_rule(2, 4);
        for k in 0..mesh.n_cells() {
            for (x, _) in rule.on_cell(mesh.geometry(k)) {
                let a = rt.value(&mesh, k, 0, &x);
                let b = u.gradient(&mesh, k, 0, &x);
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
        // A global linear function: facet averages are centroid values, bubbles are cell averages.
        let dofs = DofMap::new(&mesh, Family::Ecr, 1);
        let lin = |x: &Point| 0.5 + x[0] - 2.0 * x[1];
        let mut c: Vec<f64> = (0..mesh.n_facets()).map(|f| lin(&mesh.facet_geometry_of(f).centroid)).collect();
        c.extend((0..mesh.n_cells()).map(|k| lin(&mesh.geometry(k).centroid)));
        let u = BrokenField::new(dofs, c);
        let rt = ecr_gradient_as_rt(&mesh, &u, 1e-10).unwrap();
        for k in 0..mesh.n_cells() {
            let (v, radial) = rt.cell_form(&mesh, k, 0);
            assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12);
            assert!(radial.abs() < 1e-12);
        }
    }

    #[test]
    fn non_equivalent_field_is_rejected() {
        let mesh = square(2);
        let u = solve_poisson(&mesh, &ScalarLoad::function(|x| x[0] * x[0]), Family::Cr, &SolverConfig::default()).unwrap();
        assert!(ecr_gradient_as_rt(&mesh, &u, 1e-10).is_err());
        let dofs = DofMap::new(&mesh, Family::Ecr, 1);
        let c: Vec<f64> = (0..dofs.n_global()).map(|i| ((i * 7919) % 13) as f64).collect();
        let err = ecr_gradient_as_rt(&mesh, &BrokenField::new(dofs, c), 1e-10).unwrap_err();
        assert!(matches!(err, Error::JumpViolation { .. }));
    }

    #[test]
    fn zero_load_reports_pass() {
        let mesh = square(2);
        let cfg = EquivalenceConfig::default();
        let r = check_poisson_identity(&mesh, &ScalarLoad::zero(), &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.check("sigma").unwrap().absolute, 0.0);
        let r = check_stokes_identity(&mesh, &[ScalarLoad::zero(), ScalarLoad::zero()], &cfg).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn constant_load_identities() {
        let mesh = square(4);
        let cfg = EquivalenceConfig::default();
        let r = check_poisson_identity(&mesh, &ScalarLoad::Constant(1.0), &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_marini_identity(&mesh, &ScalarLoad::Constant(1.0), &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        let load = [ScalarLoad::Constant(1.0), ScalarLoad::zero()];
        let r = check_stokes_identity(&mesh, &load, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_cgs_identity(&mesh, &load, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn function_loads_are_refused() {
        let mesh = square(2);
        let err = check_poisson_identity(&mesh, &ScalarLoad::function(|x| x[0]), &EquivalenceConfig::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cgs_correction_matches_quadrature() {
        let mesh = SimplexMesh::new(
            2,
            vec![[0.1, 0.2, 0.0], [1.3, 0.0, 0.0], [0.4, 0.9, 0.0]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let f = [0.7, -1.9];
        let g: &CellGeometry = mesh.geometry(0);
        let m = g.centroid;
        let rule = cached_rule(2, 4);
        let mut q = [0.0; 2];
        for (x, w) in rule.on_cell(g) {
            let r = [x[0] - m[0], x[1] - m[1]];
            let fr = f[0] * r[0] + f[1] * r[1];
            let rr = r[0] * r[0] + r[1] * r[1];
            // dev(f r^T) r = f |r|^2 - (1/2)(f . r) r
            for i in 0..2 {
                q[i] += w * (f[i] * rr - 0.5 * fr * r[i]) / g.measure;
            }
        }
        let c = cgs_velocity_correction(&mesh, 0, f);
        assert!((c[0] - q[0]).abs() < 1e-12 && (c[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn eigen_forms_agree_on_two_triangles() {
        let mesh = square(1);
        let r = check_eigen_equivalence(&mesh, 1, &EquivalenceConfig::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(check_eigen_equivalence(&mesh, 3, &EquivalenceConfig::default()).is_err());
    }
}
