use std::f64::consts::PI;

use clap::{Args, ValueEnum};
use ecrt::analysis::{
    broken_h1_error, gradient_best_approximation, l2_error, osc, rt_error, ConvergenceTable,
    ERROR_DEGREE,
};
use ecrt::assembly::{Family, ScalarLoad};
use ecrt::condense::solve_ecr_condensed;
use ecrt::equivalence::{
    check_cgs_identity, check_eigen_equivalence, check_marini_identity, check_poisson_identity, check_stokes_identity,
    eigen_error_comparison, neumann_witness, IdentityReport,
};
use ecrt::mesh::{Point, SimplexMesh};
use ecrt::problems::{
    solve_eigen, solve_poisson, solve_poisson_mixed, solve_stokes, solve_stokes_mixed, BrokenField, EigenMethod,
    ExactSolution,
};

use crate::config::{config_error, parse_list, CommonArgs, Element, LoadSpec};

fn zero_gradient(_: &Point) -> Point {
    [0.0; 3]
}

fn zero(_: &Point) -> f64 {
    0.0
}

fn table_for(levels: &[(usize, SimplexMesh)]) -> ConvergenceTable {
    ConvergenceTable::new(
        levels.iter().map(|(l, _)| *l).collect(),
        levels.iter().map(|(_, m)| m.h_max()).collect(),
    )
}

fn dof_count(mesh: &SimplexMesh, e: Element) -> usize {
    match e {
        Element::Cr => mesh.interior_facets().count(),
        Element::Ecr => mesh.interior_facets().count() + mesh.n_cells(),
        Element::Rt => mesh.n_facets() + mesh.n_cells(),
    }
}

fn elements(s: &str) -> anyhow::Result<Vec<Element>> {
    parse_list(s).map_err(config_error)
}

fn solve_primal(
    mesh: &SimplexMesh,
    load: &ScalarLoad,
    e: Element,
    condensed: bool,
    common: &CommonArgs,
) -> anyhow::Result<BrokenField> {
    let cfg = common.solver();
    Ok(match e {
        Element::Ecr if condensed => solve_ecr_condensed(mesh, load, &cfg)?.ecr,
        Element::Ecr => solve_poisson(mesh, load, Family::Ecr, &cfg)?,
        Element::Cr => solve_poisson(mesh, load, Family::Cr, &cfg)?,
        Element::Rt => unreachable!(),
    })
}

#[derive(Args, Debug)]
pub struct PoissonArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Load; with `sine` the table holds errors against the exact solution.
    #[arg(long, default_value = "sine")]
    pub rhs: LoadSpec,
    /// Comma-separated subset of cr, ecr, rt.
    #[arg(long, default_value = "cr,ecr,rt")]
    pub elements: String,
    /// Solve ECR by static condensation of the cell bubbles.
    #[arg(long)]
    pub condensed: bool,
}

/// Per level and element: broken H1 and L2 errors for the sine load, norms otherwise.
pub fn poisson(args: &PoissonArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    let els = elements(&args.elements)?;
    let (coarse, levels) = common.hierarchy(3)?;
    let exact = (args.rhs == LoadSpec::Sine).then(|| ExactSolution::sine(coarse.dim()));
    let (grad, u): (&dyn Fn(&Point) -> Point, &dyn Fn(&Point) -> f64) = match &exact {
        Some(e) => (&*e.gradient, &*e.u),
        None => (&zero_gradient, &zero),
    };
    let (h1_name, l2_name) = if exact.is_some() { ("h1_error", "l2_error") } else { ("h1_norm", "l2_norm") };
    let mut table = table_for(&levels);
    for &e in &els {
        let (mut h1, mut l2) = (vec![], vec![]);
        for (level, mesh) in &levels {
            let load = args.rhs.component(&coarse, mesh, *level, 0, common.seed)?;
            if e == Element::Rt {
                let m = solve_poisson_mixed(mesh, &load, &common.solver())?;
                h1.push(rt_error(mesh, &m.sigma, 0, grad, ERROR_DEGREE));
                l2.push(l2_error(mesh, &m.u, &[u], ERROR_DEGREE));
            } else {
                let f = solve_primal(mesh, &load, e, args.condensed, common)?;
                h1.push(broken_h1_error(mesh, &f, &[grad], ERROR_DEGREE));
                l2.push(l2_error(mesh, &f, &[u], ERROR_DEGREE));
            }
        }
        table.add_dofs(e.name(), levels.iter().map(|(_, m)| dof_count(m, e)).collect());
        table.add_column(&format!("{h1_name}_{}", e.name()), h1, exact.is_some());
        table.add_column(&format!("{l2_name}_{}", e.name()), l2, exact.is_some());
    }
    common.emit_table("poisson", &table)?;
    Ok(true)
}

#[derive(Args, Debug)]
pub struct StokesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Load, componentwise for const (const:1,0); scalar kinds fill the first component.
    #[arg(long, default_value = "const:1")]
    pub rhs: LoadSpec,
    /// Comma-separated subset of cr, ecr, rt (pseudostress).
    #[arg(long, default_value = "cr,ecr,rt")]
    pub elements: String,
}

/// Per level and element: `||grad u||` (or `||sigma||`) and the pressure or velocity L2 norm.
pub fn stokes(args: &StokesArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    let els = elements(&args.elements)?;
    let (coarse, levels) = common.hierarchy(3)?;
    let n = coarse.dim();
    let zeros_g: Vec<&dyn Fn(&Point) -> Point> = vec![&zero_gradient; n];
    let zeros: Vec<&dyn Fn(&Point) -> f64> = vec![&zero; n];
    let mut table = table_for(&levels);
    for &e in &els {
        let (mut a, mut b) = (vec![], vec![]);
        for (level, mesh) in &levels {
            let load = args.rhs.vector(&coarse, mesh, *level, common.seed)?;
            if e == Element::Rt {
                let m = solve_stokes_mixed(mesh, &load, &common.solver())?;
                let s: f64 = (0..n).map(|r| rt_error(mesh, &m.sigma, r, &zero_gradient, ERROR_DEGREE).powi(2)).sum();
                a.push(s.sqrt());
                b.push(l2_error(mesh, &m.u, &zeros, ERROR_DEGREE));
            } else {
                let family = if e == Element::Ecr { Family::Ecr } else { Family::Cr };
                let s = solve_stokes(mesh, &load, family, &common.solver())?;
                a.push(broken_h1_error(mesh, &s.velocity, &zeros_g, ERROR_DEGREE));
                b.push(l2_error(mesh, &s.pressure, &[&zero], ERROR_DEGREE));
            }
        }
        let dofs: Vec<usize> = levels.iter().map(|(_, m)| n * dof_count(m, e)).collect();
        table.add_dofs(e.name(), dofs);
        if e == Element::Rt {
            table.add_column("sigma_norm_rt", a, false);
            table.add_column("velocity_norm_rt", b, false);
        } else {
            table.add_column(&format!("h1_norm_{}", e.name()), a, false);
            table.add_column(&format!("pressure_norm_{}", e.name()), b, false);
        }
    }
    common.emit_table("stokes", &table)?;
    Ok(true)
}

#[derive(Args, Debug)]
pub struct EigenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of eigenvalues.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Comma-separated subset of cr, ecr, rt, rt-equiv.
    #[arg(long, default_value = "cr,ecr")]
    pub elements: String,
}

/// Eigenvalue table; fails when an ECR eigenvalue exceeds the matching CR one.
pub fn eigen(args: &EigenArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    if args.k == 0 {
        return Err(config_error("--k must be positive"));
    }
    let methods = args
        .elements
        .split(',')
        .map(|s| s.trim().parse::<EigenMethod>().map_err(|e| config_error(e.to_string())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (coarse, levels) = common.hierarchy(1)?;
    // Closed-form first eigenvalue on the unit box.
    let exact = common.generated().then(|| coarse.dim() as f64 * PI * PI);
    let mut table = table_for(&levels);
    let mut values = vec![];
    for &m in &methods {
        let mut per_level = vec![];
        for (_, mesh) in &levels {
            let modes = solve_eigen(mesh, m, args.k, &common.solver())?;
            per_level.push(modes.iter().map(|p| p.value).collect::<Vec<f64>>());
        }
        for i in 0..args.k {
            let col: Vec<f64> = per_level.iter().map(|v| v.get(i).copied().unwrap_or(f64::NAN)).collect();
            table.add_column(&format!("lambda{}_{}", i + 1, m.name()), col, false);
        }
        if let Some(ex) = exact {
            let err = per_level.iter().map(|v| (v[0] - ex).abs()).collect();
            table.add_column(&format!("lambda1_error_{}", m.name()), err, levels.len() > 1);
        }
        values.push((m, per_level));
    }
    common.emit_table("eigen", &table)?;

    let find = |m: EigenMethod| values.iter().find(|(x, _)| *x == m).map(|(_, v)| v);
    let mut ok = true;
    if let (Some(e), Some(c)) = (find(EigenMethod::Ecr), find(EigenMethod::Cr)) {
        for (li, (ve, vc)) in e.iter().zip(c).enumerate() {
            for (i, (a, b)) in ve.iter().zip(vc).enumerate() {
                if a > &(b * (1.0 + 1e-12)) {
                    eprintln!("level {}: ecr eigenvalue {} = {a} exceeds cr {b}", levels[li].0, i + 1);
                    ok = false;
                }
            }
        }
        if let Some(ex) = exact {
            for (li, (ve, vc)) in e.iter().zip(c).enumerate() {
                let status = if ve[0] <= ex && ex <= vc[0] { "brackets" } else { "does not bracket" };
                eprintln!("level {}: [{:.10}, {:.10}] {status} {:.10}", levels[li].0, ve[0], vc[0], ex);
            }
        }
    }
    Ok(ok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Identity {
    /// ECR and RT0 Poisson.
    Poisson,
    /// ECR Stokes and RT0 pseudostress.
    Stokes,
    /// CR and RT0 Poisson fluxes.
    Marini,
    /// CR Stokes and RT0 pseudostress (2D).
    Cgs,
    /// RT0 mixed eigenpairs and ECR with projected mass.
    Eigen,
}

#[derive(Args, Debug)]
pub struct EquivArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Identity::Poisson)]
    pub problem: Identity,
    /// Load; non-constant loads are replaced by their cell averages.
    #[arg(long, default_value = "const:1")]
    pub rhs: LoadSpec,
    /// Eigenpairs compared by the eigen check.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

fn projected(load: ScalarLoad, mesh: &SimplexMesh) -> ScalarLoad {
    if load.is_piecewise_constant() {
        load
    } else {
        ScalarLoad::Cellwise(load.cell_averages(mesh))
    }
}

/// Runs one identity check per level; fails if any residual exceeds its tolerance.
pub fn equiv(args: &EquivArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    let cfg = common.equivalence_config();
    let (coarse, levels) = common.hierarchy(3)?;
    if args.problem == Identity::Cgs && coarse.dim() != 2 {
        return Err(config_error("the cgs check is two-dimensional"));
    }
    if args.problem == Identity::Eigen && args.k == 0 {
        return Err(config_error("--k must be positive"));
    }
    if matches!(args.rhs, LoadSpec::Sine) && args.problem != Identity::Eigen {
        eprintln!("warning: projecting the load onto piecewise constants");
    }
    let mut reports: Vec<IdentityReport> = vec![];
    for (level, mesh) in &levels {
        let scalar = || -> anyhow::Result<ScalarLoad> {
            Ok(projected(args.rhs.component(&coarse, mesh, *level, 0, common.seed)?, mesh))
        };
        let vector = || -> anyhow::Result<Vec<ScalarLoad>> {
            Ok(args
                .rhs
                .vector(&coarse, mesh, *level, common.seed)?
                .into_iter()
                .map(|l| projected(l, mesh))
                .collect())
        };
        let report = match args.problem {
            Identity::Poisson => check_poisson_identity(mesh, &scalar()?, &cfg)?,
            Identity::Marini => check_marini_identity(mesh, &scalar()?, &cfg)?,
            Identity::Stokes => check_stokes_identity(mesh, &vector()?, &cfg)?,
            Identity::Cgs => check_cgs_identity(mesh, &vector()?, &cfg)?,
            Identity::Eigen => {
                if args.k > mesh.n_cells() {
                    return Err(config_error(format!(
                        "--k {} exceeds the {} finite eigenvalues of level {level}",
                        args.k,
                        mesh.n_cells()
                    )));
                }
                check_eigen_equivalence(mesh, args.k, &cfg)?
            }
        };
        reports.push(report.with_level(*level));
    }
    let pass = reports.iter().all(|r| r.pass);
    for r in reports.iter().filter(|r| !r.pass) {
        for c in r.checks.iter().filter(|c| !c.pass) {
            eprintln!(
                "level {}: {} {} relative residual {:e} exceeds {:e}",
                r.level.unwrap_or(0),
                r.identity,
                c.name,
                c.relative,
                c.tolerance
            );
        }
    }
    if let Some(path) = &common.output {
        let mut text = common.header("equiv");
        text.push_str("level,identity,check,absolute,relative,tolerance,pass\n");
        for r in &reports {
            for c in &r.checks {
                text.push_str(&format!(
                    "{},{},{},{:.16e},{:.16e},{:.16e},{}\n",
                    r.level.unwrap_or(0),
                    r.identity,
                    c.name,
                    c.absolute,
                    c.relative,
                    c.tolerance,
                    c.pass
                ));
            }
        }
        std::fs::write(path, text)?;
    }
    common.emit_json("equiv", serde_json::to_value(&reports)?)?;
    Ok(pass)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Solution {
    /// Poisson with u = prod sin(pi x_i).
    Sine,
    /// First Dirichlet eigenpair of the unit box: ECR against the RT0 mixed method.
    Eigen,
}

#[derive(Args, Debug)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Solution::Sine)]
    pub solution: Solution,
    /// Comma-separated subset of cr, ecr, rt (sine solution only).
    #[arg(long, default_value = "cr,ecr")]
    pub elements: String,
    /// Solve ECR by static condensation of the cell bubbles.
    #[arg(long)]
    pub condensed: bool,
}

pub fn convergence(args: &ConvergenceArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    let (coarse, levels) = common.hierarchy(4)?;
    let dim = coarse.dim();
    let table = match args.solution {
        Solution::Eigen => {
            let meshes: Vec<SimplexMesh> = levels.iter().map(|(_, m)| m.clone()).collect();
            let ids: Vec<usize> = levels.iter().map(|(l, _)| *l).collect();
            let mut t = eigen_error_comparison(&meshes, &ids, &ExactSolution::first_eigenfunction(dim), &common.solver())?;
            let exact = dim as f64 * PI * PI;
            for name in ["lambda_ecr", "lambda_rt"] {
                let errs = t.column(name).unwrap().iter().map(|v| (v - exact).abs()).collect();
                t.add_column(&format!("{name}_error"), errs, true);
            }
            t
        }
        Solution::Sine => {
            let exact = ExactSolution::sine(dim);
            let load = exact.scalar_load();
            let mut t = table_for(&levels);
            for &e in &elements(&args.elements)? {
                let (mut h1, mut l2) = (vec![], vec![]);
                for (_, mesh) in &levels {
                    if e == Element::Rt {
                        let m = solve_poisson_mixed(mesh, &load, &common.solver())?;
                        h1.push(rt_error(mesh, &m.sigma, 0, &*exact.gradient, ERROR_DEGREE));
                        l2.push(l2_error(mesh, &m.u, &[&*exact.u], ERROR_DEGREE));
                    } else {
                        let f = solve_primal(mesh, &load, e, args.condensed, common)?;
                        h1.push(broken_h1_error(mesh, &f, &[&*exact.gradient], ERROR_DEGREE));
                        l2.push(l2_error(mesh, &f, &[&*exact.u], ERROR_DEGREE));
                    }
                }
                t.add_dofs(e.name(), levels.iter().map(|(_, m)| dof_count(m, e)).collect());
                t.add_column(&format!("h1_error_{}", e.name()), h1, true);
                t.add_column(&format!("l2_error_{}", e.name()), l2, true);
            }
            let best = levels.iter().map(|(_, m)| gradient_best_approximation(m, &*exact.gradient)).collect();
            t.add_column("best_approximation", best, true);
            t.add_column("osc", levels.iter().map(|(_, m)| osc(m, &load)).collect(), true);
            t
        }
    };
    common.emit_table("convergence", &table)?;
    Ok(true)
}

#[derive(Args, Debug)]
pub struct NeumannArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Largest accepted spread max(beta)/min(beta) - 1.
    #[arg(long, default_value_t = 0.2)]
    pub beta_spread: f64,
}

/// Exactness of RT0 and ECR and the CR lower-bound constant beta, per level.
pub fn neumann(args: &NeumannArgs) -> anyhow::Result<bool> {
    let common = &args.common;
    let (coarse, levels) = common.hierarchy(4)?;
    if coarse.dim() != 2 {
        return Err(config_error("the Neumann fixture is two-dimensional"));
    }
    let meshes: Vec<SimplexMesh> = levels.iter().map(|(_, m)| m.clone()).collect();
    let w = neumann_witness(&meshes, &common.solver())?;
    let mut table = table_for(&levels);
    table.add_column("rt_error", w.rt_error.clone(), false);
    table.add_column("ecr_error", w.ecr_error.clone(), false);
    table.add_column("cr_error", w.cr_error.clone(), true);
    table.add_column("beta", w.beta.clone(), false);
    common.emit_table("neumann", &table)?;

    let tol = common.equivalence_config().tolerances.poisson;
    let mut ok = true;
    for (i, (l, _)) in levels.iter().enumerate() {
        for (name, e) in [("rt", w.rt_error[i]), ("ecr", w.ecr_error[i])] {
            if e > tol {
                eprintln!("level {l}: {name} gradient error {e:e} exceeds {tol:e}");
                ok = false;
            }
        }
    }
    if w.beta.iter().any(|&b| b <= 0.0) {
        eprintln!("beta is not positive on every level");
        ok = false;
    }
    if w.beta.len() > 1 && w.beta_spread() > args.beta_spread {
        eprintln!("beta spread {:e} exceeds {}", w.beta_spread(), args.beta_spread);
        ok = false;
    }
    Ok(ok)
}
