use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, ValueEnum};
use ecrt::analysis::ConvergenceTable;
use ecrt::assembly::ScalarLoad;
use ecrt::equivalence::{EquivalenceConfig, Tolerances};
use ecrt::linsolve::SolverConfig;
use ecrt::mesh::{build_box_mesh, read_mesh, refine_uniform, BoxVariant, SimplexMesh};
use ecrt::problems::ExactSolution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bad flags, files or combinations; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Coarse {
    Diagonal,
    Crisscross,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Space dimension of the generated unit box (ignored with --mesh-file).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Split of the coarse squares (2D only).
    #[arg(long, value_enum, default_value_t = Coarse::Diagonal)]
    pub coarse: Coarse,
    /// Boxes per axis of the coarse mesh.
    #[arg(long, default_value_t = 1)]
    pub subdivisions: usize,
    /// Coarse mesh in the plain-text mesh format instead of a generated box.
    #[arg(long)]
    pub mesh_file: Option<PathBuf>,
    /// Number of refinement levels to run (command-specific default).
    #[arg(long)]
    pub levels: Option<usize>,
    /// First level to run.
    #[arg(long, default_value_t = 0)]
    pub start_level: usize,
    /// Seed for random loads.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV table destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// JSON report destination.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Directory for two-column (h, value) files, one per table column.
    #[arg(long)]
    pub emit_plot: Option<PathBuf>,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ToleranceArgs {
    /// Relative residual of the linear solves [default: 1e-12].
    #[arg(long)]
    pub solver_tol: Option<f64>,
    /// Poisson identity residuals [default: 1e-9].
    #[arg(long)]
    pub tol_poisson: Option<f64>,
    /// Pseudostress identity residual [default: 1e-8].
    #[arg(long)]
    pub tol_stokes: Option<f64>,
    /// Weak velocity relation [default: 1e-8].
    #[arg(long)]
    pub tol_weak: Option<f64>,
    /// Pointwise CR relations [default: 1e-9].
    #[arg(long)]
    pub tol_pointwise: Option<f64>,
    /// Interior normal jumps [default: 1e-10].
    #[arg(long)]
    pub tol_jump: Option<f64>,
    /// Cellwise divergence [default: 1e-11].
    #[arg(long)]
    pub tol_divergence: Option<f64>,
    /// Trace-mean gauge shift [default: 1e-10].
    #[arg(long)]
    pub tol_gauge: Option<f64>,
    /// Eigenvalue agreement [default: 1e-10].
    #[arg(long)]
    pub tol_eigenvalue: Option<f64>,
    /// Eigenvector agreement [default: 1e-8].
    #[arg(long)]
    pub tol_eigenvector: Option<f64>,
}

impl CommonArgs {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mesh_file.is_none() {
            if !(2..=3).contains(&self.dim) {
                return Err(ConfigError(format!("--dim must be 2 or 3, got {}", self.dim)));
            }
            if self.subdivisions == 0 {
                return Err(ConfigError("--subdivisions must be positive".into()));
            }
            if self.dim == 3 && self.coarse == Coarse::Crisscross {
                return Err(ConfigError("the criss-cross split exists only in 2D".into()));
            }
        }
        if self.levels == Some(0) {
            return Err(ConfigError("--levels must be positive".into()));
        }
        let t = self.equivalence_config();
        let s = &t.tolerances;
        for (name, v) in [
            ("solver-tol", t.solver.tolerance),
            ("tol-poisson", s.poisson),
            ("tol-stokes", s.stokes),
            ("tol-weak", s.weak),
            ("tol-pointwise", s.pointwise),
            ("tol-jump", s.jump),
            ("tol-divergence", s.divergence),
            ("tol-gauge", s.gauge),
            ("tol-eigenvalue", s.eigenvalue),
            ("tol-eigenvector", s.eigenvector),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError(format!("--{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        let mut s = SolverConfig {
            seed: self.seed,
            ..SolverConfig::default()
        };
        if let Some(t) = self.tolerances.solver_tol {
            s.tolerance = t;
        }
        s
    }

    pub fn equivalence_config(&self) -> EquivalenceConfig {
        let t = &self.tolerances;
        let d = Tolerances::default();
        EquivalenceConfig {
            solver: self.solver(),
            tolerances: Tolerances {
                poisson: t.tol_poisson.unwrap_or(d.poisson),
                stokes: t.tol_stokes.unwrap_or(d.stokes),
                weak: t.tol_weak.unwrap_or(d.weak),
                pointwise: t.tol_pointwise.unwrap_or(d.pointwise),
                jump: t.tol_jump.unwrap_or(d.jump),
                divergence: t.tol_divergence.unwrap_or(d.divergence),
                gauge: t.tol_gauge.unwrap_or(d.gauge),
                eigenvalue: t.tol_eigenvalue.unwrap_or(d.eigenvalue),
                eigenvector: t.tol_eigenvector.unwrap_or(d.eigenvector),
            },
        }
    }

    pub fn generated(&self) -> bool {
        self.mesh_file.is_none()
    }

    pub fn coarse_mesh(&self) -> anyhow::Result<SimplexMesh> {
        match &self.mesh_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
                read_mesh(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
            }
            None => {
                let variant = match self.coarse {
                    Coarse::Diagonal => BoxVariant::Diagonal,
                    Coarse::Crisscross => BoxVariant::CrissCross,
                };
                build_box_mesh(self.dim, self.subdivisions, variant).map_err(|e| config_error(e.to_string()))
            }
        }
    }

    /// The coarse mesh and the requested levels.
    pub fn hierarchy(&self, default_levels: usize) -> anyhow::Result<(SimplexMesh, Vec<(usize, SimplexMesh)>)> {
        let coarse = self.coarse_mesh()?;
        let count = self.levels.unwrap_or(default_levels);
        let mut out = vec![];
        let mut mesh = coarse.clone();
        for level in 0..self.start_level + count {
            if level >= self.start_level {
                out.push((level, mesh.clone()));
            }
            if level + 1 < self.start_level + count {
                mesh = refine_uniform(&mesh);
            }
        }
        Ok((coarse, out))
    }

    /// `# key=value` lines recording the run's tolerances.
    pub fn header(&self, command: &str) -> String {
        let c = self.equivalence_config();
        let t = &c.tolerances;
        format!(
            "# ecrt {command}\n# solver_tol={:e} poisson={:e} stokes={:e} weak={:e} pointwise={:e} jump={:e} divergence={:e} gauge={:e} eigenvalue={:e} eigenvector={:e} seed={}\n",
            c.solver.tolerance,
            t.poisson,
            t.stokes,
            t.weak,
            t.pointwise,
            t.jump,
            t.divergence,
            t.gauge,
            t.eigenvalue,
            t.eigenvector,
            self.seed
        )
    }

    pub fn tolerances_json(&self) -> serde_json::Value {
        let c = self.equivalence_config();
        let mut v = serde_json::to_value(&c.tolerances).unwrap();
        v["solver"] = c.solver.tolerance.into();
        v
    }

    /// Writes the CSV (to `--output` or stdout) and the plot files.
    pub fn emit_table(&self, command: &str, table: &ConvergenceTable) -> anyhow::Result<()> {
        let text = format!("{}{}", self.header(command), table.to_csv());
        match &self.output {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{text}"),
        }
        if let Some(dir) = &self.emit_plot {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for name in table.column_names() {
                let data = table.plot_data(&name).unwrap();
                let path = dir.join(format!("{name}.dat"));
                std::fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Ok(())
    }

    pub fn emit_json(&self, command: &str, reports: serde_json::Value) -> anyhow::Result<()> {
        let doc = serde_json::json!({
            "command": command,
            "tolerances": self.tolerances_json(),
            "seed": self.seed,
            "reports": reports,
        });
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        match &self.json {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{text}"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadSpec {
    Const(Vec<f64>),
    Sine,
    Random,
    Table(Vec<f64>),
}

impl FromStr for LoadSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(v) = s.strip_prefix("const:") {
            let values: Result<Vec<f64>, _> = v.split(',').map(|x| x.trim().parse::<f64>()).collect();
            let values = values.map_err(|e| format!("bad constant in {s:?}: {e}"))?;
            if values.iter().any(|x| !x.is_finite()) {
                return Err(format!("non-finite constant in {s:?}"));
            }
            return Ok(LoadSpec::Const(values));
        }
        if let Some(path) = s.strip_prefix("table:") {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
            let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
            return values.map(LoadSpec::Table).map_err(|e| format!("bad value in {path}: {e}"));
        }
        match s {
            "sine" => Ok(LoadSpec::Sine),
            "random" => Ok(LoadSpec::Random),
            _ => Err(format!("unknown load {s:?}; expected const:c, sine, random or table:PATH")),
        }
    }
}

impl LoadSpec {
    /// Component `c` of the load on `mesh` at `level`.
    pub fn component(
        &self,
        coarse: &SimplexMesh,
        mesh: &SimplexMesh,
        level: usize,
        c: usize,
        seed: u64,
    ) -> anyhow::Result<ScalarLoad> {
        Ok(match self {
            LoadSpec::Const(v) => ScalarLoad::Constant(v.get(c).copied().unwrap_or(0.0)),
            LoadSpec::Sine if c == 0 => ExactSolution::sine(mesh.dim()).scalar_load(),
            LoadSpec::Sine => ScalarLoad::zero(),
            LoadSpec::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add((level * 8 + c) as u64));
                ScalarLoad::Cellwise((0..mesh.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
            LoadSpec::Table(_) if c > 0 => ScalarLoad::zero(),
            LoadSpec::Table(v) => {
                if v.len() != coarse.n_cells() {
                    return Err(config_error(format!(
                        "load table has {} values but the coarse mesh has {} cells",
                        v.len(),
                        coarse.n_cells()
                    )));
                }
                let values = (0..mesh.n_cells())
                    .map(|k| {
                        coarse
                            .locate(&mesh.geometry(k).centroid)
                            .map(|p| v[p])
                            .ok_or_else(|| config_error(format!("cell {k} lies outside the coarse mesh")))
                    })
                    .collect::<anyhow::Result<Vec<f64>>>()?;
                ScalarLoad::Cellwise(values)
            }
        })
    }

    pub fn vector(&self, coarse: &SimplexMesh, mesh: &SimplexMesh, level: usize, seed: u64) -> anyhow::Result<Vec<ScalarLoad>> {
        if let LoadSpec::Const(v) = self {
            if v.len() > mesh.dim() {
                return Err(config_error(format!("{} load components for a {}D mesh", v.len(), mesh.dim())));
            }
        }
        (0..mesh.dim()).map(|c| self.component(coarse, mesh, level, c, seed)).collect()
    }
}

/// Comma-separated element list.
pub fn parse_list<T: FromStr<Err = String>>(s: &str) -> Result<Vec<T>, String> {
    let mut out = vec![];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.push(part.parse()?);
    }
    if out.is_empty() {
        return Err("empty element list".into());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Cr,
    Ecr,
    Rt,
}

impl FromStr for Element {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cr" => Ok(Element::Cr),
            "ecr" => Ok(Element::Ecr),
            "rt" | "rt0" => Ok(Element::Rt),
            _ => Err(format!("unknown element {s:?}; expected cr, ecr or rt")),
        }
    }
}

impl Element {
    pub fn name(self) -> &'static str {
        match self {
            Element::Cr => "cr",
            Element::Ecr => "ecr",
            Element::Rt => "rt",
        }
    }
}
