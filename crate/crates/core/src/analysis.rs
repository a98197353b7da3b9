//! Error norms, data oscillation, rate fitting and convergence tables.

use serde::{Deserialize, Serialize};

use crate::assembly::ScalarLoad;
use crate::mesh::{Point, SimplexMesh};
use crate::problems::{BrokenField, RtField};
use crate::quadrature::cached_rule;

/// Quadrature degree for errors against analytic functions.
pub const ERROR_DEGREE: usize = 8;

/// `sum_K int_K g(k, x) dx` with a rule of the given degree.
pub fn integrate(mesh: &SimplexMesh, degree: usize, g: impl Fn(usize, &Point) -> f64) -> f64 {
    let rule = cached_rule(mesh.dim(), degree);
    (0..mesh.n_cells())
        .map(|k| rule.integrate_cell(mesh.geometry(k), |x| g(k, x)))
        .sum()
}

/// `||u - u_h||` summed over the components of `field`.
pub fn l2_error(mesh: &SimplexMesh, field: &BrokenField, exact: &[&dyn Fn(&Point) -> f64], degree: usize) -> f64 {
    assert_eq!(exact.len(), field.components());
    integrate(mesh, degree, |k, x| {
        exact
            .iter()
            .enumerate()
            .map(|(c, u)| (u(x) - field.value(mesh, k, c, x)).powi(2))
            .sum()
    })
    .sqrt()
}

/// `||grad u - grad_NC u_h||` summed over components.
pub fn broken_h1_error(
    mesh: &SimplexMesh,
    field: &BrokenField,
    exact_gradient: &[&dyn Fn(&Point) -> Point],
    degree: usize,
) -> f64 {
    assert_eq!(exact_gradient.len(), field.components());
    let n = mesh.dim();
    integrate(mesh, degree, |k, x| {
        exact_gradient
            .iter()
            .enumerate()
            .map(|(c, g)| {
                let e = g(x);
                let h = field.gradient(mesh, k, c, x);
                (0..n).map(|d| (e[d] - h[d]).powi(2)).sum::<f64>()
            })
            .sum()
    })
    .sqrt()
}

/// `||grad u - sigma||` for one RT0 row.
pub fn rt_error(mesh: &SimplexMesh, sigma: &RtField, row: usize, exact_gradient: &dyn Fn(&Point) -> Point, degree: usize) -> f64 {
    let n = mesh.dim();
    integrate(mesh, degree, |k, x| {
        let e = exact_gradient(x);
        let s = sigma.value(mesh, k, row, x);
        (0..n).map(|d| (e[d] - s[d]).powi(2)).sum()
    })
    .sqrt()
}

/// `||grad_NC u_h - sigma||` for one component/row; both are cellwise linear.
pub fn gradient_rt_distance(mesh: &SimplexMesh, field: &BrokenField, component: usize, sigma: &RtField, row: usize) -> f64 {
    let n = mesh.dim();
    integrate(mesh, 2, |k, x| {
        let g = field.gradient(mesh, k, component, x);
        let s = sigma.value(mesh, k, row, x);
        (0..n).map(|d| (g[d] - s[d]).powi(2)).sum()
    })
    .sqrt()
}

/// `osc(f)^2 = sum_K h_K^2 ||f - Pi_0 f||^2_K` with `h_K` the cell diameter.
pub fn osc(mesh: &SimplexMesh, load: &ScalarLoad) -> f64 {
    if load.is_piecewise_constant() {
        return 0.0;
    }
    let rule = cached_rule(mesh.dim(), ERROR_DEGREE);
    (0..mesh.n_cells())
        .map(|k| {
            let g = mesh.geometry(k);
            let mean = load.cell_average(mesh, k);
            g.diameter.powi(2) * rule.integrate_cell(g, |x| (load.value(k, x) - mean).powi(2))
        })
        .sum::<f64>()
        .sqrt()
}

/// `||grad u - Pi_0 grad u||` from an analytic gradient.
pub fn gradient_best_approximation(mesh: &SimplexMesh, exact_gradient: &dyn Fn(&Point) -> Point) -> f64 {
    let n = mesh.dim();
    let rule = cached_rule(n, ERROR_DEGREE);
    (0..mesh.n_cells())
        .map(|k| {
            let g = mesh.geometry(k);
            let mut mean = [0.0; 3];
            for (x, w) in rule.on_cell(g) {
                let e = exact_gradient(&x);
                for d in 0..n {
                    mean[d] += w * e[d] / g.measure;
                }
            }
            rule.integrate_cell(g, |x| {
                let e = exact_gradient(x);
                (0..n).map(|d| (e[d] - mean[d]).powi(2)).sum()
            })
        })
        .sum::<f64>()
        .sqrt()
}

/// Observed convergence rates of a sequence on uniformly refined meshes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `log2(e_l / e_{l+1})`; `None` where an error is zero.
    pub pairwise: Vec<Option<f64>>,
    /// Least-squares slope of `-log2 e` against the level index.
    pub slope: Option<f64>,
    /// Set when some error vanished and the rate is unbounded.
    pub infinite: bool,
}

pub fn fit_rate(errors: &[f64]) -> RateFit {
    assert!(errors.len() >= 2, "rates need at least two levels");
    let infinite = errors.iter().any(|&e| e == 0.0);
    let pairwise = errors
        .windows(2)
        .map(|w| (w[0] > 0.0 && w[1] > 0.0).then(|| (w[0] / w[1]).log2()))
        .collect();
    let slope = (!infinite).then(|| {
        let n = errors.len() as f64;
        let xs: Vec<f64> = (0..errors.len()).map(|i| i as f64).collect();
        let ys: Vec<f64> = errors.iter().map(|e| -e.log2()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    });
    RateFit {
        pairwise,
        slope,
        infinite,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    /// Whether a `<name>_rate` column follows in CSV output.
    pub with_rate: bool,
}

/// Per-level results: `level, h, dof counts, named error/eigenvalue columns`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub levels: Vec<usize>,
    pub h: Vec<f64>,
    pub dofs: Vec<(String, Vec<usize>)>,
    pub columns: Vec<Column>,
}

impl ConvergenceTable {
    pub fn new(levels: Vec<usize>, h: Vec<f64>) -> Self {
        assert_eq!(levels.len(), h.len());
        Self {
            levels,
            h,
            ..Default::default()
        }
    }

    pub fn add_dofs(&mut self, name: &str, counts: Vec<usize>) {
        assert_eq!(counts.len(), self.levels.len());
        self.dofs.push((name.to_string(), counts));
    }

    /// Adds a column; rate columns are emitted for error-like quantities.
    pub fn add_column(&mut self, name: &str, values: Vec<f64>, with_rate: bool) {
        assert_eq!(values.len(), self.levels.len());
        self.columns.push(Column {
            name: name.to_string(),
            values,
            with_rate,
        });
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.name == name).map(|c| c.values.as_slice())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn rates(&self, name: &str) -> Option<RateFit> {
        self.column(name).filter(|v| v.len() >= 2).map(fit_rate)
    }

    /// Comma-separated with a header row; floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["level".to_string(), "h".to_string()];
        header.extend(self.dofs.iter().map(|(n, _)| format!("dofs_{n}")));
        for c in &self.columns {
            header.push(c.name.clone());
            if c.with_rate {
                header.push(format!("{}_rate", c.name));
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for (i, level) in self.levels.iter().enumerate() {
            let mut row = vec![level.to_string(), fmt_float(self.h[i])];
            row.extend(self.dofs.iter().map(|(_, d)| d[i].to_string()));
            for c in &self.columns {
                row.push(fmt_float(c.values[i]));
                if c.with_rate {
                    row.push(if i == 0 {
                        String::new()
                    } else {
                        let (a, b) = (c.values[i - 1], c.values[i]);
                        if a > 0.0 && b > 0.0 {
                            fmt_float((a / b).log2())
                        } else {
                            "inf".into()
                        }
                    });
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Two-column `(h, value)` text for one column.
    pub fn plot_data(&self, name: &str) -> Option<String> {
        let values = self.column(name)?;
        let mut out = format!("# h {name}\n");
        for (h, v) in self.h.iter().zip(values) {
            out.push_str(&format!("{} {}\n", fmt_float(*h), fmt_float(*v)));
        }
        Some(out)
    }
}

/// 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}
