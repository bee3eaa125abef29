//! The homogenised problem `div_x(eps_eff(a(x)) grad_x phi0) = -rho_eff(x)`
//! on the unit square with Dirichlet data.
//!
//! Unknowns sit at the centres of an `n x n` grid of square cells. Face
//! coefficients are harmonic means of the two adjacent cells; a boundary
//! face uses its cell's coefficient over the half cell to the wall, with the
//! boundary value taken at the face midpoint.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::effective::{num, rho_eff_cell_average, rho_eff_flux_divergence, EffectiveError, EffectiveTable};
use crate::exprlang::{Bindings, ExprError, FieldExpr};
use crate::sparse::{conjugate_gradient, CgOptions, SolveError, Triplets};

pub const MIN_GRID: usize = 8;
pub const A_BOUNDS: (f64, f64) = (0.05, 0.45);
pub const SOLVER_TOL: f64 = 1e-11;
const RANGE_SAMPLES: usize = 64;

#[derive(Debug, Error)]
pub enum MacroError {
    #[error("invalid macroscale problem: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Table(#[from] EffectiveError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("macroscale solve failed: {0}")]
    Solver(#[from] SolveError),
}

/// How the effective charge is formed from the microscale charge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoMode {
    /// Cell average of `rho(x, X)`.
    CellAverage,
    /// Slow divergence of the tabulated charge moment `F(a(x))`.
    FluxDivergence,
}

impl RhoMode {
    pub fn name(self) -> &'static str {
        match self {
            RhoMode::CellAverage => "CELL_AVERAGE",
            RhoMode::FluxDivergence => "FLUX_DIVERGENCE",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "CELL_AVERAGE" => Some(RhoMode::CellAverage),
            "FLUX_DIVERGENCE" => Some(RhoMode::FluxDivergence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub a_of_x: FieldExpr,
    pub table: Arc<EffectiveTable>,
    pub rho_mode: RhoMode,
    pub rho: FieldExpr,
    pub boundary_value: FieldExpr,
    pub grid_n: usize,
}

impl MacroProblem {
    /// Range of `a` the chosen charge mode can read from the table.
    pub fn usable_range(&self) -> (f64, f64) {
        match self.rho_mode {
            RhoMode::CellAverage => self.table.range(),
            RhoMode::FluxDivergence => self.table.derivative_range(),
        }
    }

    /// Smallest and largest `a(x)` over a 64 x 64 sample of cell centres.
    pub fn a_image(&self) -> Result<(f64, f64), ExprError> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..RANGE_SAMPLES {
            for i in 0..RANGE_SAMPLES {
                let x = [(i as f64 + 0.5) / RANGE_SAMPLES as f64, (j as f64 + 0.5) / RANGE_SAMPLES as f64];
                let a = self.a_of_x.evaluate(&Bindings::slow(x))?;
                lo = lo.min(a);
                hi = hi.max(a);
            }
        }
        Ok((lo, hi))
    }

    /// All violations of the problem's preconditions; empty when solvable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.grid_n < MIN_GRID {
            out.push(format!("grid_n = {} is below the minimum {MIN_GRID}", self.grid_n));
        }
        if self.table.len() < 3 {
            out.push(format!("effective table has {} entries; at least 3 needed", self.table.len()));
            return out;
        }
        match self.a_image() {
            Err(e) => out.push(format!("a(x) cannot be evaluated: {e}")),
            Ok((lo, hi)) => {
                if !(lo > A_BOUNDS.0 && hi < A_BOUNDS.1) {
                    out.push(format!(
                        "a(x) ranges over [{lo:.4}, {hi:.4}], outside ({}, {})",
                        A_BOUNDS.0, A_BOUNDS.1
                    ));
                }
                let (tlo, thi) = self.usable_range();
                if lo < tlo - 1e-12 || hi > thi + 1e-12 {
                    out.push(format!(
                        "a(x) range [{lo:.4}, {hi:.4}] not covered by table range [{tlo:.4}, {thi:.4}]"
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), MacroError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MacroError::Invalid(v))
        }
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.grid_n as f64
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]
    }
}

/// `eps_eff` and `rho_eff` at cell centres, row-major with `x1` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub n: usize,
    pub eps_eff: Vec<f64>,
    pub rho_eff: Vec<f64>,
}

impl CoefficientField {
    pub fn to_csv(&self) -> String {
        let h = 1.0 / self.n as f64;
        let mut s = String::from("x1,x2,eps_eff,rho_eff\n");
        for j in 0..self.n {
            for i in 0..self.n {
                let k = i + self.n * j;
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    num((i as f64 + 0.5) * h),
                    num((j as f64 + 0.5) * h),
                    num(self.eps_eff[k]),
                    num(self.rho_eff[k])
                );
            }
        }
        s
    }
}

pub fn coefficient_field(problem: &MacroProblem) -> Result<CoefficientField, MacroError> {
    problem.validate()?;
    let n = problem.grid_n;
    let mut eps_eff = Vec::with_capacity(n * n);
    let mut rho_eff = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = problem.cell_center(i, j);
            let a = problem.a_of_x.evaluate(&Bindings::slow(x))?;
            eps_eff.push(problem.table.eps_at(a)?);
            rho_eff.push(match problem.rho_mode {
                RhoMode::CellAverage => rho_eff_cell_average(&problem.rho, x)?,
                RhoMode::FluxDivergence => rho_eff_flux_divergence(&problem.table, &problem.a_of_x, x)?.f_form,
            });
        }
    }
    Ok(CoefficientField { n, eps_eff, rho_eff })
}

#[derive(Debug, Clone)]
pub struct MacroSolution {
    pub n: usize,
    /// `phi0` at cell centres, row-major with `x1` fastest.
    pub phi: Vec<f64>,
    pub coefficients: CoefficientField,
    /// Boundary value at the midpoint of each boundary face, in the order
    /// bottom, top, left, right, each running along the wall.
    boundary: [Vec<f64>; 4],
    /// `oint eps_eff d phi0/dn dS` from the discrete boundary fluxes.
    pub boundary_flux: f64,
    pub iterations: usize,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

pub fn solve_homogenized(problem: &MacroProblem) -> Result<MacroSolution, MacroError> {
    let coeff = coefficient_field(problem)?;
    let n = problem.grid_n;
    let h = problem.spacing();
    let g = |x: [f64; 2]| problem.boundary_value.evaluate(&Bindings::slow(x));
    let mut boundary: [Vec<f64>; 4] = Default::default();
    for i in 0..n {
        let s = (i as f64 + 0.5) * h;
        boundary[0].push(g([s, 0.0])?);
        boundary[1].push(g([s, 1.0])?);
        boundary[2].push(g([0.0, s])?);
        boundary[3].push(g([1.0, s])?);
    }
    let idx = |i: usize, j: usize| i + n * j;
    let eps = &coeff.eps_eff;
    let mut t = Triplets::with_capacity(n * n, 5 * n * n);
    let mut rhs = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let k = idx(i, j);
            let mut diag = 0.0;
            let mut couple = |nb: Option<usize>, wall: f64, t: &mut Triplets| match nb {
                Some(m) => {
                    let e = harmonic(eps[k], eps[m]);
                    diag += e;
                    t.add(k, m, -e);
                }
                None => {
                    diag += 2.0 * eps[k];
                    rhs[k] += 2.0 * eps[k] * wall;
                }
            };
            couple((i > 0).then(|| idx(i - 1, j)), boundary[2][j], &mut t);
            couple((i + 1 < n).then(|| idx(i + 1, j)), boundary[3][j], &mut t);
            couple((j > 0).then(|| idx(i, j - 1)), boundary[0][i], &mut t);
            couple((j + 1 < n).then(|| idx(i, j + 1)), boundary[1][i], &mut t);
            t.add(k, k, diag);
            rhs[k] += coeff.rho_eff[k] * h * h;
        }
    }
    let a = t.to_csr();
    let opts = CgOptions {
        rel_tol: SOLVER_TOL,
        max_iter: 50 * n * n + 1000,
        ..Default::default()
    };
    let res = conjugate_gradient(&a, &rhs, &opts)?;
    let phi = res.x;
    let mut boundary_flux = 0.0;
    for i in 0..n {
        boundary_flux += 2.0 * eps[idx(i, 0)] * (boundary[0][i] - phi[idx(i, 0)]);
        boundary_flux += 2.0 * eps[idx(i, n - 1)] * (boundary[1][i] - phi[idx(i, n - 1)]);
        boundary_flux += 2.0 * eps[idx(0, i)] * (boundary[2][i] - phi[idx(0, i)]);
        boundary_flux += 2.0 * eps[idx(n - 1, i)] * (boundary[3][i] - phi[idx(n - 1, i)]);
    }
    Ok(MacroSolution {
        n,
        phi,
        coefficients: coeff,
        boundary,
        boundary_flux,
        iterations: res.iterations,
    })
}

impl MacroSolution {
    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.phi[i + self.n * j]
    }

    /// `int rho_eff dx` by the midpoint rule on the grid.
    pub fn total_charge(&self) -> f64 {
        let h = self.spacing();
        self.coefficients.rho_eff.iter().sum::<f64>() * h * h
    }

    /// Bilinear interpolation on the cell centres extended by the boundary
    /// values, so points between the last centre and the wall are covered.
    pub fn interpolate(&self, x: [f64; 2]) -> f64 {
        let n = self.n;
        let h = self.spacing();
        // extended axis: 0, centres..., 1 with n + 2 entries
        let axis = |s: f64| -> (usize, f64) {
            let s = s.clamp(0.0, 1.0);
            if s <= 0.5 * h {
                (0, s / (0.5 * h))
            } else if s >= 1.0 - 0.5 * h {
                (n, (s - (1.0 - 0.5 * h)) / (0.5 * h))
            } else {
                let k = ((s - 0.5 * h) / h).floor() as usize;
                let k = k.min(n - 2);
                (k + 1, (s - (k as f64 + 0.5) * h) / h)
            }
        };
        let value = |p: usize, q: usize| -> f64 {
            // p, q index the extended axes
            match (p, q) {
                (0, 0) => 0.5 * (self.boundary[0][0] + self.boundary[2][0]),
                (0, q) if q == n + 1 => 0.5 * (self.boundary[1][0] + self.boundary[2][n - 1]),
                (p, 0) if p == n + 1 => 0.5 * (self.boundary[0][n - 1] + self.boundary[3][0]),
                (p, q) if p == n + 1 && q == n + 1 => 0.5 * (self.boundary[1][n - 1] + self.boundary[3][n - 1]),
                (0, q) => self.boundary[2][q - 1],
                (p, q) if p == n + 1 => self.boundary[3][q - 1],
                (p, 0) => self.boundary[0][p - 1],
                (p, q) if q == n + 1 => self.boundary[1][p - 1],
                (p, q) => self.at(p - 1, q - 1),
            }
        };
        let (p, tx) = axis(x[0]);
        let (q, ty) = axis(x[1]);
        (1.0 - tx) * (1.0 - ty) * value(p, q)
            + tx * (1.0 - ty) * value(p + 1, q)
            + (1.0 - tx) * ty * value(p, q + 1)
            + tx * ty * value(p + 1, q + 1)
    }

    pub fn to_csv(&self) -> String {
        let h = self.spacing();
        let mut s = String::from("x1,x2,phi0\n");
        for j in 0..self.n {
            for i in 0..self.n {
                let _ = writeln!(
                    s,
                    "{},{},{}",
                    num((i as f64 + 0.5) * h),
                    num((j as f64 + 0.5) * h),
                    num(self.at(i, j))
                );
            }
        }
        s
    }
}
