//! Effective coefficients assembled from cell solutions, and their
//! tabulation over the inclusion radius.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::cellsolve::{self, CellMode, CellProblemSpec, CellSolution, CellSolveError, Permittivity};
use crate::exprlang::{Bindings, ExprError, FieldExpr};
use crate::geometry::{build_cell_mesh, CellGeometry, CellMesh, GeometryError, Region};
use crate::quad::{composite_gl, TRI7};

#[derive(Debug, Error)]
pub enum EffectiveError {
    #[error("{0}")]
    Precondition(String),
    #[error("at a = {a}: {source}")]
    Geometry { a: f64, source: GeometryError },
    #[error("at a = {a}: {source}")]
    Cell { a: f64, source: CellSolveError },
    #[error("at a = {a}: effective tensor not isotropic (eigenvalues {l1}, {l2})")]
    Anisotropic { a: f64, l1: f64, l2: f64 },
    #[error("a = {a} outside the usable table range [{lo}, {hi}]")]
    OutOfRange { a: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formula {
    Volume,
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCoefficients {
    pub eps_eff: [[f64; 2]; 2],
    pub formula: Formula,
    pub a: f64,
    pub eps_e: f64,
    pub eps_i: Permittivity,
}

impl EffectiveCoefficients {
    /// Eigenvalues of the symmetric part, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let m = self.eps_eff;
        let off = 0.5 * (m[0][1] + m[1][0]);
        let mean = 0.5 * (m[0][0] + m[1][1]);
        let rad = (0.25 * (m[0][0] - m[1][1]).powi(2) + off * off).sqrt();
        [mean - rad, mean + rad]
    }

    pub fn frobenius(&self) -> f64 {
        self.eps_eff.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Relative Frobenius distance `|A - B| / |A|`.
    pub fn relative_difference(&self, other: &EffectiveCoefficients) -> f64 {
        let mut d = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d += (self.eps_eff[i][j] - other.eps_eff[i][j]).powi(2);
            }
        }
        d.sqrt() / self.frobenius()
    }

    pub fn isotropic_value(&self) -> f64 {
        let [l1, l2] = self.eigenvalues();
        0.5 * (l1 + l2)
    }

    /// Voigt and Reuss bounds `(harmonic, arithmetic)` for finite contrast.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        let eps_i = self.eps_i.finite()?;
        let f = std::f64::consts::PI * self.a * self.a;
        Some((1.0 / (f / eps_i + (1.0 - f) / self.eps_e), f * eps_i + (1.0 - f) * self.eps_e))
    }

    /// Symmetry, positive definiteness and (finite contrast) the mixture
    /// bounds. Returns every violation found.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let m = self.eps_eff;
        let asym = (m[0][1] - m[1][0]).abs();
        if asym > 1e-8 * self.frobenius() {
            out.push(format!("asymmetry {asym:.3e}"));
        }
        let [l1, l2] = self.eigenvalues();
        if l1 <= 0.0 {
            out.push(format!("not positive definite: eigenvalue {l1}"));
        }
        if let Some((lo, hi)) = self.bounds() {
            let tol = 1e-10 * hi;
            if l1 < lo - tol || l2 > hi + tol {
                out.push(format!("eigenvalues [{l1}, {l2}] outside mixture bounds [{lo}, {hi}]"));
            }
        }
        out
    }
}

fn psi_fields(sol: &CellSolution) -> &[Vec<f64>; 2] {
    sol.psi.as_ref().expect("effective permittivity needs a Psi solution")
}

/// `int_D eps (delta_ij + d Psi_i / d X_j)`.
pub fn epsilon_volume(sol: &CellSolution) -> EffectiveCoefficients {
    assert_eq!(sol.spec.mode, CellMode::PsiFinite, "volume formula needs a finite-contrast solution");
    let eps_i = sol.spec.eps_i.finite().expect("finite eps_i");
    let psi = psi_fields(sol);
    let mesh = sol.mesh();
    let mut m = [[0.0; 2]; 2];
    for t in 0..mesh.n_triangles() {
        let eps = match mesh.regions[t] {
            Region::Interior => eps_i,
            Region::Exterior => sol.spec.eps_e,
        };
        let area = mesh.area(t);
        for (i, row) in m.iter_mut().enumerate() {
            let g = mesh.gradient(t, &psi[i]);
            for (j, entry) in row.iter_mut().enumerate() {
                *entry += eps * area * (if i == j { 1.0 } else { 0.0 } + g[j]);
            }
        }
    }
    EffectiveCoefficients {
        eps_eff: m,
        formula: Formula::Volume,
        a: mesh.radius,
        eps_e: sol.spec.eps_e,
        eps_i: sol.spec.eps_i,
    }
}

/// `oint_{dD} X_j du/dn` over the outer boundary, midpoint rule per edge.
/// The normal derivative at each edge midpoint comes from a least-squares
/// quadratic fit to nearby matrix vertices, taken with their periodic
/// images so the patch straddles the cell side.
fn outer_moment(mesh: &CellMesh, field: &[f64]) -> [f64; 2] {
    let usable = mesh.exterior_vertices();
    let mut out = [0.0; 2];
    for e in &mesh.outer_edges {
        let (p, q) = (mesh.vertices[e.v[0]], mesh.vertices[e.v[1]]);
        let len = (p[0] - q[0]).hypot(p[1] - q[1]);
        let mid = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])];
        let g = recovered_gradient(mesh, field, &usable, mid, 2.5 * len);
        let flux = g[0] * e.normal[0] + g[1] * e.normal[1];
        for (j, o) in out.iter_mut().enumerate() {
            *o += flux * len * mid[j];
        }
    }
    out
}

/// Gradient at `at` of the quadratic least-squares fit to `field` over the
/// vertices (periodic images included) within `radius`, widening the patch
/// until it is well determined.
fn recovered_gradient(mesh: &CellMesh, field: &[f64], usable: &[bool], at: [f64; 2], radius: f64) -> [f64; 2] {
    let mut r = radius;
    loop {
        let mut ata = [[0.0; 6]; 6];
        let mut atb = [0.0; 6];
        let mut count = 0;
        for (v, p) in mesh.vertices.iter().enumerate() {
            if !usable[v] {
                continue;
            }
            // nearest periodic image
            let dx = p[0] - at[0] - (p[0] - at[0]).round();
            let dy = p[1] - at[1] - (p[1] - at[1]).round();
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (x, y) = (dx / r, dy / r);
            let basis = [1.0, x, y, x * x, x * y, y * y];
            for i in 0..6 {
                for j in 0..6 {
                    ata[i][j] += basis[i] * basis[j];
                }
                atb[i] += basis[i] * field[v];
            }
            count += 1;
        }
        if count >= 12 {
            if let Some(c) = solve6(ata, atb) {
                return [c[1] / r, c[2] / r];
            }
        }
        r *= 1.5;
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let piv = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..6 {
            let f = a[row][col] / a[col][col];
            for k in col..6 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let s: f64 = (i + 1..6).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// `eps_e (delta_ij + oint_{dD} X_j dPsi_i/dn)` on the outer cell boundary.
/// The integral-constraint solution is assembled with the indices of the
/// moment exchanged.
pub fn epsilon_boundary(sol: &CellSolution) -> EffectiveCoefficients {
    let psi = psi_fields(sol);
    let mesh = sol.mesh();
    let moments = [outer_moment(mesh, &psi[0]), outer_moment(mesh, &psi[1])];
    let transpose = sol.spec.mode == CellMode::PsiLimitConstraint;
    let mut m = [[0.0; 2]; 2];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, entry) in row.iter_mut().enumerate() {
            let moment = if transpose { moments[j][i] } else { moments[i][j] };
            *entry = sol.spec.eps_e * (if i == j { 1.0 } else { 0.0 } + moment);
        }
    }
    EffectiveCoefficients {
        eps_eff: m,
        formula: Formula::Boundary,
        a: mesh.radius,
        eps_e: sol.spec.eps_e,
        eps_i: sol.spec.eps_i,
    }
}

/// `int_D rho(x, X) dX` over the unit cell by tensor Gauss–Legendre.
pub fn rho_eff_cell_average(rho: &FieldExpr, x: [f64; 2]) -> Result<f64, ExprError> {
    let (pts, wts) = composite_gl(0.0, 1.0, 8, 8);
    let mut s = 0.0;
    for (p, wp) in pts.iter().zip(&wts) {
        for (q, wq) in pts.iter().zip(&wts) {
            s += wp * wq * rho.evaluate(&Bindings::at(x, [*p, *q]))?;
        }
    }
    Ok(s)
}

/// Charge-corrector integrals of one xi solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeMoments {
    /// `int_D eps grad xi`.
    pub f: [f64; 2],
    /// `oint_{dD} eps_e X (grad xi . n) + int_{D_e} rho X`.
    pub g: [f64; 2],
    /// `int_{D_i} rho X`.
    pub dipole: [f64; 2],
}

/// Computes the flux and boundary moments of a xi solution. In the limit
/// modes the inclusion term of `int_D eps grad xi` is recovered from the
/// interface reactions and the enclosed charge.
pub fn charge_moments(sol: &CellSolution) -> Result<ChargeMoments, ExprError> {
    let mesh = sol.mesh();
    let xi = sol.xi.as_ref().expect("charge moments need a xi solution");
    let rho = sol.spec.rho.as_ref().expect("xi solution carries rho");
    let rho_q = cellsolve::rho_at_quadrature(mesh, rho, sol.spec.anchor)?;
    let eps_e = sol.spec.eps_e;

    let mut ext_moment = [0.0; 2];
    let mut dipole = [0.0; 2];
    for t in 0..mesh.n_triangles() {
        let [p, q, r] = mesh.corners(t);
        let area = mesh.area(t);
        let target = match mesh.regions[t] {
            Region::Exterior => &mut ext_moment,
            Region::Interior => &mut dipole,
        };
        for (k, (l, w)) in TRI7.iter().enumerate() {
            let x = [l[0] * p[0] + l[1] * q[0] + l[2] * r[0], l[0] * p[1] + l[1] * q[1] + l[2] * r[1]];
            for j in 0..2 {
                target[j] += area * w * rho_q[t][k] * x[j];
            }
        }
    }

    let mut f = [0.0; 2];
    for t in 0..mesh.n_triangles() {
        let eps = match (mesh.regions[t], sol.spec.eps_i) {
            (Region::Exterior, _) => eps_e,
            (Region::Interior, Permittivity::Finite(e)) => e,
            (Region::Interior, Permittivity::Infinite) => continue,
        };
        let g = mesh.gradient(t, xi);
        let area = mesh.area(t);
        f[0] += eps * area * g[0];
        f[1] += eps * area * g[1];
    }
    if sol.spec.eps_i == Permittivity::Infinite {
        for (v, r) in sol.xi_interface_reactions(&rho_q) {
            for j in 0..2 {
                f[j] -= mesh.vertices[v][j] * r;
            }
        }
        for j in 0..2 {
            f[j] += dipole[j];
        }
    }

    let bdry = outer_moment(mesh, xi);
    let g = [eps_e * bdry[0] + ext_moment[0], eps_e * bdry[1] + ext_moment[1]];
    Ok(ChargeMoments { f, g, dipole })
}

/// Configuration for [`build_effective_table`].
#[derive(Debug, Clone)]
pub struct TableConfig {
    pub a_values: Vec<f64>,
    pub eps_e: f64,
    pub eps_i: Permittivity,
    pub psi_mode: CellMode,
    pub xi_mode: CellMode,
    pub rho: FieldExpr,
    pub anchor: [f64; 2],
    pub target_h: f64,
}

#[derive(Debug, Clone)]
pub struct EffectiveTable {
    pub a_values: Vec<f64>,
    pub eps_iso: Vec<f64>,
    pub f: Vec<[f64; 2]>,
    pub g: Vec<[f64; 2]>,
    pub dipole: Vec<[f64; 2]>,
    pub eps_e: f64,
}

struct TableRow {
    eps_iso: f64,
    moments: ChargeMoments,
}

fn table_row(cfg: &TableConfig, a: f64) -> Result<TableRow, EffectiveError> {
    let geom = CellGeometry::uniform(a).map_err(|source| EffectiveError::Geometry { a, source })?;
    let mesh = Arc::new(build_cell_mesh(&geom, cfg.target_h).map_err(|source| EffectiveError::Geometry { a, source })?);
    let cell = |e| EffectiveError::Cell { a, source: e };
    let psi = cellsolve::solve(&CellProblemSpec::psi(mesh.clone(), cfg.eps_e, cfg.eps_i, cfg.psi_mode)).map_err(cell)?;
    let coeffs = if cfg.psi_mode == CellMode::PsiFinite {
        epsilon_volume(&psi)
    } else {
        epsilon_boundary(&psi)
    };
    let [l1, l2] = coeffs.eigenvalues();
    if (l2 - l1).abs() / l1 >= 1e-4 {
        return Err(EffectiveError::Anisotropic { a, l1, l2 });
    }
    let xi = cellsolve::solve(&CellProblemSpec::xi(mesh, cfg.eps_e, cfg.eps_i, cfg.xi_mode, cfg.rho.clone(), cfg.anchor)).map_err(cell)?;
    Ok(TableRow {
        eps_iso: coeffs.isotropic_value(),
        moments: charge_moments(&xi)?,
    })
}

/// Solves the cell problems at every radius and tabulates the effective
/// permittivity and the charge moments. Radii are solved in parallel.
pub fn build_effective_table(cfg: &TableConfig) -> Result<EffectiveTable, EffectiveError> {
    let a = &cfg.a_values;
    if a.len() < 5 {
        return Err(EffectiveError::Precondition(format!("table needs at least 5 radii, got {}", a.len())));
    }
    if let Some(w) = a.windows(2).find(|w| w[1] <= w[0]) {
        return Err(EffectiveError::Precondition(format!("radii must be strictly increasing: {} then {}", w[0], w[1])));
    }
    if let Some(bad) = a.iter().find(|&&v| !(v > 0.02 && v < 0.45)) {
        return Err(EffectiveError::Precondition(format!("radius {bad} outside (0.02, 0.45)")));
    }
    if cfg.psi_mode.is_psi() == cfg.xi_mode.is_psi() || !cfg.psi_mode.is_psi() {
        return Err(EffectiveError::Precondition("table needs one Psi mode and one xi mode".into()));
    }
    let rows: Vec<TableRow> = a.par_iter().map(|&a| table_row(cfg, a)).collect::<Result<_, _>>()?;
    Ok(EffectiveTable {
        a_values: a.clone(),
        eps_iso: rows.iter().map(|r| r.eps_iso).collect(),
        f: rows.iter().map(|r| r.moments.f).collect(),
        g: rows.iter().map(|r| r.moments.g).collect(),
        dipole: rows.iter().map(|r| r.moments.dipole).collect(),
        eps_e: cfg.eps_e,
    })
}

/// Both slow-divergence forms of the effective charge at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxDivergence {
    pub f_form: f64,
    pub g_form: f64,
}

impl EffectiveTable {
    pub fn len(&self) -> usize {
        self.a_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_values.is_empty()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.a_values[0], *self.a_values.last().unwrap())
    }

    /// Range in which slopes are available: one table step in from each end.
    pub fn derivative_range(&self) -> (f64, f64) {
        let n = self.len();
        (self.a_values[1], self.a_values[n - 2])
    }

    /// A table with a fixed effective permittivity and no charge moments,
    /// used for constant-coefficient macroscale problems.
    pub fn constant(eps: f64, a_values: Vec<f64>) -> Self {
        let n = a_values.len();
        Self {
            a_values,
            eps_iso: vec![eps; n],
            f: vec![[0.0; 2]; n],
            g: vec![[0.0; 2]; n],
            dipole: vec![[0.0; 2]; n],
            eps_e: eps,
        }
    }

    fn check(&self, a: f64, lo: f64, hi: f64) -> Result<(), EffectiveError> {
        if self.len() < 3 {
            return Err(EffectiveError::Precondition(format!("table has {} points; at least 3 needed", self.len())));
        }
        if !(a >= lo - 1e-12 && a <= hi + 1e-12) {
            return Err(EffectiveError::OutOfRange { a, lo, hi });
        }
        Ok(())
    }

    fn bracket(&self, a: f64) -> (usize, f64) {
        let n = self.len();
        let i = match self.a_values.iter().position(|&v| v > a) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        }
        .min(n - 2);
        let t = (a - self.a_values[i]) / (self.a_values[i + 1] - self.a_values[i]);
        (i, t)
    }

    /// Monotone cubic (Fritsch–Carlson) interpolation of `eps_iso`.
    pub fn eps_at(&self, a: f64) -> Result<f64, EffectiveError> {
        let (lo, hi) = self.range();
        self.check(a, lo, hi)?;
        Ok(monotone_cubic(&self.a_values, &self.eps_iso, a))
    }

    pub fn f_at(&self, a: f64) -> Result<[f64; 2], EffectiveError> {
        let (lo, hi) = self.range();
        self.check(a, lo, hi)?;
        Ok(self.linear(&self.f, a))
    }

    pub fn g_at(&self, a: f64) -> Result<[f64; 2], EffectiveError> {
        let (lo, hi) = self.range();
        self.check(a, lo, hi)?;
        Ok(self.linear(&self.g, a))
    }

    fn linear(&self, vals: &[[f64; 2]], a: f64) -> [f64; 2] {
        let (i, t) = self.bracket(a);
        [(1.0 - t) * vals[i][0] + t * vals[i + 1][0], (1.0 - t) * vals[i][1] + t * vals[i + 1][1]]
    }

    /// Central-difference slopes at interior nodes, linearly interpolated.
    fn slope(&self, vals: &[[f64; 2]], a: f64) -> Result<[f64; 2], EffectiveError> {
        let (lo, hi) = self.derivative_range();
        self.check(a, lo, hi)?;
        let n = self.len();
        let node = |i: usize| {
            let da = self.a_values[i + 1] - self.a_values[i - 1];
            [(vals[i + 1][0] - vals[i - 1][0]) / da, (vals[i + 1][1] - vals[i - 1][1]) / da]
        };
        if n == 3 {
            return Ok(node(1));
        }
        let inner = &self.a_values[1..n - 1];
        let i = match inner.iter().position(|&v| v > a) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => inner.len() - 2,
        }
        .min(inner.len() - 2);
        let t = (a - inner[i]) / (inner[i + 1] - inner[i]);
        let (d0, d1) = (node(i + 1), node(i + 2));
        Ok([(1.0 - t) * d0[0] + t * d1[0], (1.0 - t) * d0[1] + t * d1[1]])
    }

    pub fn df_da(&self, a: f64) -> Result<[f64; 2], EffectiveError> {
        self.slope(&self.f, a)
    }

    pub fn dg_da(&self, a: f64) -> Result<[f64; 2], EffectiveError> {
        self.slope(&self.g, a)
    }

    pub fn ddipole_da(&self, a: f64) -> Result<[f64; 2], EffectiveError> {
        self.slope(&self.dipole, a)
    }

    /// `[violations]` of the table invariants for a contrast above one.
    pub fn check_monotone(&self) -> Vec<String> {
        self.eps_iso
            .windows(2)
            .zip(self.a_values.windows(2))
            .filter(|(e, _)| e[1] <= e[0])
            .map(|(e, a)| format!("eps_iso not increasing between a={} ({}) and a={} ({})", a[0], e[0], a[1], e[1]))
            .collect()
    }

    /// CSV `a,eps_iso,F1,F2,G1,G2` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,eps_iso,F1,F2,G1,G2\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                num(self.a_values[i]),
                num(self.eps_iso[i]),
                num(self.f[i][0]),
                num(self.f[i][1]),
                num(self.g[i][0]),
                num(self.g[i][1])
            );
        }
        s
    }
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `div_x F(a(x))` and `div_x G(a(x))` by the chain rule on the table.
/// The charge density must not depend on the slow variables.
pub fn rho_eff_flux_divergence(table: &EffectiveTable, a_of_x: &FieldExpr, x: [f64; 2]) -> Result<FluxDivergence, EffectiveError> {
    let b = Bindings::slow(x);
    let a = a_of_x.evaluate(&b)?;
    let grad = a_of_x.slow_gradient(&b, 1e-5)?;
    if grad == [0.0, 0.0] {
        return Ok(FluxDivergence { f_form: 0.0, g_form: 0.0 });
    }
    let df = table.df_da(a)?;
    let dg = table.dg_da(a)?;
    Ok(FluxDivergence {
        f_form: df[0] * grad[0] + df[1] * grad[1],
        g_form: dg[0] * grad[0] + dg[1] * grad[1],
    })
}

/// Fritsch–Carlson monotone piecewise cubic Hermite interpolation.
pub fn monotone_cubic(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    assert!(n >= 2 && ys.len() == n);
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    m[0] = delta[0];
    m[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        m[i] = if delta[i - 1] * delta[i] <= 0.0 { 0.0 } else { 0.5 * (delta[i - 1] + delta[i]) };
    }
    for i in 0..n - 1 {
        if delta[i] == 0.0 {
            m[i] = 0.0;
            m[i + 1] = 0.0;
            continue;
        }
        let (al, be) = (m[i] / delta[i], m[i + 1] / delta[i]);
        let s = al * al + be * be;
        if s > 9.0 {
            let tau = 3.0 / s.sqrt();
            m[i] = tau * al * delta[i];
            m[i + 1] = tau * be * delta[i];
        }
    }
    let i = match xs.iter().position(|&v| v > x) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => n - 2,
    }
    .min(n - 2);
    let t = (x - xs[i]) / h[i];
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * ys[i] + h10 * h[i] * m[i] + h01 * ys[i + 1] + h11 * h[i] * m[i + 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn psi(a: f64, h: f64, eps_i: Permittivity, mode: CellMode) -> CellSolution {
        let mesh = Arc::new(build_cell_mesh(&CellGeometry::uniform(a).unwrap(), h).unwrap());
        cellsolve::solve(&CellProblemSpec::psi(mesh, 1.0, eps_i, mode)).unwrap()
    }

    #[test]
    fn no_contrast_is_identity() {
        let s = psi(0.2, 0.05, Permittivity::Finite(1.0), CellMode::PsiFinite);
        for c in [epsilon_volume(&s), epsilon_boundary(&s)] {
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((c.eps_eff[i][j] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn high_contrast_volume_near_dilute_value() {
        let s = psi(0.2, 0.02, Permittivity::Finite(1e6), CellMode::PsiFinite);
        let c = epsilon_volume(&s);
        let v = c.eps_eff[0][0];
        assert!((v - 1.2513).abs() < 0.04, "{v}");
        assert!(c.eps_eff[0][1].abs() < 1e-6 * v);
        assert!(c.check_invariants().is_empty(), "{:?}", c.check_invariants());
        let b = epsilon_boundary(&s);
        assert!(c.relative_difference(&b) < 1e-2, "{}", c.relative_difference(&b));
    }

    #[test]
    fn limit_routes_agree() {
        let n = epsilon_boundary(&psi(0.3, 0.025, Permittivity::Infinite, CellMode::PsiLimitNeumann));
        let c = epsilon_boundary(&psi(0.3, 0.025, Permittivity::Infinite, CellMode::PsiLimitConstraint));
        assert!(n.relative_difference(&c) < 1e-2);
        let [l1, l2] = n.eigenvalues();
        assert!((l2 - l1) / l1 < 1e-4);
    }

    #[test]
    fn volume_and_boundary_converge_together() {
        let diff = |h: f64| {
            let s = psi(0.2, h, Permittivity::Finite(10.0), CellMode::PsiFinite);
            epsilon_volume(&s).relative_difference(&epsilon_boundary(&s))
        };
        assert!(diff(0.02) < 1e-2);
        let hs = [0.05, 0.025, 0.0125, 0.00625];
        let ds: Vec<f64> = hs.iter().map(|&h| diff(h)).collect();
        let slope = crate::stats::loglog_slope(&hs, &ds).unwrap();
        assert!(slope >= 1.5, "{ds:?} slope {slope}");
    }

    #[test]
    fn volume_values_approach_limit_monotonically() {
        let limit = epsilon_boundary(&psi(0.2, 0.01, Permittivity::Infinite, CellMode::PsiLimitNeumann));
        let gaps: Vec<f64> = [1e2, 1e4, 1e6]
            .iter()
            .map(|&e| epsilon_volume(&psi(0.2, 0.01, Permittivity::Finite(e), CellMode::PsiFinite)).relative_difference(&limit))
            .collect();
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
        assert!(gaps[2] < 1e-2);
    }

    fn charge_table() -> EffectiveTable {
        build_effective_table(&TableConfig {
            a_values: (0..11).map(|k| 0.075 + 0.025 * k as f64).collect(),
            eps_e: 1.0,
            eps_i: Permittivity::Infinite,
            psi_mode: CellMode::PsiLimitNeumann,
            xi_mode: CellMode::XiLimitNeumann,
            rho: FieldExpr::parse("sin(2*pi*X1)").unwrap(),
            anchor: [0.5, 0.5],
            target_h: 0.02,
        })
        .unwrap()
    }

    #[test]
    #[ignore = "F and G forms differ by the inclusion dipole; see g_plus_dipole_matches_f"]
    fn charge_forms_agree() {
        let t = charge_table();
        let a = FieldExpr::parse("0.1*x1").unwrap();
        for k in 0..5 {
            let d = rho_eff_flux_divergence(&t, &a, [1.0 + 0.5 * k as f64, 0.5]).unwrap();
            assert!(((d.f_form - d.g_form) / d.f_form).abs() < 1e-2, "{d:?}");
        }
    }

    #[test]
    fn g_plus_dipole_matches_f() {
        let t = charge_table();
        let a = FieldExpr::parse("0.1*x1").unwrap();
        for k in 0..5 {
            let x1 = 1.0 + 0.5 * k as f64;
            let d = rho_eff_flux_divergence(&t, &a, [x1, 0.5]).unwrap();
            let p = 0.1 * t.ddipole_da(0.1 * x1).unwrap()[0];
            assert!(((d.g_form + p - d.f_form) / d.f_form).abs() < 1e-2, "a={}: {d:?} dipole {p}", 0.1 * x1);
        }
    }

    #[test]
    fn bounds_hold_for_finite_contrast() {
        for (a, e) in [(0.1, 5.0), (0.3, 50.0), (0.35, 0.1)] {
            let s = psi(a, 0.04, Permittivity::Finite(e), CellMode::PsiFinite);
            for c in [epsilon_volume(&s), epsilon_boundary(&s)] {
                assert!(c.check_invariants().is_empty(), "a={a} eps={e}: {:?}", c.check_invariants());
            }
        }
    }

    #[test]
    fn cell_average_values() {
        let p = |s: &str| FieldExpr::parse(s).unwrap();
        assert!((rho_eff_cell_average(&p("1"), [0.2, 0.3]).unwrap() - 1.0).abs() < 1e-10);
        assert!(rho_eff_cell_average(&p("sin(2*pi*X1)"), [0.0, 0.0]).unwrap().abs() < 1e-10);
        assert!((rho_eff_cell_average(&p("X1"), [0.0, 0.0]).unwrap() - 0.5).abs() < 1e-8);
        assert!((rho_eff_cell_average(&p("x1*X2^2"), [0.6, 0.0]).unwrap() - 0.2).abs() < 1e-12);
    }

    fn table(a_values: Vec<f64>, eps_i: Permittivity, psi_mode: CellMode, xi_mode: CellMode, rho: &str) -> EffectiveTable {
        build_effective_table(&TableConfig {
            a_values,
            eps_e: 1.0,
            eps_i,
            psi_mode,
            xi_mode,
            rho: FieldExpr::parse(rho).unwrap(),
            anchor: [0.0, 0.0],
            target_h: 0.05,
        })
        .unwrap()
    }

    #[test]
    fn no_contrast_table_is_flat() {
        let t = table(vec![0.1, 0.15, 0.2, 0.25, 0.3], Permittivity::Finite(1.0), CellMode::PsiFinite, CellMode::XiFinite, "0");
        for e in &t.eps_iso {
            assert!((e - 1.0).abs() < 1e-10);
        }
        let a = FieldExpr::parse("0.2 + 0.1*x1").unwrap();
        let d = rho_eff_flux_divergence(&t, &a, [0.1, 0.0]).unwrap();
        assert!(d.f_form.abs() < 1e-10 && d.g_form.abs() < 1e-10);
    }

    #[test]
    fn high_contrast_table_increases() {
        let t = table(vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3], Permittivity::Finite(1e6), CellMode::PsiFinite, CellMode::XiFinite, "0");
        assert!(t.check_monotone().is_empty());
        assert!((t.eps_iso[0] - 1.0) < 0.02);
        let csv = t.to_csv();
        assert!(csv.starts_with("a,eps_iso,F1,F2,G1,G2\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn table_preconditions() {
        let cfg = |a: Vec<f64>| TableConfig {
            a_values: a,
            eps_e: 1.0,
            eps_i: Permittivity::Finite(2.0),
            psi_mode: CellMode::PsiFinite,
            xi_mode: CellMode::XiFinite,
            rho: FieldExpr::constant(0.0),
            anchor: [0.0, 0.0],
            target_h: 0.1,
        };
        assert!(matches!(build_effective_table(&cfg(vec![0.1, 0.15, 0.15, 0.2, 0.25])), Err(EffectiveError::Precondition(_))));
        assert!(matches!(build_effective_table(&cfg(vec![0.1, 0.15, 0.2])), Err(EffectiveError::Precondition(_))));
        assert!(matches!(build_effective_table(&cfg(vec![0.01, 0.15, 0.2, 0.25, 0.3])), Err(EffectiveError::Precondition(_))));
    }

    #[test]
    fn flat_slow_radius_gives_zero_charge() {
        let t = EffectiveTable {
            a_values: vec![0.1, 0.2, 0.3, 0.4],
            eps_iso: vec![1.0; 4],
            f: vec![[1.0, 0.0], [2.0, 0.0], [4.0, 0.0], [8.0, 0.0]],
            g: vec![[0.0; 2]; 4],
            dipole: vec![[0.0; 2]; 4],
            eps_e: 1.0,
        };
        let d = rho_eff_flux_divergence(&t, &FieldExpr::constant(0.25), [0.5, 0.5]).unwrap();
        assert_eq!(d.f_form, 0.0);
        // slope of F1 at a = 0.2 is (4 - 1) / 0.2 = 15, times da/dx1 = 0.5
        let a = FieldExpr::parse("0.2 + 0.5*(x1 - 0.5)").unwrap();
        let d = rho_eff_flux_divergence(&t, &a, [0.5, 0.5]).unwrap();
        assert!((d.f_form - 7.5).abs() < 1e-8);
        assert!(matches!(t.df_da(0.35), Err(EffectiveError::OutOfRange { .. })));
    }

    #[test]
    fn cubic_interpolation_reproduces_nodes() {
        let xs = [0.1, 0.2, 0.3, 0.4, 0.5];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * PI * x * x).collect();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((monotone_cubic(&xs, &ys, *x) - y).abs() < 1e-14);
        }
        let mid = monotone_cubic(&xs, &ys, 0.25);
        assert!((mid - (1.0 + 2.0 * PI * 0.0625)).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn cubic_interpolant_never_overshoots(steps in prop::collection::vec(0.0f64..1.0, 4..10), x in 0.0f64..1.0) {
            let n = steps.len();
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let mut ys = Vec::with_capacity(n);
            let mut acc = 0.0;
            for s in &steps {
                acc += s;
                ys.push(acc);
            }
            let v = monotone_cubic(&xs, &ys, x);
            let i = ((x * (n - 1) as f64).floor() as usize).min(n - 2);
            prop_assert!(v >= ys[i] - 1e-12 && v <= ys[i + 1] + 1e-12);
        }
    }
}
