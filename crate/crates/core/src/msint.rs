//! Integral constraints over slowly varying inclusions in multiple-scales
//! form.
//!
//! A flux `Q(x, X)` is integrated over the boundary of the inclusion of the
//! cell whose corner sits at the macro point `x_hat`. The cell is scaled by
//! `delta` and its inclusion radius follows `a(x)`, so the true boundary is
//! not a circle. [`ms_form_correct`] expands the integral about the circle
//! of radius `a(x_hat)` using only its normal `n0`; [`ms_form_naive`]
//! expands integrand and normal separately and is off by one order.
//! [`brute_force`] evaluates the integral on the true boundary and serves
//! as the oracle.
//!
//! Every form carries the curve-measure prefactor `delta^p`. Residuals in
//! [`MsIntReport`] are divided by it, so their slopes measure the order of
//! the bracketed expansion.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::cellsolve::CellSolution;
use crate::exprlang::{Bindings, ExprError, FieldExpr, Var};
use crate::geometry::{BoundaryQuadrature, CellGeometry, CellMesh, GeometryError, CENTER};
use crate::stats::loglog_slope_above;

pub const MAX_DELTA: f64 = 0.2;
pub const MIN_ORACLE_POINTS: usize = 512;
/// Sign of the open-arc endpoint term, fixed by the oracle calibration in
/// `tests::endpoint_sign_calibration`.
pub const ENDPOINT_SIGN: f64 = -1.0;
/// Residuals below this are rounding noise and left out of slope fits.
pub const RESIDUAL_FLOOR: f64 = 1e-13;

const FIXED_POINT_TOL: f64 = 1e-14;
const FIXED_POINT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MsIntError {
    #[error("delta = {0} outside (0, {MAX_DELTA}]")]
    Delta(f64),
    #[error("flux evaluation failed: {0}")]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("boundary fixed point did not converge at theta = {theta:.4} (delta = {delta})")]
    FixedPoint { theta: f64, delta: f64 },
    #[error("oracle needs at least {MIN_ORACLE_POINTS} quadrature points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate arc [{start}, {end}]")]
    DegenerateArc { start: f64, end: f64 },
    #[error("quadrature radius {quad} does not match geometry radius {geom}")]
    QuadratureMismatch { quad: f64, geom: f64 },
    #[error("order study needs at least 3 geometrically spaced delta values")]
    Deltas,
    #[error("flux not evaluable at x = {x:?}, X = {fast:?}")]
    NotEvaluable { x: [f64; 2], fast: [f64; 2] },
}

/// Flux `Q(x, X)`: either two expressions or the cell flux
/// `Q0 = grad_X phi1 + grad_x phi0` recovered from a cell solution.
#[derive(Debug, Clone)]
pub enum FluxField {
    Analytic { q: [FieldExpr; 2], fd_step: f64 },
    Discrete(DiscreteFlux),
}

/// `Q0 = G + sum_i G_i grad_X Psi_i` for a fixed macro gradient `G`, read on
/// the exterior side of each interface edge. Independent of `x` and
/// divergence free in the fast variables.
#[derive(Debug, Clone)]
pub struct DiscreteFlux {
    edges: Vec<([f64; 2], [f64; 2], [f64; 2])>,
}

impl FluxField {
    pub fn analytic(q1: &str, q2: &str) -> Result<Self, ExprError> {
        Ok(FluxField::Analytic {
            q: [FieldExpr::parse(q1)?, FieldExpr::parse(q2)?],
            fd_step: 1e-5,
        })
    }

    pub fn from_exprs(q1: FieldExpr, q2: FieldExpr) -> Self {
        FluxField::Analytic { q: [q1, q2], fd_step: 1e-5 }
    }

    /// Builds `Q0` from the exterior gradients of a `Psi` solution.
    pub fn from_cell_solution(sol: &CellSolution, macro_gradient: [f64; 2]) -> Option<Self> {
        let psi = sol.psi.as_ref()?;
        let mesh = sol.mesh();
        Some(FluxField::Discrete(DiscreteFlux::new(mesh, psi, macro_gradient)))
    }

    pub fn value(&self, x: [f64; 2], fast: [f64; 2]) -> Result<[f64; 2], MsIntError> {
        match self {
            FluxField::Analytic { q, .. } => {
                let b = Bindings::at(x, fast);
                Ok([q[0].evaluate(&b)?, q[1].evaluate(&b)?])
            }
            FluxField::Discrete(d) => Ok(d.value(fast)),
        }
    }

    /// `(d . grad_x) Q` at `(x, X)`.
    pub fn slow_directional(&self, x: [f64; 2], fast: [f64; 2], d: [f64; 2]) -> Result<[f64; 2], MsIntError> {
        match self {
            FluxField::Analytic { q, fd_step } => {
                let b = Bindings::at(x, fast);
                let mut out = [0.0; 2];
                for k in 0..2 {
                    let g = q[k].slow_gradient(&b, *fd_step)?;
                    out[k] = d[0] * g[0] + d[1] * g[1];
                }
                Ok(out)
            }
            FluxField::Discrete(_) => Ok([0.0; 2]),
        }
    }

    /// `grad_X . Q` at `(x, X)`.
    pub fn fast_divergence(&self, x: [f64; 2], fast: [f64; 2]) -> Result<f64, MsIntError> {
        match self {
            FluxField::Analytic { q, fd_step } => {
                let b = Bindings::at(x, fast);
                Ok(q[0].gradient_fd(Var::X1Fast, &b, *fd_step)? + q[1].gradient_fd(Var::X2Fast, &b, *fd_step)?)
            }
            FluxField::Discrete(_) => Ok(0.0),
        }
    }

    /// Checks the components evaluate to finite values on a grid over the
    /// unit box in all four variables.
    pub fn check_evaluable(&self) -> Result<(), MsIntError> {
        let s = [0.0, 0.25, 0.5, 0.75, 1.0];
        for &x1 in &s {
            for &x2 in &s {
                for &y1 in &s {
                    for &y2 in &s {
                        let (x, fast) = ([x1, x2], [y1, y2]);
                        let v = self.value(x, fast).map_err(|_| MsIntError::NotEvaluable { x, fast })?;
                        if !v.iter().all(|c| c.is_finite()) {
                            return Err(MsIntError::NotEvaluable { x, fast });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl DiscreteFlux {
    fn new(mesh: &CellMesh, psi: &[Vec<f64>; 2], g: [f64; 2]) -> Self {
        let edges = mesh
            .interface_edges
            .iter()
            .map(|e| {
                let t = e.exterior_tri;
                let d0 = mesh.gradient(t, &psi[0]);
                let d1 = mesh.gradient(t, &psi[1]);
                let q = [g[0] + g[0] * d0[0] + g[1] * d1[0], g[1] + g[0] * d0[1] + g[1] * d1[1]];
                let p = mesh.vertices[e.v[0]];
                let r = mesh.vertices[e.v[1]];
                ([p[0] - CENTER[0], p[1] - CENTER[1]], [r[0] - CENTER[0], r[1] - CENTER[1]], q)
            })
            .collect();
        Self { edges }
    }

    fn value(&self, fast: [f64; 2]) -> [f64; 2] {
        let d = [fast[0] - CENTER[0], fast[1] - CENTER[1]];
        let cross = |u: [f64; 2], w: [f64; 2]| u[0] * w[1] - u[1] * w[0];
        self.edges
            .iter()
            .find(|(p, r, _)| cross(*p, d) >= 0.0 && cross(d, *r) >= 0.0)
            .or_else(|| {
                // nearest edge midpoint direction, for points exactly on a ray
                self.edges.iter().min_by(|a, b| {
                    let da = dist2(mid(a.0, a.1), d);
                    let db = dist2(mid(b.0, b.1), d);
                    da.total_cmp(&db)
                })
            })
            .map_or([0.0; 2], |e| e.2)
    }
}

fn mid(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
}

fn dist2(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsIntSettings {
    /// Exponent `p` of the curve-measure prefactor `delta^p`.
    pub prefactor_exponent: f64,
}

impl Default for MsIntSettings {
    fn default() -> Self {
        Self { prefactor_exponent: 1.0 }
    }
}

impl MsIntSettings {
    fn prefactor(&self, delta: f64) -> f64 {
        delta.powf(self.prefactor_exponent)
    }
}

fn check_delta(delta: f64) -> Result<(), MsIntError> {
    if delta > 0.0 && delta <= MAX_DELTA {
        Ok(())
    } else {
        Err(MsIntError::Delta(delta))
    }
}

fn check_quad(geom: &CellGeometry, quad: &BoundaryQuadrature) -> Result<(), MsIntError> {
    if (quad.radius - geom.radius()).abs() > 1e-14 {
        return Err(MsIntError::QuadratureMismatch {
            quad: quad.radius,
            geom: geom.radius(),
        });
    }
    Ok(())
}

/// Geometry of the cell at `x_hat`: radius `a(x_hat)` and its slow gradient.
pub fn geometry_at(a_of_x: &FieldExpr, x_hat: [f64; 2]) -> Result<CellGeometry, MsIntError> {
    let b = Bindings::slow(x_hat);
    let a = a_of_x.evaluate(&b)?;
    let g = a_of_x.slow_gradient(&b, 1e-5)?;
    Ok(CellGeometry::new(a, g)?)
}

/// Sum over the nodes of the correct-form integrand, without prefactor.
fn correct_bracket(
    flux: &FluxField,
    geom: &CellGeometry,
    x_hat: [f64; 2],
    delta: f64,
    quad: &BoundaryQuadrature,
) -> Result<f64, MsIntError> {
    let ga = geom.grad_a();
    let mut sum = 0.0;
    for i in 0..quad.len() {
        let p = quad.points[i];
        let n0 = quad.normals0[i];
        let q = flux.value(x_hat, p)?;
        let dq = flux.slow_directional(x_hat, p, p)?;
        let div = flux.fast_divergence(x_hat, p)?;
        let mut f = dot(q, n0) + delta * dot(dq, n0);
        if delta != 0.0 && div != 0.0 {
            // (X . V) . n0 = X . grad_a
            f += delta * div * dot(p, ga);
        }
        sum += quad.weights[i] * f;
    }
    Ok(sum)
}

/// Multiple-scales form of the flux integral over the closed inclusion
/// boundary, expanded about the circle of radius `a(x_hat)`.
pub fn ms_form_correct(
    flux: &FluxField,
    geom: &CellGeometry,
    x_hat: [f64; 2],
    delta: f64,
    quad: &BoundaryQuadrature,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    check_delta(delta)?;
    check_quad(geom, quad)?;
    Ok(settings.prefactor(delta) * correct_bracket(flux, geom, x_hat, delta, quad)?)
}

/// Integrand and normal expanded separately: `[Q + delta X.grad_x Q] .
/// (n0 + delta n1)`.
pub fn ms_form_naive(
    flux: &FluxField,
    geom: &CellGeometry,
    x_hat: [f64; 2],
    delta: f64,
    quad: &BoundaryQuadrature,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    check_delta(delta)?;
    check_quad(geom, quad)?;
    let mut sum = 0.0;
    for i in 0..quad.len() {
        let p = quad.points[i];
        let q = flux.value(x_hat, p)?;
        let dq = flux.slow_directional(x_hat, p, p)?;
        let f = [q[0] + delta * dq[0], q[1] + delta * dq[1]];
        let n = [
            quad.normals0[i][0] + delta * quad.normals1[i][0],
            quad.normals0[i][1] + delta * quad.normals1[i][1],
        ];
        sum += quad.weights[i] * dot(f, n);
    }
    Ok(settings.prefactor(delta) * sum)
}

/// `oint Q0 . n1 dS`, the term the naive expansion picks up.
pub fn discrepancy_term(flux: &FluxField, x_hat: [f64; 2], quad: &BoundaryQuadrature) -> Result<f64, MsIntError> {
    let mut sum = 0.0;
    for i in 0..quad.len() {
        sum += quad.weights[i] * dot(flux.value(x_hat, quad.points[i])?, quad.normals1[i]);
    }
    Ok(sum)
}

/// `oint (grad_X . Q0) (X . V) . n0 dS`, the boundary-motion term the
/// naive expansion misses.
pub fn divergence_term(
    flux: &FluxField,
    geom: &CellGeometry,
    x_hat: [f64; 2],
    quad: &BoundaryQuadrature,
) -> Result<f64, MsIntError> {
    let ga = geom.grad_a();
    let mut sum = 0.0;
    for i in 0..quad.len() {
        let p = quad.points[i];
        sum += quad.weights[i] * flux.fast_divergence(x_hat, p)? * dot(p, ga);
    }
    Ok(sum)
}

/// Radius of the true boundary at angle `theta`: the fixed point of
/// `r = a(x_hat + delta (c + r r_hat))`, with `dr/dtheta`.
fn true_radius(a_of_x: &FieldExpr, x_hat: [f64; 2], delta: f64, theta: f64) -> Result<(f64, f64), MsIntError> {
    let rh = [theta.cos(), theta.sin()];
    let at = |r: f64| [x_hat[0] + delta * (CENTER[0] + r * rh[0]), x_hat[1] + delta * (CENTER[1] + r * rh[1])];
    let mut r = a_of_x.evaluate(&Bindings::slow(x_hat))?;
    let mut converged = false;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = a_of_x.evaluate(&Bindings::slow(at(r)))?;
        if !next.is_finite() || next <= 0.0 || next >= 0.5 {
            break;
        }
        let done = (next - r).abs() <= FIXED_POINT_TOL * r.max(1.0);
        r = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MsIntError::FixedPoint { theta, delta });
    }
    let g = a_of_x.slow_gradient(&Bindings::slow(at(r)), 1e-6)?;
    let denom = 1.0 - delta * dot(g, rh);
    if denom <= 0.0 {
        return Err(MsIntError::FixedPoint { theta, delta });
    }
    let tangent = [-rh[1], rh[0]];
    Ok((r, delta * r * dot(g, tangent) / denom))
}

/// `Q(x_hat + delta X, X) . n dS / dtheta` on the true boundary.
fn oracle_integrand(
    flux: &FluxField,
    a_of_x: &FieldExpr,
    x_hat: [f64; 2],
    delta: f64,
    theta: f64,
) -> Result<f64, MsIntError> {
    let (r, dr) = true_radius(a_of_x, x_hat, delta, theta)?;
    let (c, s) = (theta.cos(), theta.sin());
    let p = [CENTER[0] + r * c, CENTER[1] + r * s];
    let dp = [dr * c - r * s, dr * s + r * c];
    let x = [x_hat[0] + delta * p[0], x_hat[1] + delta * p[1]];
    let q = flux.value(x, p)?;
    // outward normal of a counter-clockwise curve times |dp|
    Ok(q[0] * dp[1] - q[1] * dp[0])
}

/// Flux through the true inclusion boundary of the cell at `x_hat`,
/// trapezoid rule in angle with `n_quad` nodes.
pub fn brute_force(
    flux: &FluxField,
    a_of_x: &FieldExpr,
    x_hat: [f64; 2],
    delta: f64,
    n_quad: usize,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    brute_force_offset(flux, a_of_x, x_hat, delta, n_quad, 0.0, settings)
}

/// [`brute_force`] with the first node at angle `offset`.
pub fn brute_force_offset(
    flux: &FluxField,
    a_of_x: &FieldExpr,
    x_hat: [f64; 2],
    delta: f64,
    n_quad: usize,
    offset: f64,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    check_delta(delta)?;
    if n_quad < MIN_ORACLE_POINTS {
        return Err(MsIntError::TooFewPoints(n_quad));
    }
    let h = 2.0 * PI / n_quad as f64;
    let mut sum = 0.0;
    for i in 0..n_quad {
        sum += oracle_integrand(flux, a_of_x, x_hat, delta, offset + h * i as f64)?;
    }
    Ok(settings.prefactor(delta) * h * sum)
}

/// An arc of the inclusion boundary between two polar angles.
#[derive(Debug, Clone, Copy)]
pub struct Arc {
    pub geom: CellGeometry,
    pub theta_start: f64,
    pub theta_end: f64,
}

impl Arc {
    pub fn new(geom: CellGeometry, theta_start: f64, theta_end: f64) -> Result<Self, MsIntError> {
        let span = theta_end - theta_start;
        if !(span > 0.0 && span <= 2.0 * PI + 1e-12 && theta_start.is_finite()) {
            return Err(MsIntError::DegenerateArc {
                start: theta_start,
                end: theta_end,
            });
        }
        Ok(Self {
            geom,
            theta_start,
            theta_end,
        })
    }

    pub fn is_full_circle(&self) -> bool {
        (self.theta_end - self.theta_start - 2.0 * PI).abs() < 1e-12
    }

    /// Gauss–Legendre nodes on the arc.
    pub fn quadrature(&self, panels: usize, order: usize) -> BoundaryQuadrature {
        self.geom.arc_quadrature(self.theta_start, self.theta_end, panels, order)
    }
}

/// Correct form on an open arc, including the endpoint term
/// `ENDPOINT_SIGN delta^(p+1) [(X.V) x Q]` from `theta_start` to `theta_end`.
pub fn open_curve_form(
    flux: &FluxField,
    arc: &Arc,
    x_hat: [f64; 2],
    delta: f64,
    quad: &BoundaryQuadrature,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    check_delta(delta)?;
    check_quad(&arc.geom, quad)?;
    let bracket = correct_bracket(flux, &arc.geom, x_hat, delta, quad)?;
    let ga = arc.geom.grad_a();
    let endpoint = |theta: f64| -> Result<f64, MsIntError> {
        let p = arc.geom.boundary_point(theta);
        let rh = [theta.cos(), theta.sin()];
        // (X . V)_k = (X . grad_a) r_hat_k
        let s = dot(p, ga);
        let xv = [s * rh[0], s * rh[1]];
        Ok(cross(xv, flux.value(x_hat, p)?))
    };
    let ends = endpoint(arc.theta_end)? - endpoint(arc.theta_start)?;
    Ok(settings.prefactor(delta) * (bracket + ENDPOINT_SIGN * delta * ends))
}

/// Flux through the true boundary restricted to the angles of `arc`,
/// composite Gauss–Legendre with `panels` panels of `order` nodes.
pub fn brute_force_arc(
    flux: &FluxField,
    a_of_x: &FieldExpr,
    arc: &Arc,
    x_hat: [f64; 2],
    delta: f64,
    panels: usize,
    order: usize,
    settings: &MsIntSettings,
) -> Result<f64, MsIntError> {
    check_delta(delta)?;
    let (nodes, weights) = crate::quad::composite_gl(arc.theta_start, arc.theta_end, panels, order);
    let mut sum = 0.0;
    for (t, w) in nodes.into_iter().zip(weights) {
        sum += w * oracle_integrand(flux, a_of_x, x_hat, delta, t)?;
    }
    Ok(settings.prefactor(delta) * sum)
}

/// What an order study integrates over.
#[derive(Debug, Clone, Copy)]
pub enum Target {
    Closed,
    Arc { theta_start: f64, theta_end: f64 },
}

#[derive(Debug, Clone)]
pub struct OrderStudyConfig {
    pub a_of_x: FieldExpr,
    pub x_hat: [f64; 2],
    pub target: Target,
    pub delta_values: Vec<f64>,
    /// Trapezoid nodes for closed-curve forms and oracle.
    pub n_quad: usize,
    pub settings: MsIntSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsIntReport {
    pub delta_values: Vec<f64>,
    pub correct_values: Vec<f64>,
    pub naive_values: Vec<f64>,
    pub oracle_values: Vec<f64>,
    /// `|form - oracle| / delta^p`.
    pub correct_residuals: Vec<f64>,
    pub naive_residuals: Vec<f64>,
    pub slope_correct: f64,
    pub slope_naive: f64,
    pub discrepancy_term: f64,
    pub divergence_term: f64,
}

impl MsIntReport {
    /// Naive misfit `(naive - oracle) / delta^(p+1)` at each delta.
    pub fn naive_misfit_coefficients(&self, settings: &MsIntSettings) -> Vec<f64> {
        self.delta_values
            .iter()
            .zip(self.naive_values.iter().zip(&self.oracle_values))
            .map(|(&d, (n, o))| (n - o) / (settings.prefactor(d) * d))
            .collect()
    }

    /// First-order misfit the expansion predicts for the naive form.
    pub fn predicted_misfit_coefficient(&self) -> f64 {
        self.discrepancy_term - self.divergence_term
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,correct,naive,oracle,res_correct,res_naive\n");
        for i in 0..self.delta_values.len() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.delta_values[i],
                self.correct_values[i],
                self.naive_values[i],
                self.oracle_values[i],
                self.correct_residuals[i],
                self.naive_residuals[i]
            );
        }
        let _ = writeln!(
            s,
            "slope_correct={:.6},slope_naive={:.6},discrepancy={:.16e}",
            self.slope_correct, self.slope_naive, self.discrepancy_term
        );
        s
    }
}

fn geometrically_spaced(d: &[f64]) -> bool {
    if d.len() < 3 || d.iter().any(|&v| !(v > 0.0 && v <= MAX_DELTA)) {
        return false;
    }
    let ratios: Vec<f64> = d.windows(2).map(|w| w[0] / w[1]).collect();
    ratios
        .iter()
        .all(|&r| r > 1.0 && (r / ratios[0] - 1.0).abs() < 1e-6)
}

fn slope(delta: &[f64], res: &[f64]) -> f64 {
    // every residual at the rounding floor: the form is exact to this order
    loglog_slope_above(delta, res, RESIDUAL_FLOOR).unwrap_or(f64::INFINITY)
}

/// Correct form, naive form and oracle at each delta, with residual slopes.
/// Deltas run in parallel.
pub fn order_study(flux: &FluxField, cfg: &OrderStudyConfig) -> Result<MsIntReport, MsIntError> {
    if !geometrically_spaced(&cfg.delta_values) {
        return Err(MsIntError::Deltas);
    }
    if cfg.n_quad < MIN_ORACLE_POINTS {
        return Err(MsIntError::TooFewPoints(cfg.n_quad));
    }
    let geom = geometry_at(&cfg.a_of_x, cfg.x_hat)?;
    let s = &cfg.settings;
    let (quad, arc) = match cfg.target {
        Target::Closed => (geom.boundary_quadrature(cfg.n_quad), None),
        Target::Arc { theta_start, theta_end } => {
            let arc = Arc::new(geom, theta_start, theta_end)?;
            (arc.quadrature(32, 16), Some(arc))
        }
    };
    let rows: Vec<(f64, f64, f64)> = cfg
        .delta_values
        .par_iter()
        .map(|&d| -> Result<(f64, f64, f64), MsIntError> {
            let naive = ms_form_naive(flux, &geom, cfg.x_hat, d, &quad, s)?;
            match &arc {
                None => Ok((
                    ms_form_correct(flux, &geom, cfg.x_hat, d, &quad, s)?,
                    naive,
                    brute_force(flux, &cfg.a_of_x, cfg.x_hat, d, cfg.n_quad, s)?,
                )),
                Some(arc) => Ok((
                    open_curve_form(flux, arc, cfg.x_hat, d, &quad, s)?,
                    naive,
                    brute_force_arc(flux, &cfg.a_of_x, arc, cfg.x_hat, d, 32, 16, s)?,
                )),
            }
        })
        .collect::<Result<_, _>>()?;
    let correct_values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let naive_values: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let oracle_values: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let norm = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&oracle_values)
            .zip(&cfg.delta_values)
            .map(|((f, o), &d)| (f - o).abs() / s.prefactor(d))
            .collect()
    };
    let correct_residuals = norm(&correct_values);
    let naive_residuals = norm(&naive_values);
    Ok(MsIntReport {
        slope_correct: slope(&cfg.delta_values, &correct_residuals),
        slope_naive: slope(&cfg.delta_values, &naive_residuals),
        discrepancy_term: discrepancy_term(flux, cfg.x_hat, &quad)?,
        divergence_term: divergence_term(flux, &geom, cfg.x_hat, &quad)?,
        delta_values: cfg.delta_values.clone(),
        correct_values,
        naive_values,
        oracle_values,
        correct_residuals,
        naive_residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc as Shared;

    use crate::cellsolve::{solve, CellMode, CellProblemSpec, Permittivity};
    use crate::geometry::build_cell_mesh;

    const X_HAT: [f64; 2] = [0.4, 0.3];
    const DELTAS: [f64; 3] = [0.1, 0.05, 0.025];

    fn s() -> MsIntSettings {
        MsIntSettings::default()
    }

    fn generic_flux() -> FluxField {
        FluxField::analytic("X1^2*(1+x1) + sin(X2)*x2", "X1*X2 + cos(x1)*X2^2").unwrap()
    }

    fn slope_a() -> FieldExpr {
        FieldExpr::parse("0.25 + 0.1*x1").unwrap()
    }

    fn study(flux: &FluxField, a: FieldExpr, target: Target) -> MsIntReport {
        order_study(
            flux,
            &OrderStudyConfig {
                a_of_x: a,
                x_hat: X_HAT,
                target,
                delta_values: DELTAS.to_vec(),
                n_quad: 1024,
                settings: s(),
            },
        )
        .unwrap()
    }

    #[test]
    fn correct_form_without_slow_dependence_or_gradient() {
        let flux = FluxField::analytic("X1^2 + X2", "X1*X2").unwrap();
        let geom = CellGeometry::uniform(0.3).unwrap();
        let q = geom.boundary_quadrature(256);
        let d = 0.05;
        let plain = q.integrate(|i| dot(flux.value(X_HAT, q.points[i]).unwrap(), q.normals0[i]));
        let c = ms_form_correct(&flux, &geom, X_HAT, d, &q, &s()).unwrap();
        assert_eq!(c, d * plain);
    }

    #[test]
    fn correction_term_for_radial_flux() {
        // Q = X: div = 2, oint X.grad_a dS = g oint X1 dS = g pi a
        let (a, g, d) = (0.3, 0.2, 0.05);
        let flux = FluxField::analytic("X1", "X2").unwrap();
        let geom = CellGeometry::new(a, [g, 0.0]).unwrap();
        let q = geom.boundary_quadrature(10_000);
        let c = ms_form_correct(&flux, &geom, X_HAT, d, &q, &s()).unwrap();
        let exact = d * (2.0 * PI * a * a + d * 2.0 * g * PI * a);
        assert!((c - exact).abs() < 1e-10, "{c} vs {exact}");
    }

    #[test]
    fn naive_equals_correct_without_gradient() {
        let flux = generic_flux();
        let geom = CellGeometry::uniform(0.25).unwrap();
        let q = geom.boundary_quadrature(512);
        for d in DELTAS {
            let c = ms_form_correct(&flux, &geom, X_HAT, d, &q, &s()).unwrap();
            let n = ms_form_naive(&flux, &geom, X_HAT, d, &q, &s()).unwrap();
            assert!((c - n).abs() < 1e-15, "{c} {n}");
        }
    }

    #[test]
    fn delta_range_enforced() {
        let flux = generic_flux();
        let geom = CellGeometry::uniform(0.25).unwrap();
        let q = geom.boundary_quadrature(64);
        assert!(matches!(ms_form_correct(&flux, &geom, X_HAT, 0.0, &q, &s()), Err(MsIntError::Delta(_))));
        assert!(matches!(ms_form_naive(&flux, &geom, X_HAT, 0.3, &q, &s()), Err(MsIntError::Delta(_))));
        let a = slope_a();
        assert!(matches!(brute_force(&flux, &a, X_HAT, 0.1, 256, &s()), Err(MsIntError::TooFewPoints(256))));
    }

    #[test]
    fn brute_force_constant_radius() {
        let flux = generic_flux();
        let a = FieldExpr::constant(0.3);
        let (r, dr) = true_radius(&a, X_HAT, 0.1, 1.0).unwrap();
        assert_eq!((r, dr), (0.3, 0.0));
        // with a constant radius the only difference is the slow argument of Q
        let flux_fast = FluxField::analytic("X1^2 + X2", "X1*X2").unwrap();
        let geom = CellGeometry::uniform(0.3).unwrap();
        let q = geom.boundary_quadrature(1024);
        let bf = brute_force(&flux_fast, &a, X_HAT, 0.1, 1024, &s()).unwrap();
        let plain = 0.1 * q.integrate(|i| dot(flux_fast.value(X_HAT, q.points[i]).unwrap(), q.normals0[i]));
        assert!((bf - plain).abs() < 1e-13);
        assert!(brute_force(&flux, &a, X_HAT, 0.1, 1024, &s()).unwrap().is_finite());
    }

    #[test]
    fn brute_force_spectral_and_reparametrisation_invariant() {
        let flux = generic_flux();
        let a = FieldExpr::parse("0.25 + 0.1*x1 + 0.05*x2^2").unwrap();
        let b1 = brute_force(&flux, &a, X_HAT, 0.1, 512, &s()).unwrap();
        let b2 = brute_force(&flux, &a, X_HAT, 0.1, 1024, &s()).unwrap();
        assert!((b1 - b2).abs() < 1e-12, "{b1} {b2}");
        let b3 = brute_force_offset(&flux, &a, X_HAT, 0.1, 512, 0.377, &s()).unwrap();
        assert!((b1 - b3).abs() < 1e-12);
    }

    #[test]
    fn brute_force_constant_flux_vanishes() {
        let flux = FluxField::analytic("1", "0").unwrap();
        let a = FieldExpr::parse("0.2 + 0.3*x1*x2").unwrap();
        let v = brute_force(&flux, &a, X_HAT, 0.2, 512, &s()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn fixed_point_failure() {
        let flux = generic_flux();
        let a = FieldExpr::parse("0.3 + 3*x1").unwrap();
        assert!(matches!(brute_force(&flux, &a, [0.0, 0.0], 0.2, 512, &s()), Err(MsIntError::FixedPoint { .. })));
    }

    #[test]
    fn discrepancy_trivial_cases() {
        let flux = generic_flux();
        let q = CellGeometry::uniform(0.3).unwrap().boundary_quadrature(256);
        assert_eq!(discrepancy_term(&flux, X_HAT, &q).unwrap(), 0.0);
        let radial = FluxField::analytic("(X1-0.5)/sqrt((X1-0.5)^2+(X2-0.5)^2)", "(X2-0.5)/sqrt((X1-0.5)^2+(X2-0.5)^2)").unwrap();
        let q = CellGeometry::new(0.3, [0.1, -0.2]).unwrap().boundary_quadrature(256);
        assert!(discrepancy_term(&radial, X_HAT, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn discrepancy_from_cell_solution() {
        let geom = CellGeometry::new(0.3, [0.1, 0.0]).unwrap();
        let mesh = Shared::new(build_cell_mesh(&geom, 0.025).unwrap());
        let sol = solve(&CellProblemSpec::psi(mesh, 1.0, Permittivity::Finite(10.0), CellMode::PsiFinite)).unwrap();
        let q0 = FluxField::from_cell_solution(&sol, [1.0, 0.0]).unwrap();
        let quad = geom.boundary_quadrature(720);
        let d = discrepancy_term(&q0, X_HAT, &quad).unwrap();
        assert!(d.abs() > 1e-3, "{d}");
        // n1 is 0.1 sin(theta) times the tangent; with the macro field along x2
        // the tangential flux is even in theta about pi/2 and the term cancels
        let q1 = FluxField::from_cell_solution(&sol, [0.0, 1.0]).unwrap();
        let d1 = discrepancy_term(&q1, X_HAT, &quad).unwrap();
        assert!(d1.abs() < 1e-2 * d.abs(), "{d1} {d}");
    }

    #[test]
    fn correct_form_converges_at_second_order() {
        let r = study(&generic_flux(), slope_a(), Target::Closed);
        assert!(r.slope_correct >= 1.9, "{r:?}");
        for v in r.correct_residuals.iter().chain(&r.naive_residuals) {
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn naive_form_is_first_order() {
        let r = study(&generic_flux(), slope_a(), Target::Closed);
        assert!(r.slope_naive <= 1.2, "{}", r.slope_naive);
        assert!(r.slope_naive > 0.8);
    }

    #[test]
    fn naive_misfit_matches_boundary_terms() {
        let r = study(&generic_flux(), slope_a(), Target::Closed);
        let measured = *r.naive_misfit_coefficients(&s()).last().unwrap();
        let predicted = r.predicted_misfit_coefficient();
        assert!(((measured - predicted) / predicted).abs() < 0.05, "{measured} vs {predicted}");
    }

    #[test]
    fn both_forms_second_order_without_gradient() {
        let r = study(&generic_flux(), FieldExpr::constant(0.3), Target::Closed);
        assert!(r.slope_correct >= 1.9 && r.slope_naive >= 1.9, "{r:?}");
    }

    #[test]
    fn divergence_free_flux_has_no_motion_term() {
        // rotate90 of grad of X1^2 - X2^2
        let flux = FluxField::analytic("2*X2*(1+x1)", "2*X1*(1+x1)").unwrap();
        let geom = CellGeometry::new(0.3, [0.2, 0.1]).unwrap();
        let q = geom.boundary_quadrature(512);
        assert!(divergence_term(&flux, &geom, X_HAT, &q).unwrap().abs() < 1e-9);
    }

    #[test]
    fn full_circle_arc_matches_closed_form() {
        let flux = generic_flux();
        let geom = geometry_at(&slope_a(), X_HAT).unwrap();
        let arc = Arc::new(geom, 0.3, 0.3 + 2.0 * PI).unwrap();
        assert!(arc.is_full_circle());
        let qa = arc.quadrature(16, 16);
        let qc = geom.boundary_quadrature(512);
        for d in DELTAS {
            let o = open_curve_form(&flux, &arc, X_HAT, d, &qa, &s()).unwrap();
            let c = ms_form_correct(&flux, &geom, X_HAT, d, &qc, &s()).unwrap();
            assert!((o - c).abs() < 1e-12, "{o} {c}");
        }
    }

    #[test]
    fn arc_without_gradient_has_no_endpoint_term() {
        let flux = generic_flux();
        let geom = CellGeometry::uniform(0.3).unwrap();
        let arc = Arc::new(geom, 0.2, 2.0).unwrap();
        let q = arc.quadrature(8, 16);
        let o = open_curve_form(&flux, &arc, X_HAT, 0.05, &q, &s()).unwrap();
        let c = ms_form_correct(&flux, &geom, X_HAT, 0.05, &q, &s()).unwrap();
        assert_eq!(o, c);
    }

    #[test]
    fn degenerate_arcs_rejected() {
        let geom = CellGeometry::uniform(0.3).unwrap();
        assert!(Arc::new(geom, 1.0, 1.0).is_err());
        assert!(Arc::new(geom, 1.0, 0.5).is_err());
        assert!(Arc::new(geom, 0.0, 7.0).is_err());
    }

    #[test]
    fn half_circle_converges_at_second_order() {
        let r = study(&generic_flux(), slope_a(), Target::Arc { theta_start: 0.0, theta_end: PI });
        assert!(r.slope_correct >= 1.9, "{r:?}");
    }

    /// The endpoint sign is the one for which the half-circle residual
    /// converges at second order. The opposite sign leaves a first-order
    /// error.
    #[test]
    fn endpoint_sign_calibration() {
        let flux = generic_flux();
        let a = slope_a();
        let geom = geometry_at(&a, X_HAT).unwrap();
        let arc = Arc::new(geom, 0.0, PI).unwrap();
        let q = arc.quadrature(32, 16);
        let residuals = |sign: f64| -> Vec<f64> {
            DELTAS
                .iter()
                .map(|&d| {
                    let base = open_curve_form(&flux, &arc, X_HAT, d, &q, &s()).unwrap();
                    // swap the endpoint sign by adding twice the opposite term
                    let ends = base / d - correct_bracket(&flux, &geom, X_HAT, d, &q).unwrap();
                    let flipped = d * (correct_bracket(&flux, &geom, X_HAT, d, &q).unwrap() + sign * ends);
                    let oracle = brute_force_arc(&flux, &a, &arc, X_HAT, d, 32, 16, &s()).unwrap();
                    (flipped - oracle).abs() / d
                })
                .collect()
        };
        let kept = loglog_slope_above(&DELTAS, &residuals(1.0), RESIDUAL_FLOOR).unwrap();
        let flipped = loglog_slope_above(&DELTAS, &residuals(-1.0), RESIDUAL_FLOOR).unwrap();
        assert!(kept >= 1.9, "{kept}");
        assert!(flipped < 1.2, "{flipped}");
    }

    #[test]
    fn report_csv_layout() {
        let r = study(&generic_flux(), slope_a(), Target::Closed);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "delta,correct,naive,oracle,res_correct,res_naive");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("slope_correct="));
        assert!(lines[4].contains(",slope_naive=") && lines[4].contains(",discrepancy="));
    }

    #[test]
    fn order_study_rejects_bad_deltas() {
        let cfg = OrderStudyConfig {
            a_of_x: slope_a(),
            x_hat: X_HAT,
            target: Target::Closed,
            delta_values: vec![0.1, 0.07, 0.025],
            n_quad: 512,
            settings: s(),
        };
        assert!(matches!(order_study(&generic_flux(), &cfg), Err(MsIntError::Deltas)));
    }

    #[test]
    fn flux_evaluable_on_test_box() {
        assert!(generic_flux().check_evaluable().is_ok());
        let bad = FluxField::analytic("1/(X1-0.5)", "0").unwrap();
        assert!(bad.check_evaluable().is_err());
    }
}
