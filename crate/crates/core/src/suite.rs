//! The acceptance criteria as runnable checks.
//!
//! Every check takes its parameters explicitly; there are no built-in
//! defaults here. Each returns a [`CriterionResult`] whose `detail` holds the
//! measured numbers, whether it passed or not.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cellsolve::{self, CellMode, CellProblemSpec, CellSolution, CellSolveError, Permittivity};
use crate::dns::{convergence_study, DnsError, StudyConfig};
use crate::effective::{
    build_effective_table, epsilon_boundary, epsilon_volume, rho_eff_flux_divergence, EffectiveCoefficients,
    EffectiveError, TableConfig,
};
use crate::exprlang::{ExprError, FieldExpr};
use crate::geometry::{build_cell_mesh, CellGeometry, CellMesh, GeometryError};
use crate::msint::{
    geometry_at, ms_form_correct, open_curve_form, order_study, Arc as MsArc, FluxField, MsIntError,
    MsIntReport, MsIntSettings, OrderStudyConfig, Target,
};
use crate::quad::{composite_gl, gauss_legendre, TRI7};

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cell(#[from] CellSolveError),
    #[error(transparent)]
    Effective(#[from] EffectiveError),
    #[error(transparent)]
    MsInt(#[from] MsIntError),
    #[error(transparent)]
    Dns(#[from] DnsError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} {:<28} {}  {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// `criterion,name,status,detail`; timings are left out so reruns match.
pub fn results_csv(results: &[CriterionResult]) -> String {
    let mut s = String::from("criterion,name,status,detail\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},\"{}\"",
            r.id,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail.replace('"', "'")
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct RouteCheck {
    pub a_values: Vec<f64>,
    pub eps_e: f64,
    /// `eps_i / eps_e` for the volume route.
    pub contrast: f64,
    pub target_h: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct FormOrderCheck {
    pub flux: [FieldExpr; 2],
    /// Radius field with a nonzero slow gradient at `x_hat`.
    pub a_sloped: FieldExpr,
    /// Radius field with zero slow gradient.
    pub a_flat: FieldExpr,
    pub x_hat: [f64; 2],
    pub delta_values: Vec<f64>,
    pub n_quad: usize,
    pub settings: MsIntSettings,
    pub arc: (f64, f64),
    pub min_slope: f64,
    pub max_naive_slope: f64,
    /// Relative tolerance on the naive misfit coefficient at the smallest delta.
    pub misfit_tolerance: f64,
    pub consistency_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct ChargeRouteCheck {
    pub table: TableConfig,
    /// `a(x) = a_intercept + a_slope * x1`.
    pub a_intercept: f64,
    pub a_slope: f64,
    pub check_a: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct LimitCheck {
    pub a_values: Vec<f64>,
    pub eps_e: f64,
    pub contrasts: Vec<f64>,
    pub target_h: f64,
    pub final_gap: f64,
}

#[derive(Debug, Clone)]
pub struct DiluteCheck {
    pub a: f64,
    pub eps_e: f64,
    pub target_h: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct DnsCheck {
    pub study: StudyConfig,
    pub max_ratio: f64,
    pub min_slope: f64,
}

#[derive(Debug, Clone)]
pub struct InvariantCheck {
    pub a_values: Vec<f64>,
    pub eps_e: f64,
    pub eps_i_values: Vec<Permittivity>,
    pub rho: FieldExpr,
    pub anchor: [f64; 2],
    pub target_h: f64,
    pub transport_tolerance: f64,
    /// Finite contrast above one for the monotone table check.
    pub table_eps_i: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub route: RouteCheck,
    pub forms: FormOrderCheck,
    pub charge: ChargeRouteCheck,
    pub limit: LimitCheck,
    pub dilute: DiluteCheck,
    pub dns: DnsCheck,
    pub invariants: InvariantCheck,
}

fn mesh(a: f64, h: f64) -> Result<Arc<CellMesh>, SuiteError> {
    Ok(Arc::new(build_cell_mesh(&CellGeometry::uniform(a)?, h)?))
}

fn psi(mesh: &Arc<CellMesh>, eps_e: f64, eps_i: Permittivity, mode: CellMode) -> Result<CellSolution, SuiteError> {
    Ok(cellsolve::solve(&CellProblemSpec::psi(mesh.clone(), eps_e, eps_i, mode))?)
}

fn timed<F>(id: u8, name: &'static str, f: F) -> CriterionResult
where
    F: FnOnce() -> Result<(bool, String), SuiteError>,
{
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Three routes to the effective permittivity.
pub fn route_agreement(c: &RouteCheck) -> CriterionResult {
    timed(1, "eps_eff route agreement", || {
        let rows: Vec<(f64, f64)> = c
            .a_values
            .par_iter()
            .map(|&a| -> Result<(f64, f64), SuiteError> {
                let m = mesh(a, c.target_h)?;
                let vol = epsilon_volume(&psi(&m, c.eps_e, Permittivity::Finite(c.contrast * c.eps_e), CellMode::PsiFinite)?);
                let neu = epsilon_boundary(&psi(&m, c.eps_e, Permittivity::Infinite, CellMode::PsiLimitNeumann)?);
                let con = epsilon_boundary(&psi(&m, c.eps_e, Permittivity::Infinite, CellMode::PsiLimitConstraint)?);
                let worst = [vol.relative_difference(&neu), vol.relative_difference(&con), neu.relative_difference(&con)]
                    .into_iter()
                    .fold(0.0, f64::max);
                Ok((a, worst))
            })
            .collect::<Result<_, _>>()?;
        let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
        let list: Vec<String> = rows.iter().map(|(a, d)| format!("a={a}:{d:.2e}")).collect();
        Ok((worst <= c.tolerance, format!("max pairwise rel diff {worst:.3e} (tol {}) [{}]", c.tolerance, list.join(" "))))
    })
}

fn study(c: &FormOrderCheck, a_of_x: &FieldExpr, target: Target) -> Result<MsIntReport, SuiteError> {
    let flux = FluxField::from_exprs(c.flux[0].clone(), c.flux[1].clone());
    Ok(order_study(
        &flux,
        &OrderStudyConfig {
            a_of_x: a_of_x.clone(),
            x_hat: c.x_hat,
            target,
            delta_values: c.delta_values.clone(),
            n_quad: c.n_quad,
            settings: c.settings,
        },
    )?)
}

/// Residual slopes of the correct and naive forms.
pub fn form_order(c: &FormOrderCheck) -> CriterionResult {
    timed(2, "multiple-scales form order", || {
        let sloped = study(c, &c.a_sloped, Target::Closed)?;
        let flat = study(c, &c.a_flat, Target::Closed)?;
        let ok = sloped.slope_correct >= c.min_slope
            && sloped.slope_naive <= c.max_naive_slope
            && flat.slope_correct >= c.min_slope
            && flat.slope_naive >= c.min_slope;
        Ok((
            ok,
            format!(
                "sloped: correct {:.3} naive {:.3}; flat: correct {:.3} naive {:.3}",
                sloped.slope_correct, sloped.slope_naive, flat.slope_correct, flat.slope_naive
            ),
        ))
    })
}

/// Measured naive misfit against the predicted boundary terms.
pub fn naive_discrepancy(c: &FormOrderCheck) -> CriterionResult {
    timed(3, "naive-form discrepancy", || {
        let r = study(c, &c.a_sloped, Target::Closed)?;
        let measured = *r.naive_misfit_coefficients(&c.settings).last().unwrap_or(&f64::NAN);
        let predicted = r.predicted_misfit_coefficient();
        let rel = ((measured - predicted) / predicted).abs();
        Ok((
            rel <= c.misfit_tolerance,
            format!(
                "measured {measured:.6e} predicted {predicted:.6e} rel {rel:.3e} (tol {}) at delta {}",
                c.misfit_tolerance,
                r.delta_values.last().unwrap_or(&f64::NAN)
            ),
        ))
    })
}

/// Open-curve form: full-circle consistency and the arc order.
pub fn open_curve(c: &FormOrderCheck) -> CriterionResult {
    timed(4, "open-curve form", || {
        let flux = FluxField::from_exprs(c.flux[0].clone(), c.flux[1].clone());
        let geom = geometry_at(&c.a_sloped, c.x_hat)?;
        let quad = geom.boundary_quadrature(c.n_quad);
        let full = MsArc::new(geom, 0.0, 2.0 * PI)?;
        let mut gap: f64 = 0.0;
        for &d in &c.delta_values {
            let open = open_curve_form(&flux, &full, c.x_hat, d, &quad, &c.settings)?;
            let closed = ms_form_correct(&flux, &geom, c.x_hat, d, &quad, &c.settings)?;
            gap = gap.max((open - closed).abs());
        }
        let arc = study(c, &c.a_sloped, Target::Arc { theta_start: c.arc.0, theta_end: c.arc.1 })?;
        Ok((
            gap <= c.consistency_tolerance && arc.slope_correct >= c.min_slope,
            format!(
                "full-circle gap {gap:.2e} (tol {:.0e}); arc [{:.4}, {:.4}] slope {:.3}",
                c.consistency_tolerance, c.arc.0, c.arc.1, arc.slope_correct
            ),
        ))
    })
}

/// The two slow-divergence forms of the effective charge.
pub fn charge_routes(c: &ChargeRouteCheck) -> CriterionResult {
    timed(5, "rho_eff route agreement", || {
        let table = build_effective_table(&c.table)?;
        let a_of_x = FieldExpr::parse(&format!("{} + {}*x1", c.a_intercept, c.a_slope))?;
        let mut worst: f64 = 0.0;
        let mut worst_dipole: f64 = 0.0;
        let mut list = Vec::new();
        for &a in &c.check_a {
            let x = [(a - c.a_intercept) / c.a_slope, 0.5];
            let fd = rho_eff_flux_divergence(&table, &a_of_x, x)?;
            let gap = ((fd.f_form - fd.g_form) / fd.f_form).abs();
            let dp = table.ddipole_da(a)?[0] * c.a_slope;
            worst = worst.max(gap);
            worst_dipole = worst_dipole.max(((fd.g_form + dp - fd.f_form) / fd.f_form).abs());
            list.push(format!("a={a}:{gap:.3}"));
        }
        Ok((
            worst <= c.tolerance,
            format!(
                "max rel F/G gap {worst:.3e} (tol {}); G plus inclusion dipole matches F to {worst_dipole:.2e} [{}]",
                c.tolerance,
                list.join(" ")
            ),
        ))
    })
}

/// Finite-contrast volume values approaching the perfect-dielectric limit.
pub fn limit_consistency(c: &LimitCheck) -> CriterionResult {
    timed(6, "limit consistency", || {
        let rows: Vec<(f64, Vec<f64>)> = c
            .a_values
            .par_iter()
            .map(|&a| -> Result<(f64, Vec<f64>), SuiteError> {
                let m = mesh(a, c.target_h)?;
                let limit = epsilon_boundary(&psi(&m, c.eps_e, Permittivity::Infinite, CellMode::PsiLimitNeumann)?);
                let gaps = c
                    .contrasts
                    .iter()
                    .map(|&k| -> Result<f64, SuiteError> {
                        let vol = epsilon_volume(&psi(&m, c.eps_e, Permittivity::Finite(k * c.eps_e), CellMode::PsiFinite)?);
                        Ok(vol.relative_difference(&limit))
                    })
                    .collect::<Result<_, _>>()?;
                Ok((a, gaps))
            })
            .collect::<Result<_, _>>()?;
        let ok = rows.iter().all(|(_, g)| {
            g.windows(2).all(|w| w[1] < w[0]) && g.last().is_some_and(|&v| v < c.final_gap)
        });
        let list: Vec<String> = rows
            .iter()
            .map(|(a, g)| format!("a={a}:[{}]", g.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(",")))
            .collect();
        Ok((ok, format!("gaps by contrast {}", list.join(" "))))
    })
}

/// Perfect-dielectric value at small radius against `1 + 2 pi a^2`.
pub fn dilute_limit(c: &DiluteCheck) -> CriterionResult {
    timed(7, "dilute limit", || {
        let m = mesh(c.a, c.target_h)?;
        let eff = epsilon_boundary(&psi(&m, c.eps_e, Permittivity::Infinite, CellMode::PsiLimitNeumann)?);
        let ratio = eff.isotropic_value() / c.eps_e;
        let cm = 1.0 + 2.0 * PI * c.a * c.a;
        let rel = ((ratio - cm) / cm).abs();
        Ok((rel <= c.tolerance, format!("eps_eff/eps_e {ratio:.6} vs {cm:.6} rel {rel:.2e} (tol {})", c.tolerance)))
    })
}

/// Cell-averaged direct simulation against the homogenised solution.
pub fn dns_validation(c: &DnsCheck) -> CriterionResult {
    timed(8, "DNS validation", || {
        let r = convergence_study(&c.study)?;
        let ratios = r.ratios();
        let ok = r.strictly_decreasing() && (ratios.iter().all(|&q| q <= c.max_ratio) || r.slope >= c.min_slope);
        let errs: Vec<String> = r.rows.iter().map(|w| format!("{:.3e}", w.error_l2)).collect();
        let qs: Vec<String> = ratios.iter().map(|q| format!("{q:.3}")).collect();
        Ok((ok, format!("errors [{}] ratios [{}] slope {:.3}", errs.join(","), qs.join(","), r.slope)))
    })
}

fn transport_defect(a: f64) -> f64 {
    // d/da of a disk integral equals the circle integral of the integrand
    let f = |x: [f64; 2]| (2.0 * PI * x[0]).cos() + x[1] * x[1] * (x[0] + 1.0);
    let step = 1e-4 * a;
    let disk = |r: f64| CellGeometry::uniform(r).map(|g| g.disk_integral(f, 24, 256)).unwrap_or(f64::NAN);
    let fd = (disk(a + step) - disk(a - step)) / (2.0 * step);
    let Ok(g) = CellGeometry::uniform(a) else { return f64::INFINITY };
    let q = g.boundary_quadrature(256);
    let ring = q.integrate(|i| f(q.points[i]));
    ((fd - ring) / ring).abs()
}

fn quadrature_defects(a: f64) -> Vec<String> {
    let mut out = Vec::new();
    let tri: f64 = TRI7.iter().map(|(_, w)| w).sum();
    if (tri - 1.0).abs() > 1e-14 {
        out.push(format!("TRI7 weights sum {tri}"));
    }
    let (_, w) = gauss_legendre(12);
    let s: f64 = w.iter().sum();
    if (s - 2.0).abs() > 1e-13 {
        out.push(format!("Gauss-Legendre weights sum {s}"));
    }
    let (_, w) = composite_gl(0.0, 1.0, 7, 5);
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-13 {
        out.push(format!("composite weights sum {s}"));
    }
    if let Ok(g) = CellGeometry::uniform(a) {
        let q = g.boundary_quadrature(128);
        let len: f64 = q.weights.iter().sum();
        if ((len - 2.0 * PI * a) / (2.0 * PI * a)).abs() > 1e-12 {
            out.push(format!("a={a}: circle weights sum {len}"));
        }
    }
    out
}

fn solution_defects(sol: &CellSolution, tag: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (k, (m, f)) in sol.means().iter().zip(sol.fields()).enumerate() {
        let scale = f.iter().fold(1.0_f64, |s, v| s.max(v.abs()));
        if m.abs() > 1e-9 * scale {
            out.push(format!("{tag}: field {k} mean {m:.2e}"));
        }
    }
    let p = sol.periodicity_defect();
    if p > 1e-12 {
        out.push(format!("{tag}: periodicity defect {p:.2e}"));
    }
    out
}

fn coefficient_defects(eff: &EffectiveCoefficients, tag: &str) -> Vec<String> {
    eff.check_invariants().into_iter().map(|v| format!("{tag}: {v}")).collect()
}

/// Mesh, solution, coefficient, quadrature and transport invariants over
/// the radius by permittivity matrix.
pub fn invariant_suite(c: &InvariantCheck) -> CriterionResult {
    timed(9, "invariant suites", || {
        let mut cases = Vec::new();
        for &a in &c.a_values {
            for &e in &c.eps_i_values {
                cases.push((a, e));
            }
        }
        let mut violations: Vec<String> = cases
            .par_iter()
            .map(|&(a, eps_i)| -> Result<Vec<String>, SuiteError> {
                let tag = match eps_i {
                    Permittivity::Finite(v) => format!("a={a} eps_i={v}"),
                    Permittivity::Infinite => format!("a={a} eps_i=inf"),
                };
                let m = mesh(a, c.target_h)?;
                let mut out = Vec::new();
                if let Err(e) = m.check_invariants() {
                    out.push(format!("{tag}: mesh {e}"));
                }
                let (psi_mode, xi_mode) = match eps_i {
                    Permittivity::Finite(_) => (CellMode::PsiFinite, CellMode::XiFinite),
                    Permittivity::Infinite => (CellMode::PsiLimitNeumann, CellMode::XiLimitNeumann),
                };
                let p = psi(&m, c.eps_e, eps_i, psi_mode)?;
                out.extend(solution_defects(&p, &tag));
                let eff = match eps_i {
                    Permittivity::Finite(_) => epsilon_volume(&p),
                    Permittivity::Infinite => epsilon_boundary(&p),
                };
                out.extend(coefficient_defects(&eff, &tag));
                let x = cellsolve::solve(&CellProblemSpec::xi(m.clone(), c.eps_e, eps_i, xi_mode, c.rho.clone(), c.anchor))?;
                out.extend(solution_defects(&x, &tag));
                Ok(out)
            })
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let mut worst_transport: f64 = 0.0;
        for &a in &c.a_values {
            violations.extend(quadrature_defects(a));
            let t = transport_defect(a);
            worst_transport = worst_transport.max(t);
            if !(t <= c.transport_tolerance) {
                violations.push(format!("a={a}: transport identity defect {t:.2e}"));
            }
        }
        let table = build_effective_table(&TableConfig {
            a_values: c.a_values.clone(),
            eps_e: c.eps_e,
            eps_i: Permittivity::Finite(c.table_eps_i),
            psi_mode: CellMode::PsiFinite,
            xi_mode: CellMode::XiFinite,
            rho: c.rho.clone(),
            anchor: c.anchor,
            target_h: c.target_h,
        })?;
        violations.extend(table.check_monotone());
        let detail = if violations.is_empty() {
            format!("{} cell cases clean, transport defect {worst_transport:.1e}", cases.len())
        } else {
            format!("{} violations: {}", violations.len(), violations.join("; "))
        };
        Ok((violations.is_empty(), detail))
    })
}

/// Runs criteria in order; each failure is recorded rather than returned.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CriterionResult> {
    vec![
        route_agreement(&cfg.route),
        form_order(&cfg.forms),
        naive_discrepancy(&cfg.forms),
        open_curve(&cfg.forms),
        charge_routes(&cfg.charge),
        limit_consistency(&cfg.limit),
        dilute_limit(&cfg.dilute),
        dns_validation(&cfg.dns),
        invariant_suite(&cfg.invariants),
    ]
}
