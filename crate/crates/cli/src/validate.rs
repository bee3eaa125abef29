//! Static checks on a [`RunConfig`]; nothing here solves anything.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use homog::cellsolve::{CellMode, Permittivity};
use homog::dns::{ChargeScaling, DnsProblem};
use homog::effective::EffectiveTable;
use homog::exprlang::{Bindings, FieldExpr};
use homog::macroscale::{MacroProblem, RhoMode, MIN_GRID};
use homog::msint::{FluxField, MAX_DELTA, MIN_ORACLE_POINTS};

use crate::config::{EpsSpec, RunConfig};

#[derive(Default)]
struct Report(Vec<String>);

impl Report {
    fn push(&mut self, field: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{field}: {msg}"));
    }

    fn expr(&mut self, field: &str, text: &str) -> Option<FieldExpr> {
        FieldExpr::parse(text).map_err(|e| self.push(field, e)).ok()
    }

    fn positive(&mut self, field: &str, v: f64) -> bool {
        let ok = v > 0.0 && v.is_finite();
        if !ok {
            self.push(field, format!("{v} must be positive and finite"));
        }
        ok
    }

    fn radius(&mut self, field: &str, a: f64) -> bool {
        let ok = a > 0.0 && a < 0.5;
        if !ok {
            self.push(field, format!("a = {a} outside the open interval (0, 0.5)"));
        }
        ok
    }

    fn mesh_h(&mut self, field: &str, h: f64) -> bool {
        let ok = h > 0.0 && h <= 0.1;
        if !ok {
            self.push(field, format!("target_h = {h} outside (0, 0.1]"));
        }
        ok
    }

    /// Radius valid and leaving two elements of clearance to the cell edge.
    fn meshable(&mut self, field: &str, a: f64, h: f64) -> bool {
        if !self.radius(field, a) {
            return false;
        }
        let limit = 0.5 - 2.0 * h;
        let ok = a <= limit;
        if !ok {
            self.push(field, format!("a = {a} exceeds 0.5 - 2*target_h = {limit}"));
        }
        ok
    }

    fn radii(&mut self, field: &str, a: &[f64], h: f64, min_len: usize) -> bool {
        if a.len() < min_len {
            self.push(field, format!("{} values given; at least {min_len} needed", a.len()));
            return false;
        }
        if a.windows(2).any(|w| w[1] <= w[0]) {
            self.push(field, "values must be strictly increasing");
            return false;
        }
        let valid = h > 0.0 && h <= 0.1;
        a.iter().all(|&v| if valid { self.meshable(field, v, h) } else { self.radius(field, v) })
    }

    fn eps(&mut self, field: &str, e: &EpsSpec) -> Option<Permittivity> {
        e.resolve().map_err(|m| self.push(field, m)).ok()
    }

    fn mode(&mut self, field: &str, name: &str, eps_i: Option<Permittivity>, psi: Option<bool>) -> Option<CellMode> {
        let Some(m) = CellMode::from_name(name) else {
            self.push(field, format!("unknown cell mode `{name}`"));
            return None;
        };
        if let Some(want) = psi {
            if m.is_psi() != want {
                self.push(field, format!("{name} is not a {} mode", if want { "PSI" } else { "XI" }));
            }
        }
        match eps_i {
            Some(Permittivity::Infinite) if !m.is_limit() => self.push(field, format!("{name} needs a finite eps_i")),
            Some(Permittivity::Finite(_)) if m.is_limit() => self.push(field, format!("{name} needs eps_i = \"INFINITE\"")),
            _ => {}
        }
        Some(m)
    }

    fn deltas(&mut self, field: &str, d: &[f64]) {
        if d.len() < 3 {
            self.push(field, format!("{} values given; at least 3 needed", d.len()));
            return;
        }
        if d.iter().any(|&v| !(v > 0.0 && v <= MAX_DELTA)) {
            self.push(field, format!("every delta must lie in (0, {MAX_DELTA}]"));
            return;
        }
        let r0 = d[0] / d[1];
        if r0 <= 1.0 || d.windows(2).any(|w| ((w[0] / w[1]) / r0 - 1.0).abs() > 1e-6) {
            self.push(field, "values must decrease geometrically");
        }
    }

    fn flux(&mut self, field: &str, q1: &str, q2: &str) {
        let (Some(a), Some(b)) = (self.expr(&format!("{field}.q1"), q1), self.expr(&format!("{field}.q2"), q2)) else {
            return;
        };
        if let Err(e) = FluxField::from_exprs(a, b).check_evaluable() {
            self.push(field, e);
        }
    }

    fn radius_at(&mut self, field: &str, a_of_x: &FieldExpr, x: [f64; 2]) {
        match a_of_x.evaluate(&Bindings::slow(x)) {
            Ok(a) => {
                self.radius(field, a);
            }
            Err(e) => self.push(field, e),
        }
    }

    fn arc(&mut self, field: &str, arc: [f64; 2]) {
        if !(arc[1] > arc[0] && arc[1] - arc[0] <= 2.0 * PI) {
            self.push(field, format!("arc [{}, {}] must satisfy start < end <= start + 2*pi", arc[0], arc[1]));
        }
    }
}

/// Every violation in the configuration; empty means runnable.
pub fn validate(cfg: &RunConfig) -> Vec<String> {
    let mut r = Report::default();
    if cfg.output_dir.trim().is_empty() {
        r.push("output_dir", "must not be empty");
    }
    cell(&mut r, cfg);
    effective(&mut r, cfg);
    msint(&mut r, cfg);
    macro_section(&mut r, cfg);
    dns(&mut r, cfg);
    suite(&mut r, cfg);
    r.0
}

fn cell(r: &mut Report, cfg: &RunConfig) {
    let c = &cfg.cell;
    if r.mesh_h("cell.target_h", c.target_h) {
        r.meshable("cell.a", c.a, c.target_h);
    } else {
        r.radius("cell.a", c.a);
    }
    r.positive("cell.eps_e", c.eps_e);
    let eps = r.eps("cell.eps_i", &c.eps_i);
    if c.modes.is_empty() {
        r.push("cell.modes", "at least one mode needed");
    }
    for m in &c.modes {
        r.mode("cell.modes", m, eps, None);
    }
    r.expr("cell.rho", &c.rho);
}

fn effective(r: &mut Report, cfg: &RunConfig) {
    let c = &cfg.effective;
    r.mesh_h("effective.target_h", c.target_h);
    r.radii("effective.a_values", &c.a_values, c.target_h, 5);
    r.positive("effective.eps_e", c.eps_e);
    let eps = r.eps("effective.eps_i", &c.eps_i);
    r.mode("effective.psi_mode", &c.psi_mode, eps, Some(true));
    r.mode("effective.xi_mode", &c.xi_mode, eps, Some(false));
    r.expr("effective.rho", &c.rho);
}

fn msint(r: &mut Report, cfg: &RunConfig) {
    let c = &cfg.msint;
    r.flux("msint", &c.q1, &c.q2);
    if let Some(a) = r.expr("msint.a_of_x", &c.a_of_x) {
        r.radius_at("msint.a_of_x", &a, c.x_hat);
    }
    r.deltas("msint.delta_values", &c.delta_values);
    if c.n_quad < MIN_ORACLE_POINTS {
        r.push("msint.n_quad", format!("{} is below {MIN_ORACLE_POINTS}", c.n_quad));
    }
    match c.target.as_str() {
        "closed" => {}
        "arc" => r.arc("msint.arc", c.arc),
        t => r.push("msint.target", format!("`{t}` is neither `closed` nor `arc`")),
    }
    r.positive("msint.prefactor_exponent", c.prefactor_exponent);
}

fn coverage(r: &mut Report, field: &str, problem: MacroProblem) {
    for v in problem.violations() {
        r.push(field, v);
    }
}

fn macro_section(r: &mut Report, cfg: &RunConfig) {
    let c = &cfg.macro_;
    let a = r.expr("macro.a_of_x", &c.a_of_x);
    let rho = r.expr("macro.rho", &c.rho);
    let g = r.expr("macro.boundary_value", &c.boundary_value);
    let mode = RhoMode::from_name(&c.rho_mode);
    if mode.is_none() {
        r.push("macro.rho_mode", format!("unknown mode `{}`", c.rho_mode));
    }
    let table_ok = cfg.effective.a_values.len() >= 3 && cfg.effective.a_values.windows(2).all(|w| w[1] > w[0]);
    if let (Some(a_of_x), Some(rho), Some(boundary_value), Some(rho_mode), true) = (a, rho, g, mode, table_ok) {
        coverage(
            r,
            "macro",
            MacroProblem {
                a_of_x,
                table: Arc::new(EffectiveTable::constant(1.0, cfg.effective.a_values.clone())),
                rho_mode,
                rho,
                boundary_value,
                grid_n: c.grid_n,
            },
        );
    } else if c.grid_n < MIN_GRID {
        r.push("macro.grid_n", format!("{} is below {MIN_GRID}", c.grid_n));
    }
}

fn dns(r: &mut Report, cfg: &RunConfig) {
    let c = &cfg.dns;
    let a = r.expr("dns.a_of_x", &c.a_of_x);
    let rho = r.expr("dns.rho", &c.rho);
    let g = r.expr("dns.boundary_value", &c.boundary_value);
    r.expr("dns.table_rho", &c.table_rho);
    let mode = ChargeScaling::from_name(&c.mode);
    if mode.is_none() {
        r.push("dns.mode", format!("unknown mode `{}`", c.mode));
    }
    if c.delta_values.len() < 3 || c.delta_values.windows(2).any(|w| w[1] >= w[0]) {
        r.push("dns.delta_values", "at least 3 strictly decreasing values needed");
    }
    for &e in &c.contrast_bracket {
        r.positive("dns.contrast_bracket", e);
    }
    let h = 1.0 / c.resolution_per_cell.max(1) as f64;
    let table_ok = r.radii("dns.table_a_values", &c.table_a_values, h.min(0.1), 5);
    let (Some(a_of_x), Some(rho), Some(boundary_value), Some(mode)) = (a, rho, g, mode) else {
        return;
    };
    let mut seen = BTreeSet::new();
    for &delta in &c.delta_values {
        let p = DnsProblem {
            delta,
            a_of_x: a_of_x.clone(),
            eps_e: c.eps_e,
            eps_i: c.eps_i,
            rho: rho.clone(),
            boundary_value: boundary_value.clone(),
            mode,
            resolution_per_cell: c.resolution_per_cell,
        };
        for v in p.violations() {
            if seen.insert(v.clone()) {
                r.push("dns", v);
            }
        }
    }
    if table_ok {
        coverage(
            r,
            "dns",
            MacroProblem {
                a_of_x,
                table: Arc::new(EffectiveTable::constant(1.0, c.table_a_values.clone())),
                rho_mode: RhoMode::CellAverage,
                rho,
                boundary_value,
                grid_n: c.macro_grid_n,
            },
        );
    }
}

fn suite(r: &mut Report, cfg: &RunConfig) {
    let s = &cfg.suite;
    r.positive("suite.eps_e", s.eps_e);

    let c = &s.route;
    r.mesh_h("suite.route.target_h", c.target_h);
    r.radii("suite.route.a_values", &c.a_values, c.target_h, 1);
    if !(c.contrast > 1.0 && c.contrast.is_finite()) {
        r.push("suite.route.contrast", format!("{} must exceed 1", c.contrast));
    }
    r.positive("suite.route.tolerance", c.tolerance);

    let c = &s.forms;
    r.flux("suite.forms", &c.q1, &c.q2);
    for (field, text) in [("suite.forms.a_sloped", &c.a_sloped), ("suite.forms.a_flat", &c.a_flat)] {
        if let Some(a) = r.expr(field, text) {
            r.radius_at(field, &a, c.x_hat);
        }
    }
    r.deltas("suite.forms.delta_values", &c.delta_values);
    if c.n_quad < MIN_ORACLE_POINTS {
        r.push("suite.forms.n_quad", format!("{} is below {MIN_ORACLE_POINTS}", c.n_quad));
    }
    r.arc("suite.forms.arc", c.arc);
    for (field, v) in [
        ("suite.forms.prefactor_exponent", c.prefactor_exponent),
        ("suite.forms.min_slope", c.min_slope),
        ("suite.forms.max_naive_slope", c.max_naive_slope),
        ("suite.forms.misfit_tolerance", c.misfit_tolerance),
        ("suite.forms.consistency_tolerance", c.consistency_tolerance),
    ] {
        r.positive(field, v);
    }

    let c = &s.charge;
    r.mesh_h("suite.charge.target_h", c.target_h);
    r.radii("suite.charge.table_a_values", &c.table_a_values, c.target_h, 5);
    r.expr("suite.charge.rho", &c.rho);
    if c.a_slope == 0.0 || !c.a_slope.is_finite() {
        r.push("suite.charge.a_slope", "must be nonzero");
    }
    if let (Some(&lo), Some(&hi)) = (c.table_a_values.get(1), c.table_a_values.iter().rev().nth(1)) {
        for &a in &c.check_a {
            if a < lo || a > hi {
                r.push("suite.charge.check_a", format!("a = {a} outside the derivative range [{lo}, {hi}] of table_a_values"));
            }
        }
    }
    r.positive("suite.charge.tolerance", c.tolerance);

    let c = &s.limit;
    r.mesh_h("suite.limit.target_h", c.target_h);
    r.radii("suite.limit.a_values", &c.a_values, c.target_h, 1);
    if c.contrasts.len() < 2 || c.contrasts.windows(2).any(|w| w[1] <= w[0]) || c.contrasts[0] <= 1.0 {
        r.push("suite.limit.contrasts", "at least 2 strictly increasing values above 1 needed");
    }
    r.positive("suite.limit.final_gap", c.final_gap);

    let c = &s.dilute;
    if r.mesh_h("suite.dilute.target_h", c.target_h) {
        r.meshable("suite.dilute.a", c.a, c.target_h);
    }
    r.positive("suite.dilute.tolerance", c.tolerance);

    r.positive("suite.dns.max_ratio", s.dns.max_ratio);
    r.positive("suite.dns.min_slope", s.dns.min_slope);

    let c = &s.invariants;
    r.mesh_h("suite.invariants.target_h", c.target_h);
    r.radii("suite.invariants.a_values", &c.a_values, c.target_h, 5);
    for e in &c.eps_i_values {
        r.eps("suite.invariants.eps_i_values", e);
    }
    r.expr("suite.invariants.rho", &c.rho);
    r.positive("suite.invariants.transport_tolerance", c.transport_tolerance);
    if !(c.table_eps_i > s.eps_e) {
        r.push("suite.invariants.table_eps_i", format!("{} must exceed eps_e for a monotone table", c.table_eps_i));
    }
}
