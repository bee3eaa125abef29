//! Direct simulation of the full two-material problem at finite `delta`.
//!
//! The unit square is tiled by `N x N` cells of side `delta = 1/N`. Each
//! cell gets the conforming cell mesh for the radius `a` at its centre,
//! scaled into place; shared side nodes are merged. Inclusions carry a large
//! finite permittivity, the outer boundary carries Dirichlet data, and P1
//! elements with natural interface conditions do the rest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::effective::{num, rho_eff_cell_average};
use crate::exprlang::{Bindings, ExprError, FieldExpr};
use crate::geometry::{build_cell_mesh, CellGeometry, CellMesh, GeometryError, PointIndex, Region};
use crate::macroscale::{solve_homogenized, MacroError, MacroProblem};
use crate::quad::TRI7;
use crate::sparse::{conjugate_gradient_coarse, CgOptions, Prolongation, SolveError, Triplets};
use crate::stats::loglog_slope;

pub const MAX_UNKNOWNS: usize = 2_000_000;
pub const DEFAULT_EPS_I: f64 = 1e4;
pub const SOLVER_TOL: f64 = 1e-10;
/// Accepted relative residual once CG stalls at the rounding floor.
pub const FLOOR_LIMIT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DnsError {
    #[error("invalid simulation: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{unknowns} unknowns exceed the limit of {MAX_UNKNOWNS}")]
    TooLarge { unknowns: usize },
    #[error("mesh failed in cell ({i}, {j}): {source}")]
    Mesh { i: usize, j: usize, source: GeometryError },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("fine-scale solve failed: {0}")]
    Solver(#[from] SolveError),
    #[error(transparent)]
    Macro(#[from] MacroError),
}

/// Scaling of the charge density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeScaling {
    /// Source `rho(x, X)`.
    Standard,
    /// Source `rho(x, X) / delta` with zero cell mean in `X`.
    LargeCharge,
}

impl ChargeScaling {
    pub fn name(self) -> &'static str {
        match self {
            ChargeScaling::Standard => "STANDARD",
            ChargeScaling::LargeCharge => "LARGE_CHARGE",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "STANDARD" => Some(ChargeScaling::Standard),
            "LARGE_CHARGE" => Some(ChargeScaling::LargeCharge),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DnsProblem {
    pub delta: f64,
    pub a_of_x: FieldExpr,
    pub eps_e: f64,
    pub eps_i: f64,
    pub rho: FieldExpr,
    pub boundary_value: FieldExpr,
    pub mode: ChargeScaling,
    /// Cell mesh size is `1 / resolution_per_cell` in cell coordinates.
    pub resolution_per_cell: usize,
}

impl DnsProblem {
    /// Number of cells per side, if `delta` is the reciprocal of one.
    pub fn cells_per_side(&self) -> Option<usize> {
        if !(self.delta > 0.0) {
            return None;
        }
        let n = (1.0 / self.delta).round();
        ((n * self.delta - 1.0).abs() < 1e-12 && n >= 1.0).then_some(n as usize)
    }

    pub fn cell_h(&self) -> f64 {
        1.0 / self.resolution_per_cell as f64
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.delta, (j as f64 + 0.5) * self.delta]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = match self.cells_per_side() {
            Some(n) if n >= 4 => n,
            _ => {
                out.push(format!("delta = {} is not 1/N for an integer N >= 4", self.delta));
                return out;
            }
        };
        if !(self.eps_e > 0.0 && self.eps_i > 0.0 && self.eps_e.is_finite() && self.eps_i.is_finite()) {
            out.push(format!("permittivities must be positive and finite (eps_e = {}, eps_i = {})", self.eps_e, self.eps_i));
        }
        if self.resolution_per_cell < 10 {
            out.push(format!("resolution_per_cell = {} is below 10", self.resolution_per_cell));
            return out;
        }
        let limit = 0.5 - 2.0 * self.cell_h();
        let mut bad = None;
        for j in 0..n {
            for i in 0..n {
                match self.a_of_x.evaluate(&Bindings::slow(self.cell_center(i, j))) {
                    Ok(a) if a > 0.0 && a <= limit => {}
                    Ok(a) => {
                        bad.get_or_insert(format!("a = {a:.4} in cell ({i}, {j}) outside (0, {limit:.4}]"));
                    }
                    Err(e) => {
                        bad.get_or_insert(format!("a(x) cannot be evaluated: {e}"));
                    }
                }
            }
        }
        out.extend(bad);
        if self.mode == ChargeScaling::LargeCharge {
            for x in [[0.3, 0.6], [0.7, 0.2], [0.5, 0.5]] {
                match rho_eff_cell_average(&self.rho, x) {
                    Ok(m) if m.abs() <= 1e-8 => {}
                    Ok(m) => {
                        out.push(format!("large-charge density has cell mean {m:.3e} at x = {x:?}; it must vanish"));
                        break;
                    }
                    Err(e) => {
                        out.push(format!("rho cannot be evaluated: {e}"));
                        break;
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), DnsError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DnsError::Invalid(v))
        }
    }
}

/// The stitched fine mesh with the solved potential.
#[derive(Debug, Clone)]
pub struct FineField {
    pub delta: f64,
    pub cells_per_side: usize,
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<Region>,
    /// Cell `i + N j` containing each triangle.
    pub cell_of: Vec<usize>,
    pub values: Vec<f64>,
    pub unknowns: usize,
    pub iterations: usize,
    /// Final relative residual of the scaled system.
    pub residual: f64,
    /// The solver stopped at the rounding floor rather than at the tolerance.
    pub stalled: bool,
    /// `int eps |grad phi|^2 dx`.
    pub energy: f64,
    /// Largest mismatch between a boundary node value and the data.
    pub dirichlet_defect: f64,
}

fn tri_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn basis_gradients(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> [[f64; 2]; 3] {
    let two = 2.0 * tri_area(p, q, r);
    [
        [(q[1] - r[1]) / two, (r[0] - q[0]) / two],
        [(r[1] - p[1]) / two, (p[0] - r[0]) / two],
        [(p[1] - q[1]) / two, (q[0] - p[0]) / two],
    ]
}

fn on_boundary(p: [f64; 2]) -> bool {
    let tol = 1e-12;
    p[0] < tol || p[0] > 1.0 - tol || p[1] < tol || p[1] > 1.0 - tol
}

struct Stitched {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    regions: Vec<Region>,
    cell_of: Vec<usize>,
}

fn stitch(problem: &DnsProblem, n: usize) -> Result<Stitched, DnsError> {
    let h = problem.cell_h();
    let radii: Vec<f64> = (0..n * n)
        .map(|k| problem.a_of_x.evaluate(&Bindings::slow(problem.cell_center(k % n, k / n))))
        .collect::<Result<_, _>>()?;
    // cells with equal radius share one mesh
    let mut distinct: Vec<u64> = radii.iter().map(|a| a.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let built: Vec<(u64, Result<Arc<CellMesh>, GeometryError>)> = distinct
        .par_iter()
        .map(|&bits| {
            let a = f64::from_bits(bits);
            let mesh = CellGeometry::uniform(a).and_then(|g| build_cell_mesh(&g, h)).map(Arc::new);
            (bits, mesh)
        })
        .collect();
    let mut meshes: HashMap<u64, Arc<CellMesh>> = HashMap::new();
    for (bits, m) in built {
        match m {
            Ok(m) => {
                meshes.insert(bits, m);
            }
            Err(source) => {
                let k = radii.iter().position(|a| a.to_bits() == bits).unwrap_or(0);
                return Err(DnsError::Mesh { i: k % n, j: k / n, source });
            }
        }
    }
    let estimate: usize = radii.iter().map(|a| meshes[&a.to_bits()].n_vertices()).sum();
    if estimate > MAX_UNKNOWNS {
        return Err(DnsError::TooLarge { unknowns: estimate });
    }
    let d = problem.delta;
    let mut index = PointIndex::new(1e-12 * d);
    let mut triangles = Vec::new();
    let mut regions = Vec::new();
    let mut cell_of = Vec::new();
    for k in 0..n * n {
        let (i, j) = (k % n, k / n);
        let mesh = &meshes[&radii[k].to_bits()];
        let map: Vec<usize> = mesh
            .vertices
            .iter()
            .map(|p| index.insert([(i as f64 + p[0]) * d, (j as f64 + p[1]) * d]))
            .collect();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            triangles.push([map[tri[0]], map[tri[1]], map[tri[2]]]);
            regions.push(mesh.regions[t]);
            cell_of.push(k);
        }
    }
    Ok(Stitched {
        vertices: index.into_points(),
        triangles,
        regions,
        cell_of,
    })
}

/// Preconditioner coarse spaces: the indicator of each inclusion, and
/// bilinear functions on the cell-corner grid held constant over each
/// inclusion at their value at its centre.
fn coarse_spaces(st: &Stitched, dof: &[usize], unknowns: usize, n: usize, d: f64) -> [Prolongation; 2] {
    let mut inclusion = vec![None; st.vertices.len()];
    for (k, tri) in st.triangles.iter().enumerate() {
        if st.regions[k] == Region::Interior {
            for &v in tri {
                inclusion[v] = Some(st.cell_of[k]);
            }
        }
    }
    let mut aggregate = vec![None; unknowns];
    let mut bilinear = vec![Vec::new(); unknowns];
    for (v, &p) in st.vertices.iter().enumerate() {
        if dof[v] == usize::MAX {
            continue;
        }
        aggregate[dof[v]] = inclusion[v];
        let (ci, cj, s, t) = match inclusion[v] {
            Some(c) => (c % n, c / n, 0.5, 0.5),
            None => {
                let ci = ((p[0] / d).floor() as usize).min(n - 1);
                let cj = ((p[1] / d).floor() as usize).min(n - 1);
                (ci, cj, p[0] / d - ci as f64, p[1] / d - cj as f64)
            }
        };
        let node = |i: usize, j: usize| i + (n + 1) * j;
        bilinear[dof[v]] = [
            (node(ci, cj), (1.0 - s) * (1.0 - t)),
            (node(ci + 1, cj), s * (1.0 - t)),
            (node(ci, cj + 1), (1.0 - s) * t),
            (node(ci + 1, cj + 1), s * t),
        ]
        .into_iter()
        .filter(|e| e.1 != 0.0)
        .collect();
    }
    [
        Prolongation::aggregates(&aggregate, n * n),
        Prolongation {
            rows: bilinear,
            n_coarse: (n + 1) * (n + 1),
        },
    ]
}

pub fn solve_full(problem: &DnsProblem) -> Result<FineField, DnsError> {
    solve_full_tol(problem, SOLVER_TOL)
}

fn solve_full_tol(problem: &DnsProblem, tol: f64) -> Result<FineField, DnsError> {
    problem.validate()?;
    let n = problem.cells_per_side().unwrap_or(0);
    let d = problem.delta;
    let st = stitch(problem, n)?;
    let nv = st.vertices.len();
    let g = |p: [f64; 2]| problem.boundary_value.evaluate(&Bindings::slow(p));
    let mut dof = vec![usize::MAX; nv];
    let mut values = vec![0.0; nv];
    let mut unknowns = 0;
    for (v, &p) in st.vertices.iter().enumerate() {
        if on_boundary(p) {
            values[v] = g(p)?;
        } else {
            dof[v] = unknowns;
            unknowns += 1;
        }
    }
    if unknowns > MAX_UNKNOWNS {
        return Err(DnsError::TooLarge { unknowns });
    }
    let scale = match problem.mode {
        ChargeScaling::Standard => 1.0,
        ChargeScaling::LargeCharge => 1.0 / d,
    };
    let mut t = Triplets::with_capacity(unknowns, 9 * st.triangles.len());
    let mut rhs = vec![0.0; unknowns];
    for (k, tri) in st.triangles.iter().enumerate() {
        let [p, q, r] = [st.vertices[tri[0]], st.vertices[tri[1]], st.vertices[tri[2]]];
        let area = tri_area(p, q, r);
        let eps = match st.regions[k] {
            Region::Interior => problem.eps_i,
            Region::Exterior => problem.eps_e,
        };
        let gr = basis_gradients(p, q, r);
        let cell = st.cell_of[k];
        let origin = [(cell % n) as f64 * d, (cell / n) as f64 * d];
        let mut load = [0.0; 3];
        for (l, w) in TRI7 {
            let x = [l[0] * p[0] + l[1] * q[0] + l[2] * r[0], l[0] * p[1] + l[1] * q[1] + l[2] * r[1]];
            let fast = [(x[0] - origin[0]) / d, (x[1] - origin[1]) / d];
            let f = scale * problem.rho.evaluate(&Bindings::at(x, fast))?;
            for a in 0..3 {
                load[a] += w * area * f * l[a];
            }
        }
        for a in 0..3 {
            let Some(ia) = (dof[tri[a]] != usize::MAX).then_some(dof[tri[a]]) else {
                continue;
            };
            rhs[ia] += load[a];
            for b in 0..3 {
                let kab = eps * area * (gr[a][0] * gr[b][0] + gr[a][1] * gr[b][1]);
                if dof[tri[b]] == usize::MAX {
                    rhs[ia] -= kab * values[tri[b]];
                } else {
                    t.add(ia, dof[tri[b]], kab);
                }
            }
        }
    }
    let a = t.to_csr();
    let opts = CgOptions {
        rel_tol: tol,
        max_iter: 20_000,
        constant_nullspace: false,
        scaled_residual: true,
        stagnation: Some((200, FLOOR_LIMIT)),
    };
    let res = conjugate_gradient_coarse(&a, &rhs, &opts, &coarse_spaces(&st, &dof, unknowns, n, d))?;
    for v in 0..nv {
        if dof[v] != usize::MAX {
            values[v] = res.x[dof[v]];
        }
    }
    let mut energy = 0.0;
    for (k, tri) in st.triangles.iter().enumerate() {
        let [p, q, r] = [st.vertices[tri[0]], st.vertices[tri[1]], st.vertices[tri[2]]];
        let gr = basis_gradients(p, q, r);
        let mut grad = [0.0; 2];
        for a in 0..3 {
            grad[0] += values[tri[a]] * gr[a][0];
            grad[1] += values[tri[a]] * gr[a][1];
        }
        let eps = if st.regions[k] == Region::Interior { problem.eps_i } else { problem.eps_e };
        energy += eps * tri_area(p, q, r) * (grad[0] * grad[0] + grad[1] * grad[1]);
    }
    let mut dirichlet_defect: f64 = 0.0;
    for (v, &p) in st.vertices.iter().enumerate() {
        if dof[v] == usize::MAX {
            dirichlet_defect = dirichlet_defect.max((values[v] - g(p)?).abs());
        }
    }
    Ok(FineField {
        delta: d,
        cells_per_side: n,
        vertices: st.vertices,
        triangles: st.triangles,
        regions: st.regions,
        cell_of: st.cell_of,
        values,
        unknowns,
        iterations: res.iterations,
        residual: res.rel_residual,
        stalled: res.stalled,
        energy,
        dirichlet_defect,
    })
}

impl FineField {
    /// Largest spread `max - min` of the potential over the nodes of a
    /// single inclusion.
    pub fn max_inclusion_spread(&self) -> f64 {
        let cells = self.cells_per_side * self.cells_per_side;
        let mut lo = vec![f64::INFINITY; cells];
        let mut hi = vec![f64::NEG_INFINITY; cells];
        for (k, tri) in self.triangles.iter().enumerate() {
            if self.regions[k] != Region::Interior {
                continue;
            }
            let c = self.cell_of[k];
            for &v in tri {
                lo[c] = lo[c].min(self.values[v]);
                hi[c] = hi[c].max(self.values[v]);
            }
        }
        lo.iter().zip(&hi).filter(|(l, _)| l.is_finite()).map(|(l, h)| h - l).fold(0.0, f64::max)
    }

    /// `max phi - min phi` over all nodes.
    pub fn range(&self) -> f64 {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    /// Mesh debug export: vertices with the potential, then triangles.
    pub fn export_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for (p, v) in self.vertices.iter().zip(&self.values) {
            let _ = writeln!(s, "{} {} {}", num(p[0]), num(p[1]), num(*v));
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for (t, r) in self.triangles.iter().zip(&self.regions) {
            let tag = if *r == Region::Interior { 1 } else { 0 };
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], tag);
        }
        s
    }
}

/// Per-cell area-weighted mean of the fine field, row-major with `x1`
/// fastest.
pub fn cell_average(field: &FineField) -> Vec<f64> {
    let n = field.cells_per_side;
    let mut sum = vec![0.0; n * n];
    let mut area = vec![0.0; n * n];
    for (k, tri) in field.triangles.iter().enumerate() {
        let [p, q, r] = [field.vertices[tri[0]], field.vertices[tri[1]], field.vertices[tri[2]]];
        let ar = tri_area(p, q, r);
        let c = field.cell_of[k];
        sum[c] += ar * (field.values[tri[0]] + field.values[tri[1]] + field.values[tri[2]]) / 3.0;
        area[c] += ar;
    }
    sum.iter().zip(&area).map(|(s, a)| s / a).collect()
}

/// Shared settings for a convergence study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub base: DnsProblem,
    pub deltas: Vec<f64>,
    /// The homogenised problem; its grid should be fine enough that its own
    /// error is negligible.
    pub homogenized: MacroProblem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub error_l2: f64,
    pub unknowns: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub slope: f64,
}

impl ConvergenceReport {
    pub fn delta_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delta).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error_l2).collect()
    }

    /// Error ratio for each halving of delta.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].error_l2 / w[0].error_l2).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].error_l2 < w[0].error_l2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,error_L2,unknowns,seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.3}", num(r.delta), num(r.error_l2), r.unknowns, r.seconds);
        }
        s
    }
}

/// `L2` distance between cell averages and the homogenised solution at
/// cell centres.
pub fn homogenization_error(field: &FineField, averages: &[f64], phi0: &crate::macroscale::MacroSolution) -> f64 {
    let n = field.cells_per_side;
    let d = field.delta;
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            let x = [(i as f64 + 0.5) * d, (j as f64 + 0.5) * d];
            s += d * d * (averages[i + n * j] - phi0.interpolate(x)).powi(2);
        }
    }
    s.sqrt()
}

pub fn convergence_study(cfg: &StudyConfig) -> Result<ConvergenceReport, DnsError> {
    if cfg.deltas.len() < 3 || cfg.deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(DnsError::Invalid(vec!["at least 3 strictly decreasing delta values needed".into()]));
    }
    let problems: Vec<DnsProblem> = cfg
        .deltas
        .iter()
        .map(|&delta| DnsProblem { delta, ..cfg.base.clone() })
        .collect();
    for p in &problems {
        p.validate()?;
    }
    let phi0 = solve_homogenized(&cfg.homogenized)?;
    let mut rows = Vec::new();
    for p in &problems {
        let start = Instant::now();
        let field = solve_full(p)?;
        let avg = cell_average(&field);
        rows.push(ConvergenceRow {
            delta: p.delta,
            error_l2: homogenization_error(&field, &avg, &phi0),
            unknowns: field.unknowns,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let d: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.error_l2).collect();
    let slope = loglog_slope(&d, &e).unwrap_or(f64::NAN);
    Ok(ConvergenceReport { rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellsolve::{CellMode, Permittivity};
    use crate::effective::{build_effective_table, EffectiveTable, TableConfig};
    use std::f64::consts::PI;

    fn problem(n: usize, a: &str, eps_i: f64, rho: &str, g: &str, res: usize) -> DnsProblem {
        DnsProblem {
            delta: 1.0 / n as f64,
            a_of_x: FieldExpr::parse(a).unwrap(),
            eps_e: 1.0,
            eps_i,
            rho: FieldExpr::parse(rho).unwrap(),
            boundary_value: FieldExpr::parse(g).unwrap(),
            mode: ChargeScaling::Standard,
            resolution_per_cell: res,
        }
    }

    fn study(a: &str, eps_i: f64, res: usize, deltas: &[f64], table: EffectiveTable) -> ConvergenceReport {
        let rho = "2*pi^2*sin(pi*x1)*sin(pi*x2)";
        let base = problem(8, a, eps_i, rho, "0", res);
        convergence_study(&StudyConfig {
            deltas: deltas.to_vec(),
            homogenized: MacroProblem {
                a_of_x: base.a_of_x.clone(),
                table: Arc::new(table),
                rho_mode: crate::macroscale::RhoMode::CellAverage,
                rho: base.rho.clone(),
                boundary_value: base.boundary_value.clone(),
                grid_n: 256,
            },
            base,
        })
        .unwrap()
    }

    fn table(a_values: Vec<f64>, eps_i: f64, res: usize) -> EffectiveTable {
        build_effective_table(&TableConfig {
            a_values,
            eps_e: 1.0,
            eps_i: Permittivity::Finite(eps_i),
            psi_mode: CellMode::PsiFinite,
            xi_mode: CellMode::XiFinite,
            rho: FieldExpr::parse("sin(2*pi*X1)").unwrap(),
            anchor: [0.5, 0.5],
            target_h: 1.0 / res as f64,
        })
        .unwrap()
    }

    #[test]
    fn constant_radius_errors_decrease() {
        let r = study("0.2", 1e4, 10, &[0.25, 0.125, 0.0625], table(vec![0.16, 0.18, 0.2, 0.22, 0.24], 1e4, 10));
        assert!(r.strictly_decreasing(), "{:?}", r.errors());
        assert!(r.slope >= 0.9, "slope {}", r.slope);
    }

    #[test]
    fn equal_permittivities_leave_only_averaging_error() {
        let r = study("0.25 + 0.05*sin(2*pi*x1)", 1.0, 10, &[0.25, 0.125, 0.0625], EffectiveTable::constant(1.0, vec![0.15, 0.25, 0.35]));
        assert!(r.strictly_decreasing(), "{:?}", r.errors());
        assert!((r.slope - 2.0).abs() < 0.2, "slope {}", r.slope);
    }

    #[test]
    fn error_insensitive_to_cell_resolution() {
        let a = "0.25 + 0.05*sin(2*pi*x1)";
        let avals: Vec<f64> = (0..8).map(|k| 0.18 + 0.02 * k as f64).collect();
        let coarse = study(a, 1e4, 12, &[0.25, 0.125, 0.0625], table(avals.clone(), 1e4, 12));
        let fine = study(a, 1e4, 16, &[0.25, 0.125, 0.0625], table(avals, 1e4, 16));
        for (c, f) in coarse.errors().iter().zip(fine.errors()) {
            assert!(((c - f) / f).abs() < 0.1, "{c} vs {f}");
        }
    }

    #[test]
    fn stitched_mesh_is_conforming() {
        let p = problem(4, "0.2 + 0.05*x1", 1.0, "0", "0", 10);
        let st = stitch(&p, 4).unwrap();
        // every edge used once lies on the outer boundary
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &st.triangles {
            for k in 0..3 {
                let (u, v) = (t[k], t[(k + 1) % 3]);
                *count.entry((u.min(v), u.max(v))).or_default() += 1;
            }
        }
        for ((u, v), c) in count {
            assert!(c <= 2);
            if c == 1 {
                assert!(on_boundary(st.vertices[u]) && on_boundary(st.vertices[v]));
            }
        }
        let total: f64 = st
            .triangles
            .iter()
            .map(|t| tri_area(st.vertices[t[0]], st.vertices[t[1]], st.vertices[t[2]]))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_data_reproduced() {
        let f = solve_full(&problem(4, "0.25", 1.0, "0", "x1", 10)).unwrap();
        for (p, v) in f.vertices.iter().zip(&f.values) {
            assert!((v - p[0]).abs() < 1e-9);
        }
        assert_eq!(f.dirichlet_defect, 0.0);
    }

    #[test]
    fn homogeneous_manufactured_second_order() {
        let rho = "2*pi^2*sin(pi*x1)*sin(pi*x2)";
        let err = |res: usize| {
            let f = solve_full(&problem(4, "0.2", 1.0, rho, "0", res)).unwrap();
            let e: Vec<f64> = f
                .vertices
                .iter()
                .zip(&f.values)
                .map(|(p, v)| (v - (PI * p[0]).sin() * (PI * p[1]).sin()).abs())
                .collect();
            let max = e.iter().cloned().fold(0.0, f64::max);
            let rms = (e.iter().map(|e| e * e).sum::<f64>() / e.len() as f64).sqrt();
            (max, rms)
        };
        let (e1, e2, e3) = (err(10), err(20), err(40));
        // pointwise P1 errors carry a log factor at the inclusion centres
        let max_order = (e1.0 / e3.0).log2() / 2.0;
        let rms_order = (e1.1 / e3.1).log2() / 2.0;
        assert!(max_order > 1.6, "{e1:?} {e2:?} {e3:?}");
        assert!(rms_order > 1.9, "{e1:?} {e2:?} {e3:?}");
    }

    #[test]
    fn inclusions_nearly_equipotential_at_high_contrast() {
        let f = solve_full(&problem(8, "0.25", DEFAULT_EPS_I, "2*pi^2*sin(pi*x1)*sin(pi*x2)", "0", 10)).unwrap();
        assert!(f.max_inclusion_spread() < 1e-3 * f.range(), "{} {}", f.max_inclusion_spread(), f.range());
        assert!(f.energy > 0.0 && f.energy.is_finite());
    }

    #[test]
    fn cell_average_exactness() {
        let mut f = solve_full(&problem(4, "0.2", 1.0, "0", "0", 10)).unwrap();
        for (v, p) in f.values.iter_mut().zip(&f.vertices) {
            *v = p[0];
        }
        let avg = cell_average(&f);
        for j in 0..4 {
            for i in 0..4 {
                assert!((avg[i + 4 * j] - (i as f64 + 0.5) / 4.0).abs() < 1e-12);
            }
        }
        f.values.iter_mut().for_each(|v| *v = 3.5);
        assert!(cell_average(&f).iter().all(|v| (v - 3.5).abs() < 1e-13));
    }

    #[test]
    fn cell_average_midpoint_error_is_second_order() {
        let err = |n: usize| {
            let mut f = solve_full(&problem(n, "0.2", 1.0, "0", "0", 10)).unwrap();
            for (v, p) in f.values.iter_mut().zip(&f.vertices) {
                *v = (2.0 * p[0]).sin() * (1.0 + p[1] * p[1]);
            }
            let avg = cell_average(&f);
            let d = 1.0 / n as f64;
            let mut e: f64 = 0.0;
            for j in 0..n {
                for i in 0..n {
                    let x = [(i as f64 + 0.5) * d, (j as f64 + 0.5) * d];
                    e = e.max((avg[i + n * j] - (2.0 * x[0]).sin() * (1.0 + x[1] * x[1])).abs());
                }
            }
            e
        };
        let order = (err(4) / err(8)).log2();
        assert!(order > 1.8, "{order}");
    }

    #[test]
    fn validation() {
        let mut p = problem(4, "0.25", 1.0, "0", "0", 10);
        p.delta = 0.3;
        assert!(!p.violations().is_empty());
        let p = problem(4, "0.35", 1.0, "0", "0", 10);
        assert!(p.violations()[0].contains("cell (0, 0)"));
        let mut p = problem(4, "0.25", 1.0, "1 + x1", "0", 10);
        p.mode = ChargeScaling::LargeCharge;
        assert!(p.violations()[0].contains("cell mean"));
        p.rho = FieldExpr::parse("sin(2*pi*X1)*(1 + x1)").unwrap();
        assert!(p.violations().is_empty());
    }

    #[test]
    fn size_guard() {
        let p = problem(256, "0.2", 1.0, "0", "0", 30);
        assert!(matches!(solve_full(&p), Err(DnsError::TooLarge { .. })));
    }

    #[test]
    fn large_charge_scales_source() {
        // a fast-only zero-mean density: doubling delta^-1 doubles the source
        let mut p = problem(4, "0.2", 1.0, "sin(2*pi*X1)", "0", 10);
        p.mode = ChargeScaling::LargeCharge;
        let f1 = solve_full(&p).unwrap();
        p.mode = ChargeScaling::Standard;
        let f2 = solve_full(&p).unwrap();
        for (u, v) in f1.values.iter().zip(&f2.values) {
            assert!((u - 4.0 * v).abs() < 1e-9 * (1.0 + u.abs()));
        }
    }
}
