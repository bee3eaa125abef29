//! P1 finite-element solution of the periodic cell problems for the first
//! corrector `Psi` (one field per coordinate direction) and the charge
//! corrector `xi`, at finite inclusion permittivity and in the perfectly
//! dielectric limit.
//!
//! Every vertex value is written `u_v = x[dof_v] + offset_v`, with `dof_v`
//! possibly absent. Periodic copies share a dof. In the limit modes the
//! inclusion either moves as one rigid unknown (`Psi = -X + c`, `xi = c`)
//! or is held fixed (`c = 0`) and the constant is recovered from the zero
//! mean afterwards.

use std::sync::Arc;

use thiserror::Error;

use crate::exprlang::{Bindings, ExprError, FieldExpr};
use crate::geometry::{CellMesh, Region};
use crate::quad::TRI7;
use crate::sparse::{conjugate_gradient, CgOptions, Csr, SolveError, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellMode {
    PsiFinite,
    PsiLimitNeumann,
    PsiLimitConstraint,
    XiFinite,
    XiLimitNeumann,
    XiLimitConstraint,
}

impl CellMode {
    pub const ALL: [CellMode; 6] = [
        CellMode::PsiFinite,
        CellMode::PsiLimitNeumann,
        CellMode::PsiLimitConstraint,
        CellMode::XiFinite,
        CellMode::XiLimitNeumann,
        CellMode::XiLimitConstraint,
    ];

    pub fn is_psi(self) -> bool {
        matches!(self, CellMode::PsiFinite | CellMode::PsiLimitNeumann | CellMode::PsiLimitConstraint)
    }

    pub fn is_limit(self) -> bool {
        !matches!(self, CellMode::PsiFinite | CellMode::XiFinite)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellMode::PsiFinite => "PSI_FINITE",
            CellMode::PsiLimitNeumann => "PSI_LIMIT_NEUMANN",
            CellMode::PsiLimitConstraint => "PSI_LIMIT_CONSTRAINT",
            CellMode::XiFinite => "XI_FINITE",
            CellMode::XiLimitNeumann => "XI_LIMIT_NEUMANN",
            CellMode::XiLimitConstraint => "XI_LIMIT_CONSTRAINT",
        }
    }

    pub fn from_name(name: &str) -> Option<CellMode> {
        CellMode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(name))
    }
}

/// Inclusion permittivity; `Infinite` is the perfect-dielectric limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Permittivity {
    Finite(f64),
    Infinite,
}

impl Permittivity {
    pub fn finite(self) -> Option<f64> {
        match self {
            Permittivity::Finite(v) => Some(v),
            Permittivity::Infinite => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CellSolveError {
    #[error("invalid cell problem: {0}")]
    Spec(String),
    #[error("charge compatibility violated: integral of rho over the cell is {integral:.3e}")]
    Compatibility { integral: f64 },
    #[error("evaluating rho: {0}")]
    Expr(#[from] ExprError),
    #[error("linear solve failed for component {component}: {source}")]
    Solver { component: usize, source: SolveError },
}

#[derive(Debug, Clone)]
pub struct CellProblemSpec {
    pub mesh: Arc<CellMesh>,
    pub eps_e: f64,
    pub eps_i: Permittivity,
    pub mode: CellMode,
    /// Charge density `rho(x, X)`; used by the xi modes only.
    pub rho: Option<FieldExpr>,
    /// Macroscale point `x` at which `rho` is evaluated.
    pub anchor: [f64; 2],
}

/// Tolerance on the cell integral of rho.
pub const COMPATIBILITY_TOL: f64 = 1e-8;

impl CellProblemSpec {
    pub fn psi(mesh: Arc<CellMesh>, eps_e: f64, eps_i: Permittivity, mode: CellMode) -> Self {
        Self {
            mesh,
            eps_e,
            eps_i,
            mode,
            rho: None,
            anchor: [0.0, 0.0],
        }
    }

    pub fn xi(mesh: Arc<CellMesh>, eps_e: f64, eps_i: Permittivity, mode: CellMode, rho: FieldExpr, anchor: [f64; 2]) -> Self {
        Self {
            mesh,
            eps_e,
            eps_i,
            mode,
            rho: Some(rho),
            anchor,
        }
    }

    pub fn validate(&self) -> Result<(), CellSolveError> {
        if !(self.eps_e > 0.0 && self.eps_e.is_finite()) {
            return Err(CellSolveError::Spec(format!("eps_e must be positive, got {}", self.eps_e)));
        }
        match (self.eps_i, self.mode.is_limit()) {
            (Permittivity::Infinite, false) => {
                return Err(CellSolveError::Spec(format!("{} needs a finite eps_i", self.mode.name())));
            }
            (Permittivity::Finite(_), true) => {
                return Err(CellSolveError::Spec(format!("{} needs eps_i = INFINITE", self.mode.name())));
            }
            (Permittivity::Finite(v), false) if !(v > 0.0 && v.is_finite()) => {
                return Err(CellSolveError::Spec(format!("eps_i must be positive, got {v}")));
            }
            _ => {}
        }
        if !self.mode.is_psi() && self.rho.is_none() {
            return Err(CellSolveError::Spec(format!("{} needs a charge density", self.mode.name())));
        }
        Ok(())
    }

    fn eps(&self, region: Region) -> Option<f64> {
        match region {
            Region::Exterior => Some(self.eps_e),
            Region::Interior => self.eps_i.finite(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    pub spec: CellProblemSpec,
    pub psi: Option<[Vec<f64>; 2]>,
    pub xi: Option<Vec<f64>>,
    /// Constant part of the field inside the inclusion, per component, for
    /// the limit modes (`Psi_k = -X_k + c_k`, `xi = c`).
    pub inclusion_constants: Vec<f64>,
    /// Worst relative residual of the linear solves.
    pub rel_residual: f64,
    /// Per component, the discrete interface flux condition residual (limit
    /// modes only).
    pub flux_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct VertexDof {
    dof: Option<usize>,
    offset: f64,
}

struct DofMap {
    vertex: Vec<VertexDof>,
    n_dofs: usize,
    singular: bool,
}

enum InclusionTreatment {
    None,
    Rigid,
    Fixed,
}

fn build_dofs(mesh: &CellMesh, treatment: InclusionTreatment, offset: impl Fn([f64; 2]) -> f64) -> DofMap {
    let master = mesh.periodic_master();
    let inclusion = mesh.inclusion_vertices();
    let mut index = vec![usize::MAX; mesh.n_vertices()];
    let mut n = 0;
    let mut vertex = vec![VertexDof { dof: None, offset: 0.0 }; mesh.n_vertices()];
    let rigid = matches!(treatment, InclusionTreatment::Rigid);
    let rigid_dof = if rigid {
        n += 1;
        Some(0)
    } else {
        None
    };
    for v in 0..mesh.n_vertices() {
        if inclusion[v] && !matches!(treatment, InclusionTreatment::None) {
            vertex[v] = VertexDof {
                dof: rigid_dof,
                offset: offset(mesh.vertices[v]),
            };
            continue;
        }
        let m = master[v];
        if index[m] == usize::MAX {
            index[m] = n;
            n += 1;
        }
        vertex[v] = VertexDof {
            dof: Some(index[m]),
            offset: 0.0,
        };
    }
    DofMap {
        vertex,
        n_dofs: n,
        singular: !matches!(treatment, InclusionTreatment::Fixed),
    }
}

/// Per-triangle permittivity used in the stiffness; `None` skips the
/// triangle.
fn stiffness_eps(spec: &CellProblemSpec) -> Vec<Option<f64>> {
    spec.mesh.regions.iter().map(|&r| spec.eps(r)).collect()
}

fn assemble_matrix(mesh: &CellMesh, dofs: &DofMap, eps: &[Option<f64>]) -> Csr {
    let mut t = Triplets::with_capacity(dofs.n_dofs, 9 * mesh.n_triangles());
    for (tri_idx, tri) in mesh.triangles.iter().enumerate() {
        let Some(e) = eps[tri_idx] else { continue };
        let g = mesh.basis_gradients(tri_idx);
        let area = mesh.area(tri_idx);
        for a in 0..3 {
            let Some(i) = dofs.vertex[tri[a]].dof else { continue };
            for b in 0..3 {
                let Some(j) = dofs.vertex[tri[b]].dof else { continue };
                t.add(i, j, e * area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]));
            }
        }
    }
    t.to_csr()
}

/// Reduces a per-vertex load and subtracts the stiffness action of the
/// offsets.
fn assemble_rhs(mesh: &CellMesh, dofs: &DofMap, eps: &[Option<f64>], vertex_load: &[f64]) -> Vec<f64> {
    let mut b = vec![0.0; dofs.n_dofs];
    for (v, &f) in vertex_load.iter().enumerate() {
        if let Some(i) = dofs.vertex[v].dof {
            b[i] += f;
        }
    }
    for (tri_idx, tri) in mesh.triangles.iter().enumerate() {
        let Some(e) = eps[tri_idx] else { continue };
        if tri.iter().all(|&v| dofs.vertex[v].offset == 0.0) {
            continue;
        }
        let g = mesh.basis_gradients(tri_idx);
        let area = mesh.area(tri_idx);
        for a in 0..3 {
            let Some(i) = dofs.vertex[tri[a]].dof else { continue };
            for bb in 0..3 {
                let off = dofs.vertex[tri[bb]].offset;
                if off != 0.0 {
                    b[i] -= e * area * (g[a][0] * g[bb][0] + g[a][1] * g[bb][1]) * off;
                }
            }
        }
    }
    b
}

/// `-int eps e_k . grad phi_v` per vertex, over triangles with a finite eps.
fn psi_load(mesh: &CellMesh, eps: &[Option<f64>], k: usize) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let Some(e) = eps[t] else { continue };
        let g = mesh.basis_gradients(t);
        let area = mesh.area(t);
        for a in 0..3 {
            f[tri[a]] -= e * area * g[a][k];
        }
    }
    f
}

/// Values of rho at the seven quadrature points of every triangle.
pub(crate) fn rho_at_quadrature(mesh: &CellMesh, rho: &FieldExpr, anchor: [f64; 2]) -> Result<Vec<[f64; 7]>, ExprError> {
    let mut out = Vec::with_capacity(mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let [p, q, r] = mesh.corners(t);
        let mut vals = [0.0; 7];
        for (k, (l, _)) in TRI7.iter().enumerate() {
            let x = [l[0] * p[0] + l[1] * q[0] + l[2] * r[0], l[0] * p[1] + l[1] * q[1] + l[2] * r[1]];
            vals[k] = rho.evaluate(&Bindings::at(anchor, x))?;
        }
        out.push(vals);
    }
    Ok(out)
}

/// `int rho phi_v` per vertex over all triangles.
fn xi_load(mesh: &CellMesh, rho_q: &[[f64; 7]]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let area = mesh.area(t);
        for (k, (l, w)) in TRI7.iter().enumerate() {
            for a in 0..3 {
                f[tri[a]] += area * w * rho_q[t][k] * l[a];
            }
        }
    }
    f
}

pub(crate) fn integrate_quadrature_values(mesh: &CellMesh, vals: &[[f64; 7]], region: Option<Region>) -> f64 {
    let mut s = 0.0;
    for t in 0..mesh.n_triangles() {
        if region.is_some_and(|r| r != mesh.regions[t]) {
            continue;
        }
        let area = mesh.area(t);
        s += area * TRI7.iter().zip(&vals[t]).map(|((_, w), v)| w * v).sum::<f64>();
    }
    s
}

fn expand(dofs: &DofMap, x: &[f64]) -> Vec<f64> {
    dofs.vertex.iter().map(|d| d.dof.map_or(0.0, |i| x[i]) + d.offset).collect()
}

fn subtract_mean(mesh: &CellMesh, u: &mut [f64]) -> f64 {
    let mean = mesh.integrate_p1(u);
    for v in u.iter_mut() {
        *v -= mean;
    }
    mean
}

/// Galerkin reactions `R_v = int_{D_e} eps_e grad u . grad phi_v - l_v` at
/// every vertex, where `l` is the exterior part of the load.
fn exterior_reactions(mesh: &CellMesh, eps_e: f64, u: &[f64], exterior_load: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = exterior_load.iter().map(|l| -l).collect();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if mesh.regions[t] != Region::Exterior {
            continue;
        }
        let g = mesh.basis_gradients(t);
        let grad = mesh.gradient(t, u);
        let area = mesh.area(t);
        for a in 0..3 {
            r[tri[a]] += eps_e * area * (grad[0] * g[a][0] + grad[1] * g[a][1]);
        }
    }
    r
}

fn solve_system(matrix: &Csr, rhs: &[f64], singular: bool, component: usize) -> Result<(Vec<f64>, f64), CellSolveError> {
    let opts = CgOptions {
        constant_nullspace: singular,
        ..Default::default()
    };
    let res = conjugate_gradient(matrix, rhs, &opts).map_err(|source| CellSolveError::Solver { component, source })?;
    Ok((res.x, res.rel_residual))
}

/// Solves the cell problem described by `spec`.
pub fn solve(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    spec.validate()?;
    if spec.mode.is_psi() {
        solve_psi(spec)
    } else {
        solve_xi(spec)
    }
}

pub fn solve_psi_finite(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::PsiFinite)?;
    solve(spec)
}

pub fn solve_psi_limit_neumann(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::PsiLimitNeumann)?;
    solve(spec)
}

pub fn solve_psi_limit_constraint(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::PsiLimitConstraint)?;
    solve(spec)
}

pub fn solve_xi_finite(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::XiFinite)?;
    solve(spec)
}

pub fn solve_xi_limit_neumann(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::XiLimitNeumann)?;
    solve(spec)
}

pub fn solve_xi_limit_constraint(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    expect_mode(spec, CellMode::XiLimitConstraint)?;
    solve(spec)
}

fn expect_mode(spec: &CellProblemSpec, mode: CellMode) -> Result<(), CellSolveError> {
    if spec.mode != mode {
        return Err(CellSolveError::Spec(format!("expected mode {}, got {}", mode.name(), spec.mode.name())));
    }
    Ok(())
}

fn solve_psi(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    let mesh = &*spec.mesh;
    let eps = stiffness_eps(spec);
    let treatment = || match spec.mode {
        CellMode::PsiLimitNeumann => InclusionTreatment::Rigid,
        CellMode::PsiLimitConstraint => InclusionTreatment::Fixed,
        _ => InclusionTreatment::None,
    };
    let mut fields: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut worst: f64 = 0.0;
    let mut constants = Vec::new();
    let mut flux_residuals = Vec::new();
    let mut matrix: Option<Csr> = None;
    for k in 0..2 {
        let dofs = build_dofs(mesh, treatment(), |p| -p[k]);
        // the sparsity and values do not depend on the offsets
        let a = matrix.get_or_insert_with(|| assemble_matrix(mesh, &dofs, &eps));
        let load = psi_load(mesh, &eps, k);
        let b = assemble_rhs(mesh, &dofs, &eps, &load);
        let (x, rel) = solve_system(a, &b, dofs.singular, k)?;
        worst = worst.max(rel);
        let mut u = expand(&dofs, &x);
        if spec.mode.is_limit() {
            let r = exterior_reactions(mesh, spec.eps_e, &u, &load);
            let flux: f64 = mesh.interface_vertices().iter().map(|&v| r[v]).sum();
            let scale = load.iter().map(|l| l.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
            flux_residuals.push(flux.abs() / scale);
        }
        let shift = subtract_mean(mesh, &mut u);
        if spec.mode.is_limit() {
            let c = match spec.mode {
                CellMode::PsiLimitNeumann => x[0],
                _ => 0.0,
            };
            constants.push(c - shift);
        }
        fields[k] = u;
    }
    Ok(CellSolution {
        spec: spec.clone(),
        psi: Some(fields),
        xi: None,
        inclusion_constants: constants,
        rel_residual: worst,
        flux_residuals,
    })
}

fn solve_xi(spec: &CellProblemSpec) -> Result<CellSolution, CellSolveError> {
    let mesh = &*spec.mesh;
    // validated above
    let rho = spec.rho.as_ref().expect("xi mode without rho");
    let rho_q = rho_at_quadrature(mesh, rho, spec.anchor)?;
    let total = integrate_quadrature_values(mesh, &rho_q, None);
    if total.abs() > COMPATIBILITY_TOL {
        return Err(CellSolveError::Compatibility { integral: total });
    }
    let eps = stiffness_eps(spec);
    let treatment = match spec.mode {
        CellMode::XiLimitNeumann => InclusionTreatment::Rigid,
        CellMode::XiLimitConstraint => InclusionTreatment::Fixed,
        _ => InclusionTreatment::None,
    };
    let dofs = build_dofs(mesh, treatment, |_| 0.0);
    let a = assemble_matrix(mesh, &dofs, &eps);
    let load = xi_load(mesh, &rho_q);
    let b = assemble_rhs(mesh, &dofs, &eps, &load);
    let (x, rel) = solve_system(&a, &b, dofs.singular, 0)?;
    let mut u = expand(&dofs, &x);
    let mut flux_residuals = Vec::new();
    if spec.mode.is_limit() {
        // net flux into the matrix must balance the enclosed charge
        let ext_load = exterior_xi_load(mesh, &rho_q);
        let r = exterior_reactions(mesh, spec.eps_e, &u, &ext_load);
        let flux: f64 = mesh.interface_vertices().iter().map(|&v| r[v]).sum();
        let enclosed = integrate_quadrature_values(mesh, &rho_q, Some(Region::Interior));
        let scale = load.iter().map(|l| l.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        flux_residuals.push((flux - enclosed).abs() / scale);
    }
    let shift = subtract_mean(mesh, &mut u);
    let constants = match spec.mode {
        CellMode::XiLimitNeumann => vec![x[0] - shift],
        CellMode::XiLimitConstraint => vec![-shift],
        _ => Vec::new(),
    };
    Ok(CellSolution {
        spec: spec.clone(),
        psi: None,
        xi: Some(u),
        inclusion_constants: constants,
        rel_residual: rel,
        flux_residuals,
    })
}

/// `int_{D_e} rho phi_v` per vertex.
fn exterior_xi_load(mesh: &CellMesh, rho_q: &[[f64; 7]]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if mesh.regions[t] != Region::Exterior {
            continue;
        }
        let area = mesh.area(t);
        for (k, (l, w)) in TRI7.iter().enumerate() {
            for a in 0..3 {
                f[tri[a]] += area * w * rho_q[t][k] * l[a];
            }
        }
    }
    f
}

impl CellSolution {
    pub fn mesh(&self) -> &CellMesh {
        &self.spec.mesh
    }

    /// The stored vertex fields: `[Psi_1, Psi_2]` or `[xi]`.
    pub fn fields(&self) -> Vec<&[f64]> {
        match (&self.psi, &self.xi) {
            (Some(p), _) => vec![&p[0], &p[1]],
            (None, Some(x)) => vec![x],
            _ => Vec::new(),
        }
    }

    /// Cell means of the stored fields.
    pub fn means(&self) -> Vec<f64> {
        self.fields().iter().map(|f| self.mesh().integrate_p1(f)).collect()
    }

    /// Largest mismatch between periodic copies.
    pub fn periodicity_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for f in self.fields() {
            for &(v, w) in &self.mesh().periodic_pairs {
                worst = worst.max((f[v] - f[w]).abs());
            }
        }
        worst
    }

    /// `int eps |grad Psi_k + e_k|^2` over triangles with finite permittivity.
    pub fn energy(&self, k: usize) -> f64 {
        let psi = self.psi.as_ref().expect("energy needs a Psi solution");
        let mesh = self.mesh();
        let mut e = 0.0;
        for t in 0..mesh.n_triangles() {
            let Some(eps) = self.spec.eps(mesh.regions[t]) else { continue };
            let mut g = mesh.gradient(t, &psi[k]);
            g[k] += 1.0;
            e += eps * mesh.area(t) * (g[0] * g[0] + g[1] * g[1]);
        }
        e
    }

    /// Exterior Galerkin reactions of the xi field at interface vertices,
    /// as `(vertex, R_v)`.
    pub(crate) fn xi_interface_reactions(&self, rho_q: &[[f64; 7]]) -> Vec<(usize, f64)> {
        let mesh = self.mesh();
        let xi = self.xi.as_ref().expect("xi solution");
        let load = exterior_xi_load(mesh, rho_q);
        let r = exterior_reactions(mesh, self.spec.eps_e, xi, &load);
        mesh.interface_vertices().into_iter().map(|v| (v, r[v])).collect()
    }

    /// Debug export of the mesh with the solution fields appended.
    pub fn export_text(&self) -> String {
        let mesh = self.mesh();
        match (&self.psi, &self.xi) {
            (Some(p), _) => mesh.export_text(&[("psi1", &p[0]), ("psi2", &p[1])]),
            (None, Some(x)) => mesh.export_text(&[("xi", x)]),
            _ => mesh.export_text(&[]),
        }
    }
}

/// `sqrt(int_region (u - v)^2)` for two P1 fields on the same mesh.
pub fn l2_difference(mesh: &CellMesh, u: &[f64], v: &[f64], region: Option<Region>) -> f64 {
    let d: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    l2_norm(mesh, &d, region)
}

pub fn l2_norm(mesh: &CellMesh, u: &[f64], region: Option<Region>) -> f64 {
    let mut s = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if region.is_some_and(|r| r != mesh.regions[t]) {
            continue;
        }
        let (a, b, c) = (u[tri[0]], u[tri[1]], u[tri[2]]);
        // exact for quadratics of a P1 field
        s += mesh.area(t) * (a * a + b * b + c * c + a * b + b * c + c * a) / 6.0;
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cell_mesh, CellGeometry};
    use std::f64::consts::PI;

    fn mesh(a: f64, h: f64) -> Arc<CellMesh> {
        Arc::new(build_cell_mesh(&CellGeometry::uniform(a).unwrap(), h).unwrap())
    }

    fn psi(m: &Arc<CellMesh>, eps_i: Permittivity, mode: CellMode) -> CellSolution {
        solve(&CellProblemSpec::psi(m.clone(), 1.0, eps_i, mode)).unwrap()
    }

    fn xi(m: &Arc<CellMesh>, eps_i: Permittivity, mode: CellMode, rho: &str) -> CellSolution {
        solve(&CellProblemSpec::xi(m.clone(), 1.0, eps_i, mode, FieldExpr::parse(rho).unwrap(), [0.0, 0.0])).unwrap()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn no_contrast_gives_zero_psi() {
        let m = mesh(0.2, 0.05);
        let s = psi(&m, Permittivity::Finite(1.0), CellMode::PsiFinite);
        let p = s.psi.unwrap();
        assert!(max_abs(&p[0]) < 1e-10 && max_abs(&p[1]) < 1e-10);
    }

    #[test]
    fn psi_components_are_mirror_images() {
        let m = mesh(0.25, 0.04);
        let perm = m.vertex_permutation(|p| [p[1], p[0]]).unwrap();
        for (eps_i, mode) in [
            (Permittivity::Finite(10.0), CellMode::PsiFinite),
            (Permittivity::Infinite, CellMode::PsiLimitNeumann),
            (Permittivity::Infinite, CellMode::PsiLimitConstraint),
        ] {
            let p = psi(&m, eps_i, mode).psi.unwrap();
            for v in 0..m.n_vertices() {
                assert!((p[0][v] - p[1][perm[v]]).abs() < 1e-9, "{mode:?}");
            }
        }
    }

    #[test]
    fn solutions_respect_d4_symmetry() {
        let m = mesh(0.22, 0.04);
        let reflect = m.vertex_permutation(|p| [1.0 - p[0], p[1]]).unwrap();
        let p = psi(&m, Permittivity::Finite(20.0), CellMode::PsiFinite).psi.unwrap();
        for v in 0..m.n_vertices() {
            // Psi_1 odd, Psi_2 even under X1 -> 1 - X1
            assert!((p[0][v] + p[0][reflect[v]]).abs() < 1e-9);
            assert!((p[1][v] - p[1][reflect[v]]).abs() < 1e-9);
        }
        let s = xi(&m, Permittivity::Finite(5.0), CellMode::XiFinite, "cos(2*pi*X1) + cos(2*pi*X2)");
        let rot = m.vertex_permutation(|p| [1.0 - p[1], p[0]]).unwrap();
        let x = s.xi.unwrap();
        for v in 0..m.n_vertices() {
            assert!((x[v] - x[rot[v]]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_mean_and_periodicity_in_every_mode() {
        let m = mesh(0.2, 0.05);
        for mode in CellMode::ALL {
            let eps_i = if mode.is_limit() { Permittivity::Infinite } else { Permittivity::Finite(50.0) };
            let s = if mode.is_psi() { psi(&m, eps_i, mode) } else { xi(&m, eps_i, mode, "sin(2*pi*X1)") };
            for mean in s.means() {
                assert!(mean.abs() < 1e-10, "{mode:?} mean {mean}");
            }
            assert_eq!(s.periodicity_defect(), 0.0, "{mode:?}");
            assert!(s.rel_residual <= 1e-10, "{mode:?}");
        }
    }

    #[test]
    fn interface_compatibility_integral_vanishes() {
        let q = CellGeometry::uniform(0.3).unwrap().boundary_quadrature(256);
        for k in 0..2 {
            assert!(q.integrate(|i| q.normals0[i][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn neumann_limit_matches_high_contrast() {
        let m = mesh(0.25, 0.025);
        let lim = psi(&m, Permittivity::Infinite, CellMode::PsiLimitNeumann).psi.unwrap();
        let fin = psi(&m, Permittivity::Finite(1e8), CellMode::PsiFinite).psi.unwrap();
        for k in 0..2 {
            let d = l2_difference(&m, &lim[k], &fin[k], Some(Region::Exterior));
            let n = l2_norm(&m, &lim[k], Some(Region::Exterior));
            assert!(d / n < 1e-3, "k={k} rel {}", d / n);
        }
    }

    #[test]
    fn neumann_limit_interior_is_rigid() {
        let m = mesh(0.25, 0.05);
        let s = psi(&m, Permittivity::Infinite, CellMode::PsiLimitNeumann);
        let p = s.psi.as_ref().unwrap();
        let inside = m.inclusion_vertices();
        for k in 0..2 {
            for v in (0..m.n_vertices()).filter(|&v| inside[v]) {
                assert!((p[k][v] + m.vertices[v][k] - s.inclusion_constants[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dilute_limit_field_shrinks_with_radius() {
        let mut last = f64::INFINITY;
        for a in [0.2, 0.1, 0.05] {
            let m = mesh(a, 0.02);
            let p = psi(&m, Permittivity::Infinite, CellMode::PsiLimitNeumann).psi.unwrap();
            let n = l2_norm(&m, &p[0], Some(Region::Exterior));
            assert!(n < last, "a={a} norm {n}");
            last = n;
        }
        assert!(last < 0.01);
    }

    #[test]
    fn constraint_route_matches_neumann_route() {
        let m = mesh(0.3, 0.025);
        let n = psi(&m, Permittivity::Infinite, CellMode::PsiLimitNeumann);
        let c = psi(&m, Permittivity::Infinite, CellMode::PsiLimitConstraint);
        let (pn, pc) = (n.psi.unwrap(), c.psi.as_ref().unwrap().clone());
        for k in 0..2 {
            let d = l2_difference(&m, &pn[k], &pc[k], Some(Region::Exterior));
            assert!(d / l2_norm(&m, &pn[k], Some(Region::Exterior)) < 1e-3);
            assert!((c.inclusion_constants[k] - 0.5).abs() < 1e-9, "c_k {}", c.inclusion_constants[k]);
        }
        for r in &c.flux_residuals {
            assert!(*r < 1e-10, "flux residual {r}");
        }
    }

    #[test]
    fn energy_decreases_as_contrast_is_removed() {
        let m = mesh(0.25, 0.04);
        let energies: Vec<f64> = [1000.0, 100.0, 10.0, 2.0, 1.0]
            .iter()
            .map(|&e| psi(&m, Permittivity::Finite(e), CellMode::PsiFinite).energy(0))
            .collect();
        for w in energies.windows(2) {
            assert!(w[1] < w[0], "{energies:?}");
        }
        assert!((energies[4] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn xi_vanishes_without_charge() {
        let m = mesh(0.2, 0.05);
        for mode in [CellMode::XiFinite, CellMode::XiLimitNeumann, CellMode::XiLimitConstraint] {
            let eps_i = if mode.is_limit() { Permittivity::Infinite } else { Permittivity::Finite(3.0) };
            let s = xi(&m, eps_i, mode, "0");
            assert!(max_abs(s.xi.as_ref().unwrap()) < 1e-14);
            assert!(s.inclusion_constants.iter().all(|c| c.abs() < 1e-14));
        }
    }

    #[test]
    fn xi_manufactured_solution_converges() {
        let mut errs = Vec::new();
        let hs = [0.05, 0.025, 0.0125];
        for h in hs {
            let m = mesh(0.2, h);
            let s = xi(&m, Permittivity::Finite(1.0), CellMode::XiFinite, "4*pi^2*sin(2*pi*X1)");
            let exact: Vec<f64> = m.vertices.iter().map(|p| (2.0 * PI * p[0]).sin()).collect();
            errs.push(l2_difference(&m, s.xi.as_ref().unwrap(), &exact, None));
        }
        let slope = crate::stats::loglog_slope(&hs, &errs).unwrap();
        assert!(slope > 1.8, "slope {slope} errors {errs:?}");
    }

    #[test]
    fn incompatible_charge_rejected() {
        let m = mesh(0.2, 0.1);
        let spec = CellProblemSpec::xi(m, 1.0, Permittivity::Finite(2.0), CellMode::XiFinite, FieldExpr::parse("1 + X1").unwrap(), [0.0, 0.0]);
        match solve(&spec) {
            Err(CellSolveError::Compatibility { integral }) => assert!((integral - 1.5).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_and_permittivity_must_agree() {
        let m = mesh(0.2, 0.1);
        assert!(solve(&CellProblemSpec::psi(m.clone(), 1.0, Permittivity::Infinite, CellMode::PsiFinite)).is_err());
        assert!(solve(&CellProblemSpec::psi(m.clone(), 1.0, Permittivity::Finite(3.0), CellMode::PsiLimitNeumann)).is_err());
        let s = CellProblemSpec::psi(m, 1.0, Permittivity::Finite(3.0), CellMode::PsiFinite);
        assert!(solve_psi_limit_constraint(&s).is_err());
        assert!(solve_psi_finite(&s).is_ok());
    }

    #[test]
    fn xi_odd_charge_gives_odd_solution() {
        let m = mesh(0.25, 0.04);
        let reflect = m.vertex_permutation(|p| [1.0 - p[0], p[1]]).unwrap();
        for mode in [CellMode::XiLimitNeumann, CellMode::XiLimitConstraint] {
            let s = xi(&m, Permittivity::Infinite, mode, "sin(2*pi*X1)");
            let x = s.xi.as_ref().unwrap();
            for v in 0..m.n_vertices() {
                assert!((x[v] + x[reflect[v]]).abs() < 1e-9);
            }
            assert!(s.flux_residuals[0] < 1e-10, "{mode:?} {}", s.flux_residuals[0]);
        }
    }

    #[test]
    fn xi_limit_routes_agree_and_flux_balances_enclosed_charge() {
        let m = mesh(0.25, 0.04);
        let rho = "sin(2*pi*X1) + 0.5*cos(2*pi*X2)";
        let n = xi(&m, Permittivity::Infinite, CellMode::XiLimitNeumann, rho);
        let c = xi(&m, Permittivity::Infinite, CellMode::XiLimitConstraint, rho);
        let d = l2_difference(&m, n.xi.as_ref().unwrap(), c.xi.as_ref().unwrap(), None);
        assert!(d < 1e-9 * l2_norm(&m, n.xi.as_ref().unwrap(), None).max(1.0));
        assert!(c.flux_residuals[0] < 1e-10);
    }

    #[test]
    fn export_contains_fields() {
        let m = mesh(0.2, 0.1);
        let s = psi(&m, Permittivity::Finite(4.0), CellMode::PsiFinite);
        assert!(s.export_text().starts_with(&format!("vertices {} psi1 psi2", m.n_vertices())));
    }
}
