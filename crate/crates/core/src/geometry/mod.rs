//! Cell geometry: the circular inclusion as a level set, its normal
//! expansion and boundary velocity under slow radius variation, boundary
//! quadrature, and the conforming periodic cell mesh.

mod mesh;

pub use mesh::{build_cell_mesh, BoundaryEdge, CellMesh, InterfaceEdge, Region};
pub(crate) use mesh::PointIndex;

use std::f64::consts::PI;

use thiserror::Error;

use crate::quad;

/// Inclusion centre in fast coordinates.
pub const CENTER: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("inclusion radius {0} outside (0, 0.5)")]
    Radius(f64),
    #[error("point coincides with the inclusion centre; normal undefined")]
    AtCenter,
    #[error("mesh infeasible: radius {a} exceeds 0.5 - 2*h = {limit} for h = {h}")]
    Infeasible { a: f64, h: f64, limit: f64 },
    #[error("mesh size {0} outside (0, 0.1]")]
    MeshSize(f64),
    #[error("mesh construction failed: {0}")]
    Mesh(String),
}

/// The inclusion of one periodic cell: radius `a` about [`CENTER`] and the
/// slow gradient of the radius at the cell's macroscale anchor point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    a: f64,
    grad_a: [f64; 2],
}

impl CellGeometry {
    pub fn new(a: f64, grad_a: [f64; 2]) -> Result<Self, GeometryError> {
        if !(a > 0.0 && a < 0.5) {
            return Err(GeometryError::Radius(a));
        }
        Ok(Self { a, grad_a })
    }

    pub fn uniform(a: f64) -> Result<Self, GeometryError> {
        Self::new(a, [0.0, 0.0])
    }

    pub fn radius(&self) -> f64 {
        self.a
    }

    pub fn grad_a(&self) -> [f64; 2] {
        self.grad_a
    }

    pub fn center(&self) -> [f64; 2] {
        CENTER
    }

    /// Inclusion area fraction `pi a^2`.
    pub fn volume_fraction(&self) -> f64 {
        PI * self.a * self.a
    }

    /// `|X - c| - a`: negative inside the inclusion.
    pub fn level_set(&self, x: [f64; 2]) -> f64 {
        dist(x, CENTER) - self.a
    }

    /// Outward unit normal `grad_X h / |grad_X h|`.
    pub fn normal0(&self, x: [f64; 2]) -> Result<[f64; 2], GeometryError> {
        radial(x)
    }

    /// First-order normal correction. For the circle `|grad_X h| = 1` and
    /// `grad_x h = -grad_a`, so this is the tangential part of `-grad_a`.
    pub fn normal1(&self, x: [f64; 2]) -> Result<[f64; 2], GeometryError> {
        let r = radial(x)?;
        let g = self.grad_a;
        let gr = g[0] * r[0] + g[1] * r[1];
        Ok([-g[0] + gr * r[0], -g[1] + gr * r[1]])
    }

    /// Boundary velocity `V_jk = d R_k / d x_j` for boundary points
    /// `R = c + a(x) r_hat`, i.e. `V = grad_a (outer) r_hat`.
    pub fn boundary_velocity(&self, x: [f64; 2]) -> Result<[[f64; 2]; 2], GeometryError> {
        let r = radial(x)?;
        let g = self.grad_a;
        Ok([[g[0] * r[0], g[0] * r[1]], [g[1] * r[0], g[1] * r[1]]])
    }

    /// Point on the inclusion boundary at polar angle `theta`.
    pub fn boundary_point(&self, theta: f64) -> [f64; 2] {
        [CENTER[0] + self.a * theta.cos(), CENTER[1] + self.a * theta.sin()]
    }

    /// Equally spaced trapezoid rule on the inclusion boundary.
    pub fn boundary_quadrature(&self, n_points: usize) -> BoundaryQuadrature {
        self.boundary_quadrature_offset(n_points, 0.0)
    }

    /// As [`Self::boundary_quadrature`] with the first node at angle `offset`.
    pub fn boundary_quadrature_offset(&self, n_points: usize, offset: f64) -> BoundaryQuadrature {
        assert!(n_points >= 4, "boundary quadrature needs at least 4 points");
        let w = 2.0 * PI * self.a / n_points as f64;
        let mut q = BoundaryQuadrature {
            radius: self.a,
            theta: Vec::with_capacity(n_points),
            points: Vec::with_capacity(n_points),
            weights: vec![w; n_points],
            normals0: Vec::with_capacity(n_points),
            normals1: Vec::with_capacity(n_points),
            velocity: Vec::with_capacity(n_points),
        };
        for i in 0..n_points {
            let theta = offset + 2.0 * PI * i as f64 / n_points as f64;
            let p = self.boundary_point(theta);
            q.theta.push(theta);
            q.points.push(p);
            q.normals0.push([theta.cos(), theta.sin()]);
            // unwrap: boundary points are never the centre
            q.normals1.push(self.normal1(p).unwrap());
            q.velocity.push(self.boundary_velocity(p).unwrap());
        }
        q
    }

    /// Composite Gauss–Legendre rule on the arc `theta_start..theta_end`.
    pub fn arc_quadrature(&self, theta_start: f64, theta_end: f64, panels: usize, order: usize) -> BoundaryQuadrature {
        let (thetas, wts) = quad::composite_gl(theta_start, theta_end, panels, order);
        let mut q = BoundaryQuadrature {
            radius: self.a,
            theta: Vec::with_capacity(thetas.len()),
            points: Vec::with_capacity(thetas.len()),
            weights: Vec::with_capacity(thetas.len()),
            normals0: Vec::with_capacity(thetas.len()),
            normals1: Vec::with_capacity(thetas.len()),
            velocity: Vec::with_capacity(thetas.len()),
        };
        for (theta, w) in thetas.into_iter().zip(wts) {
            let p = self.boundary_point(theta);
            q.theta.push(theta);
            q.points.push(p);
            q.weights.push(w * self.a);
            q.normals0.push([theta.cos(), theta.sin()]);
            q.normals1.push(self.normal1(p).unwrap());
            q.velocity.push(self.boundary_velocity(p).unwrap());
        }
        q
    }

    /// `int_{D_i} f dX` by Gauss–Legendre in radius and the trapezoid rule
    /// in angle. Spectrally accurate for smooth `f`.
    pub fn disk_integral<F: Fn([f64; 2]) -> f64>(&self, f: F, n_radial: usize, n_angle: usize) -> f64 {
        let (rs, ws) = quad::composite_gl(0.0, self.a, 1, n_radial);
        let dtheta = 2.0 * PI / n_angle as f64;
        let mut sum = 0.0;
        for (r, w) in rs.iter().zip(&ws) {
            let mut ring = 0.0;
            for k in 0..n_angle {
                let t = k as f64 * dtheta;
                ring += f([CENTER[0] + r * t.cos(), CENTER[1] + r * t.sin()]);
            }
            sum += w * r * ring * dtheta;
        }
        sum
    }
}

/// Quadrature nodes on the circle `|X - c| = a` with the normal expansion and
/// boundary velocity cached at each node.
#[derive(Debug, Clone)]
pub struct BoundaryQuadrature {
    pub radius: f64,
    pub theta: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub normals0: Vec<[f64; 2]>,
    pub normals1: Vec<[f64; 2]>,
    pub velocity: Vec<[[f64; 2]; 2]>,
}

impl BoundaryQuadrature {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `sum_i w_i f(i)`.
    pub fn integrate<F: FnMut(usize) -> f64>(&self, mut f: F) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| w * f(i)).sum()
    }
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn radial(x: [f64; 2]) -> Result<[f64; 2], GeometryError> {
    let d = [x[0] - CENTER[0], x[1] - CENTER[1]];
    let r = d[0].hypot(d[1]);
    if r == 0.0 {
        return Err(GeometryError::AtCenter);
    }
    Ok([d[0] / r, d[1] / r])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol
    }

    #[test]
    fn level_set_values() {
        let g = CellGeometry::uniform(0.3).unwrap();
        assert!((g.level_set([0.5, 0.5]) + 0.3).abs() < 1e-15);
        assert!(g.level_set([0.8, 0.5]).abs() < 1e-15);
        assert!((g.level_set([0.5, 0.9]) - 0.1).abs() < 1e-15);
        assert!(CellGeometry::uniform(0.5).is_err());
        assert!(CellGeometry::uniform(0.0).is_err());
    }

    #[test]
    fn normal0_values() {
        let g = CellGeometry::uniform(0.3).unwrap();
        assert!(close(g.normal0([0.8, 0.5]).unwrap(), [1.0, 0.0], 1e-15));
        assert!(close(g.normal0([0.5, 0.2]).unwrap(), [0.0, -1.0], 1e-15));
        let g = CellGeometry::uniform(0.25).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(g.normal0([0.5 + 0.25 * s, 0.5 + 0.25 * s]).unwrap(), [s, s], 1e-15));
        assert_eq!(g.normal0(CENTER), Err(GeometryError::AtCenter));
    }

    #[test]
    fn normal1_values() {
        let gval = 0.1;
        let g = CellGeometry::new(0.3, [gval, 0.0]).unwrap();
        assert!(close(g.normal1(g.boundary_point(0.0)).unwrap(), [0.0, 0.0], 1e-15));
        assert!(close(g.normal1(g.boundary_point(PI / 2.0)).unwrap(), [-gval, 0.0], 1e-15));
        let g0 = CellGeometry::uniform(0.3).unwrap();
        assert_eq!(g0.normal1(g0.boundary_point(1.0)).unwrap(), [0.0, 0.0]);
    }

    /// Expand the exact normal of the level set `h = |X - c| - a(x_hat + delta X)`
    /// in delta by finite differences and compare its first-order
    /// coefficient with `normal1`.
    #[test]
    fn normal1_matches_expansion_of_exact_normal() {
        let grad = [0.1, -0.07];
        let g = CellGeometry::new(0.3, grad).unwrap();
        let exact_normal = |x: [f64; 2], delta: f64| {
            let r = radial(x).unwrap();
            // grad h = grad_X h + delta grad_x h with grad_x h = -grad_a
            let n = [r[0] - delta * grad[0], r[1] - delta * grad[1]];
            let len = n[0].hypot(n[1]);
            [n[0] / len, n[1] / len]
        };
        for k in 0..16 {
            let p = g.boundary_point(2.0 * PI * k as f64 / 16.0 + 0.1);
            let d = 1e-5;
            let np = exact_normal(p, d);
            let nm = exact_normal(p, -d);
            let fd = [(np[0] - nm[0]) / (2.0 * d), (np[1] - nm[1]) / (2.0 * d)];
            assert!(close(fd, g.normal1(p).unwrap(), 1e-9));
        }
    }

    #[test]
    fn velocity_identities() {
        let gval = 0.2;
        let g = CellGeometry::new(0.3, [gval, 0.0]).unwrap();
        let v = g.boundary_velocity(g.boundary_point(0.0)).unwrap();
        assert!(close(v[0], [gval, 0.0], 1e-15) && close(v[1], [0.0, 0.0], 1e-15));
        let z = CellGeometry::uniform(0.3).unwrap();
        assert_eq!(z.boundary_velocity(z.boundary_point(0.4)).unwrap(), [[0.0; 2]; 2]);

        let g = CellGeometry::new(0.27, [0.13, -0.05]).unwrap();
        let q = g.boundary_quadrature(64);
        for i in 0..q.len() {
            let n0 = q.normals0[i];
            let n1 = q.normals1[i];
            let v = q.velocity[i];
            // (V n0)_j = sum_k V_jk n0_k = grad_a_j
            let vn = [v[0][0] * n0[0] + v[0][1] * n0[1], v[1][0] * n0[0] + v[1][1] * n0[1]];
            assert!(close(vn, g.grad_a(), 1e-15));
            // V n0 + n1 = (grad_a . r_hat) r_hat
            let ga = g.grad_a()[0] * n0[0] + g.grad_a()[1] * n0[1];
            assert!(close([vn[0] + n1[0], vn[1] + n1[1]], [ga * n0[0], ga * n0[1]], 1e-15));
            assert!((n0[0] * n1[0] + n0[1] * n1[1]).abs() < 1e-16);
            assert!((n0[0].hypot(n0[1]) - 1.0).abs() < 1e-15);
        }
    }

    /// Finite-difference check that V is the slow derivative of the boundary
    /// point at fixed angle.
    #[test]
    fn velocity_is_derivative_of_boundary_position() {
        let grad = [0.11, 0.04];
        let a_of = |x: [f64; 2]| 0.3 + grad[0] * x[0] + grad[1] * x[1];
        let g = CellGeometry::new(a_of([0.0, 0.0]), grad).unwrap();
        let theta: f64 = 0.7;
        let r = [theta.cos(), theta.sin()];
        let v = g.boundary_velocity(g.boundary_point(theta)).unwrap();
        let d = 1e-6;
        for j in 0..2 {
            let mut xp = [0.0, 0.0];
            xp[j] = d;
            let dr = (a_of(xp) - a_of([0.0, 0.0])) / d;
            for k in 0..2 {
                assert!((dr * r[k] - v[j][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn boundary_quadrature_sums() {
        let g = CellGeometry::uniform(0.3).unwrap();
        let q4 = g.boundary_quadrature(4);
        for w in &q4.weights {
            assert!((w - PI * 0.3 / 2.0).abs() < 1e-15);
        }
        let q = g.boundary_quadrature(64);
        assert!((q.weights.iter().sum::<f64>() - 0.6 * PI).abs() < 1e-12);
        let n1 = q.integrate(|i| q.normals0[i][0]);
        let n2 = q.integrate(|i| q.normals0[i][1]);
        assert!(n1.abs() < 1e-14 && n2.abs() < 1e-14);
        let flux = q.integrate(|i| q.points[i][0] * q.normals0[i][0] + q.points[i][1] * q.normals0[i][1]);
        assert!((flux - 2.0 * PI * 0.09).abs() < 1e-12);
    }

    /// d/da int_{D_e} f = -oint f dS for f independent of a.
    #[test]
    fn reynolds_transport_identity() {
        let fields: [fn([f64; 2]) -> f64; 2] = [|_| 1.0, |x| x[0] * x[0]];
        let cell_integrals = [1.0, 1.0 / 3.0];
        for (f, total) in fields.iter().zip(cell_integrals) {
            let a = 0.27;
            let step = 1e-4;
            let ext = |a: f64| total - CellGeometry::uniform(a).unwrap().disk_integral(f, 12, 64);
            let fd = (ext(a + step) - ext(a - step)) / (2.0 * step);
            let g = CellGeometry::uniform(a).unwrap();
            let q = g.boundary_quadrature(128);
            let bdry = q.integrate(|i| f(q.points[i]));
            assert!(((fd + bdry) / bdry).abs() < 1e-6, "fd {fd} bdry {bdry}");
        }
    }

    #[test]
    fn arc_quadrature_matches_closed_rule_on_full_circle() {
        let g = CellGeometry::new(0.3, [0.1, 0.0]).unwrap();
        let arc = g.arc_quadrature(0.2, 0.2 + 2.0 * PI, 8, 12);
        let closed = g.boundary_quadrature(96);
        let f = |p: [f64; 2]| (3.0 * p[0]).sin() * p[1];
        let a = arc.integrate(|i| f(arc.points[i]));
        let c = closed.integrate(|i| f(closed.points[i]));
        assert!((a - c).abs() < 1e-13);
        let half = g.arc_quadrature(0.0, PI, 4, 8);
        assert!((half.weights.iter().sum::<f64>() - 0.3 * PI).abs() < 1e-14);
    }

    #[test]
    fn disk_integral_exact_values() {
        let g = CellGeometry::uniform(0.2).unwrap();
        let area = g.disk_integral(|_| 1.0, 8, 32);
        assert!((area - PI * 0.04).abs() < 1e-14);
        let m = g.disk_integral(|x| x[0], 8, 32);
        assert!((m - 0.5 * PI * 0.04).abs() < 1e-14);
    }
}
