//! Boundary-conforming triangulation of the periodic unit cell.
//!
//! One eighth of the cell (the wedge `0 <= theta <= pi/4` about the centre,
//! out to the side `X1 = 1`) is meshed with a structured mapped block: a
//! fan of rings inside the inclusion and a layered block between the arc and
//! the cell side. The wedge is then reflected through the square's symmetry
//! group. The resulting mesh is exactly D4-symmetric, its interface polyline
//! has every vertex on the circle, and boundary vertices on opposite sides
//! are exact translates of each other.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};
use std::fmt::Write as _;

use super::{CellGeometry, GeometryError, CENTER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    /// Inclusion `D_i`.
    Interior,
    /// Matrix `D_e`.
    Exterior,
}

/// Directed edge of the interface polyline, counter-clockwise about the
/// centre, with the triangles on either side.
#[derive(Debug, Clone, Copy)]
pub struct InterfaceEdge {
    pub v: [usize; 2],
    pub normal: [f64; 2],
    pub interior_tri: usize,
    pub exterior_tri: usize,
}

/// Edge on the cell boundary with its outward normal and owning triangle.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryEdge {
    pub v: [usize; 2],
    pub normal: [f64; 2],
    pub tri: usize,
}

#[derive(Debug, Clone)]
pub struct CellMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<Region>,
    pub interface_edges: Vec<InterfaceEdge>,
    pub outer_edges: Vec<BoundaryEdge>,
    /// `(v, partner)`: `v` on the right (or top) side, `partner` its
    /// translate by `(-1, 0)` (or `(0, -1)`). Right takes precedence at the
    /// corner `(1, 1)`.
    pub periodic_pairs: Vec<(usize, usize)>,
    pub radius: f64,
    pub target_h: f64,
    /// Number of boundary segments per half side; boundary vertices sit at
    /// multiples of `1 / (2 * side_segments)`.
    pub side_segments: usize,
}

/// Deduplicates points closer than a tolerance using a hashed grid.
pub(crate) struct PointIndex {
    scale: f64,
    tol: f64,
    map: HashMap<(i64, i64), Vec<usize>>,
    points: Vec<[f64; 2]>,
}

impl PointIndex {
    pub(crate) fn new(tol: f64) -> Self {
        Self {
            scale: 1.0 / (4.0 * tol),
            tol,
            map: HashMap::new(),
            points: Vec::new(),
        }
    }

    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        ((p[0] * self.scale).floor() as i64, (p[1] * self.scale).floor() as i64)
    }

    pub(crate) fn find(&self, p: [f64; 2]) -> Option<usize> {
        let (kx, ky) = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.map.get(&(kx + dx, ky + dy)) {
                    for &id in ids {
                        let q = self.points[id];
                        if (p[0] - q[0]).abs() <= self.tol && (p[1] - q[1]).abs() <= self.tol {
                            return Some(id);
                        }
                    }
                }
            }
        }
        None
    }

    pub(crate) fn insert(&mut self, p: [f64; 2]) -> usize {
        if let Some(id) = self.find(p) {
            return id;
        }
        let id = self.points.len();
        self.points.push(p);
        let k = self.key(p);
        self.map.entry(k).or_default().push(id);
        id
    }

    pub(crate) fn into_points(self) -> Vec<[f64; 2]> {
        self.points
    }
}

struct Wedge {
    points: Vec<[f64; 2]>,
    triangles: Vec<([usize; 3], Region)>,
    arc_edges: Vec<[usize; 2]>,
    side_edges: Vec<[usize; 2]>,
}

fn arc_point(radius: f64, i: usize, n: usize) -> [f64; 2] {
    if i == 0 {
        [CENTER[0] + radius, CENTER[1]]
    } else if i == n {
        // exactly on the diagonal
        [CENTER[0] + radius * FRAC_1_SQRT_2, CENTER[1] + radius * FRAC_1_SQRT_2]
    } else {
        let t = FRAC_PI_4 * i as f64 / n as f64;
        [CENTER[0] + radius * t.cos(), CENTER[1] + radius * t.sin()]
    }
}

fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

fn dist2(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

fn build_wedge(a: f64, h: f64) -> Wedge {
    let ns = (0.5 / h).ceil() as usize;
    let layers = ((FRAC_1_SQRT_2 - a) / h).ceil().max(1.0) as usize;
    let rings = (a / h).ceil().max(1.0) as usize;

    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut triangles = Vec::new();

    // inclusion rings: ring k has n_k segments, n_rings = ns
    let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(rings + 1);
    points.push(CENTER);
    ring_ids.push(vec![0]);
    for k in 1..=rings {
        let radius = if k == rings { a } else { a * k as f64 / rings as f64 };
        let n = if k == rings { ns } else { ((ns * k) as f64 / rings as f64).ceil().max(1.0) as usize };
        let ids: Vec<usize> = (0..=n)
            .map(|i| {
                points.push(arc_point(radius, i, n));
                points.len() - 1
            })
            .collect();
        ring_ids.push(ids);
    }
    let angle = |p: [f64; 2]| (p[1] - CENTER[1]).atan2(p[0] - CENTER[0]);
    for k in 1..=rings {
        let inner = &ring_ids[k - 1];
        let outer = &ring_ids[k];
        if inner.len() == 1 {
            for w in outer.windows(2) {
                triangles.push(([inner[0], w[0], w[1]], Region::Interior));
            }
            continue;
        }
        let (m, n) = (inner.len() - 1, outer.len() - 1);
        let (mut i, mut j) = (0, 0);
        while i < m || j < n {
            let advance_inner = if i == m {
                false
            } else if j == n {
                true
            } else {
                angle(points[inner[i + 1]]) < angle(points[outer[j + 1]]) - 1e-14
            };
            if advance_inner {
                triangles.push(([inner[i], outer[j], inner[i + 1]], Region::Interior));
                i += 1;
            } else {
                triangles.push(([inner[i], outer[j], outer[j + 1]], Region::Interior));
                j += 1;
            }
        }
    }

    // exterior block: column j joins arc point j to side point (1, 0.5 + 0.5 j / ns)
    let arc = ring_ids[rings].clone();
    let mut grid = vec![vec![0usize; layers + 1]; ns + 1];
    for j in 0..=ns {
        let p0 = points[arc[j]];
        let p1 = if j == ns { [1.0, 1.0] } else { [1.0, 0.5 + 0.5 * j as f64 / ns as f64] };
        grid[j][0] = arc[j];
        for l in 1..=layers {
            let t = l as f64 / layers as f64;
            let p = if l == layers {
                p1
            } else if j == 0 {
                [p0[0] + t * (p1[0] - p0[0]), CENTER[1]]
            } else {
                [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
            };
            points.push(p);
            grid[j][l] = points.len() - 1;
        }
    }
    for j in 0..ns {
        for l in 0..layers {
            let (p00, p01, p10, p11) = (grid[j][l], grid[j][l + 1], grid[j + 1][l], grid[j + 1][l + 1]);
            if dist2(points[p00], points[p11]) <= dist2(points[p01], points[p10]) {
                triangles.push(([p00, p01, p11], Region::Exterior));
                triangles.push(([p00, p11, p10], Region::Exterior));
            } else {
                triangles.push(([p00, p01, p10], Region::Exterior));
                triangles.push(([p01, p11, p10], Region::Exterior));
            }
        }
    }
    let arc_edges = arc.windows(2).map(|w| [w[0], w[1]]).collect();
    let side_edges = (0..ns).map(|j| [grid[j][layers], grid[j + 1][layers]]).collect();
    Wedge {
        points,
        triangles,
        arc_edges,
        side_edges,
    }
}

/// The eight symmetries of the square about the cell centre, as
/// (swap coordinates, reflect X1, reflect X2). Reflections are applied in
/// cell coordinates (`X -> 1 - X`) so mirror-line points map exactly.
const D4: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (false, true, false),
    (false, true, true),
    (true, true, true),
    (true, false, true),
    (false, false, true),
];

fn apply_symmetry(p: [f64; 2], (swap, rx, ry): (bool, bool, bool)) -> [f64; 2] {
    let mut q = if swap { [p[1], p[0]] } else { p };
    if rx {
        q[0] = 1.0 - q[0];
    }
    if ry {
        q[1] = 1.0 - q[1];
    }
    q
}

/// Triangulates the unit cell with a circular inclusion of radius
/// `geom.radius()` about the centre.
pub fn build_cell_mesh(geom: &CellGeometry, target_h: f64) -> Result<CellMesh, GeometryError> {
    if !(target_h > 0.0 && target_h <= 0.1) {
        return Err(GeometryError::MeshSize(target_h));
    }
    let a = geom.radius();
    let limit = 0.5 - 2.0 * target_h;
    if a > limit + 1e-15 {
        return Err(GeometryError::Infeasible { a, h: target_h, limit });
    }
    let wedge = build_wedge(a, target_h);
    let ns = (0.5 / target_h).ceil() as usize;

    let mut index = PointIndex::new(1e-13);
    let mut triangles = Vec::new();
    let mut regions = Vec::new();
    let mut arc_edges = Vec::new();
    let mut side_edges = Vec::new();
    for sym in D4 {
        let odd = (sym.0 as u8 + sym.1 as u8 + sym.2 as u8) % 2 == 1;
        let map: Vec<usize> = wedge.points.iter().map(|&p| index.insert(apply_symmetry(p, sym))).collect();
        for &(t, region) in &wedge.triangles {
            let mut tri = [map[t[0]], map[t[1]], map[t[2]]];
            if odd {
                tri.swap(1, 2);
            }
            triangles.push(tri);
            regions.push(region);
        }
        for e in &wedge.arc_edges {
            arc_edges.push([map[e[0]], map[e[1]]]);
        }
        for e in &wedge.side_edges {
            side_edges.push([map[e[0]], map[e[1]]]);
        }
    }
    let mut vertices = index.into_points();
    for v in vertices.iter_mut() {
        for c in v.iter_mut() {
            if c.abs() < 1e-13 {
                *c = 0.0;
            } else if (*c - 1.0).abs() < 1e-13 {
                *c = 1.0;
            }
        }
    }
    for (t, tri) in triangles.iter_mut().enumerate() {
        let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
        if area <= 0.0 {
            return Err(GeometryError::Mesh(format!("triangle {t} has non-positive area {area}")));
        }
    }

    // edge -> triangles
    let mut edge_tris: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (u, v) = (tri[k], tri[(k + 1) % 3]);
            edge_tris.entry((u.min(v), u.max(v))).or_default().push(t);
        }
    }

    let mut interface_edges = Vec::with_capacity(arc_edges.len());
    for [u, v] in arc_edges {
        let (pu, pv) = (vertices[u], vertices[v]);
        let ccw = signed_area(CENTER, pu, pv) > 0.0;
        let (u, v) = if ccw { (u, v) } else { (v, u) };
        let (pu, pv) = (vertices[u], vertices[v]);
        let len = dist2(pu, pv).sqrt();
        let normal = [(pv[1] - pu[1]) / len, -(pv[0] - pu[0]) / len];
        let tris = &edge_tris[&(u.min(v), u.max(v))];
        if tris.len() != 2 {
            return Err(GeometryError::Mesh("interface edge not shared by two triangles".into()));
        }
        let (ti, te) = if regions[tris[0]] == Region::Interior { (tris[0], tris[1]) } else { (tris[1], tris[0]) };
        if regions[ti] != Region::Interior || regions[te] != Region::Exterior {
            return Err(GeometryError::Mesh("interface edge does not separate the regions".into()));
        }
        interface_edges.push(InterfaceEdge {
            v: [u, v],
            normal,
            interior_tri: ti,
            exterior_tri: te,
        });
    }

    let mut outer_edges = Vec::with_capacity(side_edges.len());
    for [u, v] in side_edges {
        let (pu, pv) = (vertices[u], vertices[v]);
        let mid = [0.5 * (pu[0] + pv[0]), 0.5 * (pu[1] + pv[1])];
        let normal = if mid[0] == 1.0 {
            [1.0, 0.0]
        } else if mid[0] == 0.0 {
            [-1.0, 0.0]
        } else if mid[1] == 1.0 {
            [0.0, 1.0]
        } else if mid[1] == 0.0 {
            [0.0, -1.0]
        } else {
            return Err(GeometryError::Mesh(format!("side edge off the cell boundary at {mid:?}")));
        };
        let tris = &edge_tris[&(u.min(v), u.max(v))];
        if tris.len() != 1 {
            return Err(GeometryError::Mesh("cell-boundary edge shared by two triangles".into()));
        }
        outer_edges.push(BoundaryEdge { v: [u, v], normal, tri: tris[0] });
    }

    let lookup = {
        let mut idx = PointIndex::new(1e-12);
        for &p in &vertices {
            idx.insert(p);
        }
        idx
    };
    let mut periodic_pairs = Vec::new();
    for (v, p) in vertices.iter().enumerate() {
        let partner = if p[0] == 1.0 {
            Some([0.0, p[1]])
        } else if p[1] == 1.0 {
            Some([p[0], 0.0])
        } else {
            None
        };
        if let Some(q) = partner {
            let w = lookup
                .find(q)
                .ok_or_else(|| GeometryError::Mesh(format!("no periodic partner for vertex {v} at {p:?}")))?;
            periodic_pairs.push((v, w));
        }
    }

    Ok(CellMesh {
        vertices,
        triangles,
        regions,
        interface_edges,
        outer_edges,
        periodic_pairs,
        radius: a,
        target_h,
        side_segments: ns,
    })
}

impl CellMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [self.vertices[tri[0]], self.vertices[tri[1]], self.vertices[tri[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [p, q, r] = self.corners(t);
        signed_area(p, q, r)
    }

    /// Gradients of the three barycentric (P1 hat) functions on triangle `t`.
    pub fn basis_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [p, q, r] = self.corners(t);
        let two_area = 2.0 * signed_area(p, q, r);
        [
            [(q[1] - r[1]) / two_area, (r[0] - q[0]) / two_area],
            [(r[1] - p[1]) / two_area, (p[0] - r[0]) / two_area],
            [(p[1] - q[1]) / two_area, (q[0] - p[0]) / two_area],
        ]
    }

    /// Gradient of the P1 interpolant of `values` on triangle `t`.
    pub fn gradient(&self, t: usize, values: &[f64]) -> [f64; 2] {
        let g = self.basis_gradients(t);
        let tri = self.triangles[t];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += values[tri[k]] * g[k][0];
            out[1] += values[tri[k]] * g[k][1];
        }
        out
    }

    pub fn region_area(&self, region: Region) -> f64 {
        (0..self.n_triangles())
            .filter(|&t| self.regions[t] == region)
            .map(|t| self.area(t))
            .sum()
    }

    /// `int_D f` of the P1 interpolant of `values`.
    pub fn integrate_p1(&self, values: &[f64]) -> f64 {
        (0..self.n_triangles())
            .map(|t| {
                let tri = self.triangles[t];
                self.area(t) * (values[tri[0]] + values[tri[1]] + values[tri[2]]) / 3.0
            })
            .sum()
    }

    /// `int f` over triangles accepted by `filter`, with a degree-5 rule.
    pub fn integrate_fn<F, P>(&self, f: F, filter: P) -> f64
    where
        F: Fn([f64; 2]) -> f64,
        P: Fn(Region) -> bool,
    {
        let mut sum = 0.0;
        for t in 0..self.n_triangles() {
            if !filter(self.regions[t]) {
                continue;
            }
            let [p, q, r] = self.corners(t);
            let area = signed_area(p, q, r);
            for (l, w) in crate::quad::TRI7 {
                let x = [l[0] * p[0] + l[1] * q[0] + l[2] * r[0], l[0] * p[1] + l[1] * q[1] + l[2] * r[1]];
                sum += area * w * f(x);
            }
        }
        sum
    }

    /// Vertices lying in the closed inclusion (any vertex of an interior triangle).
    pub fn inclusion_vertices(&self) -> Vec<bool> {
        let mut mark = vec![false; self.n_vertices()];
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.regions[t] == Region::Interior {
                for &v in tri {
                    mark[v] = true;
                }
            }
        }
        mark
    }

    /// Vertices touched by at least one matrix triangle.
    pub fn exterior_vertices(&self) -> Vec<bool> {
        let mut mark = vec![false; self.n_vertices()];
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.regions[t] == Region::Exterior {
                for &v in tri {
                    mark[v] = true;
                }
            }
        }
        mark
    }

    pub fn interface_vertices(&self) -> Vec<usize> {
        self.interface_edges.iter().map(|e| e.v[0]).collect()
    }

    /// For every vertex, the representative of its periodic equivalence
    /// class (bottom-left copy).
    pub fn periodic_master(&self) -> Vec<usize> {
        let mut master: Vec<usize> = (0..self.n_vertices()).collect();
        for &(v, w) in &self.periodic_pairs {
            master[v] = w;
        }
        // resolve chains such as (1,1) -> (0,1) -> (0,0)
        for v in 0..master.len() {
            let mut m = master[v];
            while master[m] != m {
                m = master[m];
            }
            master[v] = m;
        }
        master
    }

    /// For every outer edge, the index of its periodic translate on the
    /// opposite side of the cell.
    pub fn outer_edge_partners(&self) -> Vec<usize> {
        let master = self.periodic_master();
        let key = |e: &BoundaryEdge| {
            let (a, b) = (master[e.v[0]], master[e.v[1]]);
            (a.min(b), a.max(b))
        };
        let mut by_key: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, e) in self.outer_edges.iter().enumerate() {
            by_key.entry(key(e)).or_default().push(i);
        }
        self.outer_edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let pair = &by_key[&key(e)];
                // construction guarantees exactly one translate
                *pair.iter().find(|&&j| j != i).expect("unpaired outer edge")
            })
            .collect()
    }

    /// Vertex at `p` (within 1e-12), if any.
    pub fn find_vertex(&self, p: [f64; 2]) -> Option<usize> {
        self.vertices
            .iter()
            .position(|q| (p[0] - q[0]).abs() <= 1e-12 && (p[1] - q[1]).abs() <= 1e-12)
    }

    /// Permutation `perm[v]` giving the vertex at the image of `v` under
    /// `map`. Fails if the mesh is not invariant under `map`.
    pub fn vertex_permutation<F: Fn([f64; 2]) -> [f64; 2]>(&self, map: F) -> Option<Vec<usize>> {
        let mut idx = PointIndex::new(1e-12);
        for &p in &self.vertices {
            idx.insert(p);
        }
        self.vertices.iter().map(|&p| idx.find(map(p))).collect()
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in &self.interface_edges {
            for &v in &e.v {
                let p = self.vertices[v];
                let r = (p[0] - CENTER[0]).hypot(p[1] - CENTER[1]);
                if (r - self.radius).abs() > 1e-12 {
                    return Err(format!("interface vertex {v} off the circle by {}", r - self.radius));
                }
            }
        }
        for &(v, w) in &self.periodic_pairs {
            let (p, q) = (self.vertices[v], self.vertices[w]);
            let dx = [p[0] - q[0], p[1] - q[1]];
            let ok = ((dx[0] - 1.0).abs() < 1e-12 && dx[1].abs() < 1e-12) || (dx[0].abs() < 1e-12 && (dx[1] - 1.0).abs() < 1e-12);
            if !ok {
                return Err(format!("periodic pair ({v},{w}) is not a unit translate"));
            }
        }
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if self.area(t) <= 0.0 {
                return Err(format!("triangle {t} not counter-clockwise"));
            }
            for k in 0..3 {
                let (u, v) = (tri[k], tri[(k + 1) % 3]);
                *edge_count.entry((u.min(v), u.max(v))).or_default() += 1;
            }
        }
        let on_boundary = |p: [f64; 2]| p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
        for (&(u, v), &n) in &edge_count {
            let (pu, pv) = (self.vertices[u], self.vertices[v]);
            let boundary_edge =
                on_boundary(pu) && on_boundary(pv) && (pu[0] == pv[0] && (pu[0] == 0.0 || pu[0] == 1.0) || pu[1] == pv[1] && (pu[1] == 0.0 || pu[1] == 1.0));
            let expected = if boundary_edge { 1 } else { 2 };
            if n != expected {
                return Err(format!("edge ({u},{v}) shared by {n} triangles, expected {expected}"));
            }
        }
        let area: f64 = (0..self.n_triangles()).map(|t| self.area(t)).sum();
        if (area - 1.0).abs() > 1e-10 {
            return Err(format!("total area {area} != 1"));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            let region = self.regions[t];
            for &v in tri {
                let p = self.vertices[v];
                let r = (p[0] - CENTER[0]).hypot(p[1] - CENTER[1]);
                let wrong = match region {
                    Region::Interior => r > self.radius + 1e-12,
                    Region::Exterior => r < self.radius * (std::f64::consts::PI / (4.0 * self.side_segments as f64)).cos() - 1e-12,
                };
                if wrong {
                    return Err(format!("triangle {t} straddles the interface"));
                }
            }
        }
        Ok(())
    }

    /// Longest edge length, over all triangles and over interface edges.
    pub fn max_edge_lengths(&self) -> (f64, f64) {
        let mut all: f64 = 0.0;
        for tri in &self.triangles {
            for k in 0..3 {
                all = all.max(dist2(self.vertices[tri[k]], self.vertices[tri[(k + 1) % 3]]).sqrt());
            }
        }
        let iface = self
            .interface_edges
            .iter()
            .map(|e| dist2(self.vertices[e.v[0]], self.vertices[e.v[1]]).sqrt())
            .fold(0.0, f64::max);
        (all, iface)
    }

    /// Plain-text debug export. `fields` are appended as per-vertex columns.
    pub fn export_text(&self, fields: &[(&str, &[f64])]) -> String {
        let mut s = String::new();
        let names: Vec<&str> = fields.iter().map(|f| f.0).collect();
        let _ = writeln!(s, "vertices {}{}", self.n_vertices(), if names.is_empty() { String::new() } else { format!(" {}", names.join(" ")) });
        for (i, p) in self.vertices.iter().enumerate() {
            let _ = write!(s, "{i} {:.17e} {:.17e}", p[0], p[1]);
            for (_, vals) in fields {
                let _ = write!(s, " {:.17e}", vals[i]);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "triangles {}", self.n_triangles());
        for (i, t) in self.triangles.iter().enumerate() {
            let tag = match self.regions[i] {
                Region::Interior => "interior",
                Region::Exterior => "exterior",
            };
            let _ = writeln!(s, "{i} {} {} {} {tag}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "interface_edges {}", self.interface_edges.len());
        for (i, e) in self.interface_edges.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {:.17e} {:.17e}", e.v[0], e.v[1], e.normal[0], e.normal[1]);
        }
        let _ = writeln!(s, "periodic_pairs {}", self.periodic_pairs.len());
        for (v, w) in &self.periodic_pairs {
            let _ = writeln!(s, "{v} {w}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn mesh(a: f64, h: f64) -> CellMesh {
        build_cell_mesh(&CellGeometry::uniform(a).unwrap(), h).unwrap()
    }

    #[test]
    fn invariants_hold_across_radii() {
        for &a in &[0.05, 0.1, 0.2, 0.25, 0.3, 0.4] {
            for &h in &[0.1, 0.05, 0.02] {
                if a > 0.5 - 2.0 * h {
                    continue;
                }
                let m = mesh(a, h);
                m.check_invariants().unwrap_or_else(|e| panic!("a={a} h={h}: {e}"));
                let (all, iface) = m.max_edge_lengths();
                assert!(iface <= h + 1e-12, "a={a} h={h} interface edge {iface}");
                assert!(all <= 2.0 * h + 1e-12, "a={a} h={h} edge {all}");
            }
        }
    }

    #[test]
    fn exterior_area_near_exact() {
        let m = mesh(0.25, 0.05);
        let ext = m.region_area(Region::Exterior);
        assert!((ext - (1.0 - PI * 0.0625)).abs() < 2e-3, "{ext}");
        let int = m.region_area(Region::Interior);
        assert!((int + ext - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_radius_rejected() {
        let g = CellGeometry::uniform(0.49).unwrap();
        assert!(matches!(build_cell_mesh(&g, 0.05), Err(GeometryError::Infeasible { .. })));
        assert!(matches!(build_cell_mesh(&g, 0.2), Err(GeometryError::MeshSize(_))));
    }

    #[test]
    fn interior_area_converges_quadratically() {
        let a = 0.3;
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = hs.iter().map(|&h| (mesh(a, h).region_area(Region::Interior) - PI * a * a).abs()).collect();
        let slope = crate::stats::loglog_slope(&hs, &errs).unwrap();
        assert!(slope >= 1.9, "slope {slope}");
    }

    #[test]
    fn mesh_is_d4_symmetric() {
        let m = mesh(0.23, 0.04);
        for sym in D4 {
            let perm = m.vertex_permutation(|p| apply_symmetry(p, sym)).expect("not invariant");
            let mut seen = perm.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), m.n_vertices());
        }
    }

    #[test]
    fn periodic_masters_cover_boundary() {
        let m = mesh(0.2, 0.05);
        let master = m.periodic_master();
        let corners: Vec<usize> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .iter()
            .map(|&p| master[m.find_vertex(p).unwrap()])
            .collect();
        assert!(corners.iter().all(|&c| c == corners[0]));
        for (v, p) in m.vertices.iter().enumerate() {
            let q = m.vertices[master[v]];
            assert!(q[0] < 1.0 && q[1] < 1.0);
            assert!((p[0] - q[0]).fract().abs() < 1e-12 && (p[1] - q[1]).fract().abs() < 1e-12);
        }
    }

    #[test]
    fn outer_edges_pair_across_the_cell() {
        let m = mesh(0.2, 0.05);
        let partners = m.outer_edge_partners();
        for (i, &j) in partners.iter().enumerate() {
            assert_eq!(partners[j], i);
            let (e, f) = (&m.outer_edges[i], &m.outer_edges[j]);
            assert_eq!(e.normal[0], -f.normal[0]);
            assert_eq!(e.normal[1], -f.normal[1]);
        }
    }

    #[test]
    fn export_lists_every_section() {
        let m = mesh(0.2, 0.1);
        let vals = vec![1.0; m.n_vertices()];
        let text = m.export_text(&[("psi1", &vals)]);
        assert!(text.starts_with(&format!("vertices {} psi1", m.n_vertices())));
        for section in ["triangles", "interface_edges", "periodic_pairs"] {
            assert!(text.contains(section));
        }
    }
}
