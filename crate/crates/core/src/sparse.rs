//! Compressed sparse row matrices and a Jacobi-preconditioned conjugate
//! gradient solver.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("conjugate gradients broke down: non-positive curvature {0:.3e}")]
    Breakdown(f64),
    #[error("non-positive diagonal entry {value:.3e} in row {row}")]
    Diagonal { row: usize, value: f64 },
}

/// Coordinate-format accumulator. Duplicate entries are summed on
/// conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ..Default::default()
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self {
            n,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        self.rows.push(i);
        self.cols.push(j);
        self.vals.push(v);
    }

    pub fn to_csr(&self) -> Csr {
        let n = self.n;
        let mut count = vec![0usize; n + 1];
        for &r in &self.rows {
            count[r + 1] += 1;
        }
        for i in 0..n {
            count[i + 1] += count[i];
        }
        let mut cols = vec![0usize; self.rows.len()];
        let mut vals = vec![0.0; self.rows.len()];
        let mut next = count.clone();
        for k in 0..self.rows.len() {
            let r = self.rows[k];
            cols[next[r]] = self.cols[k];
            vals[next[r]] = self.vals[k];
            next[r] += 1;
        }
        // sort each row by column and merge duplicates, in a fixed order
        let mut row_ptr = vec![0usize; n + 1];
        let mut out_cols = Vec::with_capacity(cols.len());
        let mut out_vals = Vec::with_capacity(vals.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            scratch.clear();
            scratch.extend((count[i]..count[i + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < scratch.len() {
                let c = scratch[k].0;
                let mut v = 0.0;
                while k < scratch.len() && scratch[k].0 == c {
                    v += scratch[k].1;
                    k += 1;
                }
                out_cols.push(c);
                out_vals.push(v);
            }
            row_ptr[i + 1] = out_cols.len();
        }
        Csr {
            n,
            row_ptr,
            cols: out_cols,
            vals: out_vals,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `y = A x`. Rows are independent, so large products run in parallel
    /// without changing the result.
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        let row = |i: usize| -> f64 {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            s
        };
        if self.n >= 20_000 {
            y.par_chunks_mut(4096).enumerate().for_each(|(c, chunk)| {
                for (o, yi) in chunk.iter_mut().enumerate() {
                    *yi = row(c * 4096 + o);
                }
            });
        } else {
            for (i, yi) in y.iter_mut().enumerate().take(self.n) {
                *yi = row(i);
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .find(|&k| self.cols[k] == j)
            .map_or(0.0, |k| self.vals[k])
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                worst = worst.max((self.vals[k] - self.get(self.cols[k], i)).abs());
            }
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the component of `v` along the constant vector.
fn project_out_constant(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// The matrix has the constant vector as its null space: the right-hand
    /// side and every residual are projected onto its complement.
    pub constant_nullspace: bool,
    /// Measure residuals as `|D^-1/2 r| / |D^-1/2 b|` with `D` the matrix
    /// diagonal, the residual of the symmetrically scaled system. Keeps rows
    /// with very large coefficients from setting a rounding floor.
    pub scaled_residual: bool,
    /// `(window, limit)`: when the residual has not halved within `window`
    /// iterations and the true residual is at most `limit`, the iterate is
    /// accepted as sitting on the rounding floor.
    pub stagnation: Option<(usize, f64)>,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iter: 20_000,
            constant_nullspace: false,
            scaled_residual: false,
            stagnation: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    /// Stopped at the rounding floor above `rel_tol`.
    pub stalled: bool,
}

fn inverse_diagonal(a: &Csr) -> Result<Vec<f64>, SolveError> {
    let diag = a.diagonal();
    for (row, &value) in diag.iter().enumerate() {
        if value <= 0.0 {
            return Err(SolveError::Diagonal { row, value });
        }
    }
    Ok(diag.iter().map(|d| 1.0 / d).collect())
}

/// Solves `A x = b` for symmetric positive (semi-)definite `A`.
pub fn conjugate_gradient(a: &Csr, b: &[f64], opts: &CgOptions) -> Result<CgResult, SolveError> {
    let inv = inverse_diagonal(a)?;
    pcg(a, b, opts, |r, z| {
        for i in 0..r.len() {
            z[i] = r[i] * inv[i];
        }
    })
}

/// Coarse space for [`conjugate_gradient_coarse`]: row `i` lists the
/// `(coarse index, weight)` pairs of fine unknown `i`.
#[derive(Debug, Clone)]
pub struct Prolongation {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub n_coarse: usize,
}

impl Prolongation {
    /// Indicator vectors of disjoint aggregates.
    pub fn aggregates(aggregate: &[Option<usize>], n_coarse: usize) -> Self {
        Self {
            rows: aggregate.iter().map(|a| a.map(|k| vec![(k, 1.0)]).unwrap_or_default()).collect(),
            n_coarse,
        }
    }
}

/// Cholesky factor of a dense SPD matrix; directions with a vanishing pivot
/// are dropped from the coarse solve.
struct DenseCholesky {
    n: usize,
    l: Vec<f64>,
    active: Vec<bool>,
}

impl DenseCholesky {
    fn new(mut a: Vec<f64>, n: usize) -> Self {
        let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
        let mut active = vec![true; n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if d <= 1e-13 * scale {
                active[j] = false;
                for i in j..n {
                    a[i * n + j] = 0.0;
                }
                a[j * n + j] = 1.0;
                continue;
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        Self { n, l: a, active }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            if !self.active[i] {
                b[i] = 0.0;
            }
        }
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
        for i in 0..n {
            if !self.active[i] {
                b[i] = 0.0;
            }
        }
    }
}

/// CG with an additive multilevel preconditioner: Jacobi plus an exact
/// Galerkin solve `P (P^T A P)^-1 P^T` on each coarse space. Coarse spaces
/// that contain the near-null modes of a high-contrast problem make the
/// iteration count independent of the contrast.
pub fn conjugate_gradient_coarse(
    a: &Csr,
    b: &[f64],
    opts: &CgOptions,
    coarse: &[Prolongation],
) -> Result<CgResult, SolveError> {
    let inv = inverse_diagonal(a)?;
    let factors: Vec<DenseCholesky> = coarse
        .iter()
        .map(|p| {
            assert_eq!(p.rows.len(), a.n());
            let m = p.n_coarse;
            let mut e = vec![0.0; m * m];
            for i in 0..a.n() {
                if p.rows[i].is_empty() {
                    continue;
                }
                for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                    let j = a.cols[k];
                    for &(ci, wi) in &p.rows[i] {
                        for &(cj, wj) in &p.rows[j] {
                            e[ci * m + cj] += wi * a.vals[k] * wj;
                        }
                    }
                }
            }
            DenseCholesky::new(e, m)
        })
        .collect();
    let mut work: Vec<Vec<f64>> = coarse.iter().map(|p| vec![0.0; p.n_coarse]).collect();
    pcg(a, b, opts, move |r, z| {
        for i in 0..r.len() {
            z[i] = r[i] * inv[i];
        }
        for ((p, f), w) in coarse.iter().zip(&factors).zip(work.iter_mut()) {
            w.iter_mut().for_each(|v| *v = 0.0);
            for (i, row) in p.rows.iter().enumerate() {
                for &(c, wt) in row {
                    w[c] += wt * r[i];
                }
            }
            f.solve(w);
            for (i, row) in p.rows.iter().enumerate() {
                for &(c, wt) in row {
                    z[i] += wt * w[c];
                }
            }
        }
    })
}

fn pcg<P: FnMut(&[f64], &mut [f64])>(a: &Csr, b: &[f64], opts: &CgOptions, mut precond: P) -> Result<CgResult, SolveError> {
    let n = a.n();
    let weights: Option<Vec<f64>> = opts.scaled_residual.then(|| a.diagonal().iter().map(|d| 1.0 / d).collect());
    let norm = |v: &[f64]| match &weights {
        Some(w) => v.iter().zip(w).map(|(x, w)| x * x * w).sum::<f64>().sqrt(),
        None => norm(v),
    };
    let mut r = b.to_vec();
    if opts.constant_nullspace {
        project_out_constant(&mut r);
    }
    let bnorm = norm(&r);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgResult {
            x,
            iterations: 0,
            rel_residual: 0.0,
            stalled: false,
        });
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let (mut best, mut best_it) = (1.0, 0);
    let true_residual = |x: &[f64]| {
        let mut t = a.apply(x);
        for i in 0..n {
            t[i] = b[i] - t[i];
        }
        if opts.constant_nullspace {
            project_out_constant(&mut t);
        }
        norm(&t) / bnorm
    };
    for it in 1..=opts.max_iter {
        a.mul(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(SolveError::Breakdown(pap));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.constant_nullspace {
            project_out_constant(&mut r);
        }
        let rel = norm(&r) / bnorm;
        if let Some((window, limit)) = opts.stagnation {
            if rel < 0.5 * best {
                (best, best_it) = (rel, it);
            } else if it - best_it >= window {
                let residual = true_residual(&x);
                if residual <= limit {
                    return Ok(CgResult {
                        x,
                        iterations: it,
                        rel_residual: residual,
                        stalled: true,
                    });
                }
                // a plateau above the limit is not the floor
                best_it = it;
            }
        }
        if rel <= opts.rel_tol {
            // recompute the true residual to guard against drift
            let mut true_r = a.apply(&x);
            for i in 0..n {
                true_r[i] = b[i] - true_r[i];
            }
            if opts.constant_nullspace {
                project_out_constant(&mut true_r);
            }
            let true_rel = norm(&true_r) / bnorm;
            if true_rel <= 10.0 * opts.rel_tol {
                return Ok(CgResult {
                    x,
                    iterations: it,
                    rel_residual: true_rel,
                    stalled: false,
                });
            }
            r = true_r;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let mut true_r = a.apply(&x);
    for i in 0..n {
        true_r[i] = b[i] - true_r[i];
    }
    Err(SolveError::NoConvergence {
        iterations: opts.max_iter,
        residual: norm(&true_r) / bnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplace_1d(n: usize, periodic: bool) -> Csr {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, 2.0);
            if i > 0 {
                t.add(i, i - 1, -1.0);
            } else if periodic {
                t.add(0, n - 1, -1.0);
            }
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
            } else if periodic {
                t.add(n - 1, 0, -1.0);
            }
        }
        t.to_csr()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2);
        t.add(0, 0, 1.0);
        t.add(0, 0, 2.0);
        t.add(1, 0, -1.0);
        let a = t.to_csr();
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn solves_dirichlet_laplacian() {
        let n = 50;
        let a = laplace_1d(n, false);
        let exact: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.apply(&exact);
        let sol = conjugate_gradient(&a, &b, &CgOptions::default()).unwrap();
        for (x, e) in sol.x.iter().zip(&exact) {
            assert!((x - e).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_periodic_system() {
        let n = 40;
        let a = laplace_1d(n, true);
        let mut exact: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
        project_out_constant(&mut exact);
        let mut b = a.apply(&exact);
        // an incompatible constant component must be projected away
        for v in b.iter_mut() {
            *v += 1e-3;
        }
        let opts = CgOptions {
            constant_nullspace: true,
            ..Default::default()
        };
        let mut x = conjugate_gradient(&a, &b, &opts).unwrap().x;
        project_out_constant(&mut x);
        for (x, e) in x.iter().zip(&exact) {
            assert!((x - e).abs() < 1e-9);
        }
    }

    #[test]
    fn coarse_spaces_do_not_change_the_solution() {
        let n = 60;
        // 1D conductances with a stiff block, Dirichlet at both ends
        let c = |e: usize| if (20..40).contains(&e) { 1e4 } else { 1.0 };
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, c(i) + c(i + 1));
            if i + 1 < n {
                t.add(i, i + 1, -c(i + 1));
                t.add(i + 1, i, -c(i + 1));
            }
        }
        let a = t.to_csr();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.2).sin()).collect();
        let opts = CgOptions {
            rel_tol: 1e-10,
            scaled_residual: true,
            ..Default::default()
        };
        let plain = conjugate_gradient(&a, &b, &opts).unwrap();
        let agg: Vec<Option<usize>> = (0..n).map(|i| (20..40).contains(&i).then_some(0)).collect();
        let two = conjugate_gradient_coarse(&a, &b, &opts, &[Prolongation::aggregates(&agg, 1)]).unwrap();
        for (x, y) in plain.x.iter().zip(&two.x) {
            assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn stagnation_stops_at_rounding_floor() {
        let n = 400;
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, 2.0 + 1e-3 * (i as f64 * 1.3).cos().abs());
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
                t.add(i + 1, i, -1.0);
            }
        }
        let a = t.to_csr();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let opts = CgOptions {
            rel_tol: 1e-30,
            stagnation: Some((30, 1e-10)),
            ..Default::default()
        };
        let res = conjugate_gradient(&a, &b, &opts).unwrap();
        assert!(res.stalled, "{} {}", res.iterations, res.rel_residual);
        assert!(res.rel_residual < 1e-12);
        let strict = CgOptions {
            stagnation: Some((30, 1e-40)),
            max_iter: 3000,
            ..opts
        };
        assert!(matches!(conjugate_gradient(&a, &b, &strict), Err(SolveError::NoConvergence { iterations: 3000, .. })));
    }

    proptest! {
        #[test]
        fn random_spd_tridiagonal(diag in prop::collection::vec(4.5f64..10.0, 5..40), seed in 0u64..1000) {
            let n = diag.len();
            let mut t = Triplets::new(n);
            for i in 0..n {
                t.add(i, i, diag[i]);
                if i + 1 < n {
                    let off = -1.0 - (seed as f64 * 0.001 + i as f64 * 0.01).sin().abs();
                    t.add(i, i + 1, off);
                    t.add(i + 1, i, off);
                }
            }
            let a = t.to_csr();
            prop_assert_eq!(a.asymmetry(), 0.0);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).cos()).collect();
            let sol = conjugate_gradient(&a, &b, &CgOptions::default()).unwrap();
            let r = a.apply(&sol.x);
            let res: f64 = r.iter().zip(&b).map(|(r, b)| (r - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(res <= 1e-10 * norm(&b));
        }
    }
}
