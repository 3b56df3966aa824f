//! Periodic finite-difference calculus on uniform torus grids.
//!
//! Nodes are stored row-major (the last axis is contiguous). The operator is
//! the flux form `λu - ½ Σ_j D_j^-(a_j D_j^+ u)` with one coefficient per
//! staggered edge.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::{CoefficientField, MAX_D};
use crate::stats::{self, CHUNK};

/// Uniform periodic grid with `n` points per axis and period `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub d: usize,
    pub n: usize,
    pub l: f64,
    pub h: f64,
    /// Physical position of node zero.
    pub origin: Vec<f64>,
}

impl Grid {
    pub fn new(d: usize, n: usize, l: f64) -> Result<Self> {
        ensure((1..=MAX_D).contains(&d), "d", d, "must lie in 1..=4")?;
        ensure(n >= 4 && n % 2 == 0, "n", n, "must be even and at least 4")?;
        ensure(l.is_finite() && l > 0.0, "L", l, "must be positive")?;
        ensure((n as f64).powi(d as i32) <= 2.0e8, "n", n, "n^d exceeds the memory budget")?;
        Ok(Grid {
            d,
            n,
            l,
            h: l / n as f64,
            origin: vec![0.0; d],
        })
    }

    /// Shifts the lattice so that node zero sits at `origin`.
    pub fn with_origin(mut self, origin: &[f64]) -> Result<Self> {
        ensure(origin.len() == self.d, "origin", format!("{origin:?}"), "needs d components")?;
        self.origin = origin.to_vec();
        Ok(self)
    }

    /// Same lattice with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Grid {
        Grid {
            d: self.d,
            n: self.n,
            l: self.l * factor,
            h: self.h * factor,
            origin: self.origin.iter().map(|o| o * factor).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.d - 1 - axis) as u32)
    }

    pub fn coords(&self, idx: usize) -> [usize; MAX_D] {
        let mut c = [0; MAX_D];
        let mut rem = idx;
        for j in (0..self.d).rev() {
            c[j] = rem % self.n;
            rem /= self.n;
        }
        c
    }

    pub fn index(&self, c: &[usize]) -> usize {
        c.iter().take(self.d).fold(0, |acc, &v| acc * self.n + v % self.n)
    }

    pub fn position(&self, idx: usize) -> [f64; MAX_D] {
        let c = self.coords(idx);
        let mut x = [0.0; MAX_D];
        for j in 0..self.d {
            x[j] = self.origin[j] + c[j] as f64 * self.h;
        }
        x
    }

    /// Index of the neighbour of `idx` one step along `axis` (`forward` or backward).
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> usize {
        let s = self.stride(axis);
        let c = (idx / s) % self.n;
        match (forward, c) {
            (true, c) if c + 1 == self.n => idx - (self.n - 1) * s,
            (true, _) => idx + s,
            (false, 0) => idx + (self.n - 1) * s,
            (false, _) => idx - s,
        }
    }

    fn row_neighbors(&self, base: usize) -> ([usize; MAX_D], [usize; MAX_D]) {
        let mut plus = [0; MAX_D];
        let mut minus = [0; MAX_D];
        for j in 0..self.d.saturating_sub(1) {
            plus[j] = self.neighbor(base, j, true);
            minus[j] = self.neighbor(base, j, false);
        }
        (plus, minus)
    }
}

/// Scalar (`components == 1`) or vector (`components == d`, component-major) grid data.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub components: usize,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    d: usize,
    n: usize,
    #[serde(rename = "L")]
    l: f64,
    kind: String,
    components: usize,
    origin: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &Grid) -> Self {
        GridFunction {
            grid: grid.clone(),
            components: 1,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn scalar(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        ensure(values.len() == grid.len(), "values", values.len(), "length must equal n^d")?;
        ensure(values.iter().all(|v| v.is_finite()), "values", "non-finite", "must be finite")?;
        Ok(GridFunction {
            grid: grid.clone(),
            components: 1,
            values,
        })
    }

    pub fn vector(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        ensure(values.len() == grid.d * grid.len(), "values", values.len(), "length must equal d n^d")?;
        ensure(values.iter().all(|v| v.is_finite()), "values", "non-finite", "must be finite")?;
        Ok(GridFunction {
            grid: grid.clone(),
            components: grid.d,
            values,
        })
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> Self {
        let d = grid.d;
        let values = (0..grid.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| f(&grid.position(i)[..d]))
            .collect();
        GridFunction {
            grid: grid.clone(),
            components: 1,
            values,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.components == 1
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[k * m..(k + 1) * m]
    }

    pub fn mean(&self) -> f64 {
        stats::par_sum(self.values.len(), |i| self.values[i]) / self.values.len() as f64
    }

    /// Root-mean-square value.
    pub fn rms(&self) -> f64 {
        (stats::dot(&self.values, &self.values) / self.values.len() as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Grid inner product `h^d Σ u v`.
    pub fn inner(&self, other: &GridFunction) -> f64 {
        stats::dot(&self.values, &other.values) * self.grid.h.powi(self.grid.d as i32)
    }

    /// Cubic periodic interpolation at a physical point.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate(&self.grid, self.component(0), x).0
    }

    /// Writes `<stem>.bin` (little-endian f64, row-major) and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::io::write_atomic(&stem.with_extension("bin"), &bytes)?;
        let side = Sidecar {
            d: self.grid.d,
            n: self.grid.n,
            l: self.grid.l,
            kind: if self.is_scalar() { "scalar" } else { "vector" }.into(),
            components: self.components,
            origin: self.grid.origin.clone(),
        };
        crate::io::write_atomic(&stem.with_extension("json"), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        ensure(bytes.len() % 8 == 0, "binary", bytes.len(), "length must be a multiple of 8")?;
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let grid = Grid::new(side.d, side.n, side.l)?.with_origin(&side.origin)?;
        if side.kind == "scalar" {
            Self::scalar(&grid, values)
        } else {
            Self::vector(&grid, values)
        }
    }
}

/// Edge-averaging rule used when sampling coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    /// Gauss-Legendre points per edge for the harmonic average (1 = midpoint).
    pub quadrature: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { quadrature: 3 }
    }
}

/// Third operand of the affine map: absent, a separate array, or the output itself.
#[derive(Clone, Copy)]
enum Extra<'a> {
    None,
    Slice(&'a [f64]),
    InPlace,
}

/// Discrete `λ - ½∇·a∇` on a periodic grid.
#[derive(Clone, Debug)]
pub struct DivFormOperator {
    grid: Grid,
    lambda: f64,
    edges: Arc<Vec<Vec<f64>>>,
}

impl DivFormOperator {
    /// Builds the operator from explicit edge coefficients (`edges[j][i]` joins node `i` and `i + e_j`).
    pub fn from_edges(grid: &Grid, lambda: f64, edges: Vec<Vec<f64>>) -> Result<Self> {
        ensure(lambda.is_finite() && lambda >= 0.0, "lambda", lambda, "must be non-negative")?;
        ensure(edges.len() == grid.d, "edges", edges.len(), "needs one array per axis")?;
        for e in &edges {
            ensure(e.len() == grid.len(), "edges", e.len(), "each array needs n^d entries")?;
            ensure(e.iter().all(|v| v.is_finite() && *v > 0.0), "edges", "non-positive", "coefficients must be positive")?;
        }
        Ok(DivFormOperator {
            grid: grid.clone(),
            lambda,
            edges: Arc::new(edges),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn edge(&self, axis: usize) -> &[f64] {
        &self.edges[axis]
    }

    /// Same coefficients with another massive term.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        DivFormOperator {
            grid: self.grid.clone(),
            lambda,
            edges: Arc::clone(&self.edges),
        }
    }

    /// Same coefficient pattern on a grid with identical `n` but another spacing.
    pub fn rescaled(&self, grid: &Grid) -> Result<Self> {
        ensure(grid.n == self.grid.n && grid.d == self.grid.d, "grid", grid.n, "must match the operator lattice")?;
        Ok(DivFormOperator {
            grid: grid.clone(),
            lambda: self.lambda,
            edges: Arc::clone(&self.edges),
        })
    }

    /// Periodic tiling of the coefficient pattern onto a grid with `reps × n` points per axis.
    pub fn tiled(&self, grid: &Grid) -> Result<Self> {
        let n0 = self.grid.n;
        ensure(grid.d == self.grid.d && grid.n % n0 == 0, "grid", grid.n, "must be a multiple of the operator lattice")?;
        if grid.n == n0 {
            return self.rescaled(grid);
        }
        let edges = self
            .edges
            .iter()
            .map(|e| {
                (0..grid.len())
                    .into_par_iter()
                    .with_min_len(CHUNK)
                    .map(|i| {
                        let c = grid.coords(i);
                        let mut k = 0;
                        for &cj in c.iter().take(grid.d) {
                            k = k * n0 + cj % n0;
                        }
                        e[k]
                    })
                    .collect()
            })
            .collect();
        Ok(DivFormOperator {
            grid: grid.clone(),
            lambda: self.lambda,
            edges: Arc::new(edges),
        })
    }

    /// Diagonal entries of the matrix.
    pub fn diagonal(&self) -> Vec<f64> {
        let ih2 = 0.5 / (self.grid.h * self.grid.h);
        (0..self.grid.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..self.grid.d {
                    s += self.edges[j][i] + self.edges[j][self.grid.neighbor(i, j, false)];
                }
                self.lambda + ih2 * s
            })
            .collect()
    }

    /// Gershgorin bound on the spectrum of the `λ = 0` part.
    pub fn spectral_bound(&self) -> f64 {
        let diag = self.diagonal();
        2.0 * diag.iter().fold(0.0f64, |m, v| m.max(v - self.lambda))
    }

    /// `out = c1·(A u) + c2·u + c3·w`.
    pub fn apply_affine(&self, u: &[f64], w: Option<&[f64]>, c1: f64, c2: f64, c3: f64, out: &mut [f64]) {
        let w = w.map_or(Extra::None, Extra::Slice);
        self.affine_rows(u, w, (c1, c2, c3), 0, out);
    }

    /// Two steps of `v ← c1·(A cur) + c2·cur + c3·prev`. On return `prev` holds
    /// the first new iterate and `cur` the second. The second step trails the
    /// first by one slab of the outermost axis, so both steps share one pass
    /// over memory. Every entry is computed exactly as by two `apply_affine` calls.
    pub fn recurrence_pair(&self, prev: &mut [f64], cur: &mut [f64], c1: f64, c2: f64, c3: f64) {
        let g = &self.grid;
        let c = (c1, c2, c3);
        if g.d == 1 {
            let mut next = vec![0.0; prev.len()];
            self.affine_rows(cur, Extra::InPlace, c, 0, prev);
            self.affine_rows(prev, Extra::Slice(cur), c, 0, &mut next);
            cur.copy_from_slice(&next);
            return;
        }
        let slab = g.len() / g.n;
        let rows = slab / g.n;
        // the older iterate is read only at the node being written, so both
        // steps overwrite it in place once its neighbours are no longer needed
        let first = |cur: &[f64], prev: &mut [f64], p: usize| {
            self.affine_rows(cur, Extra::InPlace, c, p * rows, &mut prev[p * slab..(p + 1) * slab]);
        };
        let second = |prev: &[f64], cur: &mut [f64], p: usize| {
            self.affine_rows(prev, Extra::InPlace, c, p * rows, &mut cur[p * slab..(p + 1) * slab]);
        };
        for p in 0..g.n {
            first(cur, prev, p);
            if p >= 2 {
                second(prev, cur, p - 1);
            }
        }
        second(prev, cur, g.n - 1);
        second(prev, cur, 0);
    }

    /// Rows `first_row..` of the affine map into `out` (a whole number of rows).
    fn affine_rows(&self, u: &[f64], w: Extra, c: (f64, f64, f64), first_row: usize, out: &mut [f64]) {
        let n = self.grid.n;
        let rows_per_task = (CHUNK / n).max(1);
        out.par_chunks_mut(rows_per_task * n).enumerate().for_each(|(t, chunk)| {
            let mut acc = vec![0.0; n];
            for (rr, orow) in chunk.chunks_mut(n).enumerate() {
                self.affine_row(u, w, c, first_row + t * rows_per_task + rr, &mut acc, orow);
            }
        });
    }

    fn affine_row(&self, u: &[f64], w: Extra, (c1, c2, c3): (f64, f64, f64), row: usize, acc: &mut [f64], orow: &mut [f64]) {
        let g = &self.grid;
        let n = g.n;
        let d = g.d;
        let ih2 = 0.5 / (g.h * g.h);
        let lam = self.lambda;
        let last = &self.edges[d - 1];
        let base = row * n;
        let (plus, minus) = g.row_neighbors(base);
        let ur = &u[base..base + n];
        let el = &last[base..base + n];
        if d == 3 {
            // one pass over the row, same summation order as the generic path
            let (up0, um0) = (&u[plus[0]..plus[0] + n], &u[minus[0]..minus[0] + n]);
            let (up1, um1) = (&u[plus[1]..plus[1] + n], &u[minus[1]..minus[1] + n]);
            let (ep0, em0) = (&self.edges[0][base..base + n], &self.edges[0][minus[0]..minus[0] + n]);
            let (ep1, em1) = (&self.edges[1][base..base + n], &self.edges[1][minus[1]..minus[1] + n]);
            let node = |i: usize, l: usize, r: usize| {
                let ui = ur[i];
                let mut a = el[i] * (ui - ur[r]) + el[l] * (ui - ur[l]);
                a += ep0[i] * (ui - up0[i]) + em0[i] * (ui - um0[i]);
                a += ep1[i] * (ui - up1[i]) + em1[i] * (ui - um1[i]);
                a
            };
            acc[0] = node(0, n - 1, 1);
            acc[n - 1] = node(n - 1, n - 2, 0);
            let m = n - 2;
            let (uc, ul, uright) = (&ur[1..=m], &ur[..m], &ur[2..]);
            let (er, elft) = (&el[1..=m], &el[..m]);
            let (a0, b0, a1, b1) = (&up0[1..=m], &um0[1..=m], &up1[1..=m], &um1[1..=m]);
            let (f0, g0, f1, g1) = (&ep0[1..=m], &em0[1..=m], &ep1[1..=m], &em1[1..=m]);
            for (i, out) in acc[1..=m].iter_mut().enumerate() {
                let ui = uc[i];
                let mut a = er[i] * (ui - uright[i]) + elft[i] * (ui - ul[i]);
                a += f0[i] * (ui - a0[i]) + g0[i] * (ui - b0[i]);
                a += f1[i] * (ui - a1[i]) + g1[i] * (ui - b1[i]);
                *out = a;
            }
        } else {
            // Contiguous axis: interior first, then the two wrapped ends.
            for (((a, w3), e2), e1) in acc[1..n - 1].iter_mut().zip(ur.windows(3)).zip(&el[1..n - 1]).zip(&el[..n - 2]) {
                *a = e2 * (w3[1] - w3[2]) + e1 * (w3[1] - w3[0]);
            }
            acc[0] = el[0] * (ur[0] - ur[1]) + el[n - 1] * (ur[0] - ur[n - 1]);
            acc[n - 1] = el[n - 1] * (ur[n - 1] - ur[0]) + el[n - 2] * (ur[n - 1] - ur[n - 2]);
            for j in 0..d - 1 {
                let e = &self.edges[j];
                let ep = &e[base..base + n];
                let em = &e[minus[j]..minus[j] + n];
                let up = &u[plus[j]..plus[j] + n];
                let um = &u[minus[j]..minus[j] + n];
                for (((((a, ui), p), m), e0), e1) in acc.iter_mut().zip(ur).zip(up).zip(um).zip(ep).zip(em) {
                    *a += e0 * (ui - p) + e1 * (ui - m);
                }
            }
        }
        match w {
            Extra::Slice(w) => {
                let wr = &w[base..base + n];
                for (((o, a), ui), wi) in orow.iter_mut().zip(&*acc).zip(ur).zip(wr) {
                    *o = c1 * (lam * ui + ih2 * a) + c2 * ui + c3 * wi;
                }
            }
            Extra::InPlace => {
                for ((o, a), ui) in orow.iter_mut().zip(&*acc).zip(ur) {
                    *o = c1 * (lam * ui + ih2 * a) + c2 * ui + c3 * *o;
                }
            }
            Extra::None => {
                for ((o, a), ui) in orow.iter_mut().zip(&*acc).zip(ur) {
                    *o = c1 * (lam * ui + ih2 * a) + c2 * ui;
                }
            }
        }
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.apply_affine(u, None, 1.0, 0.0, 0.0, out);
    }

    pub fn apply_fn(&self, u: &GridFunction) -> GridFunction {
        let mut out = vec![0.0; u.values.len()];
        self.apply(&u.values, &mut out);
        GridFunction {
            grid: self.grid.clone(),
            components: 1,
            values: out,
        }
    }

    /// `⟨A u, v⟩` with the plain Euclidean pairing.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        stats::dot(&au, v)
    }
}

/// Assembles `λ - ½∇·a∇` for the field on a grid of the same period.
pub fn assemble(field: &CoefficientField, grid: &Grid, lambda: f64) -> Result<DivFormOperator> {
    ensure(
        (grid.l - field.box_length()).abs() <= 1e-12 * grid.l,
        "L",
        grid.l,
        "grid period must equal the field period",
    )?;
    assemble_scaled(field, grid, 1.0, lambda, AssemblyOptions::default())
}

/// Assembles the operator with coefficients `a(x / eps)`; the grid period must be
/// a whole number of field periods `eps·L`.
pub fn assemble_scaled(field: &CoefficientField, grid: &Grid, eps: f64, lambda: f64, opts: AssemblyOptions) -> Result<DivFormOperator> {
    ensure(grid.d == field.d(), "d", grid.d, "grid and field dimensions differ")?;
    ensure(eps.is_finite() && eps > 0.0, "eps", eps, "must be positive")?;
    ensure(opts.quadrature >= 1, "quadrature", opts.quadrature, "needs at least one point")?;
    let cells = grid.l / (eps * field.box_length());
    ensure(
        cells >= 1.0 - 1e-12 && (cells - cells.round()).abs() <= 1e-9 * cells,
        "L",
        grid.l,
        "grid period must be a whole number of field periods",
    )?;
    let (xq, wq) = stats::gauss_legendre(opts.quadrature);
    let d = grid.d;
    let edges: Vec<Vec<f64>> = (0..d)
        .map(|axis| {
            (0..grid.len())
                .into_par_iter()
                .with_min_len(CHUNK / 4)
                .map(|i| {
                    let x0 = grid.position(i);
                    let mut a = [0.0; MAX_D];
                    let mut y = [0.0; MAX_D];
                    let mut inv = 0.0;
                    for (s, w) in xq.iter().zip(&wq) {
                        for j in 0..d {
                            y[j] = x0[j] / eps;
                        }
                        y[axis] = (x0[axis] + 0.5 * (1.0 + s) * grid.h) / eps;
                        field.eval_coeff(&y[..d], &mut a[..d]);
                        inv += 0.5 * w / a[axis];
                    }
                    1.0 / inv
                })
                .collect()
        })
        .collect();
    DivFormOperator::from_edges(grid, lambda, edges)
}

/// Preconditioner for the conjugate-gradient solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    /// Diagonal scaling.
    Jacobi,
    /// Exact inverse of the constant-coefficient operator with the mean edge values, by FFT.
    Fourier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    /// Defaults to `10 n^d`.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iter: None,
            preconditioner: Preconditioner::Jacobi,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions { tol, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

/// FFT-diagonalized constant-coefficient operator.
struct FourierPrecond {
    n: usize,
    d: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    inv_symbol: Vec<f64>,
}

impl FourierPrecond {
    fn new(op: &DivFormOperator) -> Self {
        let g = &op.grid;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(g.n);
        let inv = planner.plan_fft_inverse(g.n);
        let mean_edge: Vec<f64> = (0..g.d).map(|j| stats::mean(op.edge(j))).collect();
        let sin2: Vec<f64> = (0..g.n)
            .map(|k| (std::f64::consts::PI * k as f64 / g.n as f64).sin().powi(2))
            .collect();
        let scale = 1.0 / g.len() as f64;
        let inv_symbol = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let mut s = op.lambda;
                for j in 0..g.d {
                    s += 2.0 * mean_edge[j] * sin2[c[j]] / (g.h * g.h);
                }
                if s > 0.0 {
                    scale / s
                } else {
                    0.0
                }
            })
            .collect();
        FourierPrecond {
            n: g.n,
            d: g.d,
            fwd,
            inv,
            inv_symbol,
        }
    }

    fn transform(&self, buf: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        fft_nd(buf, self.n, self.d, plan);
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = r.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut buf, &self.fwd);
        for (b, s) in buf.iter_mut().zip(&self.inv_symbol) {
            *b *= *s;
        }
        self.transform(&mut buf, &self.inv);
        for (zi, b) in z.iter_mut().zip(&buf) {
            *zi = b.re;
        }
    }
}

/// In-place separable transform of a row-major `n^d` array along every axis.
/// Each pass transforms the contiguous axis and then rotates the axes, so
/// after `d` passes the layout is the original one.
pub(crate) fn fft_nd(buf: &mut [Complex<f64>], n: usize, d: usize, plan: &Arc<dyn Fft<f64>>) {
    let total = buf.len();
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    let mut rotated = vec![Complex::new(0.0, 0.0); total];
    for _ in 0..d {
        plan.process_with_scratch(buf, &mut scratch);
        transpose::transpose(buf, &mut rotated, n, total / n);
        buf.copy_from_slice(&rotated);
    }
}

fn project_mean(v: &mut [f64]) {
    let m = stats::par_sum(v.len(), |i| v[i]) / v.len() as f64;
    v.par_iter_mut().with_min_len(CHUNK).for_each(|x| *x -= m);
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.par_iter_mut().zip(x.par_iter()).with_min_len(CHUNK).for_each(|(y, x)| *y += a * x);
}

/// Solves `op u = rhs` to relative residual `tol` with diagonal-preconditioned CG.
pub fn solve(op: &DivFormOperator, rhs: &GridFunction, tol: f64) -> Result<GridFunction> {
    solve_with(op, rhs, &SolveOptions::with_tol(tol)).map(|(u, _)| u)
}

/// Preconditioned conjugate gradients. At `λ = 0` the iterates are kept in the
/// zero-mean subspace, where the operator is definite.
pub fn solve_with(op: &DivFormOperator, rhs: &GridFunction, opts: &SolveOptions) -> Result<(GridFunction, SolveStats)> {
    ensure(opts.tol.is_finite() && opts.tol > 0.0, "tol", opts.tol, "must be positive")?;
    ensure(rhs.is_scalar() && rhs.values.len() == op.grid.len(), "rhs", rhs.values.len(), "must be a scalar function on the operator grid")?;
    let m = rhs.values.len();
    let singular = op.lambda == 0.0;
    let b = &rhs.values;
    let bnorm = stats::dot(b, b).sqrt();
    if singular {
        let mean = rhs.mean();
        let rms = bnorm / (m as f64).sqrt();
        ensure(mean.abs() <= 1e-10 * rms.max(f64::MIN_POSITIVE), "rhs", format!("mean {mean:e}"), "must have zero mean when lambda = 0")?;
    }
    let zero = GridFunction::zeros(&op.grid);
    if bnorm == 0.0 {
        return Ok((
            zero,
            SolveStats {
                iterations: 0,
                residual: 0.0,
                history: vec![],
            },
        ));
    }
    let max_iter = opts.max_iter.unwrap_or(10 * m);
    let fourier = matches!(opts.preconditioner, Preconditioner::Fourier).then(|| FourierPrecond::new(op));
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|v| 1.0 / v).collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        match &fourier {
            Some(f) => f.apply(r, z),
            None => z.par_iter_mut().zip(r.par_iter()).zip(inv_diag.par_iter()).with_min_len(CHUNK).for_each(|((z, r), d)| *z = r * d),
        }
        if singular {
            project_mean(z);
        }
    };
    let mut x = vec![0.0; m];
    let mut r = b.clone();
    if singular {
        project_mean(&mut r);
    }
    let mut z = vec![0.0; m];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut q = vec![0.0; m];
    let mut rz = stats::dot(&r, &z);
    let mut history = Vec::new();
    let mut res = 1.0;
    for it in 0..max_iter {
        op.apply(&p, &mut q);
        let pq = stats::dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            break;
        }
        let alpha = rz / pq;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &q);
        if singular {
            project_mean(&mut r);
        }
        res = stats::dot(&r, &r).sqrt() / bnorm;
        history.push(res);
        if res <= opts.tol {
            if singular {
                project_mean(&mut x);
            }
            return Ok((
                GridFunction {
                    grid: op.grid.clone(),
                    components: 1,
                    values: x,
                },
                SolveStats {
                    iterations: it + 1,
                    residual: res,
                    history,
                },
            ));
        }
        precond(&r, &mut z);
        let rz_new = stats::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).with_min_len(CHUNK).for_each(|(p, z)| *p = z + beta * *p);
    }
    Err(Error::SolverFailure {
        tol: opts.tol,
        iterations: history.len(),
        last: res,
        history,
    })
}

/// Forward difference `(u(x + h e_j) - u(x)) / h`.
pub fn forward_diff(grid: &Grid, u: &[f64], axis: usize) -> Vec<f64> {
    let ih = 1.0 / grid.h;
    (0..grid.len())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| (u[grid.neighbor(i, axis, true)] - u[i]) * ih)
        .collect()
}

/// Backward difference `(v(x) - v(x - h e_j)) / h`.
pub fn backward_diff(grid: &Grid, v: &[f64], axis: usize) -> Vec<f64> {
    let ih = 1.0 / grid.h;
    (0..grid.len())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| (v[i] - v[grid.neighbor(i, axis, false)]) * ih)
        .collect()
}

/// Centered periodic gradient of a scalar function.
pub fn grad(u: &GridFunction) -> GridFunction {
    let g = &u.grid;
    let ih = 0.5 / g.h;
    let mut values = Vec::with_capacity(g.d * g.len());
    for j in 0..g.d {
        let comp: Vec<f64> = (0..g.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| (u.values[g.neighbor(i, j, true)] - u.values[g.neighbor(i, j, false)]) * ih)
            .collect();
        values.extend(comp);
    }
    GridFunction {
        grid: g.clone(),
        components: g.d,
        values,
    }
}

/// Centered periodic divergence of a vector function; minus the adjoint of [`grad`].
pub fn div(v: &GridFunction) -> GridFunction {
    let g = &v.grid;
    let ih = 0.5 / g.h;
    let values = (0..g.len())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..g.d {
                let c = v.component(j);
                s += (c[g.neighbor(i, j, true)] - c[g.neighbor(i, j, false)]) * ih;
            }
            s
        })
        .collect();
    GridFunction {
        grid: g.clone(),
        components: 1,
        values,
    }
}

/// Cubic Lagrange weights and their derivatives for the nodes `-1, 0, 1, 2`.
#[inline]
fn cubic_weights(t: f64) -> ([f64; 4], [f64; 4]) {
    let w = [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ];
    let dw = [
        -(3.0 * t * t - 6.0 * t + 2.0) / 6.0,
        (3.0 * t * t - 4.0 * t - 1.0) / 2.0,
        -(3.0 * t * t - 2.0 * t - 2.0) / 2.0,
        (3.0 * t * t - 1.0) / 6.0,
    ];
    (w, dw)
}

/// Tensor-product cubic interpolation of scalar grid data at `x`, with the
/// gradient of the interpolant.
pub fn interpolate(grid: &Grid, values: &[f64], x: &[f64]) -> (f64, [f64; MAX_D]) {
    let d = grid.d;
    let n = grid.n as i64;
    let mut base = [0i64; MAX_D];
    let mut w = [[0.0; 4]; MAX_D];
    let mut dw = [[0.0; 4]; MAX_D];
    for j in 0..d {
        let s = (x[j] - grid.origin[j]) / grid.h;
        let i0 = s.floor();
        let (a, b) = cubic_weights(s - i0);
        w[j] = a;
        dw[j] = b;
        base[j] = i0 as i64 - 1;
    }
    let mut val = 0.0;
    let mut g = [0.0; MAX_D];
    let total = 1usize << (2 * d);
    for t in 0..total {
        let mut idx = 0usize;
        let mut rem = t;
        let mut o = [0usize; MAX_D];
        for j in 0..d {
            o[j] = rem & 3;
            rem >>= 2;
            idx = idx * grid.n + (base[j] + o[j] as i64).rem_euclid(n) as usize;
        }
        let v = values[idx];
        let mut prod = 1.0;
        for j in 0..d {
            prod *= w[j][o[j]];
        }
        val += prod * v;
        for k in 0..d {
            let mut pk = dw[k][o[k]];
            for j in 0..d {
                if j != k {
                    pk *= w[j][o[j]];
                }
            }
            g[k] += pk * v;
        }
    }
    for gk in g.iter_mut().take(d) {
        *gk /= grid.h;
    }
    (val, g)
}

/// Nodes and weights of the cubic interpolation stencil at `x`.
pub fn stencil(grid: &Grid, x: &[f64]) -> Vec<(usize, f64)> {
    let d = grid.d;
    let n = grid.n as i64;
    let mut base = [0i64; MAX_D];
    let mut w = [[0.0; 4]; MAX_D];
    for j in 0..d {
        let s = (x[j] - grid.origin[j]) / grid.h;
        let i0 = s.floor();
        w[j] = cubic_weights(s - i0).0;
        base[j] = i0 as i64 - 1;
    }
    (0..1usize << (2 * d))
        .map(|t| {
            let mut idx = 0usize;
            let mut prod = 1.0;
            for j in 0..d {
                let o = (t >> (2 * j)) & 3;
                idx = idx * grid.n + (base[j] + o as i64).rem_euclid(n) as usize;
                prod *= w[j][o];
            }
            (idx, prod)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(Grid::new(2, 5, 1.0).is_err());
        assert!(Grid::new(2, 2, 1.0).is_err());
        assert!(Grid::new(2, 8, -1.0).is_err());
    }

    #[test]
    fn neighbors_wrap() {
        let g = Grid::new(3, 4, 1.0).unwrap();
        let i = g.index(&[3, 0, 2]);
        assert_eq!(g.coords(g.neighbor(i, 0, true))[..3], [0, 0, 2]);
        assert_eq!(g.coords(g.neighbor(i, 1, false))[..3], [3, 3, 2]);
        assert_eq!(g.coords(g.neighbor(i, 2, true))[..3], [3, 0, 3]);
    }

    #[test]
    fn interpolation_reproduces_cubics_and_nodes() {
        let g = Grid::new(2, 16, 1.0).unwrap();
        let f = GridFunction::from_fn(&g, |x| (2.0 * std::f64::consts::PI * x[0]).sin() * (x[1] * 6.0).cos());
        let (v, _) = interpolate(&g, &f.values, &g.position(37)[..2]);
        assert_eq!(v, f.values[37]);
        let (w, dw) = cubic_weights(0.3);
        let p = |x: f64| 1.0 + 2.0 * x - x * x + 0.5 * x * x * x;
        let dp = |x: f64| 2.0 - 2.0 * x + 1.5 * x * x;
        let val: f64 = (0..4).map(|k| w[k] * p(k as f64 - 1.0)).sum();
        let der: f64 = (0..4).map(|k| dw[k] * p(k as f64 - 1.0)).sum();
        assert!((val - p(0.3)).abs() < 1e-13 && (der - dp(0.3)).abs() < 1e-13);
    }

    #[test]
    fn fourier_precond_inverts_constant_operator() {
        let g = Grid::new(3, 8, 2.0).unwrap();
        let op = DivFormOperator::from_edges(&g, 0.0, vec![vec![1.5; g.len()]; 3]).unwrap();
        let u = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0]).sin() + (std::f64::consts::PI * (x[1] + x[2])).cos());
        let f = op.apply_fn(&u);
        let p = FourierPrecond::new(&op);
        let mut back = vec![0.0; g.len()];
        p.apply(&f.values, &mut back);
        let err = back.iter().zip(&u.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}
