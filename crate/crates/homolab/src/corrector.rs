//! Cell problems on the torus: correctors, the homogenized matrix, the centered
//! energy density, flux correctors and the third-order constants.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::{CoefficientField, MAX_D};
use crate::lattice::{self, assemble_scaled, forward_diff, AssemblyOptions, DivFormOperator, Grid, GridFunction, SolveOptions};
use crate::stats::{self, CHUNK};

/// How the drift right-hand side `b_k` is put on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftScheme {
    /// `½ D_k^-(a_k)`: the divergence of the edge coefficients. Discretely
    /// consistent, so the zero-mean condition holds to rounding.
    Conservative,
    /// Closed-form drift sampled at the nodes (mean checked, then removed).
    Nodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorOptions {
    pub lambda: f64,
    pub drift: DriftScheme,
    pub solve: SolveOptions,
    pub assembly: AssemblyOptions,
    /// Also solve the flux correctors and the third-order constants.
    pub flux: bool,
}

impl Default for CorrectorOptions {
    fn default() -> Self {
        CorrectorOptions {
            lambda: 0.0,
            drift: DriftScheme::Conservative,
            solve: SolveOptions::default(),
            assembly: AssemblyOptions::default(),
            flux: false,
        }
    }
}

/// Mean allowed for a nodal drift before it is declared inconsistent.
pub const DRIFT_MEAN_BOUND: f64 = 1e-8;

/// Right-hand side of the corrector problem in direction `k`.
pub fn drift_rhs(field: &CoefficientField, op: &DivFormOperator, k: usize, scheme: DriftScheme) -> Result<GridFunction> {
    let g = op.grid();
    ensure(k < g.d, "k", k, "direction index out of range")?;
    match scheme {
        DriftScheme::Conservative => {
            let e = op.edge(k);
            let ih = 0.5 / g.h;
            let values = (0..g.len())
                .into_par_iter()
                .with_min_len(CHUNK)
                .map(|i| (e[i] - e[g.neighbor(i, k, false)]) * ih)
                .collect();
            GridFunction::scalar(g, values)
        }
        DriftScheme::Nodal => {
            let d = g.d;
            let mut f = GridFunction::from_fn(g, |x| {
                let mut a = [0.0; MAX_D];
                let mut b = [0.0; MAX_D];
                field.eval_diag(x, &mut a[..d], &mut b[..d]);
                b[k]
            });
            if op.lambda() == 0.0 {
                let mean = f.mean();
                if mean.abs() > DRIFT_MEAN_BOUND {
                    return Err(Error::DiscretizationInconsistency {
                        mean,
                        bound: DRIFT_MEAN_BOUND,
                    });
                }
                f.values.par_iter_mut().for_each(|v| *v -= mean);
            }
            Ok(f)
        }
    }
}

/// Solves `(λ - L)φ = b_k` on the grid (unit scale, default options).
pub fn solve_corrector(field: &CoefficientField, grid: &Grid, lambda: f64, k: usize) -> Result<GridFunction> {
    let op = assemble_scaled(field, grid, 1.0, lambda, AssemblyOptions::default())?;
    check_period(field, grid)?;
    let rhs = drift_rhs(field, &op, k, DriftScheme::Conservative)?;
    lattice::solve(&op, &rhs, SolveOptions::default().tol)
}

fn check_period(field: &CoefficientField, grid: &Grid) -> Result<()> {
    ensure(
        (grid.l - field.box_length()).abs() <= 1e-12 * grid.l,
        "L",
        grid.l,
        "grid period must equal the field period",
    )
}

/// Edge energies `a_j (δ_jk + D_j^+ φ_k)(δ_jl + D_j^+ φ_l)` summed over `j`, per node.
fn edge_gradients(op: &DivFormOperator, phi: &[GridFunction]) -> Vec<Vec<Vec<f64>>> {
    let g = op.grid();
    phi.par_iter().map(|p| (0..g.d).map(|j| forward_diff(g, &p.values, j)).collect()).collect()
}

/// `Ā_kl` as the grid average of the edge energy of corrected gradients.
pub fn homogenized_matrix(op: &DivFormOperator, phi: &[GridFunction]) -> Vec<f64> {
    let dphi = edge_gradients(op, phi);
    homogenized_from_gradients(op, &dphi)
}

fn homogenized_from_gradients(op: &DivFormOperator, dphi: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let g = op.grid();
    let d = g.d;
    let m = g.len();
    let mut abar = vec![0.0; d * d];
    for k in 0..d {
        for l in k..d {
            let s = stats::par_sum(m, |i| {
                let mut e = 0.0;
                for j in 0..d {
                    let gk = (j == k) as u8 as f64 + dphi[k][j][i];
                    let gl = (j == l) as u8 as f64 + dphi[l][j][i];
                    e += op.edge(j)[i] * gk * gl;
                }
                e
            });
            abar[k * d + l] = s / m as f64;
            abar[l * d + k] = s / m as f64;
        }
    }
    abar
}

/// Mean flux `⟨a_j(δ_jk + D_j^+ φ_k)⟩`, one column per direction `k`.
pub fn mean_flux(op: &DivFormOperator, phi: &[GridFunction]) -> Vec<f64> {
    let g = op.grid();
    let d = g.d;
    let m = g.len();
    let dphi = edge_gradients(op, phi);
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        for j in 0..d {
            let delta = (j == k) as u8 as f64;
            out[j * d + k] = stats::par_sum(m, |i| op.edge(j)[i] * (delta + dphi[k][j][i])) / m as f64;
        }
    }
    out
}

/// Discrete harmonic and arithmetic mean matrices of the edge coefficients.
pub fn voigt_reuss(op: &DivFormOperator) -> (Vec<f64>, Vec<f64>) {
    let d = op.grid().d;
    let m = op.grid().len();
    let mut harm = vec![0.0; d * d];
    let mut arith = vec![0.0; d * d];
    for j in 0..d {
        let e = op.edge(j);
        arith[j * d + j] = stats::par_sum(m, |i| e[i]) / m as f64;
        harm[j * d + j] = m as f64 / stats::par_sum(m, |i| 1.0 / e[i]);
    }
    (harm, arith)
}

/// Centered energy densities `ψ_kl`, node-averaged from the two adjacent edges per axis.
pub fn energy_density(op: &DivFormOperator, phi: &[GridFunction], abar: &[f64]) -> Vec<GridFunction> {
    let dphi = edge_gradients(op, phi);
    energy_from_gradients(op, &dphi, abar)
}

fn energy_from_gradients(op: &DivFormOperator, dphi: &[Vec<Vec<f64>>], abar: &[f64]) -> Vec<GridFunction> {
    let g = op.grid();
    let d = g.d;
    let mut out = vec![GridFunction::zeros(g); d * d];
    for k in 0..d {
        for l in k..d {
            let edge_e = |j: usize, i: usize| {
                let gk = (j == k) as u8 as f64 + dphi[k][j][i];
                let gl = (j == l) as u8 as f64 + dphi[l][j][i];
                op.edge(j)[i] * gk * gl
            };
            let values: Vec<f64> = (0..g.len())
                .into_par_iter()
                .with_min_len(CHUNK)
                .map(|i| {
                    let mut e = 0.0;
                    for j in 0..d {
                        e += 0.5 * (edge_e(j, i) + edge_e(j, g.neighbor(i, j, false)));
                    }
                    e - abar[k * d + l]
                })
                .collect();
            let f = GridFunction {
                grid: g.clone(),
                components: 1,
                values,
            };
            out[l * d + k] = f.clone();
            out[k * d + l] = f;
        }
    }
    out
}

/// Solves `(λ - L)Ψ = ψ` with the operator's massive term.
pub fn solve_flux_corrector(op: &DivFormOperator, psi: &GridFunction, opts: &SolveOptions) -> Result<GridFunction> {
    let mut rhs = psi.clone();
    if op.lambda() == 0.0 {
        let m = rhs.mean();
        rhs.values.par_iter_mut().for_each(|v| *v -= m);
    }
    lattice::solve_with(op, &rhs, opts).map(|(u, _)| u)
}

/// `c_ijk = ½ ⟨(DΨ_ij)ᵀ a (e_k + Dφ_k)⟩` on edges, and `⟨Ψ_ij, λ φ_k⟩`, both flattened as `[i][j][k]`.
pub fn third_order_constants(op: &DivFormOperator, phi: &[GridFunction], flux_psi: &[GridFunction]) -> (Vec<f64>, Vec<f64>) {
    let dphi = edge_gradients(op, phi);
    third_order_from_gradients(op, phi, &dphi, flux_psi)
}

fn third_order_from_gradients(op: &DivFormOperator, phi: &[GridFunction], dphi: &[Vec<Vec<f64>>], flux_psi: &[GridFunction]) -> (Vec<f64>, Vec<f64>) {
    let g = op.grid();
    let d = g.d;
    let m = g.len();
    let lambda = op.lambda();
    let mut c = vec![0.0; d * d * d];
    let mut ibp = vec![0.0; d * d * d];
    for i in 0..d {
        for j in i..d {
            let psi = &flux_psi[i * d + j];
            let dpsi: Vec<Vec<f64>> = (0..d).map(|a| forward_diff(g, &psi.values, a)).collect();
            for k in 0..d {
                let s = stats::par_sum(m, |n| {
                    let mut e = 0.0;
                    for a in 0..d {
                        e += dpsi[a][n] * op.edge(a)[n] * ((a == k) as u8 as f64 + dphi[k][a][n]);
                    }
                    e
                });
                let v = 0.5 * s / m as f64;
                let w = lambda * stats::dot(&psi.values, &phi[k].values) / m as f64;
                for (x, y) in [(i, j), (j, i)] {
                    c[(x * d + y) * d + k] = v;
                    ibp[(x * d + y) * d + k] = w;
                }
            }
        }
    }
    (c, ibp)
}

/// Correctors and derived quantities for one environment on one grid.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub lambda: f64,
    pub drift: DriftScheme,
    /// Unit-scale operator (with the massive term) the correctors were solved with.
    pub op: DivFormOperator,
    pub phi: Vec<GridFunction>,
    pub a_bar: Vec<f64>,
    /// `ψ_ij`, flattened `[i * d + j]`.
    pub psi: Vec<GridFunction>,
    /// `Ψ_ij`, empty unless flux correctors were requested.
    pub flux_psi: Vec<GridFunction>,
    /// `c_ijk`, flattened `[(i * d + j) * d + k]`; empty unless requested.
    pub c: Vec<f64>,
    /// `⟨Ψ_ij, λ φ_k⟩`, the finite-λ prediction for `|c_ijk|`.
    pub c_ibp: Vec<f64>,
    /// Final relative residuals of every solve.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Serialize)]
struct Summary<'a> {
    lambda: f64,
    drift: DriftScheme,
    d: usize,
    n: usize,
    #[serde(rename = "L")]
    l: f64,
    a_bar: &'a [f64],
    c: &'a [f64],
    c_ibp: &'a [f64],
    residuals: &'a [f64],
    iterations: &'a [usize],
}

impl CorrectorSet {
    /// Assembles the operator and solves every cell problem requested by `opts`.
    pub fn compute(field: &CoefficientField, grid: &Grid, opts: &CorrectorOptions) -> Result<Self> {
        check_period(field, grid)?;
        let op = assemble_scaled(field, grid, 1.0, opts.lambda, opts.assembly)?;
        Self::from_operator(field, op, opts)
    }

    /// Same as [`CorrectorSet::compute`] for an already assembled operator.
    pub fn from_operator(field: &CoefficientField, op: DivFormOperator, opts: &CorrectorOptions) -> Result<Self> {
        let d = op.grid().d;
        let solved: Vec<Result<(GridFunction, lattice::SolveStats)>> = (0..d)
            .into_par_iter()
            .map(|k| {
                let rhs = drift_rhs(field, &op, k, opts.drift)?;
                lattice::solve_with(&op, &rhs, &opts.solve)
            })
            .collect();
        let mut phi = Vec::with_capacity(d);
        let mut residuals = Vec::new();
        let mut iterations = Vec::new();
        for s in solved {
            let (u, st) = s?;
            phi.push(u);
            residuals.push(st.residual);
            iterations.push(st.iterations);
        }
        let dphi = edge_gradients(&op, &phi);
        let a_bar = homogenized_from_gradients(&op, &dphi);
        let psi = energy_from_gradients(&op, &dphi, &a_bar);
        let mut set = CorrectorSet {
            lambda: op.lambda(),
            drift: opts.drift,
            op,
            phi,
            a_bar,
            psi,
            flux_psi: Vec::new(),
            c: Vec::new(),
            c_ibp: Vec::new(),
            residuals,
            iterations,
        };
        if opts.flux {
            let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
            let solved: Vec<Result<(GridFunction, lattice::SolveStats)>> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    let mut rhs = set.psi[i * d + j].clone();
                    if set.lambda == 0.0 {
                        let m = rhs.mean();
                        rhs.values.iter_mut().for_each(|v| *v -= m);
                    }
                    lattice::solve_with(&set.op, &rhs, &opts.solve)
                })
                .collect();
            let mut flux = vec![GridFunction::zeros(set.op.grid()); d * d];
            for (&(i, j), s) in pairs.iter().zip(solved) {
                let (u, st) = s?;
                set.residuals.push(st.residual);
                set.iterations.push(st.iterations);
                flux[j * d + i] = u.clone();
                flux[i * d + j] = u;
            }
            let (c, ibp) = third_order_from_gradients(&set.op, &set.phi, &dphi, &flux);
            set.flux_psi = flux;
            set.c = c;
            set.c_ibp = ibp;
        }
        Ok(set)
    }

    pub fn grid(&self) -> &Grid {
        self.op.grid()
    }

    pub fn d(&self) -> usize {
        self.grid().d
    }

    /// `φ_ξ = Σ ξ_k φ_{e_k}`.
    pub fn phi_direction(&self, xi: &[f64]) -> GridFunction {
        combine(&self.phi, xi)
    }

    /// `ψ_ξ = Σ ξ_i ξ_j ψ_ij`.
    pub fn psi_direction(&self, xi: &[f64]) -> GridFunction {
        let d = self.d();
        let w: Vec<f64> = (0..d * d).map(|ij| xi[ij / d] * xi[ij % d]).collect();
        combine(&self.psi, &w)
    }

    /// Centered gradient of `φ_{e_k}`.
    pub fn grad_phi(&self, k: usize) -> GridFunction {
        lattice::grad(&self.phi[k])
    }

    /// `ξᵀ Ā ξ`.
    pub fn sigma2(&self, xi: &[f64]) -> f64 {
        let d = self.d();
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| xi[i] * self.a_bar[i * d + j] * xi[j]).sum()
    }

    /// Largest `|c_ijk|` (zero when flux correctors were not solved).
    pub fn max_c(&self) -> f64 {
        self.c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes every grid function in the binary format plus `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let d = self.d();
        for (k, p) in self.phi.iter().enumerate() {
            p.write(&dir.join(format!("phi_{k}")))?;
        }
        for i in 0..d {
            for j in i..d {
                self.psi[i * d + j].write(&dir.join(format!("psi_{i}{j}")))?;
                if !self.flux_psi.is_empty() {
                    self.flux_psi[i * d + j].write(&dir.join(format!("flux_psi_{i}{j}")))?;
                }
            }
        }
        let g = self.grid();
        let s = Summary {
            lambda: self.lambda,
            drift: self.drift,
            d,
            n: g.n,
            l: g.l,
            a_bar: &self.a_bar,
            c: &self.c,
            c_ibp: &self.c_ibp,
            residuals: &self.residuals,
            iterations: &self.iterations,
        };
        crate::io::write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&s)?.as_bytes())
    }
}

fn combine(fs: &[GridFunction], w: &[f64]) -> GridFunction {
    let g = fs[0].grid.clone();
    let values = (0..g.len())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| fs.iter().zip(w).map(|(f, c)| c * f.values[i]).sum())
        .collect();
    GridFunction {
        grid: g,
        components: 1,
        values,
    }
}

/// Frobenius norm of a flattened square matrix.
pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix (Jacobi rotations; `d` is tiny).
pub fn symmetric_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (m[q * d + q] - m[p * d + p]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_small_matrix() {
        let a = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let ev = symmetric_eigenvalues(&a, 3);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12 && (ev[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_trivial_correctors() {
        let f = CoefficientField::constant(2, 1.7, 1.0).unwrap();
        let g = Grid::new(2, 8, 1.0).unwrap();
        let opts = CorrectorOptions {
            flux: true,
            ..Default::default()
        };
        let set = CorrectorSet::compute(&f, &g, &opts).unwrap();
        assert!(set.phi.iter().all(|p| p.max_abs() == 0.0));
        assert!((set.a_bar[0] - 1.7).abs() < 1e-14 && set.a_bar[1] == 0.0 && (set.a_bar[3] - 1.7).abs() < 1e-14);
        assert!(set.psi.iter().all(|p| p.max_abs() < 1e-14));
        assert!(set.c.iter().all(|&c| c.abs() < 1e-14));
    }
}
