//! Parabolic and elliptic solves at scale ε, the closed-form homogenized
//! solutions and the pointwise two-scale residual.
//!
//! Time integration defaults to a Chebyshev expansion of `exp(-tA)` (exact in
//! time, any number of output times from one sweep); Crank–Nicolson with a
//! backward-Euler start is available for cross-checks.

use std::borrow::Borrow;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorSet;
use crate::error::{ensure, Error, Result};
use crate::field::{CoefficientField, MAX_D};
use crate::io::fmt17;
use crate::lattice::{self, assemble_scaled, AssemblyOptions, DivFormOperator, Grid, GridFunction, Preconditioner, SolveOptions};
use crate::stats;

/// One term `amplitude · cos(2π n·x / P + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMode {
    pub amplitude: f64,
    pub wavenumber: Vec<i64>,
    pub phase: f64,
}

/// Initial datum `f` with closed-form values and gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialDatum {
    Constant { d: usize, value: f64 },
    /// `exp(-|x - c|² / (2s))`, summed over the images `c + P·Z^d` when a period is set.
    Gaussian { center: Vec<f64>, variance: f64, period: Option<f64> },
    /// Finite cosine series with period `P` in every direction.
    Cosines { d: usize, period: f64, modes: Vec<CosineMode> },
}

impl InitialDatum {
    pub fn constant(d: usize, value: f64) -> Result<Self> {
        ensure((1..=MAX_D).contains(&d), "d", d, "must lie in 1..=4")?;
        ensure(value.is_finite(), "value", value, "must be finite")?;
        Ok(InitialDatum::Constant { d, value })
    }

    pub fn gaussian(center: &[f64], variance: f64, period: Option<f64>) -> Result<Self> {
        ensure((1..=MAX_D).contains(&center.len()), "center", center.len(), "needs 1..=4 components")?;
        ensure(variance.is_finite() && variance > 0.0, "variance", variance, "must be positive")?;
        if let Some(p) = period {
            ensure(p.is_finite() && p > 0.0, "period", p, "must be positive")?;
        }
        Ok(InitialDatum::Gaussian {
            center: center.to_vec(),
            variance,
            period,
        })
    }

    pub fn cosines(d: usize, period: f64, modes: Vec<CosineMode>) -> Result<Self> {
        ensure((1..=MAX_D).contains(&d), "d", d, "must lie in 1..=4")?;
        ensure(period.is_finite() && period > 0.0, "period", period, "must be positive")?;
        for m in &modes {
            ensure(m.wavenumber.len() == d, "wavenumber", format!("{:?}", m.wavenumber), "needs d components")?;
            ensure(m.amplitude.is_finite() && m.phase.is_finite(), "amplitude", m.amplitude, "must be finite")?;
        }
        Ok(InitialDatum::Cosines { d, period, modes })
    }

    /// `amplitude · Π_j cos(2π n_j x_j / P)`, expanded into `2^(d-1)` plane waves.
    pub fn cosine_product(period: f64, wavenumber: &[i64], amplitude: f64) -> Result<Self> {
        let d = wavenumber.len();
        ensure((1..=MAX_D).contains(&d), "wavenumber", d, "needs 1..=4 components")?;
        let scale = amplitude / (1u32 << (d - 1)) as f64;
        let modes = (0..1usize << (d - 1))
            .map(|signs| {
                let mut n = wavenumber.to_vec();
                for (j, nj) in n.iter_mut().enumerate().skip(1) {
                    if signs >> (j - 1) & 1 == 1 {
                        *nj = -*nj;
                    }
                }
                CosineMode {
                    amplitude: scale,
                    wavenumber: n,
                    phase: 0.0,
                }
            })
            .collect();
        Self::cosines(d, period, modes)
    }

    pub fn d(&self) -> usize {
        match self {
            InitialDatum::Constant { d, .. } | InitialDatum::Cosines { d, .. } => *d,
            InitialDatum::Gaussian { center, .. } => center.len(),
        }
    }

    /// Spatial period, `None` for a constant.
    pub fn period(&self) -> Option<f64> {
        match self {
            InitialDatum::Constant { .. } => None,
            InitialDatum::Gaussian { period, .. } => *period,
            InitialDatum::Cosines { period, .. } => Some(*period),
        }
    }

    /// Whether `f` is periodic on a torus of side `l`.
    pub fn fits(&self, l: f64) -> bool {
        match self {
            InitialDatum::Constant { .. } => true,
            InitialDatum::Gaussian { period: None, .. } => false,
            _ => {
                let r = l / self.period().unwrap_or(l);
                r >= 1.0 - 1e-12 && (r - r.round()).abs() <= 1e-9 * r
            }
        }
    }

    fn wave(period: f64, n: &[i64]) -> [f64; MAX_D] {
        let mut k = [0.0; MAX_D];
        for (kj, nj) in k.iter_mut().zip(n) {
            *kj = 2.0 * PI * *nj as f64 / period;
        }
        k
    }

    /// `f(x)` and `∇f(x)`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.d();
        grad[..d].iter_mut().for_each(|g| *g = 0.0);
        match self {
            InitialDatum::Constant { value, .. } => *value,
            InitialDatum::Cosines { period, modes, .. } => {
                let mut v = 0.0;
                for m in modes {
                    let k = Self::wave(*period, &m.wavenumber);
                    let arg: f64 = (0..d).map(|j| k[j] * x[j]).sum::<f64>() + m.phase;
                    let (s, c) = arg.sin_cos();
                    v += m.amplitude * c;
                    for j in 0..d {
                        grad[j] -= m.amplitude * s * k[j];
                    }
                }
                v
            }
            InitialDatum::Gaussian { center, variance, period } => {
                // The image sum factorizes over axes.
                let mut fac = [0.0; MAX_D];
                let mut dfac = [0.0; MAX_D];
                for j in 0..d {
                    let z0 = x[j] - center[j];
                    let (f, df) = match period {
                        None => {
                            let e = (-z0 * z0 / (2.0 * variance)).exp();
                            (e, -z0 / variance * e)
                        }
                        Some(p) => {
                            let z0 = z0 - p * (z0 / p).round();
                            let reach = ((80.0 * variance).sqrt() / p).ceil() as i64 + 1;
                            let mut f = 0.0;
                            let mut df = 0.0;
                            for m in -reach..=reach {
                                let z = z0 - m as f64 * p;
                                let e = (-z * z / (2.0 * variance)).exp();
                                f += e;
                                df -= z / variance * e;
                            }
                            (f, df)
                        }
                    };
                    fac[j] = f;
                    dfac[j] = df;
                }
                let v: f64 = fac[..d].iter().product();
                for k in 0..d {
                    grad[k] = (0..d).map(|j| if j == k { dfac[j] } else { fac[j] }).product();
                }
                v
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut g = [0.0; MAX_D];
        self.eval(x, &mut g)
    }

    /// Nodal samples on a grid.
    pub fn sample(&self, grid: &Grid) -> Result<GridFunction> {
        ensure(grid.d == self.d(), "d", grid.d, "grid and datum dimensions differ")?;
        ensure(self.fits(grid.l), "L", grid.l, "torus side must be a whole number of datum periods")?;
        Ok(GridFunction::from_fn(grid, |x| self.value(x)))
    }
}

fn check_spd(a_bar: &[f64], d: usize) -> Result<DMatrix<f64>> {
    ensure(a_bar.len() == d * d, "A_bar", a_bar.len(), "needs d*d entries")?;
    let m = DMatrix::from_row_slice(d, d, a_bar);
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    ensure(
        (&m - m.transpose()).abs().max() <= 1e-10 * scale,
        "A_bar",
        format!("{a_bar:?}"),
        "must be symmetric",
    )?;
    ensure(
        m.iter().all(|v| v.is_finite()) && m.clone().cholesky().is_some(),
        "A_bar",
        format!("{a_bar:?}"),
        "must be positive definite",
    )?;
    Ok(m)
}

/// `½ kᵀĀk`, or its lattice analogue with `k_j → 2 sin(k_j h / 2) / h`.
fn symbol(a_bar: &[f64], k: &[f64; MAX_D], d: usize, h: Option<f64>) -> f64 {
    let mut s = [0.0; MAX_D];
    for j in 0..d {
        s[j] = match h {
            Some(h) => 2.0 * (0.5 * k[j] * h).sin() / h,
            None => k[j],
        };
    }
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += s[i] * a_bar[i * d + j] * s[j];
        }
    }
    0.5 * q
}

/// Value and gradient of `u_hom(t, x)`, the solution of `∂_t u = ½∇·Ā∇u`, `u(0) = f`.
pub fn homogenized_solution(a_bar: &[f64], f: &InitialDatum, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    homogenized_with(a_bar, f, t, x, None)
}

/// As [`homogenized_solution`], with each Fourier mode decaying at the rate of
/// the `2d+1` point lattice operator of spacing `h`. Cosine and constant data only.
pub fn homogenized_solution_lattice(a_bar: &[f64], f: &InitialDatum, t: f64, x: &[f64], h: f64) -> Result<(f64, Vec<f64>)> {
    ensure(h.is_finite() && h > 0.0, "h", h, "must be positive")?;
    homogenized_with(a_bar, f, t, x, Some(h))
}

fn homogenized_with(a_bar: &[f64], f: &InitialDatum, t: f64, x: &[f64], h: Option<f64>) -> Result<(f64, Vec<f64>)> {
    let d = f.d();
    ensure(x.len() == d, "x", x.len(), "needs d components")?;
    ensure(t.is_finite() && t >= 0.0, "t", t, "must be non-negative")?;
    let m = check_spd(a_bar, d)?;
    match f {
        InitialDatum::Constant { value, .. } => Ok((*value, vec![0.0; d])),
        InitialDatum::Cosines { period, modes, .. } => {
            let mut v = 0.0;
            let mut g = vec![0.0; d];
            for mode in modes {
                let k = InitialDatum::wave(*period, &mode.wavenumber);
                let decay = (-symbol(a_bar, &k, d, h) * t).exp();
                let arg: f64 = (0..d).map(|j| k[j] * x[j]).sum::<f64>() + mode.phase;
                let (s, c) = arg.sin_cos();
                v += mode.amplitude * decay * c;
                for j in 0..d {
                    g[j] -= mode.amplitude * decay * s * k[j];
                }
            }
            Ok((v, g))
        }
        InitialDatum::Gaussian { center, variance, period } => {
            ensure(h.is_none(), "f", "gaussian", "lattice decay is only defined for cosine data")?;
            let cov = DMatrix::identity(d, d) * *variance + m * t;
            let det = cov.determinant();
            let inv = cov.clone().try_inverse().ok_or_else(|| Error::invalid("A_bar", "singular", "covariance must be invertible"))?;
            let norm = (variance.powi(d as i32) / det).sqrt();
            let lmax = cov.symmetric_eigenvalues().max();
            let mut z0 = [0.0; MAX_D];
            for j in 0..d {
                z0[j] = x[j] - center[j];
                if let Some(p) = period {
                    z0[j] -= p * (z0[j] / p).round();
                }
            }
            let reach = match period {
                Some(p) => ((80.0 * lmax).sqrt() / p).ceil() as i64 + 1,
                None => 0,
            };
            let side = (2 * reach + 1) as usize;
            let mut v = 0.0;
            let mut g = vec![0.0; d];
            for img in 0..side.pow(d as u32) {
                let mut z = [0.0; MAX_D];
                let mut rem = img;
                for j in 0..d {
                    let o = (rem % side) as i64 - reach;
                    rem /= side;
                    z[j] = z0[j] - o as f64 * period.unwrap_or(0.0);
                }
                let mut q = 0.0;
                let mut w = [0.0; MAX_D];
                for i in 0..d {
                    for j in 0..d {
                        w[i] += inv[(i, j)] * z[j];
                    }
                    q += z[i] * w[i];
                }
                let e = norm * (-0.5 * q).exp();
                v += e;
                for j in 0..d {
                    g[j] -= w[j] * e;
                }
            }
            Ok((v, g))
        }
    }
}

/// Value and gradient of `U_hom`, the solution of `U - ½∇·Ā∇U = f`. Closed form
/// for cosine and constant data; Laplace quadrature of `u_hom` for a Gaussian.
pub fn homogenized_elliptic(a_bar: &[f64], f: &InitialDatum, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    elliptic_with(a_bar, f, x, None)
}

/// Lattice analogue of [`homogenized_elliptic`] for spacing `h`.
pub fn homogenized_elliptic_lattice(a_bar: &[f64], f: &InitialDatum, x: &[f64], h: f64) -> Result<(f64, Vec<f64>)> {
    ensure(h.is_finite() && h > 0.0, "h", h, "must be positive")?;
    elliptic_with(a_bar, f, x, Some(h))
}

fn elliptic_with(a_bar: &[f64], f: &InitialDatum, x: &[f64], h: Option<f64>) -> Result<(f64, Vec<f64>)> {
    let d = f.d();
    ensure(x.len() == d, "x", x.len(), "needs d components")?;
    check_spd(a_bar, d)?;
    match f {
        InitialDatum::Constant { value, .. } => Ok((*value, vec![0.0; d])),
        InitialDatum::Cosines { period, modes, .. } => {
            let mut v = 0.0;
            let mut g = vec![0.0; d];
            for mode in modes {
                let k = InitialDatum::wave(*period, &mode.wavenumber);
                let damp = 1.0 / (1.0 + symbol(a_bar, &k, d, h));
                let arg: f64 = (0..d).map(|j| k[j] * x[j]).sum::<f64>() + mode.phase;
                let (s, c) = arg.sin_cos();
                v += mode.amplitude * damp * c;
                for j in 0..d {
                    g[j] -= mode.amplitude * damp * s * k[j];
                }
            }
            Ok((v, g))
        }
        InitialDatum::Gaussian { .. } => {
            let quad = LaplaceQuadrature::default();
            homogenized_laplace(a_bar, f, x, &quad).map(|(v, g, _)| (v, g))
        }
    }
}

/// `∫₀^T e^{-t} u_hom(t, x) dt` by quadrature, with the tail bound `e^{-T} sup|f|`.
pub fn homogenized_laplace(a_bar: &[f64], f: &InitialDatum, x: &[f64], quad: &LaplaceQuadrature) -> Result<(f64, Vec<f64>, f64)> {
    let d = f.d();
    let mut v = 0.0;
    let mut g = vec![0.0; d];
    for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
        let (u, gu) = homogenized_solution(a_bar, f, t, x)?;
        v += w * u;
        for j in 0..d {
            g[j] += w * gu[j];
        }
    }
    Ok((v, g, quad.tail_bound(sup_bound(f))))
}

fn sup_bound(f: &InitialDatum) -> f64 {
    match f {
        InitialDatum::Constant { value, .. } => value.abs(),
        InitialDatum::Cosines { modes, .. } => modes.iter().map(|m| m.amplitude.abs()).sum(),
        InitialDatum::Gaussian { center, period, .. } => match period {
            None => 1.0,
            Some(_) => f.value(center),
        },
    }
}

/// Gauss–Legendre rule for `∫₀^T e^{-t} g(t) dt`: one panel on `[0, t_min]`,
/// doubling panels up to `t = 1`, then unit panels. Weights include `e^{-t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub t_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceOptions {
    pub t_max: f64,
    /// Upper end of the first panel; lowered automatically below `1/(4ρ)`.
    pub t_min: f64,
    pub points: usize,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            t_max: 36.0,
            t_min: 2f64.powi(-24),
            points: 10,
        }
    }
}

impl Default for LaplaceQuadrature {
    fn default() -> Self {
        Self::new(LaplaceOptions::default()).expect("default rule is valid")
    }
}

impl LaplaceQuadrature {
    pub fn new(opts: LaplaceOptions) -> Result<Self> {
        ensure(opts.t_max.is_finite() && opts.t_max >= 1.0, "t_max", opts.t_max, "must be at least 1")?;
        ensure(opts.t_min > 0.0 && opts.t_min < 1.0, "t_min", opts.t_min, "must lie in (0, 1)")?;
        ensure(opts.points >= 2, "points", opts.points, "needs at least two nodes per panel")?;
        let mut edges = vec![0.0];
        let mut a = opts.t_min;
        while a < 1.0 {
            edges.push(a);
            a *= 2.0;
        }
        let mut k = 1.0;
        while k < opts.t_max {
            edges.push(k);
            k += 1.0;
        }
        edges.push(opts.t_max);
        let (xg, wg) = stats::gauss_legendre(opts.points);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for (s, ws) in xg.iter().zip(&wg) {
                let t = lo + 0.5 * (hi - lo) * (1.0 + s);
                nodes.push(t);
                weights.push(0.5 * (hi - lo) * ws * (-t).exp());
            }
        }
        Ok(LaplaceQuadrature {
            nodes,
            weights,
            t_max: opts.t_max,
        })
    }

    /// Bound on the omitted tail `∫_T^∞ e^{-t} g dt` for `|g| ≤ sup`.
    pub fn tail_bound(&self, sup: f64) -> f64 {
        sup * (-self.t_max).exp()
    }
}

/// `e^{-z} I_k(z)` for `k = 0, 1, ...`, truncated once the terms fall below `tol`.
///
/// Miller's backward recurrence normalized by `I_0 + 2 Σ I_k = e^z`.
pub fn scaled_bessel(z: f64, tol: f64) -> Vec<f64> {
    if z <= 0.0 {
        return vec![1.0];
    }
    let start = ((160.0 * z).sqrt() + 60.0).ceil() as usize;
    let mut vals = vec![0.0; start + 1];
    let mut next = 0.0;
    let mut cur = 1e-300;
    vals[start] = cur;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / z * cur + next;
        next = cur;
        cur = prev;
        vals[k - 1] = cur;
        if cur > 1e250 {
            for v in vals[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
            next *= 1e-250;
            cur *= 1e-250;
        }
    }
    let total = vals[0] + 2.0 * stats::pairwise_sum(&vals[1..]);
    let mut out: Vec<f64> = vals.iter().map(|v| v / total).collect();
    let keep = out.iter().rposition(|v| *v > tol).map_or(1, |i| i + 1);
    out.truncate(keep);
    out
}

/// Chebyshev expansion of `exp(-tA)` on the spectral interval `[0, ρ]`.
#[derive(Clone, Debug)]
pub struct Chebyshev {
    op: DivFormOperator,
    rho: f64,
}

/// Truncation threshold for expansion coefficients.
pub const CHEBYSHEV_TOL: f64 = 1e-18;

impl Chebyshev {
    /// Uses the operator without its massive term.
    pub fn new(op: &DivFormOperator) -> Self {
        let op = op.with_lambda(0.0);
        let rho = op.spectral_bound().max(1e-300);
        Chebyshev { op, rho }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Coefficients `c_k` with `exp(-tA) = Σ c_k T_k(2A/ρ - 1)`.
    pub fn heat_coefficients(&self, t: f64) -> Vec<f64> {
        scaled_bessel(0.5 * t * self.rho, CHEBYSHEV_TOL)
            .iter()
            .enumerate()
            .map(|(k, v)| if k == 0 { *v } else if k % 2 == 1 { -2.0 * v } else { 2.0 * v })
            .collect()
    }

    /// Coefficients of `Σ_q w_q exp(-t_q A)`, the Laplace transform at unit rate.
    pub fn laplace_coefficients(&self, quad: &LaplaceQuadrature) -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
            let c = self.heat_coefficients(t);
            if acc.len() < c.len() {
                acc.resize(c.len(), 0.0);
            }
            for (a, v) in acc.iter_mut().zip(&c) {
                *a += w * v;
            }
        }
        let top = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let keep = acc.iter().rposition(|v| v.abs() > CHEBYSHEV_TOL * top).map_or(1, |i| i + 1);
        acc.truncate(keep);
        acc
    }

    /// `Σ_k c^o_k T_k(Â) f` for every coefficient vector `c^o`. With `subset`,
    /// only those entries are accumulated (the rest of each output is zero).
    pub fn evaluate(&self, f: &[f64], coeffs: &[Vec<f64>], subset: Option<&[usize]>) -> Vec<Vec<f64>> {
        let n = f.len();
        let degree = coeffs.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut out = vec![vec![0.0; n]; coeffs.len()];
        if degree == 0 {
            return out;
        }
        let accumulate = |out: &mut Vec<Vec<f64>>, v: &[f64], k: usize| {
            for (o, c) in out.iter_mut().zip(coeffs) {
                let Some(&ck) = c.get(k) else { continue };
                match subset {
                    Some(idx) => idx.iter().for_each(|&i| o[i] += ck * v[i]),
                    None => o.par_iter_mut().zip(v.par_iter()).with_min_len(stats::CHUNK).for_each(|(a, b)| *a += ck * b),
                }
            }
        };
        let mut prev = f.to_vec();
        accumulate(&mut out, &prev, 0);
        if degree == 1 {
            return out;
        }
        let mut cur = vec![0.0; n];
        self.op.apply_affine(&prev, None, 2.0 / self.rho, -1.0, 0.0, &mut cur);
        accumulate(&mut out, &cur, 1);
        let s = 4.0 / self.rho;
        let mut k = 2;
        while k + 1 < degree {
            self.op.recurrence_pair(&mut prev, &mut cur, s, -2.0, -1.0);
            accumulate(&mut out, &prev, k);
            accumulate(&mut out, &cur, k + 1);
            // the pair leaves (T_k, T_{k+1}) in (prev, cur): the roles are kept
            k += 2;
        }
        if k < degree {
            let mut next = vec![0.0; n];
            self.op.apply_affine(&cur, Some(&prev), s, -2.0, -1.0, &mut next);
            accumulate(&mut out, &next, k);
        }
        out
    }
}

/// Time integrator for `∂_t u = -A u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeScheme {
    /// Chebyshev expansion of the propagator; no time step.
    Chebyshev,
    /// Crank–Nicolson with two backward-Euler half steps at the start. `dt` defaults to `h²/4`.
    CrankNicolson { dt: Option<f64> },
    BackwardEuler { dt: Option<f64> },
}

/// Largest admissible step as a multiple of `h²`.
pub const DT_BUDGET: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParabolicOptions {
    pub scheme: TimeScheme,
    pub assembly: AssemblyOptions,
    /// Smallest admissible `m = ε / h`.
    pub min_m: usize,
    /// Tolerance of the implicit solves.
    pub solve_tol: f64,
}

impl Default for ParabolicOptions {
    fn default() -> Self {
        ParabolicOptions {
            scheme: TimeScheme::Chebyshev,
            assembly: AssemblyOptions::default(),
            min_m: 8,
            solve_tol: 1e-12,
        }
    }
}

/// Checks `ε = m h` with an integer `m ≥ min_m`.
pub fn check_resolution(eps: f64, grid: &Grid, min_m: usize) -> Result<usize> {
    ensure(eps.is_finite() && eps > 0.0 && eps <= 1.0, "eps", eps, "must lie in (0, 1]")?;
    let m = eps / grid.h;
    ensure(
        (m - m.round()).abs() <= 1e-9 * m && m.round() as usize >= min_m,
        "eps",
        eps,
        "must be an integer multiple m >= min_m of the grid spacing h",
    )?;
    Ok(m.round() as usize)
}

/// Slices `u_ε(t)` for each requested time, coefficients `a(x/ε)`.
pub fn solve_parabolic(
    field: &CoefficientField,
    eps: f64,
    f: &InitialDatum,
    times: &[f64],
    grid: &Grid,
    opts: &ParabolicOptions,
) -> Result<Vec<GridFunction>> {
    check_resolution(eps, grid, opts.min_m)?;
    let op = assemble_scaled(field, grid, eps, 0.0, opts.assembly)?;
    let u0 = f.sample(grid)?;
    propagate(&op, &u0, times, opts.scheme, opts.solve_tol)
}

/// Solves `∂_t u = -A u` from `u0` and returns the slices at `times`.
pub fn propagate(op: &DivFormOperator, u0: &GridFunction, times: &[f64], scheme: TimeScheme, solve_tol: f64) -> Result<Vec<GridFunction>> {
    for &t in times {
        ensure(t.is_finite() && t >= 0.0, "t", t, "must be non-negative")?;
    }
    let grid = op.grid().clone();
    let slices = match scheme {
        TimeScheme::Chebyshev => {
            let cheb = Chebyshev::new(op);
            let coeffs: Vec<Vec<f64>> = times.iter().map(|&t| cheb.heat_coefficients(t)).collect();
            cheb.evaluate(&u0.values, &coeffs, None)
        }
        TimeScheme::CrankNicolson { dt } => step_implicit(op, &u0.values, times, dt, true, solve_tol)?,
        TimeScheme::BackwardEuler { dt } => step_implicit(op, &u0.values, times, dt, false, solve_tol)?,
    };
    slices.into_iter().map(|v| GridFunction::scalar(&grid, v)).collect()
}

fn step_implicit(op: &DivFormOperator, u0: &[f64], times: &[f64], dt: Option<f64>, cn: bool, tol: f64) -> Result<Vec<Vec<f64>>> {
    let h2 = op.grid().h * op.grid().h;
    let dt = dt.unwrap_or(0.25 * h2);
    ensure(dt > 0.0 && dt <= DT_BUDGET * h2, "dt", dt, "exceeds the accuracy budget h^2")?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    for &t in times {
        let s = t / dt;
        ensure((s - s.round()).abs() <= 1e-9 * s.max(1.0), "dt", dt, "output times must be whole multiples of dt")?;
    }
    let a0 = op.with_lambda(0.0);
    let opts = SolveOptions {
        tol,
        max_iter: None,
        preconditioner: Preconditioner::Jacobi,
    };
    let implicit = |u: &[f64], tau: f64, theta: f64| -> Result<Vec<f64>> {
        // (1/(θτ) + A) u' = (1/(θτ)) u - ((1-θ)/θ) A u
        let mu = 1.0 / (theta * tau);
        let mut rhs = vec![0.0; u.len()];
        a0.apply_affine(u, None, -(1.0 - theta) / theta, mu, 0.0, &mut rhs);
        let rhs = GridFunction::scalar(a0.grid(), rhs)?;
        Ok(lattice::solve_with(&a0.with_lambda(mu), &rhs, &opts)?.0.values)
    };
    let mut out = vec![Vec::new(); times.len()];
    let mut u = u0.to_vec();
    let mut step = 0usize;
    for &i in &order {
        let target = (times[i] / dt).round() as usize;
        while step < target {
            u = if !cn {
                implicit(&u, dt, 1.0)?
            } else if step == 0 {
                let half = implicit(&u, 0.5 * dt, 1.0)?;
                implicit(&half, 0.5 * dt, 1.0)?
            } else {
                implicit(&u, dt, 0.5)?
            };
            step += 1;
            if let Some(bad) = u.iter().position(|v| !v.is_finite()) {
                return Err(Error::SimulationBlowup {
                    step,
                    state: format!("u[{bad}] = {}", u[bad]),
                });
            }
        }
        out[i] = u.clone();
    }
    Ok(out)
}

/// The two elliptic solutions of `U - ½∇·a∇U = f` on one lattice.
#[derive(Clone, Debug)]
pub struct EllipticSolutions {
    pub direct: GridFunction,
    pub laplace: GridFunction,
    /// Bound on the omitted time tail of the Laplace path.
    pub tail_bound: f64,
    pub iterations: usize,
    pub degree: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticOptions {
    pub laplace: LaplaceOptions,
    pub solve: SolveOptions,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        EllipticOptions {
            laplace: LaplaceOptions::default(),
            solve: SolveOptions {
                tol: 1e-13,
                max_iter: None,
                preconditioner: Preconditioner::Fourier,
            },
        }
    }
}

/// Laplace rule adapted to the stiffness of `op`.
pub fn laplace_rule(op: &DivFormOperator, opts: &LaplaceOptions) -> Result<LaplaceQuadrature> {
    let rho = op.with_lambda(0.0).spectral_bound();
    let mut o = *opts;
    while o.t_min * rho > 0.25 {
        o.t_min *= 0.5;
    }
    LaplaceQuadrature::new(o)
}

/// Direct solve and Laplace-in-time path for `U_ε` with coefficients `a(x/ε)`.
pub fn elliptic_solutions(
    field: &CoefficientField,
    eps: f64,
    f: &InitialDatum,
    grid: &Grid,
    min_m: usize,
    opts: &EllipticOptions,
) -> Result<EllipticSolutions> {
    check_resolution(eps, grid, min_m)?;
    let op = assemble_scaled(field, grid, eps, 0.0, AssemblyOptions::default())?;
    elliptic_on(&op, &f.sample(grid)?, sup_bound(f), opts, None)
}

/// As [`elliptic_solutions`] for an assembled operator; `subset` restricts the
/// Laplace accumulation to the listed nodes.
pub fn elliptic_on(op: &DivFormOperator, f: &GridFunction, sup_f: f64, opts: &EllipticOptions, subset: Option<&[usize]>) -> Result<EllipticSolutions> {
    let (direct, st) = lattice::solve_with(&op.with_lambda(1.0), f, &opts.solve)?;
    let quad = laplace_rule(op, &opts.laplace)?;
    let cheb = Chebyshev::new(op);
    let c = cheb.laplace_coefficients(&quad);
    let degree = c.len();
    let lap = cheb.evaluate(&f.values, &[c], subset).pop().unwrap_or_default();
    Ok(EllipticSolutions {
        direct,
        laplace: GridFunction::scalar(op.grid(), lap)?,
        tail_bound: quad.tail_bound(sup_f),
        iterations: st.iterations,
        degree,
    })
}

/// A space-time probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<f64>,
}

/// How `u_hom` is put next to the lattice solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Exact continuum value at the probe.
    Continuum,
    /// Lattice-dispersion solution sampled at the nodes and interpolated with
    /// the same stencil as `u_ε`; isolates the multiscale error from the
    /// discretization of the slow variable.
    Lattice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionOptions {
    pub eps: Vec<f64>,
    pub probes: Vec<Probe>,
    pub scheme: TimeScheme,
    pub reference: Reference,
    pub min_m: usize,
    /// Also compute the elliptic residual at the probe points.
    pub elliptic: bool,
    pub elliptic_opts: EllipticOptions,
    pub solve_tol: f64,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            eps: vec![0.25, 0.125, 0.0625],
            probes: Vec::new(),
            scheme: TimeScheme::Chebyshev,
            reference: Reference::Lattice,
            min_m: 8,
            elliptic: false,
            elliptic_opts: EllipticOptions::default(),
            solve_tol: 1e-12,
        }
    }
}

/// One environment × ε × probe record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub env: usize,
    pub eps: f64,
    pub probe: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u_eps: f64,
    pub u_hom: f64,
    pub grad_u_hom: Vec<f64>,
    /// `φ_{e_k}(x/ε)`.
    pub phi: Vec<f64>,
    pub c_eps: f64,
}

impl ExpansionRow {
    /// `∇u_hom · φ(x/ε)`.
    pub fn first_order(&self) -> f64 {
        self.grad_u_hom.iter().zip(&self.phi).map(|(g, p)| g * p).sum()
    }

    /// `(u_ε - u_hom - ε ∇u_hom·φ) / ε` from the stored components.
    pub fn residual(&self) -> f64 {
        (self.u_eps - self.u_hom - self.eps * self.first_order()) / self.eps
    }
}

/// Elliptic counterpart of [`ExpansionRow`], one per distinct probe point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticRow {
    pub env: usize,
    pub eps: f64,
    pub point: usize,
    pub x: Vec<f64>,
    pub u_direct: f64,
    pub u_laplace: f64,
    pub u_hom: f64,
    pub grad_u_hom: Vec<f64>,
    pub phi: Vec<f64>,
    pub c_direct: f64,
    pub c_laplace: f64,
    pub tail_bound: f64,
}

fn residual(u: f64, u_hom: f64, eps: f64, g: &[f64], phi: &[f64]) -> f64 {
    let first: f64 = g.iter().zip(phi).map(|(a, b)| a * b).sum();
    (u - u_hom - eps * first) / eps
}

/// Ensemble statistics of one (ε, probe) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStat {
    pub eps: f64,
    pub probe: usize,
    pub n: usize,
    pub mean_abs: f64,
    pub se_abs: f64,
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub eps: Vec<f64>,
    pub probes: Vec<Probe>,
    pub n_envs: usize,
    pub rows: Vec<ExpansionRow>,
    pub stats: Vec<ProbeStat>,
    pub points: Vec<Vec<f64>>,
    pub elliptic_rows: Vec<EllipticRow>,
    /// Per (ε, point): ensemble `E|C̃_ε|` from the direct solve.
    pub elliptic_stats: Vec<ProbeStat>,
}

impl ExpansionReport {
    pub fn stat(&self, eps_index: usize, probe: usize) -> &ProbeStat {
        &self.stats[eps_index * self.probes.len() + probe]
    }

    /// `E|C_ε|` along the ladder for one probe.
    pub fn ladder(&self, probe: usize) -> Vec<f64> {
        (0..self.eps.len()).map(|e| self.stat(e, probe).mean_abs).collect()
    }

    pub fn strictly_decreasing(&self, probe: usize) -> bool {
        self.ladder(probe).windows(2).all(|w| w[1] < w[0])
    }

    /// Last over first rung of the ladder.
    pub fn decay_ratio(&self, probe: usize) -> f64 {
        let l = self.ladder(probe);
        l[l.len() - 1] / l[0]
    }

    /// For consecutive rungs, the mean and standard error of the paired
    /// differences `|C_ε| - |C_ε'|` across environments.
    pub fn paired_steps(&self, probe: usize) -> Vec<(f64, f64)> {
        let per = self.rows_by(probe);
        per.windows(2)
            .map(|w| {
                let diffs: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| a.abs() - b.abs()).collect();
                stats::mean_se(&diffs)
            })
            .collect()
    }

    fn rows_by(&self, probe: usize) -> Vec<Vec<f64>> {
        let mut per = vec![vec![0.0; self.n_envs]; self.eps.len()];
        for r in self.rows.iter().filter(|r| r.probe == probe) {
            let e = self.eps.iter().position(|&v| v == r.eps).unwrap_or(0);
            per[e][r.env] = r.c_eps;
        }
        per
    }

    /// Elliptic `E|C̃_ε|` along the ladder at one point.
    pub fn elliptic_ladder(&self, point: usize) -> Vec<f64> {
        let np = self.points.len();
        (0..self.eps.len()).map(|e| self.elliptic_stats[e * np + point].mean_abs).collect()
    }

    /// Largest `|C̃_ε|` gap between the two elliptic paths.
    pub fn elliptic_path_gap(&self) -> f64 {
        self.elliptic_rows.iter().fold(0.0, |m, r| m.max((r.c_direct - r.c_laplace).abs()))
    }

    pub fn to_csv(&self) -> String {
        let d = self.probes.first().map_or(0, |p| p.x.len());
        let mut s = String::from("env,eps,probe,t");
        for j in 0..d {
            s += &format!(",x{j}");
        }
        s += ",u_eps,u_hom";
        for j in 0..d {
            s += &format!(",grad_u_hom{j}");
        }
        for j in 0..d {
            s += &format!(",phi{j}");
        }
        s += ",c_eps\n";
        for r in &self.rows {
            let mut line = format!("{},{},{},{}", r.env, fmt17(r.eps), r.probe, fmt17(r.t));
            for v in r.x.iter().chain([r.u_eps, r.u_hom].iter()).chain(&r.grad_u_hom).chain(&r.phi) {
                line += ",";
                line += &fmt17(*v);
            }
            line += ",";
            line += &fmt17(r.c_eps);
            s += &line;
            s.push('\n');
        }
        s
    }

    pub fn elliptic_csv(&self) -> String {
        let d = self.points.first().map_or(0, |p| p.len());
        let mut s = String::from("env,eps,point");
        for j in 0..d {
            s += &format!(",x{j}");
        }
        s += ",u_direct,u_laplace,u_hom,c_direct,c_laplace,tail_bound\n";
        for r in &self.elliptic_rows {
            let mut line = format!("{},{},{}", r.env, fmt17(r.eps), r.point);
            for v in r.x.iter().chain([r.u_direct, r.u_laplace, r.u_hom, r.c_direct, r.c_laplace, r.tail_bound].iter()) {
                line += ",";
                line += &fmt17(*v);
            }
            s += &line;
            s.push('\n');
        }
        s
    }
}

/// Smallest multiple of `base` that is also a whole number of periods `p`.
pub fn common_period(base: f64, p: Option<f64>) -> Result<(f64, usize)> {
    let Some(p) = p else { return Ok((base, 1)) };
    for k in 1..=256usize {
        let r = base * k as f64 / p;
        if (r - r.round()).abs() <= 1e-9 * r.max(1.0) && r.round() >= 1.0 {
            return Ok((base * k as f64, k));
        }
    }
    Err(Error::invalid("period", p, "datum period is not commensurate with eps*L"))
}

/// Lattice at scale ε obtained by shrinking the corrector lattice by ε and
/// repeating it until the datum is periodic.
pub fn scaled_grid(unit: &Grid, eps: f64, f: &InitialDatum, min_m: usize) -> Result<Grid> {
    ensure(eps.is_finite() && eps > 0.0 && eps <= 1.0, "eps", eps, "must lie in (0, 1]")?;
    let m = 1.0 / unit.h;
    ensure(
        (m - m.round()).abs() <= 1e-9 * m && m.round() as usize >= min_m,
        "n",
        unit.n,
        "corrector lattice must have an integer number m >= min_m of nodes per unit length",
    )?;
    let (period, reps) = common_period(eps * unit.l, f.period())?;
    let origin: Vec<f64> = unit.origin.iter().map(|o| o * eps).collect();
    Grid::new(unit.d, unit.n * reps, period)?.with_origin(&origin)
}

struct EnvOut {
    rows: Vec<ExpansionRow>,
    elliptic: Vec<EllipticRow>,
}

/// Residual `C_ε` at every probe for every environment and every ε.
///
/// The operator at scale ε is the corrector lattice operator tiled onto the
/// shrunken lattice, so the fast variable is sampled exactly as in the cell problem.
pub fn expansion_report(sets: &[CorrectorSet], f: &InitialDatum, opts: &ExpansionOptions) -> Result<ExpansionReport> {
    ensure(!sets.is_empty(), "sets", 0, "needs at least one environment")?;
    expansion_report_with(sets[0].grid(), sets.len(), |e| Ok(&sets[e]), f, opts)
}

/// As [`expansion_report`], building environment `e` on demand with `make(e)`
/// so that only the environments in flight are held in memory.
pub fn expansion_report_with<S, M>(unit: &Grid, n_envs: usize, make: M, f: &InitialDatum, opts: &ExpansionOptions) -> Result<ExpansionReport>
where
    S: Borrow<CorrectorSet>,
    M: Fn(usize) -> Result<S> + Sync,
{
    ensure(n_envs >= 1, "n_envs", n_envs, "needs at least one environment")?;
    ensure(!opts.eps.is_empty(), "eps", "[]", "ladder must not be empty")?;
    let d = unit.d;
    ensure(f.d() == d, "f", f.d(), "datum dimension differs from the correctors")?;
    for p in &opts.probes {
        ensure(p.x.len() == d, "probes", format!("{:?}", p.x), "probe needs d coordinates")?;
        ensure(p.t.is_finite() && p.t >= 0.0, "probes", p.t, "probe time must be non-negative")?;
    }
    if opts.reference == Reference::Lattice {
        ensure(
            !matches!(f, InitialDatum::Gaussian { .. }),
            "reference",
            "lattice",
            "needs cosine or constant data",
        )?;
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    for p in &opts.probes {
        if !points.contains(&p.x) {
            points.push(p.x.clone());
        }
    }
    let grids: Vec<Grid> = opts.eps.iter().map(|&e| scaled_grid(unit, e, f, opts.min_m)).collect::<Result<_>>()?;
    let outs: Vec<Result<EnvOut>> = (0..n_envs)
        .into_par_iter()
        .map(|env| {
            let set = make(env)?;
            let set = set.borrow();
            ensure(set.grid() == unit, "grid", set.grid().n, "every environment must share the corrector lattice")?;
            let mut rows = Vec::new();
            let mut elliptic = Vec::new();
            for (&eps, grid) in opts.eps.iter().zip(&grids) {
                let (r, e) = one_scale(env, set, eps, grid, f, opts, &points)?;
                rows.extend(r);
                elliptic.extend(e);
            }
            Ok(EnvOut { rows, elliptic })
        })
        .collect();
    let mut rows = Vec::new();
    let mut elliptic_rows = Vec::new();
    for o in outs {
        let o = o?;
        rows.extend(o.rows);
        elliptic_rows.extend(o.elliptic);
    }
    let cell_stat = |eps: f64, probe: usize, vals: Vec<f64>| {
        let abs: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        let (mean_abs, se_abs) = stats::mean_se(&abs);
        let (mean, se) = stats::mean_se(&vals);
        ProbeStat {
            eps,
            probe,
            n: vals.len(),
            mean_abs,
            se_abs,
            mean,
            se,
        }
    };
    let mut st = Vec::new();
    let mut est = Vec::new();
    for &eps in &opts.eps {
        for p in 0..opts.probes.len() {
            let v = rows.iter().filter(|r| r.eps == eps && r.probe == p).map(|r| r.c_eps).collect();
            st.push(cell_stat(eps, p, v));
        }
        if opts.elliptic {
            for p in 0..points.len() {
                let v = elliptic_rows.iter().filter(|r| r.eps == eps && r.point == p).map(|r| r.c_direct).collect();
                est.push(cell_stat(eps, p, v));
            }
        }
    }
    Ok(ExpansionReport {
        eps: opts.eps.clone(),
        probes: opts.probes.clone(),
        n_envs,
        rows,
        stats: st,
        points: if opts.elliptic { points } else { Vec::new() },
        elliptic_rows,
        elliptic_stats: est,
    })
}

fn one_scale(
    env: usize,
    set: &CorrectorSet,
    eps: f64,
    grid: &Grid,
    f: &InitialDatum,
    opts: &ExpansionOptions,
    points: &[Vec<f64>],
) -> Result<(Vec<ExpansionRow>, Vec<EllipticRow>)> {
    let d = grid.d;
    let unit = set.grid();
    let op = set.op.with_lambda(0.0).tiled(grid)?;
    let u0 = f.sample(grid)?;
    let phi_at = |x: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = x.iter().map(|v| v / eps).collect();
        set.phi.iter().map(|p| lattice::interpolate(unit, &p.values, &y).0).collect()
    };
    let stencils: Vec<Vec<(usize, f64)>> = points.iter().map(|x| lattice::stencil(grid, x)).collect();
    let mut subset: Vec<usize> = stencils.iter().flatten().map(|s| s.0).collect();
    subset.sort_unstable();
    subset.dedup();
    let probe_point = |p: &Probe| points.iter().position(|x| *x == p.x).unwrap_or(0);

    // u_hom (value at the probe) according to the chosen reference.
    let hom = |t: Option<f64>, x: &[f64], st: &[(usize, f64)]| -> Result<(f64, Vec<f64>)> {
        let eval = |y: &[f64]| match (t, opts.reference) {
            (Some(t), Reference::Continuum) => homogenized_solution(&set.a_bar, f, t, y),
            (Some(t), Reference::Lattice) => homogenized_solution_lattice(&set.a_bar, f, t, y, grid.h),
            (None, Reference::Continuum) => homogenized_elliptic(&set.a_bar, f, y),
            (None, Reference::Lattice) => homogenized_elliptic_lattice(&set.a_bar, f, y, grid.h),
        };
        let (_, g) = match t {
            Some(t) => homogenized_solution(&set.a_bar, f, t, x)?,
            None => homogenized_elliptic(&set.a_bar, f, x)?,
        };
        let v = match opts.reference {
            Reference::Continuum => eval(x)?.0,
            Reference::Lattice => {
                let mut acc = 0.0;
                for &(i, w) in st {
                    acc += w * eval(&grid.position(i)[..d])?.0;
                }
                acc
            }
        };
        Ok((v, g))
    };
    let at = |vals: &[f64], st: &[(usize, f64)]| st.iter().map(|&(i, w)| w * vals[i]).sum::<f64>();

    let mut times: Vec<f64> = opts.probes.iter().map(|p| p.t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let slices: Vec<Vec<f64>> = match opts.scheme {
        TimeScheme::Chebyshev => {
            let cheb = Chebyshev::new(&op);
            let coeffs: Vec<Vec<f64>> = times.iter().map(|&t| cheb.heat_coefficients(t)).collect();
            cheb.evaluate(&u0.values, &coeffs, Some(&subset))
        }
        s => propagate(&op, &u0, &times, s, opts.solve_tol)?.into_iter().map(|g| g.values).collect(),
    };
    let mut rows = Vec::with_capacity(opts.probes.len());
    for (pi, p) in opts.probes.iter().enumerate() {
        let st = &stencils[probe_point(p)];
        let ti = times.iter().position(|&t| t == p.t).unwrap_or(0);
        let u_eps = at(&slices[ti], st);
        let (u_hom, grad_u_hom) = hom(Some(p.t), &p.x, st)?;
        let phi = phi_at(&p.x);
        let mut row = ExpansionRow {
            env,
            eps,
            probe: pi,
            t: p.t,
            x: p.x.clone(),
            u_eps,
            u_hom,
            grad_u_hom,
            phi,
            c_eps: 0.0,
        };
        row.c_eps = row.residual();
        rows.push(row);
    }
    let mut ell = Vec::new();
    if opts.elliptic {
        let sol = elliptic_on(&op, &u0, sup_bound(f), &opts.elliptic_opts, Some(&subset))?;
        for (k, x) in points.iter().enumerate() {
            let st = &stencils[k];
            let u_direct = at(&sol.direct.values, st);
            let u_laplace = at(&sol.laplace.values, st);
            let (u_hom, g) = hom(None, x, st)?;
            let phi = phi_at(x);
            ell.push(EllipticRow {
                env,
                eps,
                point: k,
                x: x.clone(),
                u_direct,
                u_laplace,
                u_hom,
                c_direct: residual(u_direct, u_hom, eps, &g, &phi),
                c_laplace: residual(u_laplace, u_hom, eps, &g, &phi),
                grad_u_hom: g,
                phi,
                tail_bound: sol.tail_bound,
            });
        }
    }
    Ok((rows, ell))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_normalization_and_small_argument() {
        let b = scaled_bessel(0.5, 1e-18);
        let s = b[0] + 2.0 * b[1..].iter().sum::<f64>();
        assert!((s - 1.0).abs() < 1e-15);
        // e^{-z} I_0(z) at z = 0.5
        assert!((b[0] - 0.645_035_270_449_150_1).abs() < 1e-14, "{}", b[0]);
        let big = scaled_bessel(2.0e6, 1e-18);
        let s: f64 = big[0] + 2.0 * big[1..].iter().sum::<f64>();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((big[0] * (2.0 * PI * 2.0e6).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadrature_integrates_exponentials() {
        let q = LaplaceQuadrature::default();
        for mu in [0.0, 0.5, 3.0, 1e3, 1e6] {
            let v: f64 = q.nodes.iter().zip(&q.weights).map(|(t, w)| w * (-mu * t).exp()).sum();
            assert!((v - 1.0 / (1.0 + mu)).abs() < 1e-12 * (1.0 + 1.0 / (1.0 + mu)), "mu {mu}: {v}");
        }
    }

    #[test]
    fn cosine_product_expansion() {
        let f = InitialDatum::cosine_product(2.0, &[1, 2, 1], 0.7).unwrap();
        let x = [0.3, -0.8, 1.1];
        let want = 0.7 * (PI * 0.3).cos() * (2.0 * PI * -0.8).cos() * (PI * 1.1).cos();
        assert!((f.value(&x) - want).abs() < 1e-14);
    }

    #[test]
    fn spd_check_rejects_indefinite() {
        let f = InitialDatum::constant(2, 1.0).unwrap();
        assert!(homogenized_solution(&[1.0, 2.0, 2.0, 1.0], &f, 1.0, &[0.0, 0.0]).is_err());
        assert!(homogenized_solution(&[1.0, 0.1, 0.0, 1.0], &f, 1.0, &[0.0, 0.0]).is_err());
    }
}
