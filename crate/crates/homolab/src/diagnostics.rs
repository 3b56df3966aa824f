//! Decorrelation curves, resampling identities, martingale CLT distances and
//! lattice convolution sums.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::corrector::CorrectorSet;
use crate::error::{ensure, Error, Result};
use crate::field::{sphere_area, CoefficientField, MAX_D};
use crate::lattice::{self, GridFunction};
use crate::walk::{Functional, MartingaleSample};
use crate::{rng, stats};

/// Log-log least-squares slope with a bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub ci: (f64, f64),
    pub window: (f64, f64),
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub abscissae: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub fit: Option<Fit>,
    pub reference: Option<f64>,
}

pub const BOOTSTRAP: usize = 200;

impl DecayCurve {
    pub fn new(abscissae: Vec<f64>, values: Vec<f64>, se: Vec<f64>) -> Result<Self> {
        ensure(abscissae.len() == values.len() && se.len() == values.len(), "values", values.len(), "must match the abscissae")?;
        ensure(
            abscissae.windows(2).all(|w| w[1] > w[0]),
            "abscissae",
            format!("{abscissae:?}"),
            "must be strictly increasing",
        )?;
        Ok(DecayCurve {
            abscissae,
            values,
            se,
            fit: None,
            reference: None,
        })
    }

    /// Fits the points with abscissa in `[lo, hi]`.
    pub fn with_fit(mut self, window: (f64, f64), seed: u64) -> Result<Self> {
        self.fit = Some(exponent_fit(&self.abscissae, &self.values, window, seed)?);
        Ok(self)
    }

    /// Mean and standard error across environments; `per_env[e][k]` is the
    /// value of environment `e` at abscissa `k`.
    pub fn from_members(abscissae: Vec<f64>, per_env: &[Vec<f64>]) -> Result<Self> {
        ensure(!per_env.is_empty(), "n_envs", 0, "needs at least one environment")?;
        let (values, se): (Vec<f64>, Vec<f64>) = (0..abscissae.len())
            .map(|k| {
                let col: Vec<f64> = per_env.iter().map(|v| v[k]).collect();
                let (m, s) = stats::mean_se(&col);
                (m, if s.is_nan() { 0.0 } else { s })
            })
            .unzip();
        Self::new(abscissae, values, se)
    }

    pub fn with_reference(mut self, exponent: f64) -> Self {
        self.reference = Some(exponent);
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,value,se\n");
        for ((x, v), e) in self.abscissae.iter().zip(&self.values).zip(&self.se) {
            s.push_str(&format!("{},{},{}\n", crate::io::fmt17(*x), crate::io::fmt17(*v), crate::io::fmt17(*e)));
        }
        s
    }
}

/// Slope of `log y` against `log x` over the points in `window`, with a
/// 95% percentile interval from 200 seeded bootstrap resamples.
pub fn exponent_fit(x: &[f64], y: &[f64], window: (f64, f64), seed: u64) -> Result<Fit> {
    ensure(x.len() == y.len(), "values", y.len(), "must match the abscissae")?;
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, _)| **a >= window.0 && **a <= window.1)
        .map(|(a, b)| (*a, *b))
        .collect();
    ensure(pts.len() >= 4, "window", format!("{window:?}"), "needs at least 4 points")?;
    if let Some((a, b)) = pts.iter().find(|(a, b)| !(*a > 0.0 && *b > 0.0)) {
        return Err(Error::invalid("values", format!("({a}, {b})"), "must be positive inside the fit window"));
    }
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept) = stats::linear_fit(&lx, &ly);
    let mut r = rng::stream(seed, 0xF17);
    let n = pts.len();
    let mut slopes = Vec::with_capacity(BOOTSTRAP);
    while slopes.len() < BOOTSTRAP {
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        if idx.iter().all(|&i| lx[i] == lx[idx[0]]) {
            continue;
        }
        let bx: Vec<f64> = idx.iter().map(|&i| lx[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| ly[i]).collect();
        slopes.push(stats::linear_fit(&bx, &by).0);
    }
    slopes.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| slopes[((p * (BOOTSTRAP - 1) as f64).round() as usize).min(BOOTSTRAP - 1)];
    Ok(Fit {
        slope,
        intercept,
        ci: (q(0.025), q(0.975)),
        window,
        points: n,
    })
}

/// Spatial autocovariance `R(z) = mean_y g̃(y) g̃(y+z)` of lattice data, `g̃ = g - mean g`.
pub fn covariance_function(g: &GridFunction) -> Result<GridFunction> {
    ensure(g.is_scalar(), "functional", g.components, "must be scalar")?;
    let grid = &g.grid;
    let m = g.mean();
    let mut buf: Vec<Complex<f64>> = g.values.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    let mut planner = FftPlanner::new();
    lattice::fft_nd(&mut buf, grid.n, grid.d, &planner.plan_fft_forward(grid.n));
    for b in buf.iter_mut() {
        *b = Complex::new(b.norm_sqr(), 0.0);
    }
    lattice::fft_nd(&mut buf, grid.n, grid.d, &planner.plan_fft_inverse(grid.n));
    let scale = 1.0 / (grid.len() as f64 * grid.len() as f64);
    GridFunction::scalar(grid, buf.iter().map(|b| b.re * scale).collect())
}

/// `E|E_B g(τ_{x+B_t} ω)|²` for an independent Brownian shift `B` started
/// from a uniform point: `Σ_z R(z) q_{2t}(z)`, evaluated by Parseval with the
/// continuum heat symbol. Uses the uncentered second moment so it is directly
/// comparable with the walk estimator.
pub fn surrogate_decay(g: &GridFunction, times: &[f64]) -> Result<Vec<f64>> {
    ensure(g.is_scalar(), "functional", g.components, "must be scalar")?;
    let grid = &g.grid;
    let mut buf: Vec<Complex<f64>> = g.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    lattice::fft_nd(&mut buf, grid.n, grid.d, &planner.plan_fft_forward(grid.n));
    let nn = grid.len() as f64;
    let k2: Vec<f64> = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            (0..grid.d)
                .map(|j| {
                    let m = if c[j] <= grid.n / 2 { c[j] as f64 } else { c[j] as f64 - grid.n as f64 };
                    (2.0 * PI * m / grid.l).powi(2)
                })
                .sum()
        })
        .collect();
    Ok(times
        .iter()
        .map(|&t| {
            let terms: Vec<f64> = buf.iter().zip(&k2).map(|(b, k)| b.norm_sqr() / (nn * nn) * (-k * t).exp()).collect();
            stats::pairwise_sum(&terms)
        })
        .collect())
}

fn lag_steps(grid: &lattice::Grid, lag: f64) -> Result<usize> {
    ensure(lag.is_finite() && lag >= 0.0, "lag", lag, "must be non-negative")?;
    ensure(lag <= grid.l / 4.0 + 1e-12, "lag", lag, "must not exceed a quarter of the torus side")?;
    let s = lag / grid.h;
    ensure((s - s.round()).abs() <= 1e-9 * s.max(1.0), "lag", lag, "must be a multiple of the grid step")?;
    Ok(s.round() as usize)
}

/// `mean_y g̃(y) h̃(y + x)` for a lattice shift `x` (in grid steps per axis).
pub fn cross_covariance(g: &GridFunction, h: &GridFunction, shift: &[i64]) -> Result<f64> {
    ensure(g.grid == h.grid && g.is_scalar() && h.is_scalar(), "functional", g.grid.n, "both must be scalar data on one grid")?;
    let grid = &g.grid;
    ensure(shift.len() == grid.d, "shift", shift.len(), "needs d components")?;
    let (mg, mh) = (g.mean(), h.mean());
    let n = grid.n as i64;
    let s = stats::par_sum(grid.len(), |i| {
        let c = grid.coords(i);
        let mut k = [0usize; MAX_D];
        for j in 0..grid.d {
            k[j] = (c[j] as i64 + shift[j]).rem_euclid(n) as usize;
        }
        (g.values[i] - mg) * (h.values[grid.index(&k[..grid.d])] - mh)
    });
    Ok(s / grid.len() as f64)
}

/// Ensemble covariance of `g` at axis-aligned lags (averaged over axes and
/// over the torus), with standard errors across environments.
pub fn decorrelation_curve(envs: &[CorrectorSet], functional: &Functional, lags: &[f64]) -> Result<DecayCurve> {
    ensure(!envs.is_empty(), "n_envs", 0, "needs at least one environment")?;
    let grid = envs[0].grid();
    let per_env = envs
        .iter()
        .map(|set| {
            ensure(set.grid() == grid, "grid", set.grid().n, "all environments must share one grid")?;
            decorrelation_member(set, functional, lags)
        })
        .collect::<Result<Vec<_>>>()?;
    DecayCurve::from_members(lags.to_vec(), &per_env)
}

/// Torus covariance of `g` at the given lags in a single environment.
pub fn decorrelation_member(set: &CorrectorSet, functional: &Functional, lags: &[f64]) -> Result<Vec<f64>> {
    let grid = set.grid();
    let steps: Vec<usize> = lags.iter().map(|&l| lag_steps(grid, l)).collect::<Result<_>>()?;
    let g = functional.lattice(set)?.unwrap_or_else(|| GridFunction::zeros(grid));
    steps
        .iter()
        .map(|&s| {
            let mut acc = 0.0;
            for j in 0..grid.d {
                let mut shift = vec![0i64; grid.d];
                shift[j] = s as i64;
                acc += cross_covariance(&g, &g, &shift)?;
            }
            Ok(acc / grid.d as f64)
        })
        .collect()
}

/// Both sides of `E|∂_k g|² = ½ E|g - g_k|²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplingReport {
    pub cell: Vec<i64>,
    pub inner: usize,
    pub n_envs: usize,
    /// `J/(J+1) · E|g - mean_J g_k|²`, with `J` inner resamples.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `½ E|g - g_k|²`.
    pub rhs: f64,
    pub rhs_se: f64,
    /// Standard error of the paired difference.
    pub diff_se: f64,
}

impl ResamplingReport {
    pub fn agrees(&self, k: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k * self.diff_se || (self.lhs == self.rhs)
    }
}

/// Conditional-resampling estimate of both sides of the identity for cell `cell`.
/// `make` builds environment `e` from a seed; `g` is the functional.
pub fn resampling_identity<M, G>(make: M, g: G, cell: &[i64], n_envs: usize, inner: usize, seed: u64) -> Result<ResamplingReport>
where
    M: Fn(u64) -> Result<CoefficientField> + Sync,
    G: Fn(&CoefficientField) -> Result<f64> + Sync,
{
    ensure(n_envs >= 2, "n_envs", n_envs, "must be at least 2")?;
    ensure(inner >= 1, "inner", inner, "must be positive")?;
    let rows: Vec<Result<(f64, f64)>> = (0..n_envs)
        .into_par_iter()
        .map(|e| {
            let field = make(rng::derive(seed, e as u64))?;
            let cloud = field
                .cloud()
                .ok_or_else(|| Error::invalid("field", "deterministic", "resampling needs a Poisson field"))?;
            let k = cloud.cell_index(cell)?;
            let f0 = g(&field)?;
            let mut r = rng::stream2(seed, 0x5E5A, e as u64);
            let mut vals = Vec::with_capacity(inner);
            for _ in 0..inner {
                let c = cloud.resample_cell_with(k, &mut r);
                vals.push(g(&field.with_cloud(c)?)?);
            }
            let j = inner as f64;
            let lhs = j / (j + 1.0) * (f0 - stats::mean(&vals)).powi(2);
            let rhs = 0.5 * (f0 - vals[0]).powi(2);
            Ok((lhs, rhs))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (l, ls) = stats::mean_se(&lhs);
    let (r, rs) = stats::mean_se(&rhs);
    Ok(ResamplingReport {
        cell: cell.to_vec(),
        inner,
        n_envs,
        lhs: l,
        lhs_se: ls,
        rhs: r,
        rhs_se: rs,
        diff_se: stats::mean_se(&diff).1,
    })
}

/// `|E fg|` against `Σ_k √E|∂_k f|² √E|∂_k g|²` over the listed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBound {
    pub covariance: f64,
    pub covariance_se: f64,
    pub bound: f64,
    pub cells: usize,
}

impl CovarianceBound {
    pub fn holds(&self, k: f64) -> bool {
        self.covariance.abs() <= self.bound + k * self.covariance_se
    }
}

/// Checks the covariance inequality for two functionals. Only the listed
/// cells enter the bound, so both functionals must be local to them.
pub fn covariance_bound<M, F, G>(make: M, f: F, g: G, cells: &[Vec<i64>], n_envs: usize, inner: usize, seed: u64) -> Result<CovarianceBound>
where
    M: Fn(u64) -> Result<CoefficientField> + Sync,
    F: Fn(&CoefficientField) -> Result<f64> + Sync,
    G: Fn(&CoefficientField) -> Result<f64> + Sync,
{
    ensure(n_envs >= 2, "n_envs", n_envs, "must be at least 2")?;
    ensure(inner >= 1, "inner", inner, "must be positive")?;
    let j = inner as f64;
    let rows: Vec<Result<(f64, f64, Vec<(f64, f64)>)>> = (0..n_envs)
        .into_par_iter()
        .map(|e| {
            let field = make(rng::derive(seed, e as u64))?;
            let cloud = field
                .cloud()
                .ok_or_else(|| Error::invalid("field", "deterministic", "resampling needs a Poisson field"))?;
            let (f0, g0) = (f(&field)?, g(&field)?);
            let mut parts = Vec::with_capacity(cells.len());
            for (c, cell) in cells.iter().enumerate() {
                let k = cloud.cell_index(cell)?;
                let mut r = rng::stream2(seed ^ 0xC0B, e as u64, c as u64);
                let (mut fs, mut gs) = (Vec::with_capacity(inner), Vec::with_capacity(inner));
                for _ in 0..inner {
                    let fk = field.with_cloud(cloud.resample_cell_with(k, &mut r))?;
                    fs.push(f(&fk)?);
                    gs.push(g(&fk)?);
                }
                parts.push((
                    j / (j + 1.0) * (f0 - stats::mean(&fs)).powi(2),
                    j / (j + 1.0) * (g0 - stats::mean(&gs)).powi(2),
                ));
            }
            Ok((f0, g0, parts))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let fs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let gs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mf, mg) = (stats::mean(&fs), stats::mean(&gs));
    let prod: Vec<f64> = fs.iter().zip(&gs).map(|(a, b)| (a - mf) * (b - mg)).collect();
    let (cov, cov_se) = stats::mean_se(&prod);
    let n = n_envs as f64;
    let mut bound = 0.0;
    for c in 0..cells.len() {
        let df = stats::mean(&rows.iter().map(|r| r.2[c].0).collect::<Vec<_>>());
        let dg = stats::mean(&rows.iter().map(|r| r.2[c].1).collect::<Vec<_>>());
        bound += df.sqrt() * dg.sqrt();
    }
    Ok(CovarianceBound {
        covariance: cov * n / (n - 1.0),
        covariance_se: cov_se,
        bound,
        cells: cells.len(),
    })
}

/// Smooth test function with closed-form Gaussian expectation and derivative bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    /// `cos(ωx + θ)`.
    Cosine { frequency: f64, phase: f64 },
    /// `exp(-x²/2s²)`.
    Gaussian { width: f64 },
}

/// `max |(3u - u³) e^{-u²/2}|`, attained at `u² = 3 - √6`.
fn gaussian_third_peak() -> f64 {
    let u = (3.0 - 6f64.sqrt()).sqrt();
    (3.0 * u - u * u * u) * (-0.5 * u * u).exp()
}

impl TestFunction {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TestFunction::Cosine { frequency, phase } => {
                ensure(frequency.is_finite() && frequency > 0.0, "frequency", frequency, "must be positive")?;
                ensure(phase.is_finite(), "phase", phase, "must be finite")
            }
            TestFunction::Gaussian { width } => ensure(width.is_finite() && width > 0.0, "width", width, "must be positive"),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TestFunction::Cosine { frequency, phase } => format!("cos(w={frequency:.4},p={phase:.4})"),
            TestFunction::Gaussian { width } => format!("gauss(s={width:.4})"),
        }
    }

    /// `(f(x), f''(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match *self {
            TestFunction::Cosine { frequency: w, phase } => {
                let c = (w * x + phase).cos();
                (c, -w * w * c)
            }
            TestFunction::Gaussian { width: s } => {
                let e = (-0.5 * x * x / (s * s)).exp();
                (e, (x * x / s.powi(4) - 1.0 / (s * s)) * e)
            }
        }
    }

    /// `‖f''‖_∞`.
    pub fn second_bound(&self) -> f64 {
        match *self {
            TestFunction::Cosine { frequency, .. } => frequency * frequency,
            TestFunction::Gaussian { width } => 1.0 / (width * width),
        }
    }

    /// `‖f'''‖_∞`.
    pub fn third_bound(&self) -> f64 {
        match *self {
            TestFunction::Cosine { frequency, .. } => frequency.powi(3),
            TestFunction::Gaussian { width } => gaussian_third_peak() / width.powi(3),
        }
    }

    /// `E f(Z)`, `Z ~ N(0, var)`.
    pub fn gaussian_mean(&self, var: f64) -> f64 {
        match *self {
            TestFunction::Cosine { frequency: w, phase } => phase.cos() * (-0.5 * w * w * var).exp(),
            TestFunction::Gaussian { width: s } => s / (s * s + var).sqrt(),
        }
    }
}

/// Five functions adapted to the scale `√var`: three cosines and two Gaussians.
pub fn default_test_functions(var: f64) -> Vec<TestFunction> {
    let s = var.sqrt();
    vec![
        TestFunction::Cosine { frequency: 0.5 / s, phase: 0.0 },
        TestFunction::Cosine { frequency: 1.0 / s, phase: PI / 4.0 },
        TestFunction::Cosine { frequency: 2.0 / s, phase: PI / 2.0 },
        TestFunction::Gaussian { width: 0.5 * s },
        TestFunction::Gaussian { width: s },
    ]
}

/// Universal constant used in the third-order bound.
pub const THIRD_ORDER_CONSTANT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltRow {
    pub function: TestFunction,
    /// `|E f(M_t) - E f(σW_t)|`.
    pub lhs2: f64,
    pub lhs2_se: f64,
    /// `‖f''‖ E|⟨M⟩_t - σ²t|`.
    pub bound2: f64,
    pub bound2_se: f64,
    /// `|E{f(M_t) - f(σW_t) - ½ f''(M_τ)(⟨M⟩_t - σ²t)}|`.
    pub lhs3: f64,
    pub lhs3_se: f64,
    /// `C ‖f'''‖ E|⟨M⟩_t - σ²t|^{3/2}`.
    pub bound3: f64,
    pub bound3_se: f64,
}

impl CltRow {
    fn within(lhs: f64, bound: f64, se_a: f64, se_b: f64, k: f64) -> bool {
        lhs <= bound + k * (se_a * se_a + se_b * se_b).sqrt()
    }

    pub fn second_holds(&self, k: f64) -> bool {
        Self::within(self.lhs2, self.bound2, self.lhs2_se, self.bound2_se, k)
    }

    pub fn third_holds(&self, k: f64) -> bool {
        Self::within(self.lhs3, self.bound3, self.lhs3_se, self.bound3_se, k)
    }
}

/// Evaluates both martingale CLT inequalities on samples of `(M_t, ⟨M⟩_t, M_τ)`;
/// each sample is compared with `σW_t` for its own environment's `σ²`.
pub fn clt_distance(samples: &[MartingaleSample], t: f64, functions: &[TestFunction]) -> Result<Vec<CltRow>> {
    ensure(samples.len() >= 2, "samples", samples.len(), "needs at least 2 samples")?;
    ensure(t.is_finite() && t > 0.0, "t", t, "must be positive")?;
    if let Some(s) = samples.iter().find(|s| !(s.sigma2.is_finite() && s.sigma2 >= 0.0)) {
        return Err(Error::invalid("sigma2", s.sigma2, "must be non-negative"));
    }
    let gap: Vec<f64> = samples.iter().map(|s| s.qv - s.sigma2 * t).collect();
    let fix = |s: f64| if s.is_nan() { 0.0 } else { s };
    functions
        .iter()
        .map(|f| {
            f.validate()?;
            let v2: Vec<f64> = samples.iter().map(|s| f.eval(s.m).0 - f.gaussian_mean(s.sigma2 * t)).collect();
            let v3: Vec<f64> = samples
                .iter()
                .zip(&gap)
                .zip(&v2)
                .map(|((s, g), v)| v - 0.5 * f.eval(s.m_tau).1 * g)
                .collect();
            let b2: Vec<f64> = gap.iter().map(|g| f.second_bound() * g.abs()).collect();
            let b3: Vec<f64> = gap
                .iter()
                .map(|g| THIRD_ORDER_CONSTANT * f.third_bound() * g.abs().powf(1.5))
                .collect();
            let (m2, s2) = stats::mean_se(&v2);
            let (m3, s3) = stats::mean_se(&v3);
            let (c2, cs2) = stats::mean_se(&b2);
            let (c3, cs3) = stats::mean_se(&b3);
            Ok(CltRow {
                function: *f,
                lhs2: m2.abs(),
                lhs2_se: fix(s2),
                bound2: c2,
                bound2_se: fix(cs2),
                lhs3: m3.abs(),
                lhs3_se: fix(s3),
                bound3: c3,
                bound3_se: fix(cs3),
            })
        })
        .collect()
}

/// Direct lattice sums `Σ_k (1∧|k|^{-p})(1∧|x-k|^{-p})` and their ratio to
/// the reference profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionSum {
    pub d: usize,
    pub p: usize,
    /// Sums against `|x|`.
    pub curve: DecayCurve,
    /// `1 ∧ |x|^{2-d}` for `p = d-1`, `1 ∧ log(2+|x|)/|x|^d` for `p = d`.
    pub bound: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Relative change between partition radii `ρ` and `1.5ρ`.
    pub truncation: Vec<f64>,
}

impl ConvolutionSum {
    /// `max ratio / min ratio`.
    pub fn spread(&self) -> f64 {
        let hi = self.ratio.iter().cloned().fold(f64::MIN, f64::max);
        let lo = self.ratio.iter().cloned().fold(f64::MAX, f64::min);
        hi / lo
    }
}

/// Width of the smooth partition transition, in lattice units.
const PARTITION_WIDTH: f64 = 1.5;

fn kernel(r: f64, p: i32) -> f64 {
    if r <= 1.0 {
        1.0
    } else {
        r.powi(-p)
    }
}

/// Smooth indicator of `r < ρ`.
fn near(r: f64, rho: f64) -> f64 {
    0.5 * erfc((r - rho) / PARTITION_WIDTH)
}

/// Lattice sum split by a smooth partition of unity: exact summation close to
/// the two singular points, and an integral for the smooth remainder, where the
/// lattice-versus-integral error is spectrally small.
fn convolution_at(d: usize, p: i32, x: f64, rho: f64) -> f64 {
    let chi = |r0: f64, rx: f64| (1.0 - near(r0, rho)) * (1.0 - near(rx, rho));
    // discrete part: union of the two balls where 1 - chi is non-negligible
    let reach = rho + 8.0 * PARTITION_WIDTH;
    let m = reach.ceil() as i64;
    let xi = x.round() as i64;
    let lo0 = -m;
    let hi0 = xi.max(0) + m;
    let planes: Vec<f64> = (lo0..=hi0)
        .into_par_iter()
        .map(|k0| {
            let mut acc = Vec::new();
            let mut idx = vec![-m; d - 1];
            loop {
                let mut q = 0.0;
                for v in &idx {
                    q += (*v * *v) as f64;
                }
                let r0 = ((k0 * k0) as f64 + q).sqrt();
                let dx = k0 as f64 - x;
                let rx = (dx * dx + q).sqrt();
                if r0 <= reach || rx <= reach {
                    let w = 1.0 - chi(r0, rx);
                    if w != 0.0 {
                        acc.push(w * kernel(r0, p) * kernel(rx, p));
                    }
                }
                // odometer over the transverse coordinates
                let mut a = 0;
                loop {
                    if a == d - 1 {
                        return stats::pairwise_sum(&acc);
                    }
                    idx[a] += 1;
                    if idx[a] <= m {
                        break;
                    }
                    idx[a] = -m;
                    a += 1;
                }
            }
        })
        .collect();
    let discrete = stats::pairwise_sum(&planes);

    // continuum part in polar coordinates about the origin, axis along x
    let (gx, gw) = stats::gauss_legendre(16);
    let dm = d as f64;
    let shell = sphere_area(d - 1);
    let mut thetas = vec![0.0];
    for k in (0..=14).rev() {
        thetas.push(PI * 0.5f64.powi(k));
    }
    let theta_pan: Vec<(f64, f64)> = thetas.windows(2).map(|w| (w[0], w[1])).collect();
    let angular = |r: f64| -> f64 {
        let mut s = 0.0;
        for &(a, b) in &theta_pan {
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            for (u, w) in gx.iter().zip(&gw) {
                let th = c + h * u;
                let rx = (r * r + x * x - 2.0 * r * x * th.cos()).max(0.0).sqrt();
                s += h * w * th.sin().powi(d as i32 - 2) * chi(r, rx) * kernel(rx, p);
            }
        }
        shell * s * r.powf(dm - 1.0) * kernel(r, p)
    };
    let r_lo = (rho - 8.0 * PARTITION_WIDTH).max(0.0);
    let r_hi = x + rho + 8.0 * PARTITION_WIDTH;
    let n_pan = ((r_hi - r_lo) / PARTITION_WIDTH).ceil() as usize;
    let hpan = (r_hi - r_lo) / n_pan as f64;
    let near_part: Vec<f64> = (0..n_pan)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (r_lo + i as f64 * hpan, r_lo + (i + 1) as f64 * hpan);
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            gx.iter().zip(&gw).map(|(u, w)| h * w * angular(c + h * u)).sum::<f64>()
        })
        .collect();
    // tail r > r_hi through u = r_hi / r
    let tail_pan = 8;
    let tail: Vec<f64> = (0..tail_pan)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (i as f64 / tail_pan as f64, (i + 1) as f64 / tail_pan as f64);
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            gx.iter()
                .zip(&gw)
                .map(|(u, w)| {
                    let s = c + h * u;
                    h * w * angular(r_hi / s) * r_hi / (s * s)
                })
                .sum::<f64>()
        })
        .collect();
    discrete + stats::pairwise_sum(&near_part) + stats::pairwise_sum(&tail)
}

/// Reference profile of the convolution bound.
pub fn convolution_bound(d: usize, p: usize, x: f64) -> f64 {
    if p + 1 == d {
        1f64.min(x.powi(2 - d as i32))
    } else {
        1f64.min((2.0 + x).ln() / x.powi(d as i32))
    }
}

/// Sums at distances `|x|` along the first axis, comparing partition radii
/// `ρ` and `1.5ρ`; fails if they differ by more than 1%.
pub fn convolution_power_sum(d: usize, p: usize, distances: &[f64], rho: f64) -> Result<ConvolutionSum> {
    ensure(d >= 3, "d", d, "must be at least 3")?;
    ensure(p + 1 == d || p == d, "p", p, "must be d-1 or d")?;
    ensure(rho.is_finite() && rho >= 4.0 * PARTITION_WIDTH, "rho", rho, "must be at least 6")?;
    ensure(
        distances.iter().all(|x| x.is_finite() && *x >= 0.0),
        "distances",
        format!("{distances:?}"),
        "must be non-negative",
    )?;
    let mut values = Vec::with_capacity(distances.len());
    let mut truncation = Vec::with_capacity(distances.len());
    for &x in distances {
        let a = convolution_at(d, p as i32, x, rho);
        let b = convolution_at(d, p as i32, x, 1.5 * rho);
        let err = (a - b).abs();
        if err > 0.01 * b.abs() {
            return Err(Error::EnlargeRadius { error: err, value: b });
        }
        values.push(b);
        truncation.push(err / b.abs());
    }
    let bound: Vec<f64> = distances.iter().map(|&x| convolution_bound(d, p, x)).collect();
    let ratio: Vec<f64> = values.iter().zip(&bound).map(|(v, b)| v / b).collect();
    let reference = if p + 1 == d { 2.0 - d as f64 } else { -(d as f64) };
    let curve = DecayCurve::new(distances.to_vec(), values, vec![0.0; distances.len()])?.with_reference(reference);
    Ok(ConvolutionSum {
        d,
        p,
        curve,
        bound,
        ratio,
        truncation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_third_derivative_peak() {
        let f = |u: f64| ((3.0 * u - u * u * u) * (-0.5 * u * u).exp()).abs();
        let grid_max = (0..400_000).map(|i| f(i as f64 * 1e-5)).fold(0.0, f64::max);
        assert!((gaussian_third_peak() - grid_max).abs() < 1e-9);
        assert!((gaussian_third_peak() - 1.3802).abs() < 1e-4);
    }

    #[test]
    fn brute_force_sum_matches_partition() {
        // p = d: the direct sum converges fast enough to brute-force
        let (d, p, x) = (3usize, 3i32, 10.0);
        let r = 120i64;
        let mut s = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    let q = (a * a + b * b + c * c) as f64;
                    if q > (r * r) as f64 {
                        continue;
                    }
                    let dx = a as f64 - x;
                    s += kernel(q.sqrt(), p) * kernel((dx * dx + (b * b + c * c) as f64).sqrt(), p);
                }
            }
        }
        // tail beyond r: ∫ 4π r² r^{-6} ≈ 4π / (3 r³)
        s += 4.0 * PI / (3.0 * (r as f64).powi(3));
        let v = convolution_at(d, p, x, 9.0);
        assert!((v - s).abs() < 1e-4 * s, "{v} vs {s}");
    }
}
