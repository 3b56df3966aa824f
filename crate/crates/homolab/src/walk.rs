//! Diffusions in a frozen environment: Euler–Maruyama paths, the corrector
//! decomposition of their displacement, and statistics of the environment
//! seen from the particle.
//!
//! Paths live at unit scale; the diffusive rescaling `ε X_{t/ε²}` is applied
//! afterwards. Every path draws from its own counter-based stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::CorrectorSet;
use crate::diagnostics::DecayCurve;
use crate::error::{ensure, Error, Result};
use crate::field::{CoefficientField, MAX_D};
use crate::forward::InitialDatum;
use crate::lattice::{self, GridFunction};
use crate::{rng, stats};

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    #[inline]
    fn get(&self) -> f64 {
        self.s + self.c
    }
}

/// What drives the particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    /// `dX = b dt + √a dB`.
    Diffusion,
    /// `dX = dB`, the independent-Brownian surrogate.
    Brownian,
}

/// Simulated trajectory at unit scale, optionally with its decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub d: usize,
    pub dt: f64,
    pub seed: u64,
    /// `(steps + 1) × d` lifted positions (no wrapping).
    pub positions: Vec<f64>,
    /// `steps × d` Brownian increments.
    pub increments: Vec<f64>,
    pub decomposition: Option<Decomposition>,
}

/// `ξ·(X_n - X_0) = R_n + M_n` at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub xi: Vec<f64>,
    pub lambda: f64,
    /// Itô sum `Σ (ξ + ∇φ)·σ ΔB`.
    pub m: Vec<f64>,
    /// Remainder `Σ (ξ·b Δt - ∇φ·σ ΔB)`.
    pub r: Vec<f64>,
    /// `⟨M⟩_n = Σ (ξ+∇φ)ᵀ a (ξ+∇φ) Δt`.
    pub qv: Vec<f64>,
    /// Corrector part of the remainder: `-(φ(X_n) - φ(X_0)) + λ Σ φ Δt`.
    pub corrector_part: Vec<f64>,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.increments.len() / self.d
    }

    pub fn position(&self, n: usize) -> &[f64] {
        &self.positions[n * self.d..(n + 1) * self.d]
    }

    /// Number of torus windings of each coordinate at step `n`.
    pub fn winding(&self, n: usize, l: f64) -> Vec<i64> {
        self.position(n).iter().map(|x| (x / l).floor() as i64).collect()
    }

    /// Largest `|ξ·(X_n - X_0) - R_n - M_n|` over the path.
    pub fn telescoping_residual(&self) -> Option<f64> {
        let dec = self.decomposition.as_ref()?;
        let x0 = self.position(0).to_vec();
        let mut worst = 0.0f64;
        for n in 0..=self.steps() {
            let disp: f64 = self.position(n).iter().zip(&x0).zip(&dec.xi).map(|((x, a), k)| k * (x - a)).sum();
            worst = worst.max((disp - dec.r[n] - dec.m[n]).abs());
        }
        Some(worst)
    }
}

impl Decomposition {
    /// Time-discretization defect `R_n` minus its corrector part.
    pub fn defect(&self, n: usize) -> f64 {
        self.r[n] - self.corrector_part[n]
    }

    /// `(M^ε, R^ε, ⟨M^ε⟩)` at unit step `n`, i.e. at time `n Δt ε²`.
    pub fn scaled(&self, eps: f64, n: usize) -> (f64, f64, f64) {
        (eps * self.m[n], eps * self.r[n], eps * eps * self.qv[n])
    }
}

/// Corrector data needed along a path.
#[derive(Clone, Debug)]
pub struct Observer {
    pub xi: Vec<f64>,
    pub lambda: f64,
    phi: GridFunction,
}

impl Observer {
    pub fn new(set: &CorrectorSet, field: &CoefficientField, xi: &[f64]) -> Result<Self> {
        let d = set.d();
        ensure(xi.len() == d, "xi", xi.len(), "needs d components")?;
        ensure(set.phi.len() == d, "correctors", set.phi.len(), "correctors are missing")?;
        ensure(field.d() == d, "d", field.d(), "field and correctors differ in dimension")?;
        ensure(
            (set.grid().l - field.box_length()).abs() <= 1e-12 * field.box_length(),
            "correctors",
            set.grid().l,
            "corrector lattice period must equal the field period",
        )?;
        Ok(Observer {
            xi: xi.to_vec(),
            lambda: set.lambda,
            phi: set.phi_direction(xi),
        })
    }

    #[inline]
    fn phi(&self, x: &[f64]) -> (f64, [f64; MAX_D]) {
        lattice::interpolate(&self.phi.grid, &self.phi.values, x)
    }
}

/// Scalar functional of the environment seen from the particle.
#[derive(Clone, Debug)]
pub enum Functional {
    Zero,
    /// `φ_ξ`.
    Phi(Vec<f64>),
    /// `ψ_ξ`.
    Psi(Vec<f64>),
    /// Any lattice function (interpolated).
    Grid(GridFunction),
}

impl Functional {
    /// Lattice data evaluated along paths (`None` for the zero functional).
    pub fn lattice(&self, set: &CorrectorSet) -> Result<Option<GridFunction>> {
        let d = set.d();
        Ok(match self {
            Functional::Zero => None,
            Functional::Phi(xi) => {
                ensure(xi.len() == d, "xi", xi.len(), "needs d components")?;
                Some(set.phi_direction(xi))
            }
            Functional::Psi(xi) => {
                ensure(xi.len() == d, "xi", xi.len(), "needs d components")?;
                Some(set.psi_direction(xi))
            }
            Functional::Grid(g) => {
                ensure(g.grid.d == d && g.is_scalar(), "functional", g.grid.d, "must be scalar lattice data of dimension d")?;
                Some(g.clone())
            }
        })
    }
}

#[inline]
fn eval_g(g: &Option<GridFunction>, x: &[f64]) -> f64 {
    match g {
        None => 0.0,
        Some(g) => lattice::interpolate(&g.grid, &g.values, x).0,
    }
}

fn check_time(dt: f64, t: f64) -> Result<usize> {
    ensure(dt.is_finite() && dt > 0.0, "dt", dt, "must be positive")?;
    ensure(t.is_finite() && t >= 0.0, "t_final", t, "must be non-negative")?;
    let s = t / dt;
    ensure((s - s.round()).abs() <= 1e-9 * s.max(1.0), "dt", dt, "t_final must be a whole number of steps")?;
    Ok(s.round() as usize)
}

/// One Euler–Maruyama step: draws `ΔB`, evaluates `a`, `b` at `x` and advances.
#[inline]
#[allow(clippy::too_many_arguments)]
fn em_step(
    field: &CoefficientField,
    dyn_: Dynamics,
    x: &mut [Sum; MAX_D],
    d: usize,
    dt: f64,
    r: &mut ChaCha8Rng,
    a: &mut [f64; MAX_D],
    b: &mut [f64; MAX_D],
    db: &mut [f64; MAX_D],
) {
    let sdt = dt.sqrt();
    let mut pos = [0.0; MAX_D];
    for j in 0..d {
        pos[j] = x[j].get();
        db[j] = sdt * r.sample::<f64, _>(StandardNormal);
    }
    match dyn_ {
        Dynamics::Diffusion => field.eval_diag(&pos[..d], &mut a[..d], &mut b[..d]),
        Dynamics::Brownian => {
            a[..d].fill(1.0);
            b[..d].fill(0.0);
        }
    }
    for j in 0..d {
        x[j].add(b[j] * dt + a[j].sqrt() * db[j]);
    }
}

fn blowup(step: usize, x: &[Sum; MAX_D], d: usize) -> Result<()> {
    if (0..d).all(|j| x[j].get().is_finite()) {
        Ok(())
    } else {
        Err(Error::SimulationBlowup {
            step,
            state: format!("{:?}", (0..d).map(|j| x[j].get()).collect::<Vec<_>>()),
        })
    }
}

/// Euler–Maruyama path of `dX = b dt + σ dB`, `σ = √a` (diagonal fields).
pub fn simulate_path(field: &CoefficientField, x0: &[f64], dt: f64, t_final: f64, seed: u64) -> Result<PathBundle> {
    simulate_with(field, x0, dt, t_final, seed, &mut rng::stream(seed, 0), Dynamics::Diffusion)
}

fn simulate_with(field: &CoefficientField, x0: &[f64], dt: f64, t_final: f64, seed: u64, r: &mut ChaCha8Rng, dyn_: Dynamics) -> Result<PathBundle> {
    let d = field.d();
    ensure(x0.len() == d, "x0", x0.len(), "needs d components")?;
    ensure(x0.iter().all(|v| v.is_finite()), "x0", format!("{x0:?}"), "must be finite")?;
    let steps = check_time(dt, t_final)?;
    let mut x = [Sum::default(); MAX_D];
    for j in 0..d {
        x[j].add(x0[j]);
    }
    let mut positions = Vec::with_capacity((steps + 1) * d);
    let mut increments = Vec::with_capacity(steps * d);
    positions.extend_from_slice(x0);
    let (mut a, mut b, mut db) = ([0.0; MAX_D], [0.0; MAX_D], [0.0; MAX_D]);
    for n in 0..steps {
        em_step(field, dyn_, &mut x, d, dt, r, &mut a, &mut b, &mut db);
        blowup(n + 1, &x, d)?;
        increments.extend_from_slice(&db[..d]);
        positions.extend((0..d).map(|j| x[j].get()));
    }
    Ok(PathBundle {
        d,
        dt,
        seed,
        positions,
        increments,
        decomposition: None,
    })
}

/// Fills in `M`, `R`, `⟨M⟩` along a stored path, re-using its increments.
pub fn decompose(path: &PathBundle, field: &CoefficientField, set: &CorrectorSet, xi: &[f64]) -> Result<PathBundle> {
    let obs = Observer::new(set, field, xi)?;
    let d = path.d;
    let n = path.steps();
    let (mut a, mut b) = ([0.0; MAX_D], [0.0; MAX_D]);
    let (mut m, mut r, mut qv, mut lam) = (Sum::default(), Sum::default(), Sum::default(), Sum::default());
    let mut out = Decomposition {
        xi: xi.to_vec(),
        lambda: obs.lambda,
        m: vec![0.0; n + 1],
        r: vec![0.0; n + 1],
        qv: vec![0.0; n + 1],
        corrector_part: vec![0.0; n + 1],
    };
    let phi0 = obs.phi(path.position(0)).0;
    for k in 0..n {
        let x = path.position(k);
        field.eval_diag(x, &mut a[..d], &mut b[..d]);
        let (p, gp) = obs.phi(x);
        let db = &path.increments[k * d..(k + 1) * d];
        let inc = increments(&obs.xi, &a, &b, &gp, db, path.dt, d);
        m.add(inc.0);
        r.add(inc.1);
        qv.add(inc.2);
        lam.add(obs.lambda * p * path.dt);
        out.m[k + 1] = m.get();
        out.r[k + 1] = r.get();
        out.qv[k + 1] = qv.get();
        out.corrector_part[k + 1] = -(obs.phi(path.position(k + 1)).0 - phi0) + lam.get();
    }
    let mut p = path.clone();
    p.decomposition = Some(out);
    Ok(p)
}

/// Per-step `(ΔM, ΔR, Δ⟨M⟩)`.
#[inline]
fn increments(xi: &[f64], a: &[f64; MAX_D], b: &[f64; MAX_D], gp: &[f64; MAX_D], db: &[f64], dt: f64, d: usize) -> (f64, f64, f64) {
    let (mut dm, mut dr, mut dq) = (0.0, 0.0, 0.0);
    for j in 0..d {
        let s = a[j].sqrt();
        dm += (xi[j] + gp[j]) * s * db[j];
        dr += xi[j] * b[j] * dt - gp[j] * s * db[j];
        dq += (xi[j] + gp[j]) * (xi[j] + gp[j]) * a[j] * dt;
    }
    (dm, dr, dq)
}

/// Summary of one decomposed path, computed without storing the trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub x0: Vec<f64>,
    pub x_end: Vec<f64>,
    pub m: f64,
    pub r: f64,
    pub qv: f64,
    pub corrector_part: f64,
    /// Largest telescoping residual over the path.
    pub telescoping: f64,
    /// `M` at the last step with `⟨M⟩ ≤ qv_cap`.
    pub m_tau: f64,
    /// `(M, ⟨M⟩)` at the checkpoint steps.
    pub checkpoints: Vec<(f64, f64)>,
}

/// Streams a decomposed path from `x0` for `steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_decomposed(
    field: &CoefficientField,
    obs: &Observer,
    x0: &[f64],
    dt: f64,
    steps: usize,
    r: &mut ChaCha8Rng,
    qv_cap: f64,
    checkpoints: &[usize],
) -> Result<PathRecord> {
    let d = field.d();
    let mut x = [Sum::default(); MAX_D];
    for j in 0..d {
        x[j].add(x0[j]);
    }
    let (mut a, mut b, mut db) = ([0.0; MAX_D], [0.0; MAX_D], [0.0; MAX_D]);
    let (mut m, mut rr, mut qv, mut lam) = (Sum::default(), Sum::default(), Sum::default(), Sum::default());
    let phi0 = obs.phi(x0).0;
    let mut worst = 0.0f64;
    let mut m_tau = 0.0;
    let mut cps = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    while next_cp < checkpoints.len() && checkpoints[next_cp] == 0 {
        cps.push((0.0, 0.0));
        next_cp += 1;
    }
    let mut pos = [0.0; MAX_D];
    for n in 0..steps {
        for j in 0..d {
            pos[j] = x[j].get();
        }
        let (p, gp) = obs.phi(&pos[..d]);
        em_step(field, Dynamics::Diffusion, &mut x, d, dt, r, &mut a, &mut b, &mut db);
        blowup(n + 1, &x, d)?;
        let inc = increments(&obs.xi, &a, &b, &gp, &db[..d], dt, d);
        m.add(inc.0);
        rr.add(inc.1);
        if qv.get() <= qv_cap {
            m_tau = m.get() - inc.0;
        }
        qv.add(inc.2);
        lam.add(obs.lambda * p * dt);
        let disp: f64 = (0..d).map(|j| obs.xi[j] * (x[j].get() - x0[j])).sum();
        worst = worst.max((disp - rr.get() - m.get()).abs());
        while next_cp < checkpoints.len() && checkpoints[next_cp] == n + 1 {
            cps.push((m.get(), qv.get()));
            next_cp += 1;
        }
    }
    if qv.get() <= qv_cap {
        m_tau = m.get();
    }
    let x_end: Vec<f64> = (0..d).map(|j| x[j].get()).collect();
    let corrector_part = -(obs.phi(&x_end).0 - phi0) + lam.get();
    Ok(PathRecord {
        x0: x0.to_vec(),
        x_end,
        m: m.get(),
        r: rr.get(),
        qv: qv.get(),
        corrector_part,
        telescoping: worst,
        m_tau,
        checkpoints: cps,
    })
}

/// Monte Carlo estimate of `u_ε(t, x) = E f(ε X_{t/ε²})`, `X_0 = x/ε`, with its standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_solution(field: &CoefficientField, eps: f64, f: &InitialDatum, t: f64, x: &[f64], n_paths: usize, dt: f64, seed: u64) -> Result<(f64, f64)> {
    let d = field.d();
    ensure(n_paths >= 2, "n_paths", n_paths, "must be at least 2")?;
    ensure(eps.is_finite() && eps > 0.0, "eps", eps, "must be positive")?;
    ensure(x.len() == d && f.d() == d, "x", x.len(), "needs d components")?;
    let steps = check_time(dt, t / (eps * eps))?;
    let y0: Vec<f64> = x.iter().map(|v| v / eps).collect();
    let vals: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream2(seed, 0, p as u64);
            let mut xs = [Sum::default(); MAX_D];
            for j in 0..d {
                xs[j].add(y0[j]);
            }
            let (mut a, mut b, mut db) = ([0.0; MAX_D], [0.0; MAX_D], [0.0; MAX_D]);
            for n in 0..steps {
                em_step(field, Dynamics::Diffusion, &mut xs, d, dt, &mut r, &mut a, &mut b, &mut db);
                blowup(n + 1, &xs, d)?;
            }
            let end: Vec<f64> = (0..d).map(|j| eps * xs[j].get()).collect();
            Ok(f.value(&end))
        })
        .collect();
    let vals = vals.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean_se(&vals))
}

/// One environment for ensemble statistics: a field, its correctors and a start point.
#[derive(Clone, Copy, Debug)]
pub struct Environment<'a> {
    pub field: &'a CoefficientField,
    pub set: &'a CorrectorSet,
    pub x0: &'a [f64],
}

fn record_steps(dt: f64, times: &[f64]) -> Result<Vec<usize>> {
    let mut prev = -1.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        ensure(t > prev, "times", t, "must be strictly increasing")?;
        prev = t;
        out.push(check_time(dt, t)?);
    }
    Ok(out)
}

/// Samples `g(ω_{t_k})` along `n_paths` paths in one environment.
fn functional_samples(
    env: &Environment,
    g: &Option<GridFunction>,
    at: &[usize],
    dt: f64,
    n_paths: usize,
    seed: u64,
    env_index: usize,
    dyn_: Dynamics,
    integral: bool,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = env.field.d();
    let last = at.last().copied().unwrap_or(0);
    let per: Vec<Result<(Vec<f64>, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream2(seed, env_index as u64, p as u64);
            let mut x = [Sum::default(); MAX_D];
            for j in 0..d {
                x[j].add(env.x0[j]);
            }
            let (mut a, mut b, mut db) = ([0.0; MAX_D], [0.0; MAX_D], [0.0; MAX_D]);
            let mut vals = Vec::with_capacity(at.len());
            let mut next = 0;
            let mut int = Sum::default();
            let mut pos = [0.0; MAX_D];
            for n in 0..=last {
                if next < at.len() && at[next] == n || integral && n < last {
                    for j in 0..d {
                        pos[j] = x[j].get();
                    }
                    let v = eval_g(g, &pos[..d]);
                    if integral && n < last {
                        int.add(v * dt);
                    }
                    while next < at.len() && at[next] == n {
                        vals.push(v);
                        next += 1;
                    }
                }
                if n < last {
                    em_step(env.field, dyn_, &mut x, d, dt, &mut r, &mut a, &mut b, &mut db);
                    blowup(n + 1, &x, d)?;
                }
            }
            Ok((vals, int.get()))
        })
        .collect();
    let mut by_time = vec![Vec::with_capacity(n_paths); at.len()];
    let mut ints = Vec::with_capacity(n_paths);
    for p in per {
        let (v, i) = p?;
        for (k, x) in v.into_iter().enumerate() {
            by_time[k].push(x);
        }
        ints.push(i);
    }
    Ok((by_time, ints))
}

/// Variance decay `E{|E_B g(ω_t)|²}`: inner Brownian mean over `n_paths`
/// (unbiased square), outer mean over environments with its standard error.
pub fn env_decay(
    envs: &[Environment],
    functional: &Functional,
    times: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    dynamics: Dynamics,
) -> Result<DecayCurve> {
    ensure(!envs.is_empty(), "n_envs", 0, "needs at least one environment")?;
    let per_env = envs
        .iter()
        .enumerate()
        .map(|(e, env)| env_decay_member(env, e, functional, times, n_paths, dt, seed, dynamics))
        .collect::<Result<Vec<_>>>()?;
    DecayCurve::from_members(times.to_vec(), &per_env)
}

/// `|E_B g(ω_t)|²` at each time for environment number `index` of an ensemble;
/// paths use the substreams `(seed, index, path)`.
#[allow(clippy::too_many_arguments)]
pub fn env_decay_member(
    env: &Environment,
    index: usize,
    functional: &Functional,
    times: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
    dynamics: Dynamics,
) -> Result<Vec<f64>> {
    ensure(n_paths >= 2, "n_paths", n_paths, "must be at least 2")?;
    let at = record_steps(dt, times)?;
    let g = functional.lattice(env.set)?;
    let (by_time, _) = functional_samples(env, &g, &at, dt, n_paths, seed, index, dynamics, false)?;
    Ok(by_time.iter().map(|v| stats::squared_mean_unbiased(v)).collect())
}

/// Both sides of `E E_B{(∫₀^t g(ω_s) ds)²} ≤ 2t ∫₀^t E{|E_B g(ω_{s/2})|²} ds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentCheck {
    pub t: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// Standard error of the paired difference `rhs - lhs`.
    pub diff_se: f64,
}

impl SecondMomentCheck {
    /// Inequality holds up to `k` standard errors of the difference.
    pub fn holds(&self, k: f64) -> bool {
        self.lhs <= self.rhs + k * self.diff_se
    }
}

/// Estimates both sides of the second-moment bound; the decay curve is sampled
/// every `stride` steps on `[0, t/2]` and integrated by the trapezoid rule.
#[allow(clippy::too_many_arguments)]
pub fn second_moment_check(
    envs: &[Environment],
    functional: &Functional,
    t: f64,
    n_paths: usize,
    dt: f64,
    stride: usize,
    seed: u64,
) -> Result<SecondMomentCheck> {
    ensure(!envs.is_empty(), "n_envs", 0, "needs at least one environment")?;
    ensure(n_paths >= 2, "n_paths", n_paths, "must be at least 2")?;
    ensure(stride >= 1, "stride", stride, "must be positive")?;
    let steps = check_time(dt, t)?;
    ensure(steps % (2 * stride) == 0, "stride", stride, "t/2 must be a whole number of strides")?;
    let half = steps / 2;
    let mut at: Vec<usize> = (0..=half).step_by(stride).collect();
    at.push(steps);
    let h = stride as f64 * dt;
    let per: Vec<Result<(f64, f64)>> = envs
        .iter()
        .enumerate()
        .map(|(e, env)| {
            let g = functional.lattice(env.set)?;
            let (by_time, ints) = functional_samples(env, &g, &at, dt, n_paths, seed, e, Dynamics::Diffusion, true)?;
            let lhs = stats::mean(&ints.iter().map(|v| v * v).collect::<Vec<_>>());
            let dvals: Vec<f64> = by_time[..at.len() - 1].iter().map(|v| stats::squared_mean_unbiased(v)).collect();
            let mut trap = 0.0;
            for w in dvals.windows(2) {
                trap += 0.5 * h * (w[0] + w[1]);
            }
            // ∫₀^t D(s/2) ds = 2 ∫₀^{t/2} D(u) du
            Ok((lhs, 2.0 * t * 2.0 * trap))
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let lhs: Vec<f64> = per.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = per.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = per.iter().map(|p| p.1 - p.0).collect();
    let fix = |s: f64| if s.is_nan() { 0.0 } else { s };
    let (l, ls) = stats::mean_se(&lhs);
    let (r, rs) = stats::mean_se(&rhs);
    let (_, ds) = stats::mean_se(&diff);
    Ok(SecondMomentCheck {
        t,
        lhs: l,
        lhs_se: fix(ls),
        rhs: r,
        rhs_se: fix(rs),
        diff_se: fix(ds),
    })
}

/// Samples of the rescaled martingale at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSample {
    /// `ξᵀĀξ` of the environment the path ran in.
    pub sigma2: f64,
    pub m: f64,
    pub qv: f64,
    /// `M^ε_τ`, `τ = sup{s ≤ t : ⟨M^ε⟩_s ≤ σ²t}`.
    pub m_tau: f64,
    /// `ξ·(ε X_{t/ε²} - x)`.
    pub displacement: f64,
    pub remainder: f64,
    pub telescoping: f64,
    /// `(M^ε, ⟨M^ε⟩)` at the window boundaries.
    pub windows: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleOptions {
    pub xi: Vec<f64>,
    pub eps: f64,
    pub t: f64,
    pub dt: f64,
    pub n_paths: usize,
    /// Number of equal windows recorded for the martingale-property check.
    pub windows: usize,
}

/// Decomposed paths in each environment (`n_paths` per environment), rescaled by `ε`.
pub fn martingale_samples(envs: &[Environment], opts: &MartingaleOptions, seed: u64) -> Result<Vec<MartingaleSample>> {
    ensure(!envs.is_empty(), "n_envs", 0, "needs at least one environment")?;
    ensure(opts.n_paths >= 1, "n_paths", opts.n_paths, "must be positive")?;
    ensure(opts.eps.is_finite() && opts.eps > 0.0, "eps", opts.eps, "must be positive")?;
    let eps2 = opts.eps * opts.eps;
    let steps = check_time(opts.dt, opts.t / eps2)?;
    let w = opts.windows.max(1);
    ensure(steps % w == 0, "windows", w, "must divide the number of steps")?;
    let cps: Vec<usize> = (0..=w).map(|k| k * steps / w).collect();
    let mut out = Vec::with_capacity(envs.len() * opts.n_paths);
    for (e, env) in envs.iter().enumerate() {
        let obs = Observer::new(env.set, env.field, &opts.xi)?;
        let sigma2 = env.set.sigma2(&opts.xi);
        let cap = sigma2 * opts.t / eps2;
        let recs: Vec<Result<PathRecord>> = (0..opts.n_paths)
            .into_par_iter()
            .map(|p| {
                let mut r = rng::stream2(seed, e as u64, p as u64);
                run_decomposed(env.field, &obs, env.x0, opts.dt, steps, &mut r, cap, &cps)
            })
            .collect();
        for rec in recs {
            let rec = rec?;
            let disp: f64 = rec.x_end.iter().zip(&rec.x0).zip(&opts.xi).map(|((a, b), k)| k * (a - b)).sum();
            out.push(MartingaleSample {
                sigma2,
                m: opts.eps * rec.m,
                qv: eps2 * rec.qv,
                m_tau: opts.eps * rec.m_tau,
                displacement: opts.eps * disp,
                remainder: opts.eps * rec.r,
                telescoping: opts.eps * rec.telescoping,
                windows: rec.checkpoints.iter().map(|(m, q)| (opts.eps * m, eps2 * q)).collect(),
            });
        }
    }
    Ok(out)
}

/// Martingale-property surrogate on one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub mean: f64,
    pub mean_se: f64,
    /// Empirical `E (ΔM)²`.
    pub second_moment: f64,
    /// Mean `Δ⟨M⟩`.
    pub qv_increment: f64,
    /// Standard error of `(ΔM)² - Δ⟨M⟩`.
    pub gap_se: f64,
}

impl WindowStat {
    pub fn consistent(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.mean_se && (self.second_moment - self.qv_increment).abs() <= k * self.gap_se
    }
}

/// Increment statistics of `M` over the recorded windows.
pub fn window_stats(samples: &[MartingaleSample]) -> Vec<WindowStat> {
    let w = samples.first().map_or(0, |s| s.windows.len().saturating_sub(1));
    (0..w)
        .map(|k| {
            let dm: Vec<f64> = samples.iter().map(|s| s.windows[k + 1].0 - s.windows[k].0).collect();
            let dq: Vec<f64> = samples.iter().map(|s| s.windows[k + 1].1 - s.windows[k].1).collect();
            let gap: Vec<f64> = dm.iter().zip(&dq).map(|(m, q)| m * m - q).collect();
            let (mean, mean_se) = stats::mean_se(&dm);
            let (_, gap_se) = stats::mean_se(&gap);
            WindowStat {
                mean,
                mean_se,
                second_moment: stats::mean(&dm.iter().map(|v| v * v).collect::<Vec<_>>()),
                qv_increment: stats::mean(&dq),
                gap_se,
            }
        })
        .collect()
}

/// Stationary cross-moments `E[g(ω_0) h(ω_s)]` and `E[h(ω_0) g(ω_s)]`; equal in
/// law for a reversible environment process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversibilityCheck {
    pub forward: f64,
    pub backward: f64,
    /// Standard error of the paired difference.
    pub se: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn reversibility_check(
    envs: &[Environment],
    g: &Functional,
    h: &Functional,
    s: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<ReversibilityCheck> {
    ensure(!envs.is_empty(), "n_envs", 0, "needs at least one environment")?;
    let steps = check_time(dt, s)?;
    let mut diffs = Vec::new();
    let mut fw = Vec::new();
    let mut bw = Vec::new();
    for (e, env) in envs.iter().enumerate() {
        let gl = g.lattice(env.set)?;
        let hl = h.lattice(env.set)?;
        let d = env.field.d();
        let recs: Vec<Result<(f64, f64)>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut r = rng::stream2(seed, e as u64, p as u64);
                let mut x = [Sum::default(); MAX_D];
                for j in 0..d {
                    x[j].add(env.x0[j]);
                }
                let (g0, h0) = (eval_g(&gl, env.x0), eval_g(&hl, env.x0));
                let (mut a, mut b, mut db) = ([0.0; MAX_D], [0.0; MAX_D], [0.0; MAX_D]);
                for n in 0..steps {
                    em_step(env.field, Dynamics::Diffusion, &mut x, d, dt, &mut r, &mut a, &mut b, &mut db);
                    blowup(n + 1, &x, d)?;
                }
                let end: Vec<f64> = (0..d).map(|j| x[j].get()).collect();
                Ok((g0 * eval_g(&hl, &end), h0 * eval_g(&gl, &end)))
            })
            .collect();
        for rec in recs {
            let (f, b) = rec?;
            fw.push(f);
            bw.push(b);
            diffs.push(f - b);
        }
    }
    Ok(ReversibilityCheck {
        forward: stats::mean(&fw),
        backward: stats::mean(&bw),
        se: stats::mean_se(&diffs).1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = Sum::default();
        s.add(1.0);
        for _ in 0..10 {
            s.add(1e-16);
        }
        assert!((s.get() - (1.0 + 1e-15)).abs() < 1e-30 + f64::EPSILON * 0.01);
    }

    #[test]
    fn blowup_names_the_step() {
        let field = CoefficientField::constant(2, 1.0, 1.0).unwrap();
        let err = simulate_path(&field, &[f64::NAN, 0.0], 0.1, 1.0, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "x0", .. }));
    }

    #[test]
    fn path_is_reproducible() {
        let field = CoefficientField::constant(2, 2.0, 1.0).unwrap();
        let a = simulate_path(&field, &[0.1, 0.2], 0.01, 1.0, 9).unwrap();
        let b = simulate_path(&field, &[0.1, 0.2], 0.01, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps(), 100);
    }
}
