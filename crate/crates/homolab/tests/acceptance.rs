//! Acceptance gates. One PASS/FAIL line per criterion; pass criterion ids
//! (`C4 C7`) after `--` to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use homolab::corrector::{frobenius, CorrectorOptions, CorrectorSet};
use homolab::diagnostics::{
    clt_distance, convolution_power_sum, decorrelation_member, default_test_functions, resampling_identity, DecayCurve,
};
use homolab::field::{Bump, CoefficientField, Laminate, MarkLaw, PoissonCloud};
use homolab::forward::{
    expansion_report, expansion_report_with, solve_parabolic, CosineMode, ExpansionOptions, ExpansionReport, InitialDatum, ParabolicOptions, Probe,
};
use homolab::lattice::{Grid, Preconditioner};
use homolab::runner::ORIGIN_OFFSET;
use homolab::walk::{
    env_decay_member, martingale_samples, mc_solution, second_moment_check, Dynamics, Environment, Functional, MartingaleOptions,
    MartingaleSample,
};
use homolab::{rng, stats, Result};
use rand::Rng;

type Outcome = Result<(bool, String)>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget_s: f64,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 11] = [
    Criterion { id: "C1", title: "constant-coefficient exactness", budget_s: 60.0, run: c1 },
    Criterion { id: "C2", title: "laminate oracle", budget_s: 120.0, run: c2 },
    Criterion { id: "C3", title: "third-order constants vanish", budget_s: 600.0, run: c3 },
    Criterion { id: "C4", title: "pointwise expansion decay", budget_s: 3600.0, run: c4 },
    Criterion { id: "C5", title: "elliptic transfer", budget_s: 1800.0, run: c5 },
    Criterion { id: "C6", title: "probabilistic representation", budget_s: 600.0, run: c6 },
    Criterion { id: "C7", title: "martingale decomposition", budget_s: 900.0, run: c7 },
    Criterion { id: "C8", title: "decay exponents", budget_s: 7200.0, run: c8 },
    Criterion { id: "C9", title: "resampling identity", budget_s: 600.0, run: c9 },
    Criterion { id: "C10", title: "quantitative CLT bounds", budget_s: 1200.0, run: c10 },
    Criterion { id: "C11", title: "convolution lemma", budget_s: 300.0, run: c11 },
];

const LADDER: [f64; 3] = [0.25, 0.125, 0.0625];
const LAMINATE: Laminate = Laminate { lo: 1.0, hi: 4.0, sharpness: 3.0, beta: None };
// Harmonic mean of the laminate profile (high-order quadrature, frozen).
const LAMINATE_HARMONIC: f64 = 1.760_036_994_349_660_4;

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| only.is_empty() || only.iter().any(|o| o.eq_ignore_ascii_case(c.id))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && secs <= c.budget_s, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {:<4} {}: {detail} [{secs:.1} s of {:.0} s]", c.id, c.title, c.budget_s);
        ran += 1;
        failed += usize::from(!ok);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn offset_grid(d: usize, n: usize, l: f64) -> Result<Grid> {
    let g = Grid::new(d, n, l)?;
    let o: Vec<f64> = ORIGIN_OFFSET[..d].iter().map(|v| v * g.h).collect();
    g.with_origin(&o)
}

fn smooth(d: usize, l: f64, seed: u64) -> Result<CoefficientField> {
    CoefficientField::periodic_smooth(d, l, (1.0, 3.0), 4, 2, 1.0, &[], seed)
}

fn bump(d: usize, l: f64, c_plus: f64, seed: u64) -> Result<CoefficientField> {
    let cloud = PoissonCloud::sample(d, l, 1.0, MarkLaw::default(), seed)?;
    CoefficientField::poisson_bump(cloud, Bump::new(0.5, true), (1.0, c_plus), 4.0, None, &[])
}

fn fourier() -> CorrectorOptions {
    let mut o = CorrectorOptions::default();
    o.solve.preconditioner = Preconditioner::Fourier;
    o
}

fn uniform_starts(n: usize, d: usize, l: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|e| {
            let mut r = rng::stream(seed, e as u64);
            (0..d).map(|_| l * r.random::<f64>()).collect()
        })
        .collect()
}

fn probes_2d() -> Vec<Probe> {
    vec![
        Probe { t: 0.25, x: vec![0.25, 0.5] },
        Probe { t: 1.0, x: vec![0.5, 0.25] },
        Probe { t: 0.25, x: vec![0.75, 0.75] },
    ]
}

fn deterministic_report(field: &CoefficientField, elliptic: bool) -> Result<ExpansionReport> {
    let set = CorrectorSet::compute(field, &offset_grid(2, 8, 1.0)?, &CorrectorOptions::default())?;
    let opts = ExpansionOptions { eps: LADDER.to_vec(), probes: probes_2d(), elliptic, ..Default::default() };
    expansion_report(&[set], &InitialDatum::cosine_product(8.0, &[1, 1], 1.0)?, &opts)
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1() -> Outcome {
    let c = 1.7;
    let mut a_err = 0.0f64;
    let mut set2 = None;
    for d in [2, 3] {
        let f = CoefficientField::constant(d, c, 1.0)?;
        let set = CorrectorSet::compute(&f, &offset_grid(d, 8, 1.0)?, &CorrectorOptions::default())?;
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { c } else { 0.0 };
                a_err = a_err.max((set.a_bar[i * d + j] - expected).abs());
            }
        }
        if d == 2 {
            set2 = Some(set);
        }
    }
    let opts = ExpansionOptions { eps: LADDER.to_vec(), probes: probes_2d(), ..Default::default() };
    let rep = expansion_report(&[set2.expect("d = 2 ran")], &InitialDatum::cosine_product(8.0, &[1, 1], 1.0)?, &opts)?;
    let c_max = rep.rows.iter().fold(0.0f64, |m, r| m.max(r.c_eps.abs()));
    Ok((a_err <= 1e-12 && c_max <= 1e-7, format!("max|Ā - cI| = {a_err:.1e}, max|C_ε| = {c_max:.1e}")))
}

/// `∫₀^x (Ā/α - 1)` by composite Gauss-Legendre, minus the node mean.
fn laminate_phi_oracle(n: usize) -> Vec<f64> {
    let (nodes, weights) = stats::gauss_legendre(20);
    let panel = |a: f64, b: f64| -> f64 {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        nodes.iter().zip(&weights).map(|(t, w)| w * r * (LAMINATE_HARMONIC / LAMINATE.alpha(c + r * t, 1.0).0 - 1.0)).sum()
    };
    let mut v = vec![0.0; n + 1];
    for i in 0..n {
        let (a, b) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
        let s: f64 = (0..8).map(|k| panel(a + (b - a) * k as f64 / 8.0, a + (b - a) * (k + 1) as f64 / 8.0)).sum();
        v[i + 1] = v[i] + s;
    }
    v.pop();
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter().map(|x| x - mean).collect()
}

fn c2() -> Outcome {
    let n = 256;
    let f = CoefficientField::laminate(2, 1.0, LAMINATE)?;
    let g = Grid::new(2, n, 1.0)?;
    let set = CorrectorSet::compute(&f, &g, &CorrectorOptions::default())?;
    let oracle = [LAMINATE_HARMONIC, 0.0, 0.0, 0.5 * (LAMINATE.lo + LAMINATE.hi)];
    let a_err = set.a_bar.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let phi = laminate_phi_oracle(n);
    let phi_err = (0..g.len()).fold(0.0f64, |m, i| m.max((set.phi[0].values[i] - phi[g.coords(i)[0]]).abs()));
    Ok((a_err <= 1e-6 && phi_err <= 1e-6, format!("max|Ā - oracle| = {a_err:.1e}, max|φ - oracle| = {phi_err:.1e}")))
}

fn c3() -> Outcome {
    let cases = [(2, 1.0, 1), (2, 1.0, 2), (2, 2.0, 3), (2, 1.0, 4), (2, 1.0, 5), (3, 1.0, 6)];
    let opts = CorrectorOptions { flux: true, ..Default::default() };
    let mut ok = true;
    let mut finest = Vec::new();
    for (d, l, seed) in cases {
        let f = smooth(d, l, seed)?;
        let (coarse, fine) = if d == 2 { (64, 128) } else { (32, 64) };
        let measure = |n: usize| -> Result<f64> {
            let set = CorrectorSet::compute(&f, &Grid::new(d, n, l)?, &opts)?;
            Ok(set.max_c() / frobenius(&set.a_bar))
        };
        let (mc, mf) = (measure(coarse)?, measure(fine)?);
        ok &= mf <= 1e-5 && mf < mc;
        finest.push(mf);
    }
    Ok((ok, format!("max|c|/‖Ā‖ on the finest grids {}", sci(&finest))))
}

fn c4() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, f) in [("laminate", CoefficientField::laminate(2, 1.0, LAMINATE)?), ("smooth", smooth(2, 1.0, 1)?)] {
        let rep = deterministic_report(&f, false)?;
        let ratios: Vec<f64> = (0..rep.probes.len()).map(|p| rep.decay_ratio(p)).collect();
        ok &= (0..rep.probes.len()).all(|p| rep.strictly_decreasing(p)) && ratios.iter().all(|r| *r <= 0.5);
        notes.push(format!("{name} ratios {}", sci(&ratios)));
    }
    let (z, means) = random_expansion()?;
    ok &= z.iter().all(|v| *v >= 2.0);
    notes.push(format!("random E|C| {} paired z {}", sci(&means), sci(&z)));
    Ok((ok, notes.join("; ")))
}

/// Periodized 3D bump ensemble, built one environment at a time. Returns the
/// paired `(|C_{1/4}| - |C_{1/8}|)/SE` per probe and the mean `|C|` per probe and rung.
fn random_expansion() -> Result<(Vec<f64>, Vec<f64>)> {
    let datum = InitialDatum::cosines(3, 2.0, vec![CosineMode { amplitude: 1.0, wavenumber: vec![1, 0, 0], phase: 0.3 }])?;
    let probes = vec![
        Probe { t: 0.25, x: vec![0.25, 0.5, 0.75] },
        Probe { t: 0.25, x: vec![0.5, 0.0, 0.25] },
        Probe { t: 1.0, x: vec![0.75, 0.25, 0.5] },
    ];
    let opts = ExpansionOptions { eps: vec![0.25, 0.125], probes, ..Default::default() };
    let grid = offset_grid(3, 128, 16.0)?;
    let make = |e: usize| CorrectorSet::compute(&bump(3, 16.0, 2.0, rng::derive(4004, e as u64))?, &grid, &fourier());
    let rep = expansion_report_with(&grid, 64, make, &datum, &opts)?;
    let z = (0..rep.probes.len()).map(|p| rep.paired_steps(p)[0]).map(|(m, se)| m / se).collect();
    let means = (0..rep.probes.len()).flat_map(|p| rep.ladder(p)).collect();
    Ok((z, means))
}

fn c5() -> Outcome {
    let mut ok = true;
    let mut gap = 0.0f64;
    let mut notes = Vec::new();
    for (name, f) in [("laminate", CoefficientField::laminate(2, 1.0, LAMINATE)?), ("smooth", smooth(2, 1.0, 1)?)] {
        let rep = deterministic_report(&f, true)?;
        gap = gap.max(rep.elliptic_path_gap());
        for p in 0..rep.points.len() {
            let l = rep.elliptic_ladder(p);
            ok &= l.windows(2).all(|w| w[1] < w[0]);
            notes.push(format!("{name} {}", sci(&l)));
        }
    }
    Ok((ok && gap <= 1e-6, format!("path gap {gap:.1e}; |C̃_ε| {}", notes.join(" "))))
}

fn c6() -> Outcome {
    let (eps, t) = (0.5, 1.0);
    let cases: Vec<(&str, CoefficientField, Vec<f64>)> = vec![
        ("constant", CoefficientField::constant(2, 2.0, 1.0)?, vec![0.3, 0.7]),
        ("laminate", CoefficientField::laminate(2, 1.0, LAMINATE)?, vec![0.3, 0.7]),
        ("bump", bump(3, 4.0, 3.0, 77)?, vec![0.3, 0.7, 0.45]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (k, (name, f, x)) in cases.into_iter().enumerate() {
        let d = f.d();
        let datum = InitialDatum::cosine_product(8.0, &vec![1; d], 1.0)?;
        let side = (eps * f.box_length()).max(8.0);
        let grid = Grid::new(d, (side * 16.0 / eps).round() as usize, side)?;
        let u = solve_parabolic(&f, eps, &datum, &[t], &grid, &ParabolicOptions::default())?;
        let reference = u[0].interpolate(&x);
        let (m, se) = mc_solution(&f, eps, &datum, t, &x, 10_000, 5e-4, 600 + k as u64)?;
        let z = (m - reference) / se;
        ok &= z.abs() <= 3.0;
        notes.push(format!("{name} z = {z:+.2}"));
    }
    Ok((ok, notes.join(", ")))
}

fn laminate_envs(n: usize, seed: u64) -> Result<(CoefficientField, CorrectorSet, Vec<Vec<f64>>)> {
    let f = CoefficientField::laminate(2, 1.0, LAMINATE)?;
    let set = CorrectorSet::compute(&f, &Grid::new(2, 64, 1.0)?, &CorrectorOptions::default())?;
    Ok((f, set, uniform_starts(n, 2, 1.0, seed)))
}

fn c7() -> Outcome {
    let xi = vec![1.0, 0.0];
    let (f, set, x0) = laminate_envs(400, 7)?;
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &set, x0: x }).collect();
    let t = 50.0;
    let qv_rate = |dt: f64, seed: u64| -> Result<(f64, f64, f64)> {
        let opts = MartingaleOptions { xi: xi.clone(), eps: 1.0, t, dt, n_paths: 2, windows: 1 };
        let s = martingale_samples(&envs, &opts, seed)?;
        let tele = s.iter().fold(0.0f64, |m, x| m.max(x.telescoping));
        let (q, se) = stats::mean_se(&s.iter().map(|x| x.qv / t).collect::<Vec<_>>());
        Ok((q, se, tele))
    };
    let (q1, s1, t1) = qv_rate(1e-3, 71)?;
    let (q2, s2, t2) = qv_rate(5e-4, 72)?;
    // the Euler-Maruyama bias of ⟨M⟩_t/t is linear in dt
    let rich = 2.0 * q2 - q1;
    let rich_se = (4.0 * s2 * s2 + s1 * s1).sqrt();
    let target = set.sigma2(&xi);
    let tele = t1.max(t2);
    let qv_ok = (rich - target).abs() <= 3.0 * rich_se;

    let lemma_envs: Vec<Environment> = envs[..64].to_vec();
    let mut lemma_ok = true;
    let mut lemma = Vec::new();
    for (k, tt) in [0.5, 2.0].into_iter().enumerate() {
        let c = second_moment_check(&lemma_envs, &Functional::Psi(xi.clone()), tt, 200, 1e-3, 10, 73 + k as u64)?;
        lemma_ok &= c.holds(3.0);
        lemma.push(format!("t={tt}: {:.3e} <= {:.3e}", c.lhs, c.rhs));
    }
    Ok((
        tele <= 1e-12 && qv_ok && lemma_ok,
        format!(
            "telescoping {tele:.1e}; ⟨M⟩/t extrapolated {rich:.4} ± {rich_se:.4} vs ξᵀĀξ = {target:.4} (dt = 1e-3: {q1:.4}); {}",
            lemma.join(", ")
        ),
    ))
}

fn c8() -> Outcome {
    let n_envs = 256;
    let xi = vec![1.0, 0.0, 0.0];
    let phi = Functional::Phi(xi);
    let lags: Vec<f64> = (0..=16).map(|k| 0.25 * k as f64).collect();
    let times = [0.5, 0.71, 1.0, 1.41, 2.0, 2.83, 4.0];
    let grid = Grid::new(3, 64, 16.0)?;
    let starts = uniform_starts(n_envs, 3, 16.0, 808);
    let mut cov = Vec::with_capacity(n_envs);
    let mut var = Vec::with_capacity(n_envs);
    for (e, x0) in starts.iter().enumerate() {
        let f = bump(3, 16.0, 2.0, rng::derive(8008, e as u64))?;
        let set = CorrectorSet::compute(&f, &grid, &fourier())?;
        cov.push(decorrelation_member(&set, &phi, &lags)?);
        let env = Environment { field: &f, set: &set, x0 };
        var.push(env_decay_member(&env, e, &phi, &times, 512, 0.01, 8080, Dynamics::Diffusion)?);
    }
    let curve = |x: &[f64], per_env: &[Vec<f64>], window: (f64, f64)| DecayCurve::from_members(x.to_vec(), per_env)?.with_fit(window, 88);
    let dec = curve(&lags, &cov, (1.0, 4.0))?.fit.expect("fitted");
    let env = curve(&times, &var, (0.5, 4.0))?.fit.expect("fitted");
    let ok = dec.slope <= -0.6 && (-1.2..=-0.3).contains(&env.slope);
    Ok((
        ok,
        format!(
            "decorrelation slope {:.3} [{:.3}, {:.3}], environment slope {:.3} [{:.3}, {:.3}]",
            dec.slope, dec.ci.0, dec.ci.1, env.slope, env.ci.0, env.ci.1
        ),
    ))
}

fn c9() -> Outcome {
    let make = |s: u64| bump(2, 4.0, 3.0, s);
    let cell = [1i64, 1];
    let count = |f: &CoefficientField| -> Result<f64> {
        let c = f.cloud().expect("poisson field");
        Ok(c.count_in_cell(c.cell_index(&cell)?) as f64)
    };
    let local = |f: &CoefficientField| -> Result<f64> { Ok(f.evaluate(&[1.5, 1.5])?.0[0]) };
    let homogenized = |f: &CoefficientField| -> Result<f64> {
        Ok(CorrectorSet::compute(f, &Grid::new(2, 32, 4.0)?, &CorrectorOptions::default())?.a_bar[0])
    };
    let reports = [
        ("count", resampling_identity(make, count, &cell, 4000, 16, 91)?),
        ("a11(1.5,1.5)", resampling_identity(make, local, &cell, 4000, 16, 92)?),
        ("Ā11", resampling_identity(make, homogenized, &cell, 400, 8, 93)?),
    ];
    let cloud = make(0)?.cloud().expect("poisson field").clone();
    let exact = cloud.intensity() * cloud.cell_size().powi(2);
    let c = &reports[0].1;
    let analytic = (c.lhs - exact).abs() <= 3.0 * c.lhs_se && (c.rhs - exact).abs() <= 3.0 * c.rhs_se;
    let ok = analytic && reports.iter().all(|(_, r)| r.agrees(3.0));
    let notes: Vec<String> = reports
        .iter()
        .map(|(n, r)| format!("{n}: {:.4e} vs {:.4e} (SE {:.1e})", r.lhs, r.rhs, r.diff_se))
        .collect();
    Ok((ok, format!("{}; count exact {exact}", notes.join(", "))))
}

fn clt_holds(samples: &[MartingaleSample], t: f64) -> Result<(bool, f64)> {
    let var = stats::mean(&samples.iter().map(|s| s.sigma2).collect::<Vec<_>>()) * t;
    let rows = clt_distance(samples, t, &default_test_functions(var))?;
    // excess of each side over its bound, in combined standard errors
    let z = |lhs: f64, bound: f64, a: f64, b: f64| (lhs - bound) / (a * a + b * b).sqrt();
    let worst = rows.iter().fold(f64::MIN, |m, r| {
        m.max(z(r.lhs2, r.bound2, r.lhs2_se, r.bound2_se)).max(z(r.lhs3, r.bound3, r.lhs3_se, r.bound3_se))
    });
    Ok((rows.iter().all(|r| r.second_holds(3.0) && r.third_holds(3.0)), worst))
}

fn c10() -> Outcome {
    let (t, dt) = (1.0, 2e-3);
    let xi = vec![1.0, 0.0];
    let mut ok = true;
    let mut notes = Vec::new();
    let (lf, lset, lx) = laminate_envs(100, 10)?;
    let bumps: Vec<(CoefficientField, Vec<f64>)> = uniform_starts(100, 2, 4.0, 11)
        .into_iter()
        .enumerate()
        .map(|(e, x)| Ok((bump(2, 4.0, 3.0, rng::derive(1010, e as u64))?, x)))
        .collect::<Result<_>>()?;
    let bsets: Vec<CorrectorSet> = bumps
        .iter()
        .map(|(f, _)| CorrectorSet::compute(f, &Grid::new(2, 32, 4.0)?, &CorrectorOptions::default()))
        .collect::<Result<_>>()?;
    let lam: Vec<Environment> = lx.iter().map(|x| Environment { field: &lf, set: &lset, x0: x }).collect();
    let rnd: Vec<Environment> = bumps.iter().zip(&bsets).map(|((f, x), s)| Environment { field: f, set: s, x0: x }).collect();
    for (name, envs) in [("laminate", &lam), ("bump", &rnd)] {
        for (k, eps) in [0.5, 0.25].into_iter().enumerate() {
            let opts = MartingaleOptions { xi: xi.clone(), eps, t, dt, n_paths: 100, windows: 1 };
            let s = martingale_samples(envs, &opts, 1000 + k as u64)?;
            let (holds, worst) = clt_holds(&s, t)?;
            ok &= holds && s.len() == 10_000;
            notes.push(format!("{name} ε={eps}: max (lhs - bound)/SE {worst:+.2}"));
        }
    }
    Ok((ok, notes.join(", ")))
}

fn c11() -> Outcome {
    let distances = [10.0, 15.0, 20.0, 30.0, 40.0, 50.0];
    let mut ok = true;
    let mut notes = Vec::new();
    for (d, p) in [(3, 2), (3, 3), (4, 3), (4, 4)] {
        let s = convolution_power_sum(d, p, &distances, 8.0)?.spread();
        ok &= s < 3.0;
        notes.push(format!("(d={d}, p={p}) {s:.3}"));
    }
    Ok((ok, format!("max/min ratio {}", notes.join(", "))))
}
