use std::f64::consts::PI;

use homolab::corrector::{CorrectorOptions, CorrectorSet};
use homolab::diagnostics::surrogate_decay;
use homolab::field::{Bump, CoefficientField, Laminate, MarkLaw, PoissonCloud};
use homolab::forward::InitialDatum;
use homolab::lattice::{Grid, GridFunction};
use homolab::rng;
use homolab::stats;
use homolab::walk::*;
use rand::Rng;

fn laminate() -> (CoefficientField, CorrectorSet) {
    let f = CoefficientField::laminate(2, 1.0, Laminate { lo: 1.0, hi: 4.0, sharpness: 3.0, beta: None }).unwrap();
    let g = Grid::new(2, 64, 1.0).unwrap();
    let s = CorrectorSet::compute(&f, &g, &CorrectorOptions::default()).unwrap();
    (f, s)
}

fn uniform_starts(n: usize, d: usize, l: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|e| {
            let mut r = rng::stream(seed, e as u64);
            (0..d).map(|_| l * r.random::<f64>()).collect()
        })
        .collect()
}

#[test]
fn displacement_variance_is_a_times_t() {
    let c = 1.8;
    let f = CoefficientField::constant(2, c, 1.0).unwrap();
    let mut disp = Vec::new();
    for seed in 0..3000 {
        let p = simulate_path(&f, &[0.2, 0.4], 0.01, 2.0, seed).unwrap();
        let end = p.position(p.steps());
        disp.push(end[0] - 0.2);
        disp.push(end[1] - 0.4);
    }
    let (m, se) = stats::mean_se(&disp);
    assert!(m.abs() < 4.0 * se);
    let sq: Vec<f64> = disp.iter().map(|v| v * v).collect();
    let (v, vse) = stats::mean_se(&sq);
    assert!((v - c * 2.0).abs() < 4.0 * vse, "variance {v} ± {vse}");
}

#[test]
fn paths_are_seeded_and_lifted() {
    let (f, _) = laminate();
    let a = simulate_path(&f, &[0.5, 0.5], 0.01, 5.0, 3).unwrap();
    let b = simulate_path(&f, &[0.5, 0.5], 0.01, 5.0, 3).unwrap();
    let c = simulate_path(&f, &[0.5, 0.5], 0.01, 5.0, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.positions, c.positions);
    assert_eq!(a.steps(), 500);
    // positions are not wrapped into the cell
    assert!(a.positions.iter().any(|x| !(0.0..1.0).contains(x)));
    assert!(simulate_path(&f, &[0.5, 0.5], 0.03, 1.0, 3).is_err());
}

#[test]
fn telescoping_identity_is_exact() {
    let (f, s) = laminate();
    for seed in 0..5 {
        let p = simulate_path(&f, &[0.1, 0.9], 1e-3, 10.0, seed).unwrap();
        let p = decompose(&p, &f, &s, &[1.0, 0.5]).unwrap();
        assert!(p.telescoping_residual().unwrap() < 1e-12);
        let dec = p.decomposition.as_ref().unwrap();
        assert!(dec.qv.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(dec.m[0], 0.0);
    }
}

#[test]
fn constant_field_has_no_remainder() {
    let f = CoefficientField::constant(2, 1.3, 1.0).unwrap();
    let g = Grid::new(2, 16, 1.0).unwrap();
    let s = CorrectorSet::compute(&f, &g, &CorrectorOptions::default()).unwrap();
    let p = decompose(&simulate_path(&f, &[0.0, 0.0], 0.01, 3.0, 1).unwrap(), &f, &s, &[0.6, 0.8]).unwrap();
    let dec = p.decomposition.unwrap();
    assert!(dec.r.iter().all(|r| *r == 0.0));
    // ⟨M⟩_t = ξᵀ a ξ t exactly
    assert!((dec.qv[dec.qv.len() - 1] - 1.3 * 3.0).abs() < 1e-12);
}

#[test]
fn constant_datum_has_zero_standard_error() {
    let (f, _) = laminate();
    let datum = InitialDatum::constant(2, 0.7).unwrap();
    let (m, se) = mc_solution(&f, 0.5, &datum, 0.25, &[0.1, 0.2], 50, 0.01, 9).unwrap();
    assert_eq!((m, se), (0.7, 0.0));
    assert!(mc_solution(&f, 0.5, &datum, 0.25, &[0.1, 0.2], 1, 0.01, 9).is_err());
}

#[test]
fn monte_carlo_matches_the_heat_semigroup() {
    let c = 1.5;
    let f = CoefficientField::constant(2, c, 1.0).unwrap();
    let datum = InitialDatum::cosine_product(2.0, &[1, 1], 1.0).unwrap();
    let (x, t) = ([0.3, 0.1], 0.5);
    // cos(πx1)cos(πx2) decays at rate c π²/2 per mode
    let exact = (PI * x[0]).cos() * (PI * x[1]).cos() * (-c * PI * PI * t).exp();
    let (m, se) = mc_solution(&f, 0.5, &datum, t, &x, 20_000, 0.01, 5).unwrap();
    assert!((m - exact).abs() < 4.0 * se, "{m} ± {se} vs {exact}");
}

#[test]
fn zero_functional_has_zero_decay() {
    let (f, s) = laminate();
    let x0 = uniform_starts(4, 2, 1.0, 1);
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &s, x0: x }).collect();
    let c = env_decay(&envs, &Functional::Zero, &[0.5, 1.0], 8, 0.01, 3, Dynamics::Diffusion).unwrap();
    assert!(c.values.iter().all(|v| *v == 0.0));
}

#[test]
fn brownian_surrogate_matches_the_spectral_formula() {
    let (f, s) = laminate();
    let g = s.grid().clone();
    let w = 2.0 * PI;
    let gf = GridFunction::from_fn(&g, |x| (w * x[0]).cos() + 0.5 * (w * (x[0] + x[1])).sin() + 0.2);
    let times = [0.0, 0.01, 0.03, 0.06];
    let expected = surrogate_decay(&gf, &times).unwrap();
    let x0 = uniform_starts(600, 2, 1.0, 7);
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &s, x0: x }).collect();
    let c = env_decay(&envs, &Functional::Grid(gf), &times, 32, 0.001, 11, Dynamics::Brownian).unwrap();
    for i in 0..times.len() {
        assert!((c.values[i] - expected[i]).abs() < 4.0 * c.se[i] + 1e-4, "t = {}: {} ± {} vs {}", times[i], c.values[i], c.se[i], expected[i]);
    }
}

#[test]
fn environment_process_is_reversible() {
    let cloud = PoissonCloud::sample(2, 3.0, 1.0, MarkLaw::default(), 2).unwrap();
    let f = CoefficientField::poisson_bump(cloud, Bump::new(0.5, true), (1.0, 3.0), 4.0, None, &[]).unwrap();
    let s = CorrectorSet::compute(&f, &Grid::new(2, 48, 3.0).unwrap(), &CorrectorOptions::default()).unwrap();
    let x0 = uniform_starts(2000, 2, 3.0, 3);
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &s, x0: x }).collect();
    let xi = vec![1.0, 0.0];
    let r = reversibility_check(&envs, &Functional::Phi(xi.clone()), &Functional::Psi(xi), 0.5, 4, 0.005, 13).unwrap();
    assert!((r.forward - r.backward).abs() < 4.0 * r.se, "{r:?}");
}

#[test]
fn martingale_increments_are_centered_with_matching_variance() {
    let (f, s) = laminate();
    let x0 = uniform_starts(200, 2, 1.0, 5);
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &s, x0: x }).collect();
    let opts = MartingaleOptions { xi: vec![1.0, 0.0], eps: 0.5, t: 1.0, dt: 0.005, n_paths: 10, windows: 4 };
    let samples = martingale_samples(&envs, &opts, 17).unwrap();
    assert_eq!(samples.len(), 2000);
    assert!(samples.iter().all(|x| x.telescoping < 1e-12));
    for w in window_stats(&samples) {
        assert!(w.consistent(4.0), "{w:?}");
    }
}

#[test]
fn time_defect_vanishes_with_the_step() {
    // R minus its corrector part is the Euler-Maruyama defect, O(√dt) in mean square
    let (f, s) = laminate();
    let rms = |dt: f64| {
        let sq: Vec<f64> = (0..150)
            .map(|seed| {
                let p = decompose(&simulate_path(&f, &[0.3, 0.3], dt, 2.0, seed).unwrap(), &f, &s, &[1.0, 0.0]).unwrap();
                let dec = p.decomposition.unwrap();
                dec.defect(dec.r.len() - 1).powi(2)
            })
            .collect();
        stats::mean(&sq).sqrt()
    };
    let (coarse, fine) = (rms(0.005), rms(0.00125));
    assert!(coarse / fine > 1.4, "{coarse} -> {fine}");
}

#[test]
fn second_moment_bound_for_the_energy_density() {
    let (f, s) = laminate();
    let x0 = uniform_starts(32, 2, 1.0, 8);
    let envs: Vec<Environment> = x0.iter().map(|x| Environment { field: &f, set: &s, x0: x }).collect();
    let c = second_moment_check(&envs, &Functional::Psi(vec![1.0, 0.0]), 0.5, 100, 0.005, 5, 21).unwrap();
    assert!(c.holds(3.0), "{c:?}");
}

#[test]
fn observer_rejects_mismatched_inputs() {
    let (f, s) = laminate();
    assert!(Observer::new(&s, &f, &[1.0, 0.0, 0.0]).is_err());
    let other = CoefficientField::constant(2, 1.0, 2.0).unwrap();
    assert!(Observer::new(&s, &other, &[1.0, 0.0]).is_err());
}
