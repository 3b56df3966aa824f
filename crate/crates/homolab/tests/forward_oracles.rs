use homolab::field::{Bump, CoefficientField, Laminate, MarkLaw, PoissonCloud};
use homolab::forward::{
    self, elliptic_solutions, expansion_report, homogenized_elliptic_lattice, homogenized_solution_lattice, propagate, EllipticOptions,
    ExpansionOptions, InitialDatum, Probe, TimeScheme,
};
use homolab::corrector::{CorrectorOptions, CorrectorSet};
use homolab::lattice::{assemble, Grid, GridFunction};

fn bump_field(seed: u64) -> CoefficientField {
    let cloud = PoissonCloud::sample(2, 4.0, 1.0, MarkLaw::default(), seed).unwrap();
    CoefficientField::poisson_bump(cloud, Bump::new(0.5, true), (1.0, 3.0), 4.0, None, &[]).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn chebyshev_reproduces_the_lattice_heat_kernel() {
    let a = 1.3;
    let f = CoefficientField::constant(2, a, 4.0).unwrap();
    let g = Grid::new(2, 32, 4.0).unwrap();
    let op = assemble(&f, &g, 0.0).unwrap();
    let datum = InitialDatum::cosine_product(4.0, &[1, 2], 0.8).unwrap();
    let u0 = datum.sample(&g).unwrap();
    let times = [0.1, 0.5, 2.0];
    let us = propagate(&op, &u0, &times, TimeScheme::Chebyshev, 1e-12).unwrap();
    let abar = [a, 0.0, 0.0, a];
    for (t, u) in times.iter().zip(&us) {
        let exact: Vec<f64> = (0..g.len())
            .map(|i| homogenized_solution_lattice(&abar, &datum, *t, &g.position(i)[..2], g.h).unwrap().0)
            .collect();
        assert!(max_diff(&u.values, &exact) < 1e-12, "t = {t}");
    }
}

#[test]
fn crank_nicolson_converges_to_chebyshev() {
    let f = bump_field(3);
    let g = Grid::new(2, 16, 4.0).unwrap();
    let op = assemble(&f, &g, 0.0).unwrap();
    let u0 = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0] / 2.0).cos() + 0.3 * (x[1] * 0.5 * std::f64::consts::PI).sin());
    let reference = propagate(&op, &u0, &[0.5], TimeScheme::Chebyshev, 1e-13).unwrap();
    let mut errs = Vec::new();
    for dt in [0.02, 0.01] {
        let cn = propagate(&op, &u0, &[0.5], TimeScheme::CrankNicolson { dt: Some(dt) }, 1e-13).unwrap();
        errs.push(max_diff(&cn[0].values, &reference[0].values));
    }
    // second order in time
    let rate = (errs[0] / errs[1]).log2();
    assert!(rate > 1.7 && errs[1] < 1e-3, "errors {errs:?}");
}

#[test]
fn heat_flow_conserves_mass_and_contracts() {
    let f = bump_field(5);
    let g = Grid::new(2, 32, 4.0).unwrap();
    let op = assemble(&f, &g, 0.0).unwrap();
    let u0 = GridFunction::from_fn(&g, |x| if x[0] < 1.0 && x[1] < 2.0 { 1.0 } else { 0.0 });
    let us = propagate(&op, &u0, &[0.05, 0.5, 3.0], TimeScheme::Chebyshev, 1e-12).unwrap();
    let mut prev = u0.max_abs();
    for u in &us {
        assert!((u.mean() - u0.mean()).abs() < 1e-12);
        let (lo, hi) = u.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo > -1e-10 && hi < 1.0 + 1e-10, "range [{lo}, {hi}]");
        assert!(hi <= prev + 1e-12);
        prev = hi;
    }
}

#[test]
fn oversized_steps_and_negative_times_are_rejected() {
    let f = CoefficientField::constant(2, 1.0, 1.0).unwrap();
    let g = Grid::new(2, 16, 1.0).unwrap();
    let op = assemble(&f, &g, 0.0).unwrap();
    let u0 = GridFunction::zeros(&g);
    let dt = 2.0 * g.h * g.h;
    assert!(propagate(&op, &u0, &[0.5], TimeScheme::CrankNicolson { dt: Some(dt) }, 1e-12).is_err());
    assert!(propagate(&op, &u0, &[-1.0], TimeScheme::Chebyshev, 1e-12).is_err());
}

#[test]
fn elliptic_paths_agree() {
    let lam = Laminate { lo: 1.0, hi: 4.0, sharpness: 3.0, beta: None };
    let f = CoefficientField::laminate(2, 1.0, lam).unwrap();
    let datum = InitialDatum::cosine_product(2.0, &[1, 1], 1.0).unwrap();
    let g = Grid::new(2, 64, 2.0).unwrap();
    let sol = elliptic_solutions(&f, 0.25, &datum, &g, 8, &EllipticOptions::default()).unwrap();
    assert!(sol.tail_bound < 1e-12);
    let gap = max_diff(&sol.direct.values, &sol.laplace.values);
    assert!(gap < 1e-6, "gap {gap}");
}

#[test]
fn constant_field_elliptic_solution_is_exact() {
    let a = 2.2;
    let f = CoefficientField::constant(2, a, 1.0).unwrap();
    let datum = InitialDatum::cosine_product(2.0, &[1, 3], 1.0).unwrap();
    let g = Grid::new(2, 64, 2.0).unwrap();
    let sol = elliptic_solutions(&f, 0.25, &datum, &g, 8, &EllipticOptions::default()).unwrap();
    let abar = [a, 0.0, 0.0, a];
    let exact: Vec<f64> = (0..g.len())
        .map(|i| homogenized_elliptic_lattice(&abar, &datum, &g.position(i)[..2], g.h).unwrap().0)
        .collect();
    assert!(max_diff(&sol.direct.values, &exact) < 1e-11);
    assert!(max_diff(&sol.laplace.values, &exact) < 1e-6);
}

#[test]
fn resolution_is_enforced() {
    let g = Grid::new(2, 32, 1.0).unwrap();
    assert_eq!(forward::check_resolution(0.25, &g, 8).unwrap(), 8);
    assert!(forward::check_resolution(0.125, &g, 8).is_err());
    assert!(forward::check_resolution(0.3, &g, 8).is_err());
}

#[test]
fn constant_field_has_no_expansion_error() {
    let f = CoefficientField::constant(2, 1.6, 1.0).unwrap();
    let g = Grid::new(2, 8, 1.0).unwrap().with_origin(&[0.37 / 8.0, 0.61 / 8.0]).unwrap();
    let sets = vec![CorrectorSet::compute(&f, &g, &CorrectorOptions::default()).unwrap()];
    let datum = InitialDatum::cosine_product(2.0, &[1, 1], 1.0).unwrap();
    let opts = ExpansionOptions {
        eps: vec![0.25, 0.125],
        probes: vec![Probe { t: 0.25, x: vec![0.25, 0.5] }, Probe { t: 1.0, x: vec![0.75, 0.0] }],
        ..Default::default()
    };
    let rep = expansion_report(&sets, &datum, &opts).unwrap();
    assert_eq!(rep.rows.len(), 4);
    for r in &rep.rows {
        assert!(r.c_eps.abs() < 1e-7, "{r:?}");
        assert!(r.phi.iter().all(|p| *p == 0.0));
    }
}
