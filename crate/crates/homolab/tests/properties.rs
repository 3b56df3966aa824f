use homolab::corrector::{self, CorrectorOptions, CorrectorSet};
use homolab::diagnostics::exponent_fit;
use homolab::field::{Bump, CoefficientField, Laminate, MarkLaw, PoissonCloud};
use homolab::io::fmt17;
use homolab::lattice::{self, assemble, Grid, GridFunction};
use homolab::runner::Ini;
use homolab::walk::{decompose, simulate_path};
use proptest::prelude::*;

fn bump(d: usize, l: f64, intensity: f64, seed: u64) -> CoefficientField {
    let c = PoissonCloud::sample(d, l, intensity, MarkLaw::default(), seed).unwrap();
    CoefficientField::poisson_bump(c, Bump::new(0.5, seed % 2 == 0), (1.0, 3.0), 4.0, None, &[]).unwrap()
}

fn values(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| (((i as u64 + 1) * 2_654_435_761 ^ seed) % 1000) as f64 / 500.0 - 1.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn operator_is_symmetric_positive_and_kills_constants(seed in 0u64..1000, lambda in 0.0f64..2.0, d in 2usize..4) {
        let f = bump(d, 3.0, 1.0, seed);
        let n = if d == 2 { 12 } else { 6 };
        let g = Grid::new(d, n, 3.0).unwrap();
        let op = assemble(&f, &g, lambda).unwrap();
        let (u, v) = (values(g.len(), seed), values(g.len(), seed ^ 77));
        let (mut au, mut av) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        op.apply(&u, &mut au);
        op.apply(&v, &mut av);
        let uav: f64 = u.iter().zip(&av).map(|(a, b)| a * b).sum();
        let vau: f64 = v.iter().zip(&au).map(|(a, b)| a * b).sum();
        prop_assert!((uav - vau).abs() < 1e-10 * uav.abs().max(1.0));
        let uau: f64 = u.iter().zip(&au).map(|(a, b)| a * b).sum();
        let uu: f64 = u.iter().map(|a| a * a).sum();
        prop_assert!(uau >= lambda * uu - 1e-9);
        let mut one = vec![0.0; g.len()];
        op.apply(&vec![1.0; g.len()], &mut one);
        prop_assert!(one.iter().all(|x| (x - lambda).abs() < 1e-12));
    }

    #[test]
    fn homogenized_matrix_is_symmetric_and_bracketed(seed in 0u64..1000, intensity in 0.2f64..2.0) {
        let f = bump(2, 4.0, intensity, seed);
        let set = CorrectorSet::compute(&f, &Grid::new(2, 16, 4.0).unwrap(), &CorrectorOptions::default()).unwrap();
        prop_assert!((set.a_bar[1] - set.a_bar[2]).abs() < 1e-14);
        let (harm, arith) = corrector::voigt_reuss(&set.op);
        for j in 0..2 {
            prop_assert!(set.a_bar[j * 3] >= harm[j * 3] - 1e-10 && set.a_bar[j * 3] <= arith[j * 3] + 1e-10);
        }
        prop_assert!(set.phi.iter().all(|p| p.mean().abs() < 1e-12));
    }

    #[test]
    fn laminate_homogenizes_to_the_harmonic_mean(lo in 0.5f64..2.0, ratio in 1.1f64..6.0, sharpness in 0.5f64..4.0) {
        let lam = Laminate { lo, hi: lo * ratio, sharpness, beta: None };
        let f = CoefficientField::laminate(2, 1.0, lam).unwrap();
        let set = CorrectorSet::compute(&f, &Grid::new(2, 32, 1.0).unwrap(), &CorrectorOptions::default()).unwrap();
        let (harm, arith) = corrector::voigt_reuss(&set.op);
        prop_assert!((set.a_bar[0] - harm[0]).abs() < 1e-9 * harm[0]);
        prop_assert!((set.a_bar[3] - arith[3]).abs() < 1e-12 * arith[3]);
    }

    #[test]
    fn cloud_points_lie_in_the_box_and_resampling_is_local(seed in 0u64..10_000, intensity in 0.0f64..3.0, cell in 0usize..16) {
        let c = PoissonCloud::sample(2, 4.0, intensity, MarkLaw::default(), seed).unwrap();
        prop_assert!(c.points().iter().all(|p| p.location.iter().all(|x| (0.0..4.0).contains(x))));
        let k = [(cell / 4) as i64, (cell % 4) as i64];
        let r = c.resample_cell(&k, seed).unwrap();
        for other in 0..16 {
            if other != cell {
                prop_assert_eq!(c.count_in_cell(other), r.count_in_cell(other));
            }
        }
    }

    #[test]
    fn coefficients_stay_in_the_ellipticity_window(seed in 0u64..1000, x in prop::collection::vec(-50.0f64..50.0, 3)) {
        let f = bump(3, 4.0, 1.5, seed);
        let (lo, hi) = f.ellipticity();
        let (a, _) = f.evaluate(&x).unwrap();
        for j in 0..3 {
            prop_assert!(a[j * 4] >= lo - 1e-12 && a[j * 4] <= hi + 1e-12);
        }
    }

    #[test]
    fn grid_indices_round_trip(half in 2usize..6, d in 2usize..5, i in 0usize..100_000) {
        let g = Grid::new(d, 2 * half, 1.0).unwrap();
        let idx = i % g.len();
        let c = g.coords(idx);
        prop_assert_eq!(g.index(&c[..d]), idx);
        for axis in 0..d {
            prop_assert_eq!(g.neighbor(g.neighbor(idx, axis, true), axis, false), idx);
        }
    }

    #[test]
    fn interpolation_hits_nodes(seed in 0u64..1000, node in 0usize..256) {
        let g = Grid::new(2, 16, 2.0).unwrap().with_origin(&[0.03, -0.4]).unwrap();
        let u = GridFunction::scalar(&g, values(g.len(), seed)).unwrap();
        let p = g.position(node);
        let (v, _) = lattice::interpolate(&g, &u.values, &p[..2]);
        prop_assert!((v - u.values[node]).abs() < 1e-12);
    }

    #[test]
    fn telescoping_holds_on_every_path(seed in 0u64..1_000_000, xi in prop::collection::vec(-2.0f64..2.0, 2)) {
        let lam = Laminate { lo: 1.0, hi: 4.0, sharpness: 3.0, beta: Some(2.0) };
        let f = CoefficientField::laminate(2, 1.0, lam).unwrap();
        let set = CorrectorSet::compute(&f, &Grid::new(2, 32, 1.0).unwrap(), &CorrectorOptions::default()).unwrap();
        let p = decompose(&simulate_path(&f, &[0.2, 0.7], 0.01, 2.0, seed).unwrap(), &f, &set, &xi).unwrap();
        prop_assert!(p.telescoping_residual().unwrap() < 1e-12);
    }

    #[test]
    fn power_laws_are_fitted_exactly(slope in -3.0f64..1.0, scale in 0.01f64..100.0) {
        let x: Vec<f64> = (1..=6).map(|k| 1.5f64.powi(k)).collect();
        let y: Vec<f64> = x.iter().map(|v| scale * v.powf(slope)).collect();
        let fit = exponent_fit(&x, &y, (1.0, 20.0), 1).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-10);
    }

    #[test]
    fn reals_round_trip_through_csv(v in prop::num::f64::NORMAL | prop::num::f64::ZERO) {
        prop_assert_eq!(fmt17(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn canonical_ini_parses_to_the_same_sections(
        keys in prop::collection::btree_map("[a-z][a-z_]{0,6}", "[a-zA-Z0-9 .:-]{0,12}", 1..6),
    ) {
        let mut text = String::from("# header\n[experiment]\n");
        for (k, v) in &keys {
            text.push_str(&format!("  {k} = {v}  ; trailing\n"));
        }
        let ini = Ini::parse(&text).unwrap();
        let again = Ini::parse(&ini.canonical()).unwrap();
        prop_assert_eq!(ini.sections, again.sections);
    }
}
