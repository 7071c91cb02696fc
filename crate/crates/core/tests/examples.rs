use slowfast::fiber::detect::{detect_multiscale, DetectConfig};
use slowfast::fiber::extract_fiber;
use slowfast::reduce::{estimate_reduced_model, SlowCoordinate};
use slowfast::spectral::{generator_rates, invariant_density, ou_reference_spectrum};
use slowfast::ulam::{build_fiber_ulam, build_interval_ulam, build_ulam};
use slowfast::{Drift, GridPartition, ScalarField, SystemModel};

use num_complex::Complex64;

#[test]
fn vertical_fiber_ulam_matches_direct_interval_ulam() {
    let eps = 0.5;
    let (dt, steps, n, nbins) = (1e-3, 50, 2000, 100);
    let grid = GridPartition::square(4.0, 100).unwrap();
    let field = ScalarField::from_fn(grid.clone(), |p| p[0]);
    let curve = extract_fiber(&field, 0.3).unwrap().into_longest();
    let (y0, y1) = (curve.vertices()[0][1], curve.vertices().last().unwrap()[1]);
    assert!(y0 < y1);

    let pair = SystemModel::ou_pair(eps, dt).unwrap();
    let fiber = build_fiber_ulam(&pair, &field, &curve, nbins, n, steps, 3).unwrap();
    let fast = SystemModel::new(1, dt, Drift::Linear { rates: [1.0 / (eps * eps), 0.0] }, [1.0 / eps, 0.0]).unwrap();
    let direct = build_interval_ulam(&fast, y0, y1, nbins, n, steps, 4).unwrap();

    // Excursions past the fiber ends are clamped on the fiber but leave the
    // interval, so only bins well inside are compared.
    let tol = 3.0 / (n as f64).sqrt();
    let mut worst = 0.0f64;
    for j in 15..85 {
        for i in 0..nbins {
            worst = worst.max((fiber.entry(i, j) - direct.entry(i, j)).abs());
        }
    }
    assert!(worst <= tol, "max entry difference {worst} > {tol}");
}

#[test]
fn permutation_operator_has_uniform_density() {
    let g = GridPartition::new([0.0, 0.0], [1.0, 1.0], 8, 3).unwrap();
    let m = SystemModel::new(2, 0.5, Drift::Constant([g.width(), 0.0]), [0.0, 0.0])
        .unwrap()
        .with_periodic(0, 0.0, 1.0)
        .unwrap();
    let p = build_ulam(&m, &g, 20, 2, 1).unwrap();
    let d = invariant_density(&p).unwrap();
    let expected = 1.0 / g.area();
    for v in d.density.values() {
        assert!((v - expected).abs() < 1e-10 * expected, "{v} vs {expected}");
    }
}

#[test]
fn identity_operator_density_is_uniform_and_flagged() {
    let g = GridPartition::square(1.0, 6).unwrap();
    let p = build_ulam(&SystemModel::identity(2, 1.0).unwrap(), &g, 5, 1, 0).unwrap();
    let d = invariant_density(&p).unwrap();
    assert!(d.degenerate);
    assert!(d.density.values().iter().all(|&v| (v - 0.25).abs() < 1e-14));
}

#[test]
fn rate_of_eigenvalue_near_one_at_short_flow_time() {
    let r = generator_rates(&[Complex64::new(1.0, 0.0), Complex64::new(0.9995, 0.0)], 0.04);
    assert_eq!(r[0], 0.0);
    assert!((r[1] - 1.25e-2).abs() < 1e-5, "{}", r[1]);
    let tau = 0.37;
    let r = generator_rates(&[Complex64::new((-tau as f64).exp(), 0.0)], tau);
    assert!((r[0] - 1.0).abs() < 1e-12);
}

#[test]
fn ou_reduced_model_recovers_linear_drift_and_unit_diffusion() {
    // Slow OU in x with the exact slow coordinate theta = x.
    let (dt, k, q) = (1e-3, 10, 100_000);
    let grid = GridPartition::new([-4.0, -1.0], [4.0, 1.0], 81, 11).unwrap();
    let theta = SlowCoordinate::from_field(ScalarField::from_fn(grid.clone(), |p| p[0]));
    let density = ScalarField::constant(grid, 1.0);
    let model = SystemModel::ou_1d(dt).unwrap();
    let rm = estimate_reduced_model(&model, &theta, &density, k, q, 9, 11).unwrap();
    let mut checked = 0;
    for &v in rm.knots().iter().filter(|v| v.abs() <= 2.0) {
        let (a, b) = (rm.alpha(v), rm.beta(v));
        assert!((a + v).abs() <= 0.1 * v.abs().max(1.0), "alpha({v}) = {a}");
        assert!((b - 1.0).abs() <= 0.1, "beta({v}) = {b}");
        checked += 1;
    }
    assert_eq!(checked, 5);
}

#[test]
fn ou_pair_separation_hundred_gives_ratios_near_hundred() {
    let eps = 0.1;
    let dt = 2.5e-4;
    let model = SystemModel::ou_pair(eps, dt).unwrap();
    let grid = GridPartition::square(4.0, 100).unwrap();
    let cfg = DetectConfig {
        samples: 500,
        steps: 200,
        fiber_steps: 8,
        fiber_samples: 1000,
        nbins: 100,
        level: 0.8,
        count: 6,
        threshold: 10.0,
        seed: 5,
        ..DetectConfig::default()
    };
    let r = detect_multiscale(&model, &grid, &cfg).unwrap();
    let reference = ou_reference_spectrum(eps, 3);
    assert_eq!(reference, vec![0.0, 1.0, 2.0]);
    for (i, ratio) in r.ratios.iter().take(4).enumerate() {
        assert!((ratio / 100.0 - 1.0).abs() <= 0.25, "ratio {} = {ratio}", i + 2);
    }
    assert!(r.multiscale);
}
