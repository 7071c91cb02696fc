//! Long-running reproductions, ignored by default:
//! `cargo test --release --test long_run -- --ignored`.

use slowfast::config::ExperimentConfig;
use slowfast::pipeline;
use slowfast::spectral::flow_time_sweep;

fn in_factor_two(x: f64, target: f64) -> bool {
    x >= target / 2.0 && x <= target * 2.0
}

#[test]
#[ignore = "about 1.75 desk-scale skew builds"]
fn skew_flow_time_sweep_converges() {
    let cfg = ExperimentConfig::preset("skew-desk").unwrap();
    let model = cfg.system().unwrap();
    let grid = cfg.grid_partition().unwrap();
    let r = flow_time_sweep(&model, &grid, cfg.ulam.samples, &[0.01, 0.02, 0.04], cfg.ulam.seed, 0.1).unwrap();
    let (d1, e1) = r.differences[0];
    let (d2, e2) = r.differences[1];
    let (e1, e2) = (e1.unwrap(), e2.unwrap());
    println!("density differences {d1:.4} {d2:.4}; phi2 differences {e1:.4} {e2:.4}");
    assert!(in_factor_two(d1, 0.08), "density 0.01 vs 0.02: {d1}");
    assert!(in_factor_two(d2, 0.03), "density 0.02 vs 0.04: {d2}");
    assert!(in_factor_two(e1, 0.04), "phi2 0.01 vs 0.02: {e1}");
    assert!(in_factor_two(e2, 0.01), "phi2 0.02 vs 0.04: {e2}");
}

#[test]
#[ignore = "full scale: 200 x 200 boxes, 10^4 points per box"]
fn skew_full_scale_spectrum_and_switching() {
    let cfg = ExperimentConfig::preset("skew-full").unwrap();
    let op = pipeline::build_operator(&cfg).unwrap();
    let s = pipeline::spectrum(&cfg, &op.matrix).unwrap();
    let l = |i: usize| s.eigenvalues[i].re;
    println!("lambda2 {:.5} lambda3 {:.5} lambda10 {:.5}", l(1), l(2), l(9));
    assert!((l(1) - 0.9995).abs() <= 5e-4);
    assert!((l(2) - 0.9665).abs() <= 5e-3);
    assert!((l(9) - 0.6969).abs() <= 1e-2);

    let density = pipeline::density(&op.matrix).unwrap();
    let d = pipeline::detect(&cfg, &op.matrix, &density).unwrap();
    assert!(d.report.ratios.iter().all(|r| (4.2e3 * 0.75..=9.6e3 * 1.25).contains(r)));
    assert!(d.validity.residual_ratio() <= 0.05);

    let full = pipeline::full_series(&cfg).unwrap();
    let sf = pipeline::summary(&cfg, &full).unwrap();
    println!("full tau0 {:.1} switches {}", sf.switching.mean, sf.switching.switches);
    assert!((sf.switching.mean / 180.0 - 1.0).abs() <= 0.1);

    let theta = pipeline::slow_coordinate(&s).unwrap();
    let model = cfg.system().unwrap();
    let rm = pipeline::reduced_model(&cfg, &model, &theta, &density, pipeline::chosen_k(&cfg, None)).unwrap();
    let run = pipeline::reduced_run(&cfg, &rm).unwrap();
    let sr = pipeline::summary(&cfg, &run.series).unwrap();
    println!("reduced tau0 {:.1}", sr.switching.mean);
    assert!((sr.switching.mean / 175.5 - 1.0).abs() <= 0.1);
}
