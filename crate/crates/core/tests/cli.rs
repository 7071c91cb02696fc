use std::fs;
use std::path::Path;

use slowfast::cli::run_with;
use slowfast::io::{read_matrix, write_reduced_model, Provenance};
use slowfast::reduce::ReducedModel;

const SMALL: &str = r#"
output = "unused"

[model]
kind = "ou_pair"
epsilon = 0.5
dt = 1e-3

[grid]
lo = [-3.0, -3.0]
hi = [3.0, 3.0]
nx = 16
ny = 16

[ulam]
samples = 40
tau = 0.02
seed = 7

[spectral]
count = 4
tol = 1e-11

[fiber]
level = 0.5
nbins = 20
tau = 0.004
samples = 50
validate_q = 100

[reduce]
q = 50
k = 20
k_level = 0.0
k_q = 50
n_fibers = 9
dt = 0.01
record_every = 20
v0 = 0.0

[stats]
series_length = 4000
interval = 0.2
start = [0.0, 0.0]
"#;

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("slowfast").chain(list.iter().copied()).map(String::from).collect()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identity_preset_writes_identity_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("id");
    let code = run_with(args(&["operator", "--preset", "identity", "--output", out.to_str().unwrap()]));
    assert_eq!(code, 0);
    let p = read_matrix(&out.join("matrix.mtx")).unwrap();
    assert_eq!(p.dim(), 100);
    assert_eq!(p.nnz(), 100);
    for j in 0..100 {
        assert_eq!(p.entry(j, j), 1.0);
    }
    let head = fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert!(head.starts_with("# config_hash="));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        for cmd in ["operator", "detect", "reduce"] {
            let code = run_with(args(&[
                "--threads",
                threads,
                cmd,
                "--config",
                cfg.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
            ]));
            assert_eq!(code, 0, "{cmd} with {threads} threads");
        }
        runs.push(dir_contents(&out));
    }
    assert!(runs[0].len() >= 10);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn stored_matrix_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = cfg.to_str().unwrap();
    assert_eq!(run_with(args(&["operator", "--config", c, "--output", a.to_str().unwrap()])), 0);
    assert_eq!(run_with(args(&["detect", "--config", c, "--output", a.to_str().unwrap()])), 0);
    let m = a.join("matrix.mtx");
    assert_eq!(
        run_with(args(&["detect", "--config", c, "--output", b.to_str().unwrap(), "--matrix", m.to_str().unwrap()])),
        0
    );
    assert_eq!(fs::read(a.join("ratios.csv")).unwrap(), fs::read(b.join("ratios.csv")).unwrap());
}

#[test]
fn reduced_only_comparison_from_stored_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let knots: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
    let rm = ReducedModel::from_rates(knots, |v| v - v * v * v / 2.0, |_| 0.6).unwrap();
    let model = tmp.path().join("rm.csv");
    write_reduced_model(&model, &rm, &Provenance::new("test", 0)).unwrap();
    let out = tmp.path().join("cmp");
    let code = run_with(args(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--reduced-only",
    ]));
    assert_eq!(code, 0);
    assert!(out.join("reduced_series.csv").exists());
    assert!(!out.join("full_series.csv").exists());
    let report = fs::read_to_string(out.join("compare.txt")).unwrap();
    assert!(report.contains("reduced_tau0_fit"));
}

#[test]
fn failures_exit_with_stage_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, SMALL.replace("[grid]", "[grid]\nextra = 1")).unwrap();
    assert_eq!(run_with(args(&["operator", "--config", bad.to_str().unwrap()])), 2);

    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("missing.mtx");
    let code = run_with(args(&[
        "detect",
        "--config",
        cfg.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--matrix",
        missing.to_str().unwrap(),
    ]));
    assert_eq!(code, 3);

    // Euler at dt / eps^2 = 10 blows up inside the operator build.
    let unstable = tmp.path().join("unstable.toml");
    fs::write(&unstable, SMALL.replace("epsilon = 0.5", "epsilon = 0.01")).unwrap();
    let code = run_with(args(&["operator", "--config", unstable.to_str().unwrap(), "--output", out.to_str().unwrap()]));
    assert_eq!(code, 4);
}
