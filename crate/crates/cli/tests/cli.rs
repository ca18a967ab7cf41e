use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdeconv_core::experiments::ErrorTable;

fn sdeconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeconv"))
        .args(args)
        .env_remove("SDECONV_SEED")
        .output()
        .unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const HESTON: &str = "\
model = heston32
mu = 2
alpha = 5/2
beta = 1
theta = 1
eta = 1
samples = 40
fine_exponent = 10
coarse_exponents = 4..8
seed = 9
";

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", HESTON);
    let csv = dir.path().join("out.csv");
    let o = sdeconv(&["run", "--spec", &spec, "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let table = ErrorTable::from_csv(&text).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert_eq!(table.to_csv(), text);
    let summary = stdout(&o);
    assert!(summary.starts_with("rate=") && summary.contains(" residual="), "{summary}");
}

#[test]
fn identical_csv_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", HESTON);
    let a = sdeconv(&["run", "--spec", &spec, "--workers", "1"]);
    let b = sdeconv(&["run", "--spec", &spec, "--workers", "8"]);
    let c = sdeconv(&["run", "--spec", &spec]);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).starts_with("h,rmse,sem,samples\n"));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn seed_variable_overrides_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", HESTON);
    let base = sdeconv(&["run", "--spec", &spec]);
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_sdeconv"))
            .args(["run", "--spec", &spec])
            .env("SDECONV_SEED", seed)
            .output()
            .unwrap()
    };
    assert_eq!(run("9").stdout, base.stdout);
    assert_ne!(run("10").stdout, base.stdout);
    assert_eq!(run("ten").status.code(), Some(2));
}

#[test]
fn theta_out_of_range_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "bad.spec", &HESTON.replace("theta = 1", "theta = 1.5"));
    let o = sdeconv(&["run", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[0, 1]"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "bad.spec", &format!("{HESTON}gamma = 3\n"));
    let o = sdeconv(&["run", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"));
}

#[test]
fn missing_spec_file_is_an_io_error() {
    let o = sdeconv(&["run", "--spec", "/nonexistent/study.spec"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", &HESTON.replace("samples = 40", "samples = 2"));
    let o = sdeconv(&["run", "--spec", &spec, "--out", "/nonexistent/dir/out.csv"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gate_failures_warn_and_continue() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "hot.spec",
        &HESTON.replace("alpha = 5/2", "alpha = 2").replace("samples = 40", "samples = 4"),
    );
    let o = sdeconv(&["run", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning:") && stderr(&o).contains("alpha>=2.5*beta^2"));
}

const STIFF_GBM: &str = "\
model = gbm
mu = 16
sigma = 0
theta = 1
eta = 0
samples = 4
fine_exponent = 8
coarse_exponents = 4..5
";

#[test]
fn solver_failure_exits_three_with_step_index() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "stiff.spec", STIFF_GBM);
    let o = sdeconv(&["run", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sample 0 failed at step 0"), "{}", stderr(&o));
    let t = sdeconv(&["trace", "--spec", &spec, "--exponent", "4"]);
    assert_eq!(t.status.code(), Some(3));
    assert!(stderr(&t).contains("step 0"), "{}", stderr(&t));
}

#[test]
fn trace_without_noise_follows_backward_euler() {
    let dir = tempfile::tempdir().unwrap();
    let text = STIFF_GBM.replace("mu = 16", "mu = -3/2");
    let spec = write_spec(dir.path(), "lin.spec", &text);
    let o = sdeconv(&["trace", "--spec", &spec, "--exponent", "4", "--steps", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7);
    let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
    assert!(widths.windows(2).all(|w| w[0] == w[1]), "{widths:?}");
    let h = 1.0 / 16.0;
    let mut y = 1.0f64;
    for line in &lines[1..] {
        y /= 1.0 + 1.5 * h;
        let state: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!((state - y).abs() <= 1e-14 * y, "{state} vs {y}");
    }
}

#[test]
fn trace_with_zero_steps_prints_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", HESTON);
    let o = sdeconv(&["trace", "--spec", &spec, "--steps", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains("step") && out.contains("state"));
}

#[test]
fn positivity_of_implicit_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "h.spec", HESTON);
    let o = sdeconv(&["positivity", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "positivity=1.000000\n");
    let case_one = "\
model = ait-sahalia
alpha_m1 = 3/2
alpha_0 = 2
alpha_1 = 1
alpha_2 = 1
sigma = 1
kappa = 4
rho = 2
theta = 1
eta = 0
samples = 20
fine_exponent = 9
coarse_exponents = 4..8
";
    let spec = write_spec(dir.path(), "as.spec", case_one);
    let o = sdeconv(&["positivity", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "positivity=1.000000\n");
}

#[test]
fn positivity_rejects_whole_line_models() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "g.spec", "model = gbm\nmu = 1\nsigma = 1\ntheta = 1\neta = 0\nsamples = 4\n");
    let o = sdeconv(&["positivity", "--spec", &spec]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("positive domain"));
}
