use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mixreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixreg"))
        .current_dir(dir)
        .env_remove("MIXREG_OUT")
        .env_remove("MIXREG_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mixreg(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

fn simulate(dir: &Path, out: &str, n: usize) {
    ok(dir, &["--out", out, "--seed", "3", "simulate", "--n", &n.to_string()]);
}

#[test]
fn simulate_writes_n_rows_and_repeats_byte_for_byte() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "a", 150);
    simulate(t.path(), "b", 150);
    let a = read(t.path().join("a/data.csv"));
    assert_eq!(a.lines().count(), 151);
    assert_eq!(a.lines().next().unwrap(), "x0,x1,y,label");
    assert_eq!(a, read(t.path().join("b/data.csv")));
    assert_eq!(read(t.path().join("a/truth.csv")).lines().count(), 4);

    ok(t.path(), &["--out", "c", "--seed", "4", "simulate", "--n", "150"]);
    assert_ne!(a, read(t.path().join("c/data.csv")));
}

#[test]
fn two_circle_simulation_writes_its_coefficients() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["--out", "o", "simulate", "--model", "sim2", "--n", "80"]);
    assert_eq!(read(t.path().join("o/data.csv")).lines().count(), 81);
    assert_eq!(read(t.path().join("o/betas.csv")).lines().count(), 81);
    assert_eq!(read(t.path().join("o/truth.csv")).lines().count(), 401);
}

#[test]
fn bad_invocations_exit_with_code_two() {
    let t = TempDir::new().unwrap();
    let out = mixreg(t.path(), &["simulate", "--model", "sim9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim9"));

    simulate(t.path(), "o", 60);
    let out = mixreg(t.path(), &["--out", "o", "fit", "--data", "o/data.csv", "--method", "npkmle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--sigma"));

    assert_eq!(mixreg(t.path(), &["--out", "o", "experiment", "--reps", "0"]).status.code(), Some(2));
    assert_eq!(mixreg(t.path(), &["--out", "o", "plotdata"]).status.code(), Some(2));
    assert_eq!(
        mixreg(t.path(), &["--out", "o", "fit", "--data", "o/data.csv", "--sigma", "0.5", "--method", "lasso"]).status.code(),
        Some(2)
    );
    assert_eq!(mixreg(t.path(), &["--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_input_file_is_a_runtime_failure() {
    let t = TempDir::new().unwrap();
    let out = mixreg(t.path(), &["--out", "o", "fit", "--data", "absent.csv", "--sigma", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_iterations_return_the_start_unconverged() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "o", 100);
    ok(t.path(), &["--out", "o", "fit", "--data", "o/data.csv", "--sigma", "0.5", "--method", "npmle", "--nodes", "21", "--max-iter", "0"]);
    let r = json(t.path().join("o/report.json"));
    assert_eq!(r["converged"], false);
    assert_eq!(r["iterations"], 0);
    let grid = read(t.path().join("o/grid.csv"));
    let densities: Vec<f64> = grid.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(densities.len(), 21 * 21);
    assert!(densities.iter().all(|&v| (v - densities[0]).abs() <= 1e-12 * densities[0]));
}

#[test]
fn particle_fit_recovers_three_lines() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "o", 400);
    let stdout = ok(t.path(), &["--out", "o", "fit", "--data", "o/data.csv", "--sigma", "0.5", "--method", "npkmle", "--nodes", "41"]);
    assert!(stdout.contains("atoms"));
    let r = json(t.path().join("o/report.json"));
    assert_eq!(r["atoms"], 3);
    assert_eq!(r["observations"], 400);
    let atoms = read(t.path().join("o/atoms.csv"));
    assert_eq!(atoms.lines().next().unwrap(), "beta0,beta1,weight");
    let total: f64 = atoms.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(read(t.path().join("o/particles.csv")).lines().count(), 401);
    assert_eq!(read(t.path().join("o/labels.csv")).lines().count(), 401);
}

#[test]
fn single_replication_gives_a_one_row_summary() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["--out", "o", "experiment", "--n", "120", "--reps", "1", "--nodes", "31"]);
    let csv = read(t.path().join("o/summary.csv"));
    assert_eq!(csv.lines().count(), 2);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "npkmle");
    assert_eq!(row[1], "1");
    assert_eq!(row[4], "", "a single run has no spread");
    assert_eq!(read(t.path().join("o/bias.csv")).lines().count(), 10);
    assert_eq!(json(t.path().join("o/replications.json")).as_array().unwrap().len(), 1);
    assert!(read(t.path().join("o/summary.txt")).contains("prop. true K"));
}

#[test]
fn plot_exports_have_the_documented_shapes() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "o", 150);
    ok(
        t.path(),
        &["--out", "o", "fit", "--data", "o/data.csv", "--sigma", "0.5", "--method", "npmle", "--nodes", "25", "--max-iter", "50"],
    );
    std::fs::write(t.path().join("atoms.csv"), "beta0,beta1,weight\n3,-1,0.3\n1,1.5,0.3\n-1,0.5,0.4\n").unwrap();
    ok(t.path(), &["--out", "p", "plotdata", "--data", "o/data.csv", "--atoms", "atoms.csv", "--grid", "o/grid.csv", "--svg"]);
    let lines = read(t.path().join("p/lines.csv"));
    assert_eq!(lines.lines().next().unwrap(), "intercept,slope,weight");
    assert_eq!(lines.lines().count(), 4);
    assert_eq!(read(t.path().join("p/heatmap.csv")).lines().count(), 25 * 25 + 1);
    assert_eq!(read(t.path().join("p/scatter.csv")).lines().count(), 151);
    let svg = read(t.path().join("p/plot.svg"));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<line").count(), 3);
}

#[test]
fn flags_beat_the_config_file_and_the_environment_sets_the_output() {
    let t = TempDir::new().unwrap();
    std::fs::write(t.path().join("run.cfg"), "# defaults\nn = 90\nseed = 3\nout = from-file\n").unwrap();
    ok(t.path(), &["--config", "run.cfg", "simulate"]);
    assert_eq!(read(t.path().join("from-file/data.csv")).lines().count(), 91);
    ok(t.path(), &["--config", "run.cfg", "--out", "from-flag", "simulate", "--n", "40"]);
    assert_eq!(read(t.path().join("from-flag/data.csv")).lines().count(), 41);

    let out = Command::new(env!("CARGO_BIN_EXE_mixreg"))
        .current_dir(t.path())
        .env("MIXREG_OUT", "from-env")
        .args(["--config", "run.cfg", "simulate"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(t.path().join("from-env/data.csv")), read(t.path().join("from-file/data.csv")));
}

#[test]
fn mean_shift_on_a_gridded_fit_writes_weighted_modes() {
    let t = TempDir::new().unwrap();
    simulate(t.path(), "o", 300);
    ok(t.path(), &["--out", "o", "fit", "--data", "o/data.csv", "--sigma", "0.5", "--method", "npmle", "--nodes", "41"]);
    ok(t.path(), &["--out", "o", "postprocess", "--grid", "o/grid.csv", "--meanshift", "--sample-size", "400"]);
    let modes = read(t.path().join("o/modes.csv"));
    let weights: Vec<f64> = modes.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(weights.len() >= 3);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let heavy = weights.iter().filter(|&&w| w > 0.15).count();
    assert_eq!(heavy, 3, "three heavy modes expected, got {modes}");
    assert_eq!(json(t.path().join("o/postprocess.json"))["mode"], "meanshift");
}
