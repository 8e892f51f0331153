//! End-to-end runs of the `atachic` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_atachic"))
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_iv.json")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn atachic")
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn check_reports_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(&["check", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("n = 2"));
    assert!(text.contains("rho*: 1.190983"));
}

#[test]
fn check_rejects_zero_lambda2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(example_config()).unwrap().replace("\"lambda2\": 0.9", "\"lambda2\": 0");
    let path = dir.path().join("bad.json");
    std::fs::write(&path, text).unwrap();
    let out = run(&["check", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda2"));
}

#[test]
fn malformed_and_missing_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\"lambda\": 1").unwrap();
    let out = run(&["check", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["check"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn kernels_writes_lattice_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(&["kernels", "--config", cfg.to_str().unwrap(), "--kernel-grid", "20"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("kernels.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x,xi,K1,K2,Q1,Q2,G_1,G_2,R_1,R_2");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21 * 22 / 2);
    assert!(rows.windows(2).all(|w| (w[0][0], w[0][1]) < (w[1][0], w[1][1])));
    assert!(rows.iter().all(|r| r[0] <= r[1] && r.len() == 10));
    assert_eq!(header(&dir.path().join("residuals.csv")), "quantity,value");
}

#[test]
fn simulate_backstep_decays_and_is_deterministic() {
    let cfg = example_config();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let args = ["simulate", "--config", cfg.to_str().unwrap(), "--grid", "60", "--tfinal", "8", "--stride", "10", "--svg"];
        let out = run(&args, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(header(&dir.path().join("fields.csv")), "t,x,u,p,v_1,v_2");
        assert_eq!(header(&dir.path().join("norms.csv")), "t,U,norm_u,norm_p,norm_v,V");
        assert!(dir.path().join("norms.svg").exists());
        let norms = std::fs::read_to_string(dir.path().join("norms.csv")).unwrap();
        let total = |line: &str| -> f64 {
            let c: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            (c[2] * c[2] + c[3] * c[3] + c[4] * c[4]).sqrt()
        };
        let first = total(norms.lines().nth(1).unwrap());
        let last = total(norms.lines().last().unwrap());
        assert!(last < 1e-2 * first, "{first} -> {last}");
        outputs.push((
            std::fs::read(dir.path().join("fields.csv")).unwrap(),
            std::fs::read(dir.path().join("norms.csv")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1], "outputs differ between identical runs");
}

#[test]
fn simulate_rejects_cfl_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--grid", "20", "--cfl", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let args = ["verify", "--config", cfg.to_str().unwrap(), "--grid", "60", "--tfinal", "4", "--seed", "3"];
    let out = run(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(&dir.path().join("lyapunov.csv")), "t,V,logV_slope,lnV");
    let report = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    let value = |key: &str| -> f64 {
        let line = report.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!(value("roundtrip_max_error") < 1e-10);
    assert!((value("rho_star") - 1.190983).abs() < 1e-5);
    assert!(value("alpha_boundary_max") < 1e-10);
}

#[test]
fn obstruct_r_grows_like_exp_psi_t() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("simple.json");
    std::fs::write(&cfg, r#"{"lambda":1,"psi":0.5,"omega":1}"#).unwrap();
    let args = ["obstruct", "--config", cfg.to_str().unwrap(), "--controller", "open", "--grid", "200", "--tfinal", "2", "--stride", "100"];
    let out = run(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("obstruction.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,R,w_maxabs,in_S");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    let r0 = rows[0][1];
    for r in &rows {
        assert!((r[1] / r0 / (0.5 * r[0]).exp() - 1.0).abs() < 1e-3);
        assert_eq!(r[3], 0.0);
    }
}

#[test]
fn obstruct_needs_simplified_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(&["obstruct", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn samples_initial_condition() {
    let dir = tempfile::tempdir().unwrap();
    let m = 10;
    let mut csv = String::from("x,u,p,v_1,v_2\n");
    for j in 0..=m {
        let x = j as f64 / m as f64;
        csv += &format!("{x},{},{},{},{}\n", x, 1.0 - x, 0.5, -0.5);
    }
    let ic = dir.path().join("ic.csv");
    std::fs::write(&ic, csv).unwrap();
    let cfg = example_config();
    let spec = format!("samples:{}", ic.display());
    let args = ["simulate", "--config", cfg.to_str().unwrap(), "--grid", "10", "--tfinal", "0.1", "--controller", "zero", "--ic", &spec];
    let out = run(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fields = std::fs::read_to_string(dir.path().join("fields.csv")).unwrap();
    let second: Vec<f64> = fields.lines().nth(2).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(second[..4], [0.0, 0.1, 0.1, 0.9]);
    // zero controller pins u(t,0) = 0 after the first step
    let last_t0: Vec<f64> = fields
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect::<Vec<f64>>())
        .filter(|r| r[1] == 0.0 && r[0] > 0.0)
        .map(|r| r[2])
        .collect();
    assert!(!last_t0.is_empty() && last_t0.iter().all(|u| *u == 0.0));

    let bad = format!("samples:{}", dir.path().join("missing.csv").display());
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--grid", "10", "--ic", &bad], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
