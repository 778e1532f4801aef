use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epnozzle"))
}

fn template() -> String {
    let out = bin().arg("--emit-template").output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

/// Template on a small grid, with `edits` applied as line replacements.
fn config(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = template().replace("nodes = [33, 65]", "nodes = [9, 17]");
    for (from, to) in edits {
        assert!(text.contains(from), "template lacks {from}");
        text = text.replacen(from, to, 1);
    }
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg(cmd).arg("--config").arg(cfg).arg("--out").arg(out).args(extra).output().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn config_echo_is_stable() {
    let dir = scratch("echo");
    let cfg = config(&dir, &[("sigma = 1e-3", "sigma = 2.5e-4")]);
    let first = dir.join("a");
    assert!(run("background", &cfg, &first, &[]).status.success());
    let echo = fs::read_to_string(first.join("config.toml")).unwrap();
    // feeding the echo back must reproduce it byte for byte
    let second = dir.join("b");
    assert!(run("background", &first.join("config.toml"), &second, &[]).status.success());
    let again = fs::read_to_string(second.join("config.toml")).unwrap();
    assert_eq!(echo.replace(&*first.to_string_lossy(), "X"), again.replace(&*second.to_string_lossy(), "X"));
    assert!(echo.contains("sigma = 0.00025"));
}

#[test]
fn constant_background_has_flat_profiles() {
    let dir = scratch("background");
    let out = run("background", &config(&dir, &[]), &dir, &[]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.join("profiles.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "x,rho,u,E,phi0,Phi0,b");
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[1] - 1.0).abs() < 1e-12 && (cols[2] - 0.5).abs() < 1e-12, "{line}");
    }
    assert!(fs::read_to_string(dir.join("atlas.csv")).unwrap().lines().nth(1).unwrap().ends_with(",ok"));
}

#[test]
fn sonic_background_exits_2_and_names_location() {
    let dir = scratch("sonic");
    let cfg = config(&dir, &[("j0 = 0.5", "j0 = 1.3"), ("e0 = 0.0", "e0 = -2.0")]);
    let out = run("background", &cfg, &dir, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sonic breakdown at x ="));
}

#[test]
fn zero_sigma_gives_zero_fields() {
    let dir = scratch("zero");
    let out = run("solve", &config(&dir, &[("sigma = 1e-3", "sigma = 0.0")]), &dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir);
    assert_eq!(r["report"]["iterations"], 1);
    assert_eq!(r["report"]["converged"], true);
    let csv = fs::read_to_string(dir.join("fields.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[2], 0.0);
        assert_eq!(cols[3], 0.0);
    }
}

#[test]
fn default_solve_contracts() {
    let dir = scratch("solve");
    let out = run("solve", &config(&dir, &[]), &dir, &["--format", "vtk"]);
    assert!(out.status.success());
    let r = report(&dir);
    for key in ["sigma", "iterations", "converged", "contraction_factors", "residual", "residual_floor", "norm_summary"] {
        assert!(r["report"].get(key).is_some(), "missing {key}");
    }
    let factors = r["report"]["contraction_factors"].as_array().unwrap();
    assert!(!factors.is_empty() && factors.iter().all(|f| f.as_f64().unwrap() < 1.0));
    assert!(fs::read_to_string(dir.join("fields.vtk")).unwrap().starts_with("# vtk DataFile"));
}

#[test]
fn oversized_sigma_exits_4() {
    let dir = scratch("oversized");
    let out = run("solve", &config(&dir, &[("sigma = 1e-3", "sigma = 0.05")]), &dir, &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!dir.join("report.json").exists());
}

#[test]
fn invalid_config_exits_1() {
    let dir = scratch("invalid");
    let out = run("solve", &config(&dir, &[("gamma = 2.0", "gamma = 0.5")]), &dir, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_are_deterministic() {
    let dir = scratch("determinism");
    let cfg = config(&dir, &[]);
    for cmd in ["solve", "sweep"] {
        let (a, b) = (dir.join(format!("{cmd}-a")), dir.join(format!("{cmd}-b")));
        assert!(run(cmd, &cfg, &a, &["--seed", "7"]).status.success());
        assert!(run(cmd, &cfg, &b, &["--seed", "7"]).status.success());
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names.iter().filter(|n| *n != "config.toml") {
            assert!(fs::read(a.join(name)).unwrap() == fs::read(b.join(name)).unwrap(), "{cmd}: {name:?} differs");
        }
    }
}

#[test]
fn sweep_fits_linear_scaling() {
    let dir = scratch("sweep");
    let out = run("sweep", &config(&dir, &[]), &dir, &[]);
    assert!(out.status.success());
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("sweep.json")).unwrap()).unwrap();
    let slope = s["solution_slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() <= 0.1, "{slope}");
    let entries = s["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    for e in entries {
        assert!(dir.join(e["fields"].as_str().unwrap()).exists());
    }
}

#[test]
fn identity_domain_matches_solve() {
    let dir = scratch("identity");
    let cfg = config(&dir, &[]);
    assert!(run("solve", &cfg, &dir.join("flat"), &[]).status.success());
    assert!(run("perturb-domain", &cfg, &dir.join("mapped"), &[]).status.success());
    assert_eq!(fs::read(dir.join("flat/fields.csv")).unwrap(), fs::read(dir.join("mapped/fields.csv")).unwrap());
    let r = report(&dir.join("mapped"));
    assert_eq!(r["domain"]["correction_sup"], 0.0);
}

#[test]
fn deformed_domain_reports_map_summary() {
    let dir = scratch("deformed");
    let out = run("perturb-domain", &config(&dir, &[("epsilon = 0.0", "epsilon = 0.004")]), &dir, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir);
    assert!(r["domain"]["deviation"].as_f64().unwrap() > 0.0);
    assert!(r["domain"]["correction_sup"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_passes() {
    let dir = scratch("verify");
    let out = run("verify", &config(&dir, &[]), &dir, &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(": PASS")).count(), 6);
}
