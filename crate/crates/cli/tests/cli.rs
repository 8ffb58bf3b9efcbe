use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ionprep(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ionprep"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("IONPREP_SPECIES_DIR")
        .output()
        .expect("binary runs")
}

/// Header and rows of a CSV written by the tool (provenance line skipped).
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(split_csv).collect();
    (header, rows)
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut quoted = false;
    for c in line.chars() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(String::new()),
            _ => out.last_mut().unwrap().push(c),
        }
    }
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn levels_table() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ionprep(&["levels"], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("levels.csv"));
    let ground: Vec<_> = rows.iter().filter(|r| r[0] == "S1/2").collect();
    assert_eq!(ground.len(), 16);
    let energy = |f: &str, m: &str| -> f64 {
        ground.iter().find(|r| r[col(&h, "F")] == f && r[col(&h, "M")] == m).unwrap()[col(&h, "energy_hz")].parse().unwrap()
    };
    let qubit = (energy("4", "1") - energy("3", "1")).abs();
    assert!((qubit - 3.123e9).abs() < 2e6, "{qubit}");

    assert!(ionprep(&["levels", "--field", "0"], dir.path()).status.success());
    let (_, rows) = read_csv(&dir.path().join("levels.csv"));
    for f in ["3", "4"] {
        let e: Vec<f64> = rows.iter().filter(|r| r[0] == "S1/2" && r[1] == f).map(|r| r[3].parse().unwrap()).collect();
        assert!(e.iter().all(|x| (x - e[0]).abs() < 1e-3));
    }
}

#[test]
fn fssp_outputs_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(ionprep(&["fssp"], a.path()).status.success());
    assert!(ionprep(&["fssp", "--jobs", "3"], b.path()).status.success());
    for f in ["fssp_trace.csv", "fssp_summary.json", "fssp_initial_states.csv", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let s = json(&a.path().join("fssp_summary.json"));
    let fp = s["results"]["fixed_point_error"].as_f64().unwrap();
    assert!((fp / 6.3e-4 - 1.0).abs() < 0.05, "{fp}");
    assert!(s["config"]["species"] == "Ca43");
    assert_eq!(s["version"], env!("CARGO_PKG_VERSION"));
    let (_, states) = read_csv(&a.path().join("fssp_initial_states.csv"));
    assert_eq!(states.len(), 16);

    let check = ionprep(&["check"], a.path());
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stderr));
}

#[test]
fn trace_from_the_mirror_state() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ionprep(&["fssp", "--initial", "4,-4"], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("fssp_trace.csv"));
    let e: Vec<f64> = rows.iter().map(|r| r[col(&h, "error")].parse().unwrap()).collect();
    assert_eq!(e[0], 1.0);
    assert!(e.windows(2).skip(10).all(|w| w[1] <= w[0] + 1e-14));
    assert!(*e.last().unwrap() < 1e-3);
}

#[test]
fn bad_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = ionprep(&["fssp", "--initial", "9,9"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown state"));
    assert_eq!(ionprep(&["sweep", "--grid", "0.1,abc"], dir.path()).status.code(), Some(2));

    let species = tempfile::tempdir().unwrap();
    fs::write(species.path().join("Ca43.toml"), "not = [valid").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ionprep"))
        .args(["fssp", "--out"])
        .arg(dir.path())
        .env("IONPREP_SPECIES_DIR", species.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cycle_cap_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    let text = ionprep::config::DEFAULT_CA43.replace("max_cycles = 100000", "max_cycles = 50");
    fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(ionprep(&["fssp", "--config", cfg], dir.path()).status.code(), Some(4));
    assert!(ionprep(&["fssp", "--config", cfg, "--allow-partial"], dir.path()).status.success());
    let s = json(&dir.path().join("fssp_summary.json"));
    assert_eq!(s["results"]["run"]["converged"], false);
}

#[test]
fn sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ionprep(&["sweep", "--grid", "0.025,0.05,0.075,0.15"], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    let fp: Vec<f64> = rows.iter().map(|r| r[col(&h, "fixed_point_error")].parse().unwrap()).collect();
    assert!(fp.windows(2).all(|w| w[1] > w[0]));
    // >= 9 significant digits
    assert!(rows[0][col(&h, "steady_error")].split('e').next().unwrap().len() >= 10);

    assert!(ionprep(&["sweep", "--grid", ""], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("sweep.csv"));
    assert!(rows.is_empty());
    assert_eq!(h.len(), 7);
}

#[test]
fn species_scan_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    // Mg and Ba points may fail their bands, but every point must run.
    assert!(ionprep(&["species-scan"], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("species_scan.csv"));
    let cfg = ionprep::config::RunConfig::default_ca43();
    let lib = ionprep::schemes::cross_species_errors(&cfg, &|n: &str| ionprep::species::SpeciesData::builtin(n));
    assert_eq!(rows.len(), lib.len());
    for (r, l) in rows.iter().zip(&lib) {
        assert_eq!(r[col(&h, "species")], l.species);
        let e: f64 = r[col(&h, "steady_error")].parse().unwrap();
        let want = l.result.as_ref().unwrap().steady_error;
        assert!((e / want - 1.0).abs() < 1e-11);
    }
}

#[test]
fn budget_table() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ionprep(&["budget"], dir.path()).status.success());
    let (h, rows) = read_csv(&dir.path().join("budget.csv"));
    assert_eq!(h[0], "section");
    let total = rows.iter().find(|r| r[1] == "Total expected error").unwrap();
    let inputs = ionprep::budget::BudgetInputs::default_ca43();
    let report = inputs.report(&ionprep::species::SpeciesData::builtin("Ca43").unwrap()).unwrap();
    let b: f64 = total[col(&h, "bright")].parse().unwrap();
    assert!((b / report.totals.total[0].value - 1.0).abs() < 1e-9);
    assert!(fs::read_to_string(dir.path().join("budget.txt")).unwrap().contains("Total expected error"));
    assert!(ionprep(&["check"], dir.path()).status.success());
}
