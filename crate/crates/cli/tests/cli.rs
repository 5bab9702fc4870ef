use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use qfpme_cli::config::env_overrides;
use qfpme_cli::error::{EXIT_NON_CONVERGENCE, EXIT_VALIDATION};
use qfpme_cli::{config_from_sidecar, export_csv, read_csv, run_experiment, ConfigFile, Experiment, ExperimentConfig, Table};

fn config(experiment: Experiment, out: &Path, pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut flags: BTreeMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    flags.insert("out".into(), out.display().to_string());
    ExperimentConfig::resolve(experiment, None, &BTreeMap::new(), &flags).unwrap()
}

fn small_ft(out: &Path, threads: &str) -> ExperimentConfig {
    config(Experiment::Ft, out, &[("n_traj", "400"), ("steps", "200"), ("threads", threads), ("min_count", "5")])
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small_ft(a.path(), "1")).unwrap();
    run_experiment(&small_ft(b.path(), "1")).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    for (name, bytes) in &fa {
        if name.ends_with(".csv") {
            assert_eq!(bytes, &fb[name], "{name}");
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small_ft(a.path(), "1")).unwrap();
    run_experiment(&small_ft(b.path(), "3")).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    for name in ["ft.csv", "ft_m.csv", "ft_m_check.csv"] {
        assert_eq!(fa[name], fb[name], "{name}");
    }
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small_ft(a.path(), "1")).unwrap();
    let mut cfg = small_ft(b.path(), "1");
    cfg.master_seed = 2;
    run_experiment(&cfg).unwrap();
    assert_ne!(read_all(a.path())["ft.csv"], read_all(b.path())["ft.csv"]);
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Table::new(&["x", "y"]);
    t.push(vec![0.1, -1.0 / 3.0]);
    t.push(vec![f64::MIN_POSITIVE, f64::NAN]);
    t.push(vec![1e300, -0.0]);
    let path = dir.path().join("t.csv");
    assert_eq!(export_csv(&t, &path).unwrap(), 1);
    let back = read_csv(&path).unwrap();
    assert_eq!(back.header, t.header);
    for (r, s) in t.rows.iter().zip(&back.rows) {
        for (a, b) in r.iter().zip(s) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()), "{a} vs {b}");
        }
    }
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(2).unwrap().ends_with(','), "{text}");
}

#[test]
fn empty_table_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    export_csv(&Table::new(&["a", "b", "c"]), &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "a,b,c\n");
    assert!(read_csv(&path).unwrap().rows.is_empty());
}

#[test]
fn sidecar_lists_outputs_and_nan_counts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&small_ft(dir.path(), "1")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary.sidecar).unwrap()).unwrap();
    assert_eq!(v["experiment"], "ft");
    let outputs = v["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), summary.csv.len());
    for o in outputs {
        let table = read_csv(&dir.path().join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["rows"].as_u64().unwrap() as usize, table.rows.len());
        assert_eq!(o["nan_count"].as_u64().unwrap() as usize, table.nan_count());
        let cols: Vec<&str> = o["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
        assert_eq!(cols, table.header);
    }
}

#[test]
fn sidecar_echo_reproduces_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_experiment(&small_ft(a.path(), "2")).unwrap();
    let echo = config_from_sidecar(&fs::read_to_string(&first.sidecar).unwrap()).unwrap();
    let mut flags = BTreeMap::new();
    flags.insert("out".to_string(), b.path().display().to_string());
    let again = ExperimentConfig::resolve(Experiment::Ft, Some(&echo), &BTreeMap::new(), &flags).unwrap();
    run_experiment(&again).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    for name in ["ft.csv", "ft_m.csv", "ft_m_check.csv"] {
        assert_eq!(fa[name], fb[name], "{name}");
    }
}

#[test]
fn steady_profile_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&config(Experiment::Steady, dir.path(), &[])).unwrap();
    let t = summary.report.get("steady.csv").unwrap();
    let d = t.column("d").unwrap();
    let p = t.column("probability").unwrap();
    let h = d[1] - d[0];
    let mass: f64 = p.iter().sum::<f64>() * h;
    assert!((mass - 1.0).abs() < 1e-3, "{mass}");
    assert!(p.iter().all(|v| *v > -1e-8));
}

#[test]
fn file_sections_and_env_layers() {
    let file = ConfigFile::parse("kappa = 0.2\n[traj]\nkappa = 0.3\n").unwrap();
    let env = env_overrides(vec![("QFPME_LAMBDA".to_string(), "0.7".to_string())]).unwrap();
    let cfg = ExperimentConfig::resolve(Experiment::Traj, Some(&file), &env, &BTreeMap::new()).unwrap();
    assert_eq!((cfg.kappa, cfg.lambda), (0.3, 0.7));
    let cfg = ExperimentConfig::resolve(Experiment::Grid, Some(&file), &env, &BTreeMap::new()).unwrap();
    assert_eq!(cfg.kappa, 0.2);
}

fn qfpme(args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qfpme"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let ok = qfpme(&["steady", "--out", out], &[]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("steady.csv").exists());

    let bad = qfpme(&["steady", "--out", out], &[("QFPME_KAPPA", "-1")]);
    assert_eq!(bad.status.code(), Some(EXIT_VALIDATION));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("kappa"));

    let unknown = qfpme(&["steady", "--out", out], &[("QFPME_NOT_A_KEY", "1")]);
    assert_eq!(unknown.status.code(), Some(EXIT_VALIDATION));

    let not_figure = qfpme(&["figure", "steady", "--out", out], &[]);
    assert_eq!(not_figure.status.code(), Some(EXIT_VALIDATION));

    let stiff = qfpme(&["steady", "--out", out], &[("QFPME_LAMBDA", "10"), ("QFPME_KAPPA", "0.01")]);
    assert_eq!(stiff.status.code(), Some(EXIT_NON_CONVERGENCE), "{}", String::from_utf8_lossy(&stiff.stderr));
}
