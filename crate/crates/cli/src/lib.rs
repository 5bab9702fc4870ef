//! Experiment runner: configuration, CSV export and the figure experiments.

pub mod config;
pub mod error;
pub mod experiments;
pub mod table;

use std::fs;
use std::path::PathBuf;

use serde_json::{json, Map, Value};

pub use config::{ConfigFile, Experiment, ExperimentConfig};
pub use error::{CliError, Result};
pub use experiments::{execute, RunReport};
pub use table::{export_csv, read_csv, Table};

/// Files written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub csv: Vec<PathBuf>,
    pub sidecar: PathBuf,
    pub report: RunReport,
}

/// Runs `cfg` on its own thread pool and writes `<out>/<table>.csv` plus `<out>/<tag>.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    let report = pool.install(|| execute(cfg))?;
    fs::create_dir_all(&cfg.out)?;
    let mut csv = Vec::new();
    let mut outputs = Vec::new();
    for (name, table) in &report.tables {
        let path = cfg.out.join(name);
        let nan_count = export_csv(table, &path)?;
        outputs.push(json!({
            "file": name,
            "columns": table.header,
            "rows": table.rows.len(),
            "nan_count": nan_count,
        }));
        csv.push(path);
    }
    let config: Map<String, Value> = cfg.to_pairs().into_iter().map(|(k, v)| (k, Value::String(v))).collect();
    let sidecar_value = json!({
        "experiment": cfg.experiment.tag(),
        "config": config,
        "outputs": outputs,
        "diagnostics": report.diagnostics,
    });
    let sidecar = cfg.out.join(format!("{}.json", cfg.experiment.tag()));
    fs::write(&sidecar, serde_json::to_string_pretty(&sidecar_value)? + "\n")?;
    Ok(RunSummary { csv, sidecar, report })
}

/// Reads the config echo back out of a sidecar written by [`run_experiment`].
pub fn config_from_sidecar(text: &str) -> Result<ConfigFile> {
    let v: Value = serde_json::from_str(text)?;
    let pairs = v
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| CliError::config("config", "sidecar has no config echo"))?;
    let mut file = ConfigFile::default();
    for (k, val) in pairs {
        let s = val.as_str().ok_or_else(|| CliError::config(k, "echo value is not a string"))?;
        file.global.insert(k.clone(), s.to_string());
    }
    Ok(file)
}
