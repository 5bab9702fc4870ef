//! The experiments behind each subcommand and figure tag.

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use qfpme_core::entropy_ft::{
    classical_entropy, fast_detector_eta, ft_estimator, ft_for_m_check, quantum_entropy, sigma_m_fast_detector, sigma_m_mse,
    EntropyRecord, FtEstimate, FtMode,
};
use qfpme_core::grid_solver::{Grid, GridSolver, SteadyGrid};
use qfpme_core::operators::{pauli_x, pauli_y, pauli_z};
use qfpme_core::spectral::{
    classical_energetics, classical_power_extrapolated, engine_energetics, reconstruct, solve_classical_two_level, solve_engine, support_half_width, Reconstruction,
    SpectralState,
};
use qfpme_core::stats::{mean_se, Estimate};
use qfpme_core::thermo::{EnergyFrame, ThermoLedger};
use qfpme_core::trajectory::{
    classical_ledger, simulate_belavkin, simulate_classical, simulate_kraus_jump, KrausSetup, ModelTag, RunSpec, StatePath,
};
use qfpme_core::{BangBang, DensityMatrix, Engine, QfpmeModel, RngStream, TrajectoryRecord, Truncation};

use crate::config::{Experiment, ExperimentConfig, ModelKind, Sampler};
use crate::error::Result;
use crate::table::Table;

/// In-memory result of one experiment: named tables plus sidecar diagnostics.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub tables: Vec<(String, Table)>,
    pub diagnostics: Map<String, Value>,
}

impl RunReport {
    fn table(&mut self, name: &str, table: Table) {
        self.tables.push((name.to_string(), table));
    }

    fn diag(&mut self, key: &str, value: Value) {
        self.diagnostics.insert(key.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunReport> {
    match cfg.experiment {
        Experiment::Fig2 => fig2(cfg),
        Experiment::Fig3 => fig3(cfg),
        Experiment::Fig4 => fig4(cfg),
        Experiment::Fig5 => fig5(cfg),
        Experiment::Fig6 => quantum_ft(cfg, "fig6"),
        Experiment::Steady => steady(cfg),
        Experiment::Grid => grid(cfg),
        Experiment::Traj => traj(cfg),
        Experiment::Ft => match cfg.model {
            ModelKind::TwoLevelBangBang => classical_ft(cfg),
            ModelKind::Engine => quantum_ft(cfg, "ft"),
        },
    }
}

fn est(e: Estimate) -> Value {
    json!({ "value": finite_or_null(e.value), "std_err": finite_or_null(e.std_err) })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn spectral_diag(st: &SpectralState) -> Value {
    json!({
        "truncation": st.truncation,
        "condition": finite_or_null(st.condition),
        "refinement_change": finite_or_null(st.refinement_change),
        "reconstruction_ok": st.reconstruction_ok,
    })
}

fn grid_diag(s: &SteadyGrid) -> Value {
    json!({ "residual": s.residual, "iterations": s.iterations })
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn engine_frame(model: &Engine) -> EnergyFrame {
    EnergyFrame::ThermodynamicHamiltonian(model.thermodynamic_hamiltonian())
}

fn stream(cfg: &ExperimentConfig, index: u64, tag: u64) -> RngStream {
    RngStream::new(cfg.master_seed, index).child(tag)
}

/// Order-preserving parallel map over trajectory indices.
fn ensemble<T, F>(n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

fn grid_steady(cfg: &ExperimentConfig, model: &QfpmeModel) -> Result<(GridSolver, SteadyGrid)> {
    let grid = Grid::for_model(model, cfg.cells)?;
    let solver = GridSolver::new(model, grid)?;
    let steady = solver.steady_state(cfg.steady_tol)?;
    Ok((solver, steady))
}

fn fig2(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (sweep, fam) = (cfg.sweep()?, cfg.families()?);
    let mut table = Table::new(&[
        fam.param.name(),
        sweep.param.name(),
        "power_over_kappa_omega",
        "heat_over_kappa_omega",
        "eta",
        "first_law_residual",
        "power_extrapolated_over_kappa_omega",
        "extrapolated_first_law_residual",
        "truncation",
    ]);
    let points: Vec<(f64, f64)> = fam.values.iter().flat_map(|&f| sweep.values.iter().map(move |&s| (f, s))).collect();
    let rows = points
        .par_iter()
        .map(|&(f, s)| {
            let p = cfg.point().with(fam.param, f, cfg.gamma).with(sweep.param, s, cfg.gamma);
            let model = cfg.bang_bang(p)?;
            let st = solve_classical_two_level(&model, cfg.truncation)?;
            let e = classical_energetics(&st, &model)?;
            let scale = model.kappa * model.omega;
            let ex = classical_power_extrapolated(&model, Truncation::Fixed(st.truncation)).map_or(f64::NAN, |x| x.value);
            let row = vec![
                f,
                s,
                e.power / scale,
                e.heat / scale,
                e.eta,
                (e.power + e.heat) / scale,
                ex / scale,
                (ex + e.heat) / scale,
                st.truncation as f64,
            ];
            Ok((row, st.condition))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = RunReport::default();
    let mut worst_condition: f64 = 0.0;
    for (row, cond) in rows {
        worst_condition = worst_condition.max(cond);
        table.push(row);
    }
    let residual = table.column("first_law_residual").unwrap_or_default().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    report.diag("max_condition", finite_or_null(worst_condition));
    report.diag("max_abs_first_law_residual", json!(residual));
    report.table("fig2.csv", table);

    let model = cfg.bang_bang(cfg.inset_point())?;
    let st = solve_classical_two_level(&model, cfg.truncation)?;
    let e = classical_energetics(&st, &model)?;
    let (solver, steady) = grid_steady(cfg, &model.qfpme()?)?;
    let ge = solver.thermo(&steady.state, &EnergyFrame::BareHamiltonian)?;
    let mut inset = Table::new(&["d", "spectral_probability", "grid_probability"]);
    let grid_p = steady.state.probability();
    let centers = solver.grid().centers();
    let spec_p: Vec<f64> = centers.iter().map(|&d| reconstruct(&st, d).probability()).collect();
    for ((d, s), g) in centers.iter().zip(&spec_p).zip(&grid_p) {
        inset.push(vec![*d, *s, *g]);
    }
    report.diag(
        "inset",
        json!({
            "kappa": model.kappa,
            "lambda": model.lambda,
            "spectral": spectral_diag(&st),
            "grid": grid_diag(&steady),
            "sup_diff_probability": sup_diff(&spec_p, &grid_p),
            "spectral_power": e.power,
            "spectral_heat": e.heat,
            "grid_power": ge.power,
            "grid_heat": ge.heat,
            "grid_meas_energy": ge.meas_energy,
            "grid_first_law_residual": ge.power + ge.heat + ge.meas_energy - ge.du_dt,
        }),
    );
    report.table("fig2_inset.csv", inset);
    Ok(report)
}

fn fig3(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (sweep, fam) = (cfg.sweep()?, cfg.families()?);
    let mut table = Table::new(&[
        fam.param.name(),
        sweep.param.name(),
        "power_over_g_omega",
        "meas_energy_over_g_omega",
        "heat_over_g_omega",
        "first_law_residual",
        "truncation",
    ]);
    let points: Vec<(f64, f64)> = fam.values.iter().flat_map(|&f| sweep.values.iter().map(move |&s| (f, s))).collect();
    let rows = points
        .par_iter()
        .map(|&(f, s)| {
            let p = cfg.point().with(fam.param, f, cfg.gamma).with(sweep.param, s, cfg.gamma);
            let model = cfg.engine(p)?;
            let st = solve_engine(&model, cfg.truncation)?;
            let e = engine_energetics(&st, &model)?;
            let scale = model.g * model.omega;
            Ok(vec![
                f,
                s,
                e.power / scale,
                e.meas_energy / scale,
                e.heat / scale,
                (e.power + e.heat + e.meas_energy) / scale,
                st.truncation as f64,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    for row in rows {
        table.push(row);
    }
    let mut report = RunReport::default();
    let residual = table.column("first_law_residual").unwrap_or_default().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    report.diag("max_abs_first_law_residual", json!(residual));
    report.table("fig3.csv", table);

    let model = cfg.engine(cfg.inset_point())?;
    let st = solve_engine(&model, cfg.truncation)?;
    let (solver, steady) = grid_steady(cfg, &model.qfpme()?)?;
    let ge = solver.thermo(&steady.state, &engine_frame(&model))?;
    let centers = solver.grid().centers();
    let (grid_p, grid_x) = (steady.state.probability(), steady.state.field(&pauli_x()));
    let mut inset = Table::new(&["d", "spectral_probability", "spectral_a_x", "grid_probability", "grid_a_x"]);
    let (mut spec_p, mut spec_x) = (Vec::new(), Vec::new());
    for (k, &d) in centers.iter().enumerate() {
        let (p, ax) = match reconstruct(&st, d) {
            Reconstruction::Engine { p, a_x, .. } => (p, a_x),
            Reconstruction::Classical { p, .. } => (p, f64::NAN),
        };
        spec_p.push(p);
        spec_x.push(ax);
        inset.push(vec![d, p, ax, grid_p[k], grid_x[k]]);
    }
    report.diag(
        "inset",
        json!({
            "kappa": model.kappa,
            "lambda": model.lambda,
            "spectral": spectral_diag(&st),
            "grid": grid_diag(&steady),
            "sup_diff_probability": sup_diff(&spec_p, &grid_p),
            "sup_diff_a_x": sup_diff(&spec_x, &grid_x),
            "grid_power": ge.power,
            "grid_heat": ge.heat,
            "grid_meas_energy": ge.meas_energy,
        }),
    );
    report.table("fig3_inset.csv", inset);
    Ok(report)
}

struct ClassicalSample {
    record: EntropyRecord,
    sigma_m_mse: f64,
}

fn classical_ensemble(cfg: &ExperimentConfig, model: &BangBang, n: u64, tag: u64) -> Result<Vec<ClassicalSample>> {
    let run = RunSpec { burn_in: cfg.burn_in, ..RunSpec::new(cfg.dt, cfg.steps) };
    ensemble(n, |i| {
        let r = simulate_classical(model, &run, stream(cfg, i, tag))?;
        Ok(ClassicalSample {
            record: classical_entropy(&r, model)?,
            sigma_m_mse: sigma_m_mse(&r, model.gamma, model.lambda)?,
        })
    })
}

fn ft_columns(prefix: &str) -> [String; 4] {
    [prefix.to_string(), format!("se_{prefix}"), format!("tail_mass_{prefix}"), format!("heavy_tail_{prefix}")]
}

fn ft_values(e: &FtEstimate) -> [f64; 4] {
    [e.estimate.value, e.estimate.std_err, e.tail_mass, f64::from(u8::from(e.heavy_tail))]
}

fn fig4(cfg: &ExperimentConfig) -> Result<RunReport> {
    let sweep = cfg.sweep()?;
    let mut header = vec![sweep.param.name().to_string()];
    header.extend(ft_columns("ft_sigma_sigma_m"));
    header.extend(ft_columns("ft_sigma"));
    header.push("n_traj".into());
    let mut table = Table::new(&header);
    for (k, &v) in sweep.values.iter().enumerate() {
        let model = cfg.bang_bang(cfg.point().with(sweep.param, v, cfg.gamma))?;
        let samples = classical_ensemble(cfg, &model, cfg.n_traj, k as u64)?;
        let records: Vec<EntropyRecord> = samples.into_iter().map(|s| s.record).collect();
        let full = ft_estimator(&records, FtMode::SigmaPlusSigmaM)?;
        let naive = ft_estimator(&records, FtMode::SigmaOnly)?;
        let mut row = vec![v];
        row.extend(ft_values(&full));
        row.extend(ft_values(&naive));
        row.push(cfg.n_traj as f64);
        table.push(row);
    }
    let mut report = RunReport::default();
    report.diag("duration", json!(cfg.dt * cfg.steps as f64));
    report.table("fig4.csv", table);
    Ok(report)
}

fn moments<F: Fn(&ClassicalSample) -> f64>(samples: &[ClassicalSample], f: F, tau: f64) -> Estimate {
    let xs: Vec<f64> = samples.iter().map(|s| f(s) / tau).collect();
    mean_se(&xs)
}

fn fig5(cfg: &ExperimentConfig) -> Result<RunReport> {
    let sweep = cfg.sweep()?;
    let tau = cfg.dt * cfg.steps as f64;
    let mut table = Table::new(&[
        sweep.param.name(),
        "mean_sigma_rate",
        "se_mean_sigma_rate",
        "mean_sigma_m_rate",
        "se_mean_sigma_m_rate",
        "mean_sigma_m_mse_rate",
        "se_mean_sigma_m_mse_rate",
        "second_law_gap_rate",
        "se_second_law_gap_rate",
        "spectral_power_over_T",
        "n_traj",
    ]);
    let mut report = RunReport::default();
    let mut spectral_failures = Vec::new();
    let mut spectral_levels = Vec::new();
    for (k, &v) in sweep.values.iter().enumerate() {
        let model = cfg.bang_bang(cfg.point().with(sweep.param, v, cfg.gamma))?;
        let samples = classical_ensemble(cfg, &model, cfg.n_traj, 100 + k as u64)?;
        let s = moments(&samples, |x| x.record.sigma, tau);
        let sm = moments(&samples, |x| x.record.sigma_m, tau);
        let mse = moments(&samples, |x| x.sigma_m_mse, tau);
        let gap = moments(&samples, |x| x.record.sigma + x.record.sigma_m, tau);
        let extrapolated = classical_power_extrapolated(&model, cfg.truncation);
        let spectral = match extrapolated.map(|e| (e.value, json!({ "levels": e.levels, "error_estimate": e.error_estimate }))).or_else(|_| {
            let st = solve_classical_two_level(&model, cfg.truncation)?;
            let e = classical_energetics(&st, &model)?;
            Ok::<_, qfpme_core::Error>((e.power, json!({ "levels": [[st.truncation, e.power]], "error_estimate": null })))
        }) {
            Ok((power, detail)) => {
                spectral_levels.push(json!({ "value": v, "power": detail }));
                power / cfg.temperature()
            }
            Err(err) => {
                spectral_failures.push(json!({ "value": v, "error": err.to_string() }));
                f64::NAN
            }
        };
        table.push(vec![
            v,
            s.value,
            s.std_err,
            sm.value,
            sm.std_err,
            mse.value,
            mse.std_err,
            gap.value,
            gap.std_err,
            spectral,
            cfg.n_traj as f64,
        ]);
    }
    report.diag("duration", json!(tau));
    report.diag("spectral_power", Value::Array(spectral_levels));
    report.diag("spectral_failures", Value::Array(spectral_failures));
    report.table("fig5.csv", table);

    let mut inset = Table::new(&[sweep.param.name(), "mean_sigma_m_rate", "se_mean_sigma_m_rate", "closed_form_rate", "n_traj"]);
    for (k, &v) in sweep.values.iter().enumerate() {
        let model = cfg.bang_bang(cfg.inset_point().with(sweep.param, v, cfg.gamma))?;
        let samples = classical_ensemble(cfg, &model, cfg.inset_n_traj, 200 + k as u64)?;
        let sm = moments(&samples, |x| x.record.sigma_m, tau);
        let closed = sigma_m_fast_detector(model.lambda, model.gamma, model.kappa, model.n_b);
        inset.push(vec![v, sm.value, sm.std_err, closed, cfg.inset_n_traj as f64]);
    }
    report.diag("inset_kappa", json!(cfg.inset_kappa));
    report.table("fig5_inset.csv", inset);
    Ok(report)
}

fn classical_ft(cfg: &ExperimentConfig) -> Result<RunReport> {
    let model = cfg.bang_bang(cfg.point())?;
    let samples = classical_ensemble(cfg, &model, cfg.n_traj, 300)?;
    let records: Vec<EntropyRecord> = samples.iter().map(|s| s.record).collect();
    let full = ft_estimator(&records, FtMode::SigmaPlusSigmaM)?;
    let naive = ft_estimator(&records, FtMode::SigmaOnly)?;
    let s = mean_se(&records.iter().map(|r| r.sigma).collect::<Vec<_>>());
    let sm = mean_se(&records.iter().map(|r| r.sigma_m).collect::<Vec<_>>());
    let mut header: Vec<String> = ft_columns("ft_sigma_sigma_m").into();
    header.extend(ft_columns("ft_sigma"));
    header.extend(["mean_sigma", "se_mean_sigma", "mean_sigma_m", "se_mean_sigma_m", "n_traj"].map(String::from));
    let mut summary = Table::new(&header);
    let mut row: Vec<f64> = ft_values(&full).into();
    row.extend(ft_values(&naive));
    row.extend([s.value, s.std_err, sm.value, sm.std_err, cfg.n_traj as f64]);
    summary.push(row);

    let ms: Vec<i64> = records.iter().map(|r| r.m).collect();
    let mut counts = std::collections::BTreeMap::<i64, u64>::new();
    for &m in &ms {
        *counts.entry(m).or_default() += 1;
    }
    let mut hist = Table::new(&["m", "count"]);
    for (m, c) in &counts {
        hist.push(vec![*m as f64, *c as f64]);
    }

    let mut report = RunReport::default();
    let eta = fast_detector_eta(model.lambda, model.gamma);
    let mut check_table = Table::new(&["m", "count", "count_reversed", "log_ratio", "se_log_ratio", "target"]);
    match ft_for_m_check(&ms, model.beta_omega(), eta, cfg.min_count) {
        Ok(check) => {
            for b in &check.bins {
                check_table.push(vec![
                    b.m as f64,
                    b.count as f64,
                    b.count_reversed as f64,
                    b.log_ratio.value,
                    b.log_ratio.std_err,
                    b.target,
                ]);
            }
            report.diag(
                "m_check",
                json!({
                    "eta": eta,
                    "slope": est(check.slope),
                    "target_slope": check.target_slope,
                    "relative_slope_error": finite_or_null(check.relative_slope_error()),
                    "skipped": check.skipped,
                }),
            );
        }
        Err(err) => report.diag("m_check", json!({ "eta": eta, "error": err.to_string() })),
    }
    report.diag("duration", json!(cfg.dt * cfg.steps as f64));
    report.table("ft.csv", summary);
    report.table("ft_m.csv", hist);
    report.table("ft_m_check.csv", check_table);
    Ok(report)
}

fn kraus_setup(cfg: &ExperimentConfig, model: &Engine) -> Result<KrausSetup> {
    let rho = DensityMatrix::thermal(&model.thermodynamic_hamiltonian(), cfg.temperature())?;
    Ok(KrausSetup::with_grid_final(&model.qfpme()?, ModelTag::Engine, &rho, cfg.dt, cfg.steps, cfg.cells)?)
}

fn quantum_ft(cfg: &ExperimentConfig, prefix: &str) -> Result<RunReport> {
    let model = cfg.engine(cfg.point())?;
    let setup = kraus_setup(cfg, &model)?;
    let run = RunSpec::new(cfg.dt, cfg.steps);
    let outcomes = ensemble(cfg.n_traj, |i| {
        let (r, _) = simulate_kraus_jump(&setup, &run, stream(cfg, i, 400), None)?;
        Ok(quantum_entropy(&r, &setup)?)
    })?;
    let records: Vec<EntropyRecord> = outcomes.iter().flatten().copied().collect();
    let excluded = outcomes.len() - records.len();
    let cg = ft_estimator(&records, FtMode::SigmaPlusCg)?;
    let naive = ft_estimator(&records, FtMode::SigmaOnly)?;
    let s = mean_se(&records.iter().map(|r| r.sigma).collect::<Vec<_>>());
    let c = mean_se(&records.iter().filter_map(|r| r.sigma_m_cg).collect::<Vec<_>>());
    let gap = mean_se(&records.iter().map(|r| r.sigma + r.sigma_m_cg.unwrap_or(f64::NAN)).collect::<Vec<_>>());

    let mut header: Vec<String> = ft_columns("ft_sigma_sigma_m_cg").into();
    header.extend(ft_columns("ft_sigma"));
    header.extend(
        [
            "mean_sigma",
            "se_mean_sigma",
            "mean_sigma_m_cg",
            "se_mean_sigma_m_cg",
            "second_law_gap",
            "se_second_law_gap",
            "n_traj",
            "excluded",
            "excluded_fraction",
        ]
        .map(String::from),
    );
    let mut summary = Table::new(&header);
    let mut row: Vec<f64> = ft_values(&cg).into();
    row.extend(ft_values(&naive));
    row.extend([
        s.value,
        s.std_err,
        c.value,
        c.std_err,
        gap.value,
        gap.std_err,
        cfg.n_traj as f64,
        excluded as f64,
        excluded as f64 / cfg.n_traj as f64,
    ]);
    summary.push(row);

    let mut samples = Table::new(&["sigma", "sigma_m_cg"]);
    for o in &outcomes {
        match o {
            Some(r) => samples.push(vec![r.sigma, r.sigma_m_cg.unwrap_or(f64::NAN)]),
            None => samples.push(vec![f64::NAN, f64::NAN]),
        }
    }
    let mut report = RunReport::default();
    report.diag("duration", json!(cfg.dt * cfg.steps as f64));
    report.diag("excluded", json!(excluded));
    report.diag(
        "two_point",
        json!({ "initial": setup.initial.probabilities, "final": setup.final_.probabilities }),
    );
    report.table(&format!("{prefix}_summary.csv"), summary);
    report.table(&format!("{prefix}_samples.csv"), samples);
    Ok(report)
}

fn steady(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::default();
    let (st, table) = match cfg.model {
        ModelKind::TwoLevelBangBang => {
            let model = cfg.bang_bang(cfg.point())?;
            let st = solve_classical_two_level(&model, cfg.truncation)?;
            let e = classical_energetics(&st, &model)?;
            report.diag(
                "energetics",
                json!({ "power": e.power, "heat": e.heat, "meas_energy": e.meas_energy, "eta": e.eta }),
            );
            let mut t = Table::new(&["d", "probability", "p0", "p1"]);
            for d in reconstruction_grid(&st, cfg.cells) {
                if let Reconstruction::Classical { p, p0, p1 } = reconstruct(&st, d) {
                    t.push(vec![d, p, p0, p1]);
                }
            }
            (st, t)
        }
        ModelKind::Engine => {
            let model = cfg.engine(cfg.point())?;
            let st = solve_engine(&model, cfg.truncation)?;
            let e = engine_energetics(&st, &model)?;
            report.diag("energetics", json!({ "power": e.power, "heat": e.heat, "meas_energy": e.meas_energy }));
            let mut t = Table::new(&["d", "probability", "a_x", "a_z"]);
            for d in reconstruction_grid(&st, cfg.cells) {
                if let Reconstruction::Engine { p, a_x, a_z, .. } = reconstruct(&st, d) {
                    t.push(vec![d, p, a_x, a_z]);
                }
            }
            (st, t)
        }
    };
    report.diag("spectral", spectral_diag(&st));
    report.table("steady.csv", table);
    Ok(report)
}

fn reconstruction_grid(st: &SpectralState, points: usize) -> Vec<f64> {
    let w = support_half_width(st.sigma);
    (0..points).map(|i| -w + 2.0 * w * i as f64 / (points - 1) as f64).collect()
}

fn model_and_frame(cfg: &ExperimentConfig) -> Result<(QfpmeModel, EnergyFrame)> {
    Ok(match cfg.model {
        ModelKind::TwoLevelBangBang => (cfg.bang_bang(cfg.point())?.qfpme()?, EnergyFrame::BareHamiltonian),
        ModelKind::Engine => {
            let e = cfg.engine(cfg.point())?;
            (e.qfpme()?, engine_frame(&e))
        }
    })
}

fn grid(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (model, frame) = model_and_frame(cfg)?;
    let (solver, steady) = grid_steady(cfg, &model)?;
    let e = solver.thermo(&steady.state, &frame)?;
    let mut table = Table::new(&["d", "probability", "sx", "sy", "sz"]);
    let fields = [steady.state.field(&pauli_x()), steady.state.field(&pauli_y()), steady.state.field(&pauli_z())];
    for (k, (d, p)) in solver.grid().centers().into_iter().zip(steady.state.probability()).enumerate() {
        table.push(vec![d, p, fields[0][k], fields[1][k], fields[2][k]]);
    }
    let mut report = RunReport::default();
    report.diag("grid", grid_diag(&steady));
    report.diag(
        "energetics",
        json!({ "power": e.power, "heat": e.heat, "meas_energy": e.meas_energy, "du_dt": e.du_dt }),
    );
    report.table("grid.csv", table);
    Ok(report)
}

fn initial_state(cfg: &ExperimentConfig) -> Result<DensityMatrix> {
    Ok(match cfg.model {
        ModelKind::TwoLevelBangBang => DensityMatrix::from_populations(&[0.5, 0.5])?,
        ModelKind::Engine => DensityMatrix::thermal(&cfg.engine(cfg.point())?.thermodynamic_hamiltonian(), cfg.temperature())?,
    })
}

fn traj(cfg: &ExperimentConfig) -> Result<RunReport> {
    let run = RunSpec {
        burn_in: cfg.burn_in,
        snapshot_stride: 1,
        mark_stride: cfg.mark_stride,
        ..RunSpec::new(cfg.dt, cfg.steps)
    };
    let outcomes: Vec<(TrajectoryRecord, ThermoLedger)> = match cfg.sampler {
        Sampler::Classical => {
            let model = cfg.bang_bang(cfg.point())?;
            ensemble(cfg.n_traj, |i| {
                let r = simulate_classical(&model, &run, stream(cfg, i, 500))?;
                let l = classical_ledger(&r, &model, run.mark_stride)?;
                Ok((r, l))
            })?
        }
        Sampler::Belavkin => {
            let (model, frame) = model_and_frame(cfg)?;
            let rho = initial_state(cfg)?;
            ensemble(cfg.n_traj, |i| {
                let (r, l) = simulate_belavkin(&model, &rho, &run, stream(cfg, i, 501), Some(&frame))?;
                Ok((r, l.unwrap_or_default()))
            })?
        }
        Sampler::Kraus => {
            let (model, frame) = model_and_frame(cfg)?;
            let rho = initial_state(cfg)?;
            let tag = match cfg.model {
                ModelKind::TwoLevelBangBang => ModelTag::BangBang,
                ModelKind::Engine => ModelTag::Engine,
            };
            let setup = KrausSetup::with_grid_final(&model, tag, &rho, cfg.dt, cfg.steps, cfg.cells)?;
            let run = RunSpec { burn_in: 0, ..run };
            ensemble(cfg.n_traj, |i| {
                let (r, l) = simulate_kraus_jump(&setup, &run, stream(cfg, i, 502), Some(&frame))?;
                Ok((r, l.unwrap_or_default()))
            })?
        }
    };
    let mut ledgers = Table::new(&["index", "work", "heat", "meas_energy", "internal_energy_delta", "closure_error", "max_closure_error"]);
    for (i, (_, l)) in outcomes.iter().enumerate() {
        ledgers.push(vec![i as f64, l.work, l.heat, l.meas_energy, l.internal_energy_delta, l.closure_error(), l.max_closure_error]);
    }
    let first = &outcomes[0].0;
    let path = match &first.states {
        StatePath::Classical(a) => {
            let mut t = Table::new(&["step", "time", "d", "a"]);
            for (n, a) in a.iter().enumerate() {
                t.push(vec![n as f64, n as f64 * first.dt, first.d_path[n], *a]);
            }
            t
        }
        StatePath::Quantum { snapshots, .. } => {
            let mut t = Table::new(&["step", "time", "d", "sx", "sy", "sz"]);
            let (sx, sy, sz) = (pauli_x(), pauli_y(), pauli_z());
            for (n, rho) in snapshots.iter().enumerate() {
                t.push(vec![n as f64, n as f64 * first.dt, first.d_path[n], sx.expect(rho), sy.expect(rho), sz.expect(rho)]);
            }
            t
        }
    };
    let worst = outcomes.iter().map(|(_, l)| l.max_closure_error).fold(0.0f64, f64::max);
    let mut report = RunReport::default();
    report.diag("sampler", json!(cfg.sampler.name()));
    report.diag("max_step_closure_error", json!(worst));
    if let Some(j) = &first.jumps {
        report.diag("first_jump_count", json!(j.jump_count()));
    }
    report.table("traj.csv", path);
    report.table("traj_ledgers.csv", ledgers);
    Ok(report)
}
