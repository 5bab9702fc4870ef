use proptest::prelude::*;
use qfpme_core::operators::pauli_x;
use qfpme_core::spectral::{classical_energetics, engine_energetics, solve_classical_two_level, solve_engine};
use qfpme_core::stats::Moments;
use qfpme_core::thermo::{ensemble_thermo, EnergyFrame, ThermoLedger};
use qfpme_core::trajectory::{classical_ledger, simulate_belavkin, simulate_classical, RunSpec, StatePath};
use qfpme_core::{BangBang, DensityMatrix, Engine, RngStream, Truncation};

const NB_UNIT: f64 = 0.581_976_706_869_326_4;

fn classical_ledgers(model: &BangBang, run: &RunSpec, seed: u64, n: u64) -> Vec<ThermoLedger> {
    (0..n)
        .map(|i| {
            let r = simulate_classical(model, run, RngStream::new(seed, i)).unwrap();
            classical_ledger(&r, model, run.mark_stride).unwrap()
        })
        .collect()
}

#[test]
fn two_level_power_matches_spectral() {
    let model = BangBang::new(1.0, 0.1, NB_UNIT, 0.5, 1.0).unwrap();
    let run = RunSpec { burn_in: 5000, mark_stride: 4000, ..RunSpec::new(0.01, 4000) };
    let ledgers = classical_ledgers(&model, &run, 51, 4000);
    let rates = ensemble_thermo(&ledgers, (0.0, 40.0)).unwrap();
    let st = solve_classical_two_level(&model, Truncation::default()).unwrap();
    let e = classical_energetics(&st, &model).unwrap();
    assert!(rates.power.within(e.power, 3.0), "{:?} vs {}", rates.power, e.power);
    assert!(rates.heat.within(e.heat, 3.0), "{:?} vs {}", rates.heat, e.heat);
    assert_eq!(rates.meas_energy.value, 0.0);
    for l in &ledgers {
        assert_eq!(l.meas_energy, 0.0);
        assert!(l.closure_error() < 1e-12);
    }
}

#[test]
fn two_level_steady_state_balances_power_and_heat() {
    let model = BangBang::new(1.0, 0.1, NB_UNIT, 5.0, 1.0).unwrap();
    let run = RunSpec { burn_in: 5000, mark_stride: 4000, ..RunSpec::new(0.01, 4000) };
    let ledgers = classical_ledgers(&model, &run, 52, 3000);
    let mut total = Moments::new();
    for l in &ledgers {
        total.push((l.work + l.heat + l.meas_energy) / 40.0);
    }
    assert!(total.mean().abs() < 3.0 * total.std_err() + 1e-15, "{} ± {}", total.mean(), total.std_err());
}

struct EngineRun {
    ledgers: Vec<ThermoLedger>,
    estimator: Moments,
}

fn engine_ensemble(model: &Engine, seed: u64, n: u64) -> EngineRun {
    let qm = model.qfpme().unwrap();
    let frame = EnergyFrame::ThermodynamicHamiltonian(model.thermodynamic_hamiltonian());
    let run = RunSpec { burn_in: 2000, snapshot_stride: 1, mark_stride: 2000, ..RunSpec::new(0.005, 2000) };
    let rho0 = DensityMatrix::from_populations(&[0.5, 0.5]).unwrap();
    let sx = pauli_x();
    let mut ledgers = Vec::new();
    let mut estimator = Moments::new();
    for i in 0..n {
        let (r, l) = simulate_belavkin(&qm, &rho0, &run, RngStream::new(seed, i), Some(&frame)).unwrap();
        let StatePath::Quantum { snapshots, .. } = &r.states else { unreachable!() };
        let p: f64 = (0..run.steps)
            .map(|k| -model.omega * model.g * r.d_path[k] * sx.expect(&snapshots[k]))
            .sum::<f64>()
            / run.steps as f64;
        estimator.push(p);
        ledgers.push(l.unwrap());
    }
    EngineRun { ledgers, estimator }
}

#[test]
fn engine_without_bath_converts_measurement_energy_into_work() {
    let model = Engine::new(1.0, 1.0, 0.0, NB_UNIT, 1.0, 1.0).unwrap();
    let run = engine_ensemble(&model, 53, 600);
    let rates = ensemble_thermo(&run.ledgers, (0.0, 10.0)).unwrap();
    assert_eq!(rates.heat.value, 0.0);
    let mut sum = Moments::new();
    for l in &run.ledgers {
        sum.push((l.work + l.meas_energy) / 10.0);
    }
    assert!(sum.mean().abs() < 3.0 * sum.std_err(), "{} ± {}", sum.mean(), sum.std_err());
    let st = solve_engine(&model, Truncation::default()).unwrap();
    let e = engine_energetics(&st, &model).unwrap();
    assert!(rates.power.within(e.power, 3.0), "{:?} vs {}", rates.power, e.power);
    assert!(rates.meas_energy.within(e.meas_energy, 3.0), "{:?} vs {}", rates.meas_energy, e.meas_energy);
}

#[test]
fn engine_power_estimator_matches_ledger() {
    let model = Engine::new(1.0, 1.0, 0.2, NB_UNIT, 1.0, 1.0).unwrap();
    let run = engine_ensemble(&model, 54, 600);
    let rates = ensemble_thermo(&run.ledgers, (0.0, 10.0)).unwrap();
    let est = &run.estimator;
    let se = (est.std_err().powi(2) + rates.power.std_err.powi(2)).sqrt();
    assert!((est.mean() - rates.power.value).abs() < 3.0 * se, "{} vs {:?}", est.mean(), rates.power);
    let mut balance = Moments::new();
    for l in &run.ledgers {
        balance.push((l.work + l.heat + l.meas_energy) / 10.0);
    }
    assert!(balance.mean().abs() < 3.0 * balance.std_err(), "{} ± {}", balance.mean(), balance.std_err());
    let st = solve_engine(&model, Truncation::default()).unwrap();
    let e = engine_energetics(&st, &model).unwrap();
    assert!(rates.power.within(e.power, 3.0), "{:?} vs {}", rates.power, e.power);
    assert!(rates.heat.within(e.heat, 3.0), "{:?} vs {}", rates.heat, e.heat);
}

#[test]
fn window_outside_marks_is_rejected() {
    let model = BangBang::new(1.0, 0.1, NB_UNIT, 0.5, 1.0).unwrap();
    let run = RunSpec { mark_stride: 100, ..RunSpec::new(0.01, 200) };
    let ledgers = classical_ledgers(&model, &run, 55, 3);
    assert!(ensemble_thermo(&ledgers, (0.0, 2.0)).is_ok());
    assert!(ensemble_thermo(&ledgers, (0.0, 3.0)).is_err());
    assert!(ensemble_thermo(&ledgers, (1.0, 1.0)).is_err());
    assert!(ensemble_thermo(&ledgers[..1], (0.0, 2.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn classical_ledger_closes_pathwise(seed in 0u64..10_000, kappa in 0.01f64..0.5, lambda in 0.05f64..5.0) {
        let model = BangBang::new(1.0, kappa, NB_UNIT, lambda, 1.0).unwrap();
        let r = simulate_classical(&model, &RunSpec::new(0.01, 500), RngStream::new(seed, 0)).unwrap();
        let l = classical_ledger(&r, &model, 0).unwrap();
        prop_assert!(l.max_closure_error < 1e-12);
        prop_assert_eq!(l.meas_energy, 0.0);
    }

    #[test]
    fn engine_ledgers_close_in_both_frames(seed in 0u64..10_000, kappa in 0.0f64..0.5, g in 0.2f64..2.0) {
        let model = Engine::new(1.0, g, kappa, NB_UNIT, 1.0, 1.0).unwrap();
        let qm = model.qfpme().unwrap();
        let rho0 = DensityMatrix::pure(2, 1);
        let run = RunSpec::new(0.005, 300);
        let frames = [EnergyFrame::BareHamiltonian, EnergyFrame::ThermodynamicHamiltonian(model.thermodynamic_hamiltonian())];
        for frame in &frames {
            let (_, l) = simulate_belavkin(&qm, &rho0, &run, RngStream::new(seed, 0), Some(frame)).unwrap();
            prop_assert!(l.unwrap().max_closure_error < 1e-12);
        }
    }
}
