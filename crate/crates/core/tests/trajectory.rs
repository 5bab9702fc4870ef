use qfpme_core::entropy_ft::{ft_estimator, quantum_entropy, sigma_jump, sigma_m_cg, FtMode};
use qfpme_core::grid_solver::{steady_state_grid, DEFAULT_STEADY_TOL};
use qfpme_core::operators::{pauli_x, pauli_z, FeedbackProtocol, Operator, QfpmeModel};
use qfpme_core::stats::{mean_se, Moments};
use qfpme_core::thermo::EnergyFrame;
use qfpme_core::trajectory::{
    averaged_final_state, ou_filter_update, read_dump, simulate_belavkin, simulate_classical, simulate_kraus_jump,
    trajectory_log_prob_ratio, write_dump, JumpRecord, KrausSetup, ModelTag, OuKernel, RunSpec, StatePath,
    TrajectoryRecord,
};
use qfpme_core::{BangBang, DensityMatrix, Engine, Error, RngStream};
use rand::Rng;
use rand_distr::StandardNormal;

const NB_UNIT: f64 = 0.581_976_706_869_326_4; // 1/(e − 1)

fn fig6_engine() -> Engine {
    Engine::new(1.0, 0.2, 0.1, NB_UNIT, 0.2, 1.0).unwrap()
}

fn thermal(e: &Engine) -> DensityMatrix {
    DensityMatrix::thermal(&e.thermodynamic_hamiltonian(), 1.0).unwrap()
}

fn kraus_setup(e: &Engine, dt: f64, steps: usize) -> KrausSetup {
    KrausSetup::with_grid_final(&e.qfpme().unwrap(), ModelTag::Engine, &thermal(e), dt, steps, 401).unwrap()
}

fn bang_bang() -> BangBang {
    BangBang::new(1.0, 0.1, NB_UNIT, 0.5, 1.0).unwrap()
}

#[test]
fn identical_streams_reproduce_records_bit_for_bit() {
    let run = RunSpec { snapshot_stride: 7, ..RunSpec::new(0.01, 300) };
    let bb = bang_bang();
    let a = simulate_classical(&bb, &run, RngStream::new(11, 4)).unwrap();
    assert_eq!(a, simulate_classical(&bb, &run, RngStream::new(11, 4)).unwrap());
    assert_ne!(a.d_path, simulate_classical(&bb, &run, RngStream::new(11, 5)).unwrap().d_path);

    let e = fig6_engine();
    let q = e.qfpme().unwrap();
    let rho = thermal(&e);
    let b = simulate_belavkin(&q, &rho, &run, RngStream::new(3, 1), None).unwrap().0;
    assert_eq!(b, simulate_belavkin(&q, &rho, &run, RngStream::new(3, 1), None).unwrap().0);

    let setup = kraus_setup(&e, 0.01, 300);
    let k = simulate_kraus_jump(&setup, &run, RngStream::new(3, 1), None).unwrap().0;
    assert_eq!(k, simulate_kraus_jump(&setup, &run, RngStream::new(3, 1), None).unwrap().0);
}

#[test]
fn dump_round_trips_and_rejects_foreign_data() {
    let e = fig6_engine();
    let setup = kraus_setup(&e, 0.01, 200);
    let run = RunSpec { snapshot_stride: 10, ..RunSpec::new(0.01, 200) };
    let kraus = simulate_kraus_jump(&setup, &run, RngStream::new(5, 9), None).unwrap().0;
    let classical = simulate_classical(&bang_bang(), &RunSpec::new(0.01, 200), RngStream::new(5, 9)).unwrap();
    for record in [kraus, classical] {
        let mut buf = Vec::new();
        write_dump(&record, &mut buf).unwrap();
        assert_eq!(read_dump(&mut buf.as_slice()).unwrap(), record);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dump(&mut bad.as_slice()), Err(Error::Io(_))));
        let mut old = buf.clone();
        old[8] = 99;
        assert!(matches!(read_dump(&mut old.as_slice()), Err(Error::Io(_))));
        assert!(read_dump(&mut &buf[..buf.len() - 3]).is_err());
    }
}

#[test]
fn frozen_drive_filter_reaches_stationary_gaussian() {
    let (gamma, lambda, dt, a) = (1.0, 0.5, 0.05, 0.7);
    let sigma = gamma / (8.0 * lambda);
    let mut rng = RngStream::new(1, 0).rng();
    let mut m = Moments::new();
    let mut sq = Moments::new();
    for _ in 0..200_000 {
        let mut d = -2.0;
        for _ in 0..300 {
            d = ou_filter_update(d, a, gamma, lambda, dt, &mut rng).0;
        }
        m.push(d);
        sq.push((d - a) * (d - a));
    }
    assert!((m.mean() - a).abs() < 3.0 * m.std_err(), "mean {} ± {}", m.mean(), m.std_err());
    assert!((sq.mean() - sigma).abs() < 3.0 * sq.std_err(), "var {} ± {}", sq.mean(), sq.std_err());
}

#[test]
fn wiener_increments_have_unit_rate() {
    let dt = 0.003;
    let mut rng = RngStream::new(2, 0).rng();
    let mut w = Moments::new();
    let mut w2 = Moments::new();
    for _ in 0..1_000_000 {
        let dw = ou_filter_update(0.0, 0.0, 1.0, 1.0, dt, &mut rng).1;
        w.push(dw);
        w2.push(dw * dw);
    }
    assert!(w.mean().abs() < 3.0 * w.std_err());
    assert!((w2.mean() - dt).abs() < 3.0 * w2.std_err());
}

#[test]
fn transient_moments_follow_exact_ou() {
    let (gamma, lambda, dt, steps, a, d0) = (2.0, 0.25, 0.01, 35, -1.0, 1.5);
    let t = dt * steps as f64;
    let mean = (-gamma * t).exp() * (d0 - a) + a;
    let var = gamma / (8.0 * lambda) * (1.0 - (-2.0 * gamma * t).exp());
    let kernel = OuKernel::new(gamma, lambda, dt);
    let mut rng = RngStream::new(3, 0).rng();
    let mut m = Moments::new();
    let mut sq = Moments::new();
    for _ in 0..200_000 {
        let mut d = d0;
        for _ in 0..steps {
            d = kernel.step(d, a, rng.sample(StandardNormal)).0;
        }
        m.push(d);
        sq.push((d - mean) * (d - mean));
    }
    assert!((m.mean() - mean).abs() < 3.0 * m.std_err());
    assert!((sq.mean() - var).abs() < 3.0 * sq.std_err());
}

#[test]
fn classical_without_bath_never_flips() {
    let bb = BangBang::new(1.0, 0.0, NB_UNIT, 0.5, 1.0).unwrap();
    for i in 0..20 {
        let r = simulate_classical(&bb, &RunSpec::new(0.01, 2000), RngStream::new(4, i)).unwrap();
        let a = r.classical_path().unwrap();
        assert_eq!(a.len(), 2001);
        assert_eq!(r.d_path.len(), 2002);
        assert!(a.iter().all(|x| *x == a[0]));
    }
}

#[test]
fn classical_occupation_is_one_half() {
    let bb = BangBang::new(1.0, 1.0, NB_UNIT, 5.0, 10.0).unwrap();
    let run = RunSpec { burn_in: 1000, fixed_start: Some((1.0, 1.0)), ..RunSpec::new(0.01, 1) };
    let up: Vec<f64> = (0..20_000)
        .map(|i| {
            let r = simulate_classical(&bb, &run, RngStream::new(6, i)).unwrap();
            f64::from(u8::from(r.classical_path().unwrap()[0] > 0.0))
        })
        .collect();
    let est = mean_se(&up);
    assert!(est.within(0.5, 3.0), "{est:?}");
}

#[test]
fn classical_detector_error_matches_grid_moment() {
    let bb = bang_bang();
    let steady = steady_state_grid(&bb.qfpme().unwrap(), 2001, DEFAULT_STEADY_TOL).unwrap().state;
    let low = Operator::ket_bra(2, 0, 0);
    let high = Operator::ket_bra(2, 1, 1);
    let oracle = steady.integrate(&low, |d| (d + 1.0).powi(2)) + steady.integrate(&high, |d| (d - 1.0).powi(2));

    let run = RunSpec { burn_in: 5000, ..RunSpec::new(0.01, 20_000) };
    let per_traj: Vec<f64> = (0..400)
        .map(|i| {
            let r = simulate_classical(&bb, &run, RngStream::new(7, i)).unwrap();
            let a = r.classical_path().unwrap();
            (0..r.steps).map(|n| (r.d_path[n] - a[n]).powi(2)).sum::<f64>() / r.steps as f64
        })
        .collect();
    let est = mean_se(&per_traj);
    assert!(est.within(oracle, 3.0), "{est:?} vs {oracle}");
}

#[test]
fn classical_ledger_closes_without_measurement_energy() {
    let bb = bang_bang();
    let r = simulate_classical(&bb, &RunSpec::new(0.01, 3000), RngStream::new(8, 0)).unwrap();
    let l = qfpme_core::trajectory::classical_ledger(&r, &bb, 100).unwrap();
    assert!(l.max_closure_error < 1e-12);
    assert_eq!(l.meas_energy, 0.0);
    assert_eq!(l.marks.len(), 31);
}

#[test]
fn closed_system_belavkin_conserves_purity() {
    let h0 = pauli_z().scale_re(0.5) + pauli_x().scale_re(0.3);
    let protocol = FeedbackProtocol::linear(h0, Operator::zeros(2), Vec::new()).unwrap();
    let model = QfpmeModel::new(protocol, pauli_x(), 1e-14, 1.0).unwrap();
    let rho = DensityMatrix::new(Operator::from_real_rows(2, &[0.5, 0.5, 0.5, 0.5]).unwrap()).unwrap();
    let run = RunSpec { snapshot_stride: 1, ..RunSpec::new(0.01, 1000) };
    let (r, _) = simulate_belavkin(&model, &rho, &run, RngStream::new(9, 0), None).unwrap();
    let StatePath::Quantum { snapshots, .. } = &r.states else { panic!() };
    assert_eq!(snapshots.len(), 1001);
    let worst = snapshots.iter().map(|s| ((*s * *s).trace().re - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "purity drift {worst}");
}

#[test]
fn quantum_ledgers_close_pathwise() {
    let e = fig6_engine();
    let frame = EnergyFrame::ThermodynamicHamiltonian(e.thermodynamic_hamiltonian());
    let run = RunSpec { mark_stride: 50, ..RunSpec::new(0.01, 500) };
    let (_, lb) = simulate_belavkin(&e.qfpme().unwrap(), &thermal(&e), &run, RngStream::new(10, 0), Some(&frame)).unwrap();
    let setup = kraus_setup(&e, 0.01, 500);
    let (_, lk) = simulate_kraus_jump(&setup, &run, RngStream::new(10, 0), Some(&frame)).unwrap();
    for l in [lb.unwrap(), lk.unwrap()] {
        assert!(l.max_closure_error < 1e-12);
        assert!(l.closure_error() < 1e-12);
        assert!(l.marks.len() >= 11);
    }
}

#[test]
fn step_size_preconditions_are_enforced() {
    let bb = BangBang::new(1.0, 10.0, NB_UNIT, 0.5, 1.0).unwrap();
    assert!(matches!(
        simulate_classical(&bb, &RunSpec::new(0.01, 10), RngStream::new(0, 0)),
        Err(Error::InvalidParameter { .. })
    ));
    let e = fig6_engine();
    let q = e.qfpme().unwrap();
    assert!(simulate_belavkin(&q, &thermal(&e), &RunSpec::new(0.1, 10), RngStream::new(0, 0), None).is_err());
    let setup = kraus_setup(&e, 0.01, 10);
    let run = RunSpec { burn_in: 5, ..RunSpec::new(0.01, 10) };
    assert!(simulate_kraus_jump(&setup, &run, RngStream::new(0, 0), None).is_err());
    assert!(simulate_kraus_jump(&setup, &RunSpec::new(0.02, 10), RngStream::new(0, 0), None).is_err());
}

#[test]
fn kraus_detector_path_follows_filter_recursion() {
    let e = fig6_engine();
    let setup = kraus_setup(&e, 0.01, 1000);
    for i in 0..5 {
        let (r, _) = simulate_kraus_jump(&setup, &RunSpec::new(0.01, 1000), RngStream::new(12, i), None).unwrap();
        assert_eq!(r.z_path.len(), 1001);
        assert!(r.filter_residual(e.gamma) < 1e-12);
        let ratio = trajectory_log_prob_ratio(&r, &setup).unwrap();
        let sampled = r.jumps.as_ref().unwrap().log_forward;
        assert!((ratio.log_forward - sampled).abs() < 1e-9 * sampled.abs().max(1.0));
    }
}

#[test]
fn kraus_without_bath_records_no_jumps() {
    let e = Engine::new(1.0, 0.2, 0.0, NB_UNIT, 0.01, 1.0).unwrap();
    let setup = kraus_setup(&e, 0.01, 500);
    for i in 0..50 {
        let (r, _) = simulate_kraus_jump(&setup, &RunSpec::new(0.01, 500), RngStream::new(13, i), None).unwrap();
        assert_eq!(r.jumps.unwrap().jump_count(), 0);
    }
}

#[test]
fn emission_counts_match_channel_intensity() {
    let e = fig6_engine();
    let setup = kraus_setup(&e, 0.01, 1000);
    let run = RunSpec { snapshot_stride: 1, ..RunSpec::new(0.01, 1000) };
    let emit = e.kappa * (1.0 + e.n_b);
    let excited = Operator::ket_bra(2, 0, 0);
    let diffs: Vec<f64> = (0..400)
        .map(|i| {
            let (r, _) = simulate_kraus_jump(&setup, &run, RngStream::new(14, i), None).unwrap();
            let StatePath::Quantum { snapshots, .. } = &r.states else { panic!() };
            let tags = &r.jumps.as_ref().unwrap().tags;
            let count = tags.iter().filter(|&&t| t == 1).count() as f64;
            // Feedback in step n acts on the state after the measurement of step n.
            let expected: f64 = (0..r.steps).map(|n| emit * excited.expect(&snapshots[n]) * r.dt).sum();
            count - expected
        })
        .collect();
    let est = mean_se(&diffs);
    assert!(est.within(0.0, 3.0), "{est:?}");
}

#[test]
fn belavkin_and_kraus_unravel_the_same_average() {
    let e = fig6_engine();
    let q = e.qfpme().unwrap();
    let rho = thermal(&e);
    let (dt, steps) = (0.005, 600);
    let oracle = pauli_z().expect(&averaged_final_state(&q, &rho, dt * steps as f64, 801).unwrap());
    let run = RunSpec { snapshot_stride: steps, ..RunSpec::new(dt, steps) };
    let last = |r: &TrajectoryRecord| match &r.states {
        StatePath::Quantum { snapshots, .. } => pauli_z().expect(snapshots.last().unwrap()),
        StatePath::Classical(_) => unreachable!(),
    };
    let setup = KrausSetup::with_grid_final(&q, ModelTag::Engine, &rho, dt, steps, 401).unwrap();
    let kraus: Vec<f64> = (0..4000)
        .map(|i| last(&simulate_kraus_jump(&setup, &run, RngStream::new(15, i), None).unwrap().0))
        .collect();
    let belavkin: Vec<f64> = (0..4000)
        .map(|i| last(&simulate_belavkin(&q, &rho, &run, RngStream::new(16, i), None).unwrap().0))
        .collect();
    let (k, b) = (mean_se(&kraus), mean_se(&belavkin));
    assert!(k.within(oracle, 3.0), "kraus {k:?} vs {oracle}");
    assert!(b.within(oracle, 3.0), "belavkin {b:?} vs {oracle}");
    let pooled = (k.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    assert!((k.value - b.value).abs() < 3.0 * pooled);
}

fn zero_hamiltonian_setup() -> (KrausSetup, Engine) {
    let e = fig6_engine();
    let protocol = FeedbackProtocol::linear(Operator::zeros(2), Operator::zeros(2), e.channels()).unwrap();
    let model = QfpmeModel::new(protocol, pauli_x(), e.lambda, e.gamma).unwrap();
    let rho = thermal(&e);
    (KrausSetup::new(&model, ModelTag::Generic, &rho, rho.op(), 0.01).unwrap(), e)
}

#[test]
fn time_symmetric_record_has_zero_measurement_entropy() {
    let (setup, _) = zero_hamiltonian_setup();
    let steps = 40;
    let half: Vec<f64> = (0..21).map(|n| 0.8 * (0.3 * n as f64).sin() - 0.2).collect();
    let d_path: Vec<f64> = half.iter().chain(half.iter().rev()).copied().collect();
    assert_eq!(d_path.len(), steps + 2);
    for v in 0..2 {
        let record = TrajectoryRecord {
            model: ModelTag::Generic,
            dt: 0.01,
            steps,
            d_path: d_path.clone(),
            states: StatePath::Quantum { stride: 0, snapshots: Vec::new() },
            jumps: Some(JumpRecord {
                v_i: v,
                v_f: v,
                p_vi: setup.initial.probabilities[v],
                p_vf: setup.final_.probabilities[v],
                tags: vec![0; steps],
                log_forward: 0.0,
            }),
            z_path: Vec::new(),
            stream: RngStream::new(0, 0),
        };
        let ratio = trajectory_log_prob_ratio(&record, &setup).unwrap();
        assert!(!ratio.excluded);
        assert!(ratio.log_ratio().abs() < 1e-10, "{ratio:?}");
        assert!(sigma_jump(&record, &setup).unwrap().abs() < 1e-12);
        assert!(sigma_m_cg(&record, &setup).unwrap().unwrap().abs() < 1e-10);
    }
}

#[test]
fn single_emission_carries_beta_omega() {
    let (setup, e) = zero_hamiltonian_setup();
    let mut tags = vec![0u8; 10];
    tags[4] = 1;
    let record = TrajectoryRecord {
        model: ModelTag::Generic,
        dt: 0.01,
        steps: 10,
        d_path: vec![0.0; 12],
        states: StatePath::Quantum { stride: 0, snapshots: Vec::new() },
        jumps: Some(JumpRecord { v_i: 0, v_f: 0, p_vi: 0.5, p_vf: 0.5, tags, log_forward: 0.0 }),
        z_path: Vec::new(),
        stream: RngStream::new(0, 0),
    };
    assert!((sigma_jump(&record, &setup).unwrap() - e.beta_omega()).abs() < 1e-12);
}

#[test]
fn coarse_grained_ft_is_exact_at_finite_dt() {
    let e = fig6_engine();
    let (dt, steps) = (0.01, 60);
    let setup = kraus_setup(&e, dt, steps);
    let records: Vec<_> = (0..20_000)
        .filter_map(|i| {
            let (r, _) = simulate_kraus_jump(&setup, &RunSpec::new(dt, steps), RngStream::new(17, i), None).unwrap();
            quantum_entropy(&r, &setup).unwrap()
        })
        .collect();
    assert!(records.len() > 19_900);
    let ft = ft_estimator(&records, FtMode::SigmaPlusCg).unwrap();
    assert!(ft.estimate.within(1.0, 3.0), "{ft:?}");
}
