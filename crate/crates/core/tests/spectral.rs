use proptest::prelude::*;
use qfpme_core::spectral::{
    classical_energetics, classical_power_extrapolated, engine_energetics, engine_zeroth_identity, halfline_overlap_hat, reconstruct,
    solve_classical_two_level, solve_engine, HermiteBasis, Reconstruction,
};
use qfpme_core::{BangBang, Engine, Error, Truncation};
use libm::erfc;

const NB_UNIT: f64 = 0.5819767068693265; // 1/(e − 1)

/// Composite Simpson rule on [a, b] with `n` (even) panels.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Plain power-basis He_n via the unscaled recurrence, independent of the library.
fn he_oracle(n: usize, sigma: f64, d: f64) -> f64 {
    let (mut p, mut c) = (1.0, d);
    if n == 0 {
        return 1.0;
    }
    for k in 1..n {
        let nx = d * c - sigma * k as f64 * p;
        p = c;
        c = nx;
    }
    c
}

fn g0(sigma: f64, d: f64) -> f64 {
    (-d * d / (2.0 * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma).sqrt()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[test]
fn g_integrates_to_kronecker_delta() {
    let s: f64 = 0.125;
    let b = HermiteBasis::new(s, 20).unwrap();
    let w = 20.0 * s.sqrt();
    for n in 0..=20 {
        let integral = simpson(|d| b.eval_g(n, d).unwrap(), -w, w, 20_000);
        let expected = if n == 0 { 1.0 } else { 0.0 };
        // Relative to the size of the integrand's L1 mass.
        let scale = simpson(|d| b.eval_g(n, d).unwrap().abs(), -w, w, 20_000).max(1.0);
        assert!((integral - expected).abs() < 1e-9 * scale, "n={n}: {integral}");
    }
}

#[test]
fn orthogonality_with_sigma_weights() {
    let s: f64 = 0.3;
    let w = 20.0 * s.sqrt();
    for n in 0..=20 {
        for m in (n % 2..=20).step_by(2) {
            let q = simpson(|d| he_oracle(n, s, d) * he_oracle(m, s, d) * g0(s, d), -w, w, 40_000);
            let norm = (factorial(n) * s.powi(n as i32) * factorial(m) * s.powi(m as i32)).sqrt();
            let expected = if n == m { 1.0 } else { 0.0 };
            assert!((q / norm - expected).abs() < 1e-9, "n={n} m={m}: {}", q / norm);
        }
    }
}

#[test]
fn detector_operator_eigenrelation() {
    let (gamma, lambda) = (1.3, 0.9);
    let s = gamma / (8.0 * lambda);
    let b = HermiteBasis::new(s, 22).unwrap();
    let h = 1e-3;
    for n in 0..=20 {
        let f = |d: f64| d * b.eval_g(n, d).unwrap();
        let g = |d: f64| b.eval_g(n, d).unwrap();
        for d in [-0.7, -0.1, 0.25, 0.6] {
            // Fourth-order central differences.
            let df = (-f(d + 2.0 * h) + 8.0 * f(d + h) - 8.0 * f(d - h) + f(d - 2.0 * h)) / (12.0 * h);
            let d2g = (-g(d + 2.0 * h) + 16.0 * g(d + h) - 30.0 * g(d) + 16.0 * g(d - h) - g(d - 2.0 * h))
                / (12.0 * h * h);
            let lhs = gamma * df + gamma * s * d2g;
            let rhs = -gamma * n as f64 * g(d);
            let scale = (0..=n + 2).map(|k| b.eval_g(k, d).unwrap().abs()).fold(0.0, f64::max) * gamma * (n + 1) as f64;
            assert!((lhs - rhs).abs() < 1e-6 * scale, "n={n} d={d}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn halfline_overlap_matches_quadrature() {
    for s in [0.05f64, 0.25, 1.0] {
        let b = HermiteBasis::new(s, 20).unwrap();
        let w = 20.0 * s.sqrt();
        for n in 0..=20 {
            for m in 0..=20 {
                let q = simpson(|d| he_oracle(n, s, d) * he_oracle(m, s, d) * g0(s, d), 0.0, w, 40_000);
                let v = b.halfline_overlap(n, m).unwrap();
                let scale = b.norm_factor(n) * b.norm_factor(m);
                assert!((q - v).abs() < 1e-9 * scale, "s={s} n={n} m={m}: {q} vs {v}");
            }
        }
    }
}

#[test]
fn halfline_first_moment() {
    let s: f64 = 0.37;
    let b = HermiteBasis::new(s, 2).unwrap();
    let v = b.halfline_overlap(1, 0).unwrap();
    assert!((v - (s / (2.0 * std::f64::consts::PI)).sqrt()).abs() < 1e-15);
    assert_eq!(b.halfline_overlap(2, 0).unwrap(), 0.0);
    assert_eq!(b.halfline_overlap(0, 0).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn halfline_overlap_is_symmetric(n in 0usize..200, m in 0usize..200) {
        prop_assert_eq!(halfline_overlap_hat(n, m), halfline_overlap_hat(m, n));
    }

    #[test]
    fn rescaled_overlap_is_bounded(n in 0usize..300, m in 0usize..300) {
        // |Î(n,m)| ≤ ½ by Cauchy-Schwarz on the half line.
        let v = halfline_overlap_hat(n, m);
        prop_assert!(v.is_finite() && v.abs() <= 0.5 + 1e-12);
    }

    #[test]
    fn basis_evaluation_is_finite(sigma in 1e-3f64..5.0, d in -4.0f64..4.0) {
        let b = HermiteBasis::new(sigma, 250).unwrap();
        prop_assert!(b.eval_g_hat_all(d, 250).iter().all(|v| v.is_finite()));
    }
}

fn classical(gamma_over_kappa: f64, lambda_over_gamma: f64) -> BangBang {
    let gamma = 1.0;
    BangBang::new(1.0, gamma / gamma_over_kappa, NB_UNIT, lambda_over_gamma * gamma, gamma).unwrap()
}

#[test]
fn classical_normalization_and_symmetry() {
    let m = classical(10.0, 0.5);
    let st = solve_classical_two_level(&m, Truncation::Fixed(40)).unwrap();
    assert_eq!(st.p_hat[0], 1.0);
    let w = 1.0 + 8.0 * st.sigma.sqrt();
    let total = simpson(|d| reconstruct(&st, d).probability(), -w, w, 8_000);
    assert!((total - 1.0).abs() < 1e-8, "{total}");
    for i in 0..=200 {
        let d = -w + 2.0 * w * i as f64 / 200.0;
        let (Reconstruction::Classical { p0, .. }, Reconstruction::Classical { p1, .. }) =
            (reconstruct(&st, -d), reconstruct(&st, d))
        else {
            unreachable!()
        };
        assert!((p0 - p1).abs() < 1e-9, "D={d}");
    }
}

#[test]
fn classical_heat_and_error_probability() {
    // Frozen from an independent dense-solver implementation of the same truncated system.
    let m = classical(10.0, 0.5);
    let st = solve_classical_two_level(&m, Truncation::Fixed(60)).unwrap();
    let e = classical_energetics(&st, &m).unwrap();
    assert!((e.eta - 0.06242738176030116).abs() < 1e-12);
    assert!((e.heat - 0.04468867609983567).abs() < 1e-12);
    assert_eq!(e.meas_energy, 0.0);
}

#[test]
fn classical_fast_detector_error_probability() {
    let target = 0.5 * erfc(2.0);
    assert!((target - 2.339e-3).abs() < 1e-6);
    // The detector lag adds roughly n_B·ln2·κ/γ to η, so the static-Gaussian value is
    // the γ/κ → ∞ limit; γ/κ = 100 sits about 3× above it.
    let m = classical(1e5, 1.0);
    let st = solve_classical_two_level(&m, Truncation::default()).unwrap();
    let e = classical_energetics(&st, &m).unwrap();
    assert!((e.eta - target).abs() < 0.01 * target, "eta={} target={target}", e.eta);
    let lagged = classical(100.0, 1.0);
    let st = solve_classical_two_level(&lagged, Truncation::default()).unwrap();
    let eta = classical_energetics(&st, &lagged).unwrap().eta;
    let estimate = target + NB_UNIT * std::f64::consts::LN_2 / 100.0;
    assert!((eta - estimate).abs() < 0.1 * estimate, "eta={eta} estimate={estimate}");
}

#[test]
fn classical_power_saturates_at_occupation() {
    let m = classical(100.0, 5.0);
    let st = solve_classical_two_level(&m, Truncation::default()).unwrap();
    let e = classical_energetics(&st, &m).unwrap();
    let ratio = -e.power / (m.kappa * m.omega);
    assert!((ratio - NB_UNIT).abs() < 0.05 * NB_UNIT, "{ratio} (L = {})", st.truncation);
}

#[test]
fn classical_bimodal_at_strong_measurement() {
    let m = classical(10.0, 5.0);
    let st = solve_classical_two_level(&m, Truncation::default()).unwrap();
    let mut best = (f64::MIN, 0.0);
    let mut valley = f64::MAX;
    for i in 0..=400 {
        let d = i as f64 / 200.0; // [0, 2]
        let p = reconstruct(&st, d).probability();
        if p > best.0 {
            best = (p, d);
        }
        if d < 0.2 {
            valley = valley.min(p);
        }
    }
    assert!((best.1 - 1.0).abs() < 0.1, "peak at {}", best.1);
    assert!(valley < 0.2 * best.0);
    let left = reconstruct(&st, -best.1).probability();
    assert!((left - best.0).abs() < 1e-8 * best.0);
}

#[test]
fn fixed_truncation_reports_non_convergence() {
    let m = classical(100.0, 5.0);
    let err = solve_classical_two_level(&m, Truncation::Fixed(20)).unwrap_err();
    assert!(err.is_non_convergence(), "{err:?}");
}

#[test]
fn strong_measurement_is_reported_ill_conditioned() {
    for lg in [7.0, 10.0] {
        let err = solve_classical_two_level(&classical(100.0, lg), Truncation::default()).unwrap_err();
        assert!(err.is_non_convergence(), "{err:?}");
    }
}

#[test]
fn rejects_energetics_for_wrong_model() {
    let m = classical(10.0, 0.5);
    let st = solve_classical_two_level(&m, Truncation::Fixed(40)).unwrap();
    let e = Engine::new(1.0, 1.0, 0.1, NB_UNIT, 1.0, 1.0).unwrap();
    assert!(matches!(engine_energetics(&st, &e), Err(Error::ModelMismatch(_))));
}

fn fig3_engine(lambda: f64, kappa: f64) -> Engine {
    Engine::new(1.0, 1.0, kappa, NB_UNIT, lambda, 1.0).unwrap()
}

#[test]
fn engine_structure_and_identity() {
    let m = fig3_engine(1.0, 1.0 / 3.0);
    let st = solve_engine(&m, Truncation::Fixed(40)).unwrap();
    assert_eq!(st.p_hat[0], 1.0);
    assert!(st.y_hat().iter().all(|&v| v == 0.0));
    assert!(engine_zeroth_identity(&st, &m).abs() < 1e-12);
    let (p, j) = (0.5, 0.7);
    let (Reconstruction::Engine { p: pp, a_x: xp, a_y, .. }, Reconstruction::Engine { p: pm, a_x: xm, .. }) =
        (reconstruct(&st, p), reconstruct(&st, -p))
    else {
        unreachable!()
    };
    assert_eq!(a_y, 0.0);
    assert!((pp - pm).abs() < 1e-14 && (xp + xm).abs() < 1e-14);
    let _ = j;
}

#[test]
fn engine_first_law_across_sweep() {
    for kappa in [0.0, 1.0 / 3.0] {
        for lg in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let m = fig3_engine(lg, kappa);
            let st = solve_engine(&m, Truncation::default()).unwrap();
            let e = engine_energetics(&st, &m).unwrap();
            assert!((e.power + e.heat + e.meas_energy).abs() < 1e-10, "κ={kappa} λ={lg}");
            if kappa == 0.0 {
                assert!((e.power + e.meas_energy).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn engine_frozen_values() {
    // Frozen from an independent dense-solver implementation at L = 60.
    let cases = [
        (0.5, -0.28652451310082966, 0.02324298626029786, 0.2632815268405318),
        (1.0, -0.397912187200863, -0.017018294580744414, 0.41493048178160746),
        (5.0, -0.5897628071139732, -0.11577497058116726, 0.7055377776951405),
        (20.0, -0.6852424646003441, -0.15157635875434056, 0.8368188233546846),
    ];
    for (lam, p, j, em) in cases {
        let m = fig3_engine(lam, 1.0 / 3.0);
        let st = solve_engine(&m, Truncation::Fixed(60)).unwrap();
        let e = engine_energetics(&st, &m).unwrap();
        assert!((e.power - p).abs() < 1e-9 && (e.heat - j).abs() < 1e-9 && (e.meas_energy - em).abs() < 1e-9, "λ={lam}: {e:?}");
    }
}

#[test]
fn engine_coefficients_converge_in_truncation() {
    for lam in [0.1, 1.0, 5.0, 20.0] {
        let m = fig3_engine(lam, 1.0 / 3.0);
        let a = solve_engine(&m, Truncation::Fixed(40)).unwrap();
        let b = solve_engine(&m, Truncation::Fixed(45)).unwrap();
        for (x, y) in [(a.x_hat[1], b.x_hat[1]), (a.z_hat[0], b.z_hat[0])] {
            assert!((x - y).abs() < 1e-8 * y.abs().max(1e-300), "λ={lam}: {x} vs {y}");
        }
    }
}

#[test]
fn engine_normalization() {
    let m = fig3_engine(1.0, 0.0);
    let st = solve_engine(&m, Truncation::default()).unwrap();
    let w = 1.0 + 8.0 * st.sigma.sqrt();
    let total = simpson(|d| reconstruct(&st, d).probability(), -w, w, 8_000);
    assert!((total - 1.0).abs() < 1e-8);
}

#[test]
fn engine_reconstruction_flag() {
    let weak = solve_engine(&fig3_engine(1.0, 1.0 / 3.0), Truncation::default()).unwrap();
    assert!(weak.reconstruction_ok);
    // Peaks at ±1 are 12.6 widths from the origin; the series tail has not decayed.
    let strong = solve_engine(&fig3_engine(20.0, 1.0 / 3.0), Truncation::Fixed(60)).unwrap();
    assert!(!strong.reconstruction_ok);
}

#[test]
fn extrapolated_power_closes_against_heat() {
    for (gk, lg) in [(10.0, 0.1), (10.0, 0.5), (100.0, 1.0)] {
        let m = classical(gk, lg);
        let st = solve_classical_two_level(&m, Truncation::default()).unwrap();
        let heat = classical_energetics(&st, &m).unwrap().heat;
        let ex = classical_power_extrapolated(&m, Truncation::default()).unwrap();
        let raw = ex.levels[0].1;
        assert!((ex.value + heat).abs() < 2e-3 * heat.abs(), "{gk} {lg}: {ex:?} heat {heat}");
        assert!((ex.value + heat).abs() < 0.2 * (raw + heat).abs(), "{gk} {lg}: no gain over {raw}");
    }
}
