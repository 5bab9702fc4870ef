//! Generalized-Hermite spectral steady states.
//!
//! The detector operator 𝒥f = γ∂_D(Df) + (γ²/8λ)∂²_D f is diagonal in the basis
//! G_n(D) = e^{−D²/2σ}/√(2πσ) · He_n^{[σ]}(D), σ = γ/(8λ), with 𝒥G_n = −γnG_n,
//! ∂_D G_n = −G_{n+1}/σ and D·G_n = G_{n+1} + σnG_{n−1}. Linear systems are assembled
//! for coefficients of the rescaled functions Ĝ_n = G_n/√(σⁿn!).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use libm::lgamma as ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::models::{BangBang, Engine};

/// ln(n!!) for n ≥ −1, with (−1)!! = 0!! = 1.
pub fn ln_double_factorial(n: i64) -> f64 {
    if n <= 0 {
        return 0.0;
    }
    if n % 2 == 0 {
        let k = (n / 2) as f64;
        k * std::f64::consts::LN_2 + ln_gamma(k + 1.0)
    } else {
        let k = ((n + 1) / 2) as f64;
        ln_gamma(2.0 * k + 1.0) - k * std::f64::consts::LN_2 - ln_gamma(k + 1.0)
    }
}

fn ln_factorial(n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0)
}

/// ∫₀^∞ He_n He_m G₀ dD / √(σⁿn! σᵐm!); independent of σ.
pub fn halfline_overlap_hat(n: usize, m: usize) -> f64 {
    if n == m {
        return 0.5;
    }
    if (n + m) % 2 == 0 {
        return 0.0;
    }
    let (even, odd) = if n % 2 == 0 { (n, m) } else { (m, n) };
    let sign = if ((n + m - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let ln_mag = ln_double_factorial(odd as i64) + ln_double_factorial(even as i64 - 1)
        - 0.5 * (ln_factorial(n) + ln_factorial(m));
    // (m − n) when n is the even index, (n − m) otherwise: always odd − even.
    sign * ln_mag.exp() / ((2.0 * PI).sqrt() * (odd as f64 - even as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HermiteBasis {
    sigma: f64,
    max_order: usize,
}

impl HermiteBasis {
    pub fn new(sigma: f64, max_order: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
        }
        Ok(Self { sigma, max_order })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    fn check(&self, n: usize) -> Result<()> {
        if n > self.max_order {
            return Err(Error::OrderOutOfRange { n, max: self.max_order });
        }
        Ok(())
    }

    /// √(σⁿ n!)
    pub fn norm_factor(&self, n: usize) -> f64 {
        (0.5 * (n as f64 * self.sigma.ln() + ln_factorial(n))).exp()
    }

    /// He_n^{[σ]}(D) from He_{n+1} = D·He_n − σn·He_{n−1}.
    pub fn he(&self, n: usize, d: f64) -> Result<f64> {
        self.check(n)?;
        let (mut prev, mut cur) = (1.0, d);
        if n == 0 {
            return Ok(1.0);
        }
        for k in 1..n {
            let next = d * cur - self.sigma * k as f64 * prev;
            prev = cur;
            cur = next;
        }
        Ok(cur)
    }

    /// G_n(D)
    pub fn eval_g(&self, n: usize, d: f64) -> Result<f64> {
        self.check(n)?;
        Ok(self.eval_g_hat_all(d, n)[n] * self.norm_factor(n))
    }

    /// Ĝ_n(D)
    pub fn eval_g_hat(&self, n: usize, d: f64) -> Result<f64> {
        self.check(n)?;
        Ok(self.eval_g_hat_all(d, n)[n])
    }

    /// Ĝ_0..=Ĝ_{n_max} at D by the normalized recurrence
    /// h_{n+1} = (x·h_n − √n·h_{n−1})/√(n+1), x = D/√σ, with the Gaussian folded in
    /// through a running log-scale so neither factor overflows.
    pub fn eval_g_hat_all(&self, d: f64, n_max: usize) -> Vec<f64> {
        let x = d / self.sigma.sqrt();
        let base = -0.5 * x * x - 0.5 * (2.0 * PI * self.sigma).ln();
        let emit = |h: f64, shift: f64| if h == 0.0 { 0.0 } else { h.signum() * (h.abs().ln() + base + shift).exp() };
        let mut out = vec![0.0; n_max + 1];
        let (mut prev, mut cur, mut shift) = (1.0f64, x, 0.0f64);
        out[0] = emit(1.0, 0.0);
        if n_max >= 1 {
            out[1] = emit(x, 0.0);
        }
        for n in 1..n_max {
            let next = (x * cur - (n as f64).sqrt() * prev) / ((n + 1) as f64).sqrt();
            prev = cur;
            cur = next;
            if cur.abs() > 1e150 {
                prev *= 1e-150;
                cur *= 1e-150;
                shift += 150.0 * std::f64::consts::LN_10;
            }
            out[n + 1] = emit(cur, shift);
        }
        out
    }

    /// ∫₀^∞ He_n He_m G₀ dD from the closed form.
    pub fn halfline_overlap(&self, n: usize, m: usize) -> Result<f64> {
        self.check(n)?;
        self.check(m)?;
        Ok(halfline_overlap_hat(n, m) * self.norm_factor(n) * self.norm_factor(m))
    }
}

/// Ĝ_n(0): zero for odd n, (−1)^k (2k−1)!!/√((2k)!) /√(2πσ) for n = 2k.
fn g_hat_at_zero(n: usize, sigma: f64) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    let k = n / 2;
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (ln_double_factorial(n as i64 - 1) - 0.5 * ln_factorial(n)).exp() / (2.0 * PI * sigma).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralModel {
    ClassicalTwoLevel,
    Engine,
}

/// How the truncation order L is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Truncation {
    /// Solve at L, compare with L+5; fail if they disagree.
    Fixed(usize),
    /// Start at `start` and raise L by `step` until the L / L+5 check passes.
    Auto { start: usize, step: usize, max: usize },
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Auto { start: DEFAULT_L, step: 10, max: 400 }
    }
}

pub const DEFAULT_L: usize = 40;
pub const REFINEMENT_STEP: usize = 5;
/// Max change of shared coefficients between L and L+5, relative to the largest one.
pub const COEFFICIENT_TOL: f64 = 1e-6;
/// Two-level systems above this condition estimate lose more than ~1e-5 relative accuracy.
pub const CLASSICAL_MAX_CONDITION: f64 = 1e11;

/// Truncated steady-state coefficients in the rescaled basis, indexed by full order n.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub model: SpectralModel,
    pub sigma: f64,
    pub truncation: usize,
    /// q⁺ (classical) or P (engine)
    pub p_hat: Vec<f64>,
    /// q⁻ (classical) or a_x (engine)
    pub x_hat: Vec<f64>,
    /// a_z (engine); empty for the classical model
    pub z_hat: Vec<f64>,
    pub condition: f64,
    pub refinement_change: f64,
    /// Whether the truncated series represents P(D) pointwise (tail decayed and P ≥ 0).
    /// Engine energetics only need low-order coefficients and stay valid either way.
    pub reconstruction_ok: bool,
}

impl SpectralState {
    pub fn basis(&self) -> HermiteBasis {
        HermiteBasis { sigma: self.sigma, max_order: self.max_order() }
    }

    pub fn max_order(&self) -> usize {
        self.p_hat.len().max(self.x_hat.len()).max(self.z_hat.len()) - 1
    }

    /// Raw coefficient of G_n from a rescaled vector.
    pub fn raw(&self, hat: &[f64], n: usize) -> f64 {
        hat.get(n).copied().unwrap_or(0.0) / self.basis().norm_factor(n)
    }

    /// Rounding bound on reconstructed values: ε·Σ|ĉ_n|·max|Ĝ_n|. Peaks far from D = 0
    /// in units of √σ make the rescaled coefficients grow like e^{D²/4σ}, and the
    /// series then cancels catastrophically even though low-order coefficients are exact.
    pub fn reconstruction_bound(&self) -> f64 {
        let sum: f64 = [&self.p_hat, &self.x_hat, &self.z_hat].iter().flat_map(|v| v.iter()).map(|c| c.abs()).sum();
        f64::EPSILON * sum / (2.0 * PI * self.sigma).sqrt()
    }

    /// Engine: a_y vanishes identically.
    pub fn y_hat(&self) -> Vec<f64> {
        vec![0.0; self.p_hat.len()]
    }

    fn coefficient_change(&self, finer: &SpectralState) -> f64 {
        let pairs = [(&self.p_hat, &finer.p_hat), (&self.x_hat, &finer.x_hat), (&self.z_hat, &finer.z_hat)];
        let scale = pairs
            .iter()
            .flat_map(|(_, f)| f.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut change: f64 = 0.0;
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(b.iter()) {
                change = change.max((x - y).abs());
            }
        }
        change / scale
    }
}

/// Values of the reconstructed steady state at one D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reconstruction {
    Classical { p: f64, p0: f64, p1: f64 },
    Engine { p: f64, a_x: f64, a_y: f64, a_z: f64 },
}

impl Reconstruction {
    pub fn probability(&self) -> f64 {
        match *self {
            Reconstruction::Classical { p, .. } | Reconstruction::Engine { p, .. } => p,
        }
    }
}

fn series(hat: &[f64], g: &[f64]) -> f64 {
    hat.iter().zip(g.iter()).map(|(c, v)| c * v).sum()
}

pub fn reconstruct(state: &SpectralState, d: f64) -> Reconstruction {
    let g = state.basis().eval_g_hat_all(d, state.max_order());
    let p = series(&state.p_hat, &g);
    let x = series(&state.x_hat, &g);
    match state.model {
        SpectralModel::ClassicalTwoLevel => Reconstruction::Classical { p, p0: 0.5 * (p + x), p1: 0.5 * (p - x) },
        SpectralModel::Engine => Reconstruction::Engine { p, a_x: x, a_y: 0.0, a_z: series(&state.z_hat, &g) },
    }
}

/// Window ±(1 + 5√σ) used for positivity checks and default reconstruction grids.
pub fn support_half_width(sigma: f64) -> f64 {
    1.0 + 5.0 * sigma.sqrt()
}

fn check_positive(state: &SpectralState) -> Result<()> {
    let w = support_half_width(state.sigma);
    let pts = 401;
    let mut min: f64 = 0.0;
    let mut max: f64 = 0.0;
    for i in 0..pts {
        let d = -w + 2.0 * w * i as f64 / (pts - 1) as f64;
        let p = reconstruct(state, d).probability();
        min = min.min(p);
        max = max.max(p);
    }
    let floor = (1e-8 * max.max(1.0)).max(state.reconstruction_bound());
    if min < -floor || !min.is_finite() {
        return Err(Error::NonConvergence {
            what: "spectral reconstruction".into(),
            detail: format!("P(D) reaches {min:.3e} at L = {}", state.truncation),
        });
    }
    Ok(())
}

fn tail_decayed(state: &SpectralState) -> bool {
    let all = || [&state.p_hat, &state.x_hat, &state.z_hat].into_iter().flat_map(|v| v.iter());
    let max = all().fold(0.0f64, |m, c| m.max(c.abs()));
    let n = state.max_order();
    let tail = [&state.p_hat, &state.x_hat, &state.z_hat]
        .into_iter()
        .flat_map(|v| v.iter().enumerate().filter(|(k, _)| *k + 10 > n).map(|(_, c)| c.abs()))
        .fold(0.0f64, f64::max);
    tail <= 1e-8 * max && state.reconstruction_bound() < 1e-8
}

/// What has to settle between L and L+5.
#[derive(Clone, Copy)]
enum Settle {
    /// Every shared coefficient, relative to the largest one.
    AllCoefficients,
    /// â^x_1 and â^z_0, each relative to itself; these fix all engine energetics.
    EngineLowOrder,
}

pub const ENGINE_LOW_ORDER_TOL: f64 = 1e-8;

fn change_between(coarse: &SpectralState, fine: &SpectralState, settle: Settle) -> (f64, f64) {
    match settle {
        Settle::AllCoefficients => (coarse.coefficient_change(fine), COEFFICIENT_TOL),
        Settle::EngineLowOrder => {
            let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / b.abs().max(f64::MIN_POSITIVE) };
            (rel(coarse.x_hat[1], fine.x_hat[1]).max(rel(coarse.z_hat[0], fine.z_hat[0])), ENGINE_LOW_ORDER_TOL)
        }
    }
}

fn refine<F>(truncation: Truncation, settle: Settle, solve: F) -> Result<SpectralState>
where
    F: Fn(usize) -> Result<SpectralState>,
{
    let (mut l, step, max) = match truncation {
        Truncation::Fixed(l) => (l, 0, l),
        Truncation::Auto { start, step, max } => (start, step.max(1), max),
    };
    if l < 2 {
        return Err(Error::invalid("L", format!("truncation must be ≥ 2, got {l}")));
    }
    let mut last_err;
    loop {
        let attempt = solve(l).and_then(|coarse| {
            let fine = solve(l + REFINEMENT_STEP)?;
            let (change, tol) = change_between(&coarse, &fine, settle);
            if !(change <= tol) {
                return Err(Error::NonConvergence {
                    what: "spectral truncation".into(),
                    detail: format!("coefficients change by {change:.3e} between L = {l} and L = {}", l + REFINEMENT_STEP),
                });
            }
            let reconstruction_ok = tail_decayed(&coarse) && check_positive(&coarse).is_ok();
            if matches!(settle, Settle::AllCoefficients) && !reconstruction_ok {
                check_positive(&coarse)?;
            }
            Ok(SpectralState { refinement_change: change, reconstruction_ok, ..coarse })
        });
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) => last_err = e,
        }
        if step == 0 || l + step > max {
            return Err(match last_err {
                Error::IllConditioned { condition } => Error::NonConvergence {
                    what: "spectral truncation".into(),
                    detail: format!("linear system singular up to L = {l} (condition {condition:.3e})"),
                },
                e => e,
            });
        }
        l += step;
    }
}

/// Steady state of the classical two-level bang-bang model.
pub fn solve_classical_two_level(model: &BangBang, truncation: Truncation) -> Result<SpectralState> {
    model.validate()?;
    if model.kappa <= 0.0 {
        return Err(Error::invalid("kappa", "spectral steady state needs κ > 0"));
    }
    refine(truncation, Settle::AllCoefficients, |l| classical_system(model, l))
}

/// Unknowns q̂⁺_{2ℓ} (ℓ = 1..L, q̂⁺₀ = 1) and q̂⁻_{2ℓ+1} (ℓ = 0..L).
fn classical_system(model: &BangBang, l_max: usize) -> Result<SpectralState> {
    let s = model.sigma();
    let g = model.gamma;
    let k = model.kappa;
    let kp = k * (1.0 + 2.0 * model.n_b);
    let n_unknown = 2 * l_max + 1;
    let mut a = DMatrix::<f64>::zeros(n_unknown, n_unknown);
    let mut b = DVector::<f64>::zeros(n_unknown);
    let plus = |l: usize| if l == 0 { None } else { Some(l - 1) };
    let minus = |l: usize| l_max + l;
    let add_plus = |a: &mut DMatrix<f64>, b: &mut DVector<f64>, row: usize, l: usize, c: f64| match plus(l) {
        None => b[row] -= c,
        Some(j) => a[(row, j)] += c,
    };
    let mut row = 0;
    // 𝒥q⁺ + γ∂_D q⁻ = 0, coefficient of Ĝ_{2ℓ}
    for l in 1..=l_max {
        let m = (2 * l) as f64;
        add_plus(&mut a, &mut b, row, l, -m.sqrt());
        a[(row, minus(l - 1))] += -1.0 / s.sqrt();
        row += 1;
    }
    // 𝒥q⁻ + γ∂_D q⁺ − κ'q⁻ + κ(1 − 2θ)q⁺ = 0, coefficient of Ĝ_{2ℓ+1}
    for l in 0..=l_max {
        let m = 2 * l + 1;
        let mf = m as f64;
        a[(row, minus(l))] += -(g * mf + kp);
        add_plus(&mut a, &mut b, row, l, -g * (mf / s).sqrt());
        for kk in 0..=l_max {
            add_plus(&mut a, &mut b, row, kk, -2.0 * k * halfline_overlap_hat(2 * kk, m));
        }
        row += 1;
    }
    let sol = solve_dense(a, b, CLASSICAL_MAX_CONDITION)?;
    let n_max = 2 * l_max + 1;
    let mut p_hat = vec![0.0; n_max + 1];
    let mut x_hat = vec![0.0; n_max + 1];
    p_hat[0] = 1.0;
    for l in 1..=l_max {
        p_hat[2 * l] = sol.x[l - 1];
    }
    for l in 0..=l_max {
        x_hat[2 * l + 1] = sol.x[minus(l)];
    }
    Ok(SpectralState {
        model: SpectralModel::ClassicalTwoLevel,
        sigma: s,
        truncation: l_max,
        p_hat,
        x_hat,
        z_hat: Vec::new(),
        condition: sol.condition,
        refinement_change: f64::NAN,
        reconstruction_ok: false,
    })
}

/// Steady state of the qubit engine (odd sector; the even sector vanishes).
pub fn solve_engine(model: &Engine, truncation: Truncation) -> Result<SpectralState> {
    model.validate()?;
    refine(truncation, Settle::EngineLowOrder, |l| engine_system(model, l))
}

/// Unknowns p̂_{2ℓ} (ℓ = 1..L, p̂₀ = 1), â^z_{2ℓ} (ℓ = 0..L, â^z_{2L+2} = 0) and
/// â^x_{2ℓ+1} (ℓ = 0..L).
fn engine_system(model: &Engine, l_max: usize) -> Result<SpectralState> {
    let s = model.sigma();
    let (g, lam, gc, k) = (model.gamma, model.lambda, model.g, model.kappa);
    let kp = k * (1.0 + 2.0 * model.n_b);
    let n_unknown = 3 * l_max + 2;
    let mut a = DMatrix::<f64>::zeros(n_unknown, n_unknown);
    let mut b = DVector::<f64>::zeros(n_unknown);
    let ip = |l: usize| if l == 0 { None } else { Some(l - 1) };
    let iz = |l: usize| if l > l_max { None } else { Some(l_max + l) };
    let ix = |l: usize| if l > l_max { None } else { Some(2 * l_max + 1 + l) };
    let mut row = 0;
    let put = |a: &mut DMatrix<f64>, b: &mut DVector<f64>, row: usize, col: Option<usize>, is_p0: bool, c: f64| {
        if is_p0 {
            b[row] -= c;
        } else if let Some(j) = col {
            a[(row, j)] += c;
        }
    };
    // 𝒥P − γ∂_D a_x = 0 at Ĝ_{2ℓ}
    for l in 1..=l_max {
        let m = (2 * l) as f64;
        put(&mut a, &mut b, row, ip(l), false, m.sqrt());
        put(&mut a, &mut b, row, ix(l - 1), false, -1.0 / s.sqrt());
        row += 1;
    }
    // 2gD a_z + 𝒥a_x − γ∂_D P − (κ'/2)a_x = 0 at Ĝ_{2ℓ+1}
    for l in 0..=l_max {
        let m = (2 * l + 1) as f64;
        put(&mut a, &mut b, row, iz(l), false, 2.0 * gc * (s * m).sqrt());
        put(&mut a, &mut b, row, iz(l + 1), false, 2.0 * gc * (s * (m + 1.0)).sqrt());
        put(&mut a, &mut b, row, ix(l), false, -(g * m + 0.5 * kp));
        put(&mut a, &mut b, row, ip(l), l == 0, g * (m / s).sqrt());
        row += 1;
    }
    // −2gD a_x − 2λa_z + 𝒥a_z − κ'a_z − κP = 0 at Ĝ_{2ℓ}
    for l in 0..=l_max {
        let m = (2 * l) as f64;
        if l > 0 {
            put(&mut a, &mut b, row, ix(l - 1), false, -2.0 * gc * (s * m).sqrt());
        }
        put(&mut a, &mut b, row, ix(l), false, -2.0 * gc * (s * (m + 1.0)).sqrt());
        put(&mut a, &mut b, row, iz(l), false, -(2.0 * lam + kp + g * m));
        put(&mut a, &mut b, row, ip(l), l == 0, -k);
        row += 1;
    }
    let sol = solve_dense(a, b, f64::INFINITY)?;
    let n_max = 2 * l_max + 2;
    let mut p_hat = vec![0.0; n_max + 1];
    let mut x_hat = vec![0.0; n_max + 1];
    let mut z_hat = vec![0.0; n_max + 1];
    p_hat[0] = 1.0;
    for l in 0..=l_max {
        if l > 0 {
            p_hat[2 * l] = sol.x[l - 1];
        }
        z_hat[2 * l] = sol.x[l_max + l];
        x_hat[2 * l + 1] = sol.x[2 * l_max + 1 + l];
    }
    Ok(SpectralState {
        model: SpectralModel::Engine,
        sigma: s,
        truncation: l_max,
        p_hat,
        x_hat,
        z_hat,
        condition: sol.condition,
        refinement_change: f64::NAN,
        reconstruction_ok: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicalEnergetics {
    pub power: f64,
    pub heat: f64,
    pub eta: f64,
    pub meas_energy: f64,
}

/// Power from the threshold terms at D = 0, heat from the error probability η.
pub fn classical_energetics(state: &SpectralState, model: &BangBang) -> Result<ClassicalEnergetics> {
    if state.model != SpectralModel::ClassicalTwoLevel {
        return Err(Error::ModelMismatch("classical energetics need a two-level state".into()));
    }
    let s = state.sigma;
    let (w, g, k, nb) = (model.omega, model.gamma, model.kappa, model.n_b);
    let mut at_zero = 0.0;
    for (n, c) in state.p_hat.iter().enumerate().step_by(2) {
        at_zero += c * g_hat_at_zero(n, s);
    }
    let mut slope = 0.0;
    for (n, c) in state.x_hat.iter().enumerate().skip(1).step_by(2) {
        slope += c * g_hat_at_zero(n + 1, s) * (s * (n + 1) as f64).sqrt();
    }
    let power = -w * g * at_zero + w * g * slope;
    let mut eta = 0.5;
    for (n, c) in state.x_hat.iter().enumerate().skip(1).step_by(2) {
        eta += c * halfline_overlap_hat(n, 0);
    }
    let heat = w * k * nb * (1.0 - eta) - w * k * (1.0 + nb) * eta;
    Ok(ClassicalEnergetics { power, heat, eta, meas_energy: 0.0 })
}

/// Two-level power extrapolated in x = L^{-1/2} from truncations L₀, 2L₀, 4L₀.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtrapolatedPower {
    pub value: f64,
    /// `(L, P(L))` at the three levels.
    pub levels: [(usize, f64); 3],
    /// Distance between the quadratic and the linear fit through the two finest levels.
    pub error_estimate: f64,
}

/// The threshold terms converge like L^{-1/2}; a quadratic fit in L^{-1/2} removes the two leading orders.
pub fn classical_power_extrapolated(model: &BangBang, truncation: Truncation) -> Result<ExtrapolatedPower> {
    let base = solve_classical_two_level(model, truncation)?;
    let l0 = base.truncation;
    let mut levels = [(l0, classical_energetics(&base, model)?.power), (0, 0.0), (0, 0.0)];
    for (i, l) in [2 * l0, 4 * l0].into_iter().enumerate() {
        let st = solve_classical_two_level(model, Truncation::Fixed(l))?;
        levels[i + 1] = (l, classical_energetics(&st, model)?.power);
    }
    let x = levels.map(|(l, _)| 1.0 / (l as f64).sqrt());
    let p = levels.map(|(_, v)| v);
    // Lagrange interpolation evaluated at x = 0
    let mut value = 0.0;
    for i in 0..3 {
        let mut w = 1.0;
        for j in 0..3 {
            if j != i {
                w *= x[j] / (x[j] - x[i]);
            }
        }
        value += w * p[i];
    }
    let linear = p[2] - x[2] * (p[2] - p[1]) / (x[2] - x[1]);
    Ok(ExtrapolatedPower { value, levels, error_estimate: (value - linear).abs() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineEnergetics {
    pub power: f64,
    pub heat: f64,
    pub meas_energy: f64,
}

/// P = −ωgσa₁^x, Ė_M = −λωa₀^z, J = −ωκ/2 − (ω/2)κ(1+2n_B)a₀^z (raw coefficients).
pub fn engine_energetics(state: &SpectralState, model: &Engine) -> Result<EngineEnergetics> {
    if state.model != SpectralModel::Engine {
        return Err(Error::ModelMismatch("engine energetics need an engine state".into()));
    }
    let s = state.sigma;
    let ax1 = state.x_hat[1] / s.sqrt();
    let az0 = state.z_hat[0];
    let w = model.omega;
    let kp = model.kappa * (1.0 + 2.0 * model.n_b);
    Ok(EngineEnergetics {
        power: -w * model.g * s * ax1,
        heat: -0.5 * w * model.kappa - 0.5 * w * kp * az0,
        meas_energy: -model.lambda * w * az0,
    })
}

/// Residual of gσa₁^x + (λ + κ(1+2n_B)/2)a₀^z + κ/2.
pub fn engine_zeroth_identity(state: &SpectralState, model: &Engine) -> f64 {
    let s = state.sigma;
    let ax1 = state.x_hat[1] / s.sqrt();
    let az0 = state.z_hat[0];
    let kp = model.kappa * (1.0 + 2.0 * model.n_b);
    model.g * s * ax1 + (model.lambda + 0.5 * kp) * az0 + 0.5 * model.kappa
}
