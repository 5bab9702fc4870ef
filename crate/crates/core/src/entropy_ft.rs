//! Entropy production, measurement entropy and fluctuation-theorem estimators.

use libm::{erf, erfc};

use crate::error::{Error, Result};
use crate::models::BangBang;
use crate::stats::{fit_through_origin, jackknife, Estimate};
use crate::trajectory::{trajectory_log_prob_ratio, KrausSetup, StatePath, TrajectoryRecord};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyRecord {
    pub sigma: f64,
    pub sigma_m: f64,
    pub sigma_m_cg: Option<f64>,
    /// Net quanta taken from the bath (classical two-level).
    pub m: i64,
}

/// Conditional initial detector density P_ini[D | a].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DetectorPrior {
    Gaussian { variance: f64 },
}

impl DetectorPrior {
    /// N(a, γ/(8λ)), the stationary law of the filter with frozen a.
    pub fn stationary(gamma: f64, lambda: f64) -> Self {
        DetectorPrior::Gaussian { variance: gamma / (8.0 * lambda) }
    }

    pub fn log_density(&self, d: f64, a: f64) -> f64 {
        match *self {
            DetectorPrior::Gaussian { variance } => {
                -(d - a) * (d - a) / (2.0 * variance) - 0.5 * (2.0 * std::f64::consts::PI * variance).ln()
            }
        }
    }
}

fn classical_paths(record: &TrajectoryRecord) -> Result<(&[f64], &[f64])> {
    match &record.states {
        StatePath::Classical(a) if a.len() == record.steps + 1 && record.d_path.len() == record.steps + 2 => {
            Ok((a, &record.d_path))
        }
        StatePath::Classical(_) => Err(Error::invalid("record", "path lengths do not match the step count")),
        StatePath::Quantum { .. } => Err(Error::ModelMismatch("expected a classical record".into())),
    }
}

/// (4λ/γ)Σ_{n=0}^{N}(2a_n − D_{n+1} − D_n)(D_{n+1} − D_n) − ln(P_ini[D_{N+1}|a_N]/P_ini[D_0|a_0])
pub fn sigma_m_discrete(record: &TrajectoryRecord, gamma: f64, lambda: f64, prior: &DetectorPrior) -> Result<f64> {
    let (a, d) = classical_paths(record)?;
    let sum: f64 = (0..=record.steps).map(|n| (2.0 * a[n] - d[n + 1] - d[n]) * (d[n + 1] - d[n])).sum();
    let n = record.steps;
    let boundary = prior.log_density(d[n + 1], a[n]) - prior.log_density(d[0], a[0]);
    Ok(4.0 * lambda / gamma * sum - boundary)
}

/// Integrated mean-squared-error estimator Σ_n (4λ/γ)(1 − e^{−2γdt})((D_n − a_n)² − γ/(8λ)).
///
/// Per step its conditional mean equals that of the discrete sum above; as dt → 0 the
/// summand becomes 8λ((D − a)² − γ/(8λ))dt.
pub fn sigma_m_mse(record: &TrajectoryRecord, gamma: f64, lambda: f64) -> Result<f64> {
    let (a, d) = classical_paths(record)?;
    let sigma = gamma / (8.0 * lambda);
    let factor = 4.0 * lambda / gamma * -(-2.0 * gamma * record.dt).exp_m1();
    Ok(factor * (0..=record.steps).map(|n| (d[n] - a[n]).powi(2) - sigma).sum::<f64>())
}

/// σ = −mω/T, with m = absorptions minus emissions read off each flip.
///
/// A flip out of a_n in the step whose detector value is D_{n+1} is an absorption when
/// the detector indicates a_n correctly, an emission otherwise.
pub fn sigma_classical(record: &TrajectoryRecord, beta_omega: f64) -> Result<(f64, i64)> {
    let (a, d) = classical_paths(record)?;
    let mut m = 0i64;
    for n in 0..record.steps {
        if a[n + 1] != a[n] {
            m += if BangBang::detector_matches(a[n], d[n + 1]) { 1 } else { -1 };
        }
    }
    Ok((-(m as f64) * beta_omega, m))
}

/// Reversed classical record: ā_n = a_{N−n}, D̄_n = D_{N+1−n}.
pub fn time_reversed_classical(record: &TrajectoryRecord) -> Result<TrajectoryRecord> {
    let (a, d) = classical_paths(record)?;
    let mut out = record.clone();
    out.states = StatePath::Classical(a.iter().rev().copied().collect());
    out.d_path = d.iter().rev().copied().collect();
    Ok(out)
}

pub fn classical_entropy(record: &TrajectoryRecord, model: &BangBang) -> Result<EntropyRecord> {
    let (sigma, m) = sigma_classical(record, model.beta_omega())?;
    let prior = DetectorPrior::stationary(model.gamma, model.lambda);
    let sigma_m = sigma_m_discrete(record, model.gamma, model.lambda, &prior)?;
    Ok(EntropyRecord { sigma, sigma_m, sigma_m_cg: None, m })
}

/// σ = −ln p_{v_f} + ln p_{v_i} + Σ_n σ_{k_n}; infinite when p_{v_f} = 0.
pub fn sigma_jump(record: &TrajectoryRecord, setup: &KrausSetup) -> Result<f64> {
    let jumps = record
        .jumps
        .as_ref()
        .ok_or_else(|| Error::ModelMismatch("entropy along a jump record needs a Kraus record".into()))?;
    let bath: f64 = jumps.tags.iter().enumerate().map(|(n, &t)| setup.jump_entropy(record.d_path[n + 1], t)).sum();
    Ok(-jumps.p_vf.ln() + jumps.p_vi.ln() + bath)
}

/// σ_m,cg = ln(P[Γ,D]/P_B[Γ̄,D̄]) − σ, or None when the trajectory is excluded.
pub fn sigma_m_cg(record: &TrajectoryRecord, setup: &KrausSetup) -> Result<Option<f64>> {
    Ok(quantum_entropy(record, setup)?.and_then(|r| r.sigma_m_cg))
}

/// σ and σ_m,cg of a Kraus record, or None when it is excluded.
pub fn quantum_entropy(record: &TrajectoryRecord, setup: &KrausSetup) -> Result<Option<EntropyRecord>> {
    let ratio = trajectory_log_prob_ratio(record, setup)?;
    let sigma = sigma_jump(record, setup)?;
    if ratio.excluded || !sigma.is_finite() {
        return Ok(None);
    }
    let cg = ratio.log_ratio() - sigma;
    Ok(Some(EntropyRecord { sigma, sigma_m: cg, sigma_m_cg: Some(cg), m: 0 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FtMode {
    SigmaOnly,
    SigmaPlusSigmaM,
    SigmaPlusCg,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FtEstimate {
    pub estimate: Estimate,
    pub samples: usize,
    /// Share of Σe^{−x} carried by the largest 1% of weights.
    pub tail_mass: f64,
    pub heavy_tail: bool,
}

pub const JACKKNIFE_GROUPS: usize = 100;

/// ⟨e^{−x}⟩ with a grouped jackknife error, x chosen by `mode`.
pub fn ft_estimator(records: &[EntropyRecord], mode: FtMode) -> Result<FtEstimate> {
    if records.is_empty() {
        return Err(Error::invalid("records", "empty ensemble"));
    }
    let exponents = records
        .iter()
        .map(|r| match mode {
            FtMode::SigmaOnly => Ok(r.sigma),
            FtMode::SigmaPlusSigmaM => Ok(r.sigma + r.sigma_m),
            FtMode::SigmaPlusCg => r
                .sigma_m_cg
                .map(|cg| r.sigma + cg)
                .ok_or_else(|| Error::invalid("records", "missing coarse-grained measurement entropy")),
        })
        .collect::<Result<Vec<f64>>>()?;
    let weights: Vec<f64> = exponents.iter().map(|x| (-x).exp()).collect();
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let estimate = jackknife(&weights, JACKKNIFE_GROUPS, mean);
    let mut sorted = weights.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = (sorted.len() / 100).max(1);
    let total: f64 = sorted.iter().sum();
    let tail_mass = if total > 0.0 { sorted[..top].iter().sum::<f64>() / total } else { 0.0 };
    Ok(FtEstimate { estimate, samples: records.len(), tail_mass, heavy_tail: tail_mass > 0.5 })
}

/// Fast-detector σ_m rate (8λκ/γ)[1 + 2n_B − erf(2√(λ/γ)) − e^{−4λ/γ}/(2√(πλ/γ))].
pub fn sigma_m_fast_detector(lambda: f64, gamma: f64, kappa: f64, n_b: f64) -> f64 {
    let r = lambda / gamma;
    8.0 * lambda * kappa / gamma
        * (1.0 + 2.0 * n_b - erf(2.0 * r.sqrt()) - (-4.0 * r).exp() / (2.0 * (std::f64::consts::PI * r).sqrt()))
}

/// Misread probability η = [1 − erf(2√(λ/γ))]/2 of a fast detector.
pub fn fast_detector_eta(lambda: f64, gamma: f64) -> f64 {
    0.5 * erfc(2.0 * (lambda / gamma).sqrt())
}

/// ln(P[−m]/P[m]) slope target ω/T − ln((1 − η)/η).
pub fn ft_for_m_slope(beta_omega: f64, eta: f64) -> f64 {
    beta_omega - ((1.0 - eta) / eta).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MBin {
    pub m: i64,
    pub count: u64,
    pub count_reversed: u64,
    /// ln(P[−m]/P[m]) with its Poisson error.
    pub log_ratio: Estimate,
    /// m[ω/T − ln((1−η)/η)]
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MCheck {
    pub bins: Vec<MBin>,
    /// m values with fewer than `min_count` samples in either bin.
    pub skipped: Vec<i64>,
    pub slope: Estimate,
    pub target_slope: f64,
}

impl MCheck {
    pub fn relative_slope_error(&self) -> f64 {
        (self.slope.value / self.target_slope - 1.0).abs()
    }
}

/// Compares ln(P[−m]/P[m]) with m[ω/T − ln((1−η)/η)] on every m > 0 with enough counts.
pub fn ft_for_m_check(m_samples: &[i64], beta_omega: f64, eta: f64, min_count: u64) -> Result<MCheck> {
    if m_samples.is_empty() {
        return Err(Error::invalid("m_samples", "empty sample"));
    }
    let mut counts = std::collections::BTreeMap::<i64, u64>::new();
    for &m in m_samples {
        *counts.entry(m).or_default() += 1;
    }
    let target_slope = ft_for_m_slope(beta_omega, eta);
    let mut bins = Vec::new();
    let mut skipped = Vec::new();
    let top = counts.keys().map(|m| m.abs()).max().unwrap_or(0);
    for m in 1..=top {
        let c = counts.get(&m).copied().unwrap_or(0);
        let r = counts.get(&-m).copied().unwrap_or(0);
        if c < min_count || r < min_count {
            skipped.push(m);
            continue;
        }
        let value = (r as f64 / c as f64).ln();
        let std_err = (1.0 / c as f64 + 1.0 / r as f64).sqrt();
        bins.push(MBin {
            m,
            count: c,
            count_reversed: r,
            log_ratio: Estimate { value, std_err },
            target: m as f64 * target_slope,
        });
    }
    if bins.is_empty() {
        return Err(Error::invalid("m_samples", format!("no m bin has {min_count} counts on both sides")));
    }
    let x: Vec<f64> = bins.iter().map(|b| b.m as f64).collect();
    let y: Vec<f64> = bins.iter().map(|b| b.log_ratio.value).collect();
    let w: Vec<f64> = bins.iter().map(|b| b.log_ratio.std_err.powi(-2)).collect();
    Ok(MCheck { bins, skipped, slope: fit_through_origin(&x, &y, &w), target_slope })
}
