//! First-law bookkeeping: energy frames, per-trajectory ledgers and ensemble rates.

use crate::error::{Error, Result};
use crate::operators::{FeedbackProtocol, Operator};
use crate::stats::{Estimate, Moments};

/// Which operator plays the role of internal energy U(D).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnergyFrame {
    /// U(D) = H(D)
    BareHamiltonian,
    /// U = H_TD, independent of D
    ThermodynamicHamiltonian(Operator),
}

impl EnergyFrame {
    pub fn u_at(&self, protocol: &FeedbackProtocol, d: f64) -> Operator {
        match self {
            EnergyFrame::BareHamiltonian => protocol.eval(d).hamiltonian,
            EnergyFrame::ThermodynamicHamiltonian(u) => *u,
        }
    }

    pub fn check(&self, protocol: &FeedbackProtocol) -> Result<()> {
        if let EnergyFrame::ThermodynamicHamiltonian(u) = self {
            if u.dim() != protocol.dim() {
                return Err(Error::DimensionMismatch { expected: protocol.dim(), got: u.dim() });
            }
            if !u.is_hermitian() {
                return Err(Error::NotHermitian { deviation: u.hermitian_deviation() });
            }
        }
        Ok(())
    }
}

/// How one sampler sub-step changed the conditional state, which decides the channel split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Euler–Maruyama step of the diffusive filter: heat is Tr{U ℒ_B ρ}dt, the unitary
    /// channel goes to work, the remainder of Tr{U Δρ} is measurement energy.
    Diffusive,
    /// Kraus measurement and detector update: all of Tr{U Δρ} is measurement energy.
    Measurement,
    /// Bath jump or no-jump Kraus step: all of Tr{U Δρ} is heat.
    Bath,
    /// Coherent evolution under H(D): all of Tr{U Δρ} is work.
    Unitary,
}

/// One sub-step of a sampler, as seen by the ledger.
#[derive(Clone, Copy, Debug)]
pub struct LedgerStep<'a> {
    pub before: &'a Operator,
    pub after: &'a Operator,
    pub d_before: f64,
    pub d_after: f64,
    pub dt: f64,
    pub kind: StepKind,
}

/// Channel increments of a single sub-step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Increment {
    pub work: f64,
    pub heat: f64,
    pub meas_energy: f64,
    pub internal_energy_delta: f64,
    /// Tr{U(−i[H, ρ])}dt, the part of `work` coming from the commutator channel.
    pub commutator: f64,
}

impl Increment {
    pub fn closure_error(&self) -> f64 {
        (self.work + self.heat + self.meas_energy - self.internal_energy_delta).abs()
    }
}

/// Cumulative channel values at a marked time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerMark {
    pub time: f64,
    pub work: f64,
    pub heat: f64,
    pub meas_energy: f64,
}

/// Per-trajectory first-law accumulator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ThermoLedger {
    pub work: f64,
    pub heat: f64,
    pub meas_energy: f64,
    pub internal_energy_delta: f64,
    pub max_closure_error: f64,
    pub marks: Vec<LedgerMark>,
}

impl ThermoLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, inc: &Increment) {
        self.work += inc.work;
        self.heat += inc.heat;
        self.meas_energy += inc.meas_energy;
        self.internal_energy_delta += inc.internal_energy_delta;
        self.max_closure_error = self.max_closure_error.max(inc.closure_error());
    }

    pub fn mark(&mut self, time: f64) {
        self.marks.push(LedgerMark { time, work: self.work, heat: self.heat, meas_energy: self.meas_energy });
    }

    /// Cumulative closure |W + Q + E_M − ΔU|.
    pub fn closure_error(&self) -> f64 {
        (self.work + self.heat + self.meas_energy - self.internal_energy_delta).abs()
    }

    fn mark_at(&self, t: f64) -> Option<&LedgerMark> {
        let tol = 1e-9 * t.abs().max(1.0);
        self.marks.iter().find(|m| (m.time - t).abs() <= tol)
    }
}

/// Books one sub-step into `ledger` and returns its increments.
pub fn ledger_update(
    ledger: &mut ThermoLedger,
    step: &LedgerStep<'_>,
    protocol: &FeedbackProtocol,
    frame: &EnergyFrame,
) -> Result<Increment> {
    if step.before.dim() != protocol.dim() || step.after.dim() != protocol.dim() {
        return Err(Error::DimensionMismatch { expected: protocol.dim(), got: step.before.dim() });
    }
    let u = frame.u_at(protocol, step.d_before);
    let u_next = frame.u_at(protocol, step.d_after);
    let drive = (u_next - u).expect(step.after);
    let d_state = u.expect(step.after) - u.expect(step.before);
    let mut inc = Increment {
        internal_energy_delta: u_next.expect(step.after) - u.expect(step.before),
        ..Increment::default()
    };
    match step.kind {
        StepKind::Diffusive => {
            let value = protocol.eval(step.d_before);
            let heat = value.bath_adjoint(&u).expect(step.before) * step.dt;
            let commutator = match frame {
                EnergyFrame::BareHamiltonian => 0.0,
                EnergyFrame::ThermodynamicHamiltonian(_) => commutator_power(&value.hamiltonian, &u, step.before) * step.dt,
            };
            inc.work = drive + commutator;
            inc.heat = heat;
            inc.meas_energy = d_state - heat - commutator;
            inc.commutator = commutator;
        }
        StepKind::Measurement => {
            inc.work = drive;
            inc.meas_energy = d_state;
        }
        StepKind::Bath => {
            inc.work = drive;
            inc.heat = d_state;
        }
        StepKind::Unitary => {
            inc.work = drive + d_state;
            inc.commutator = d_state;
        }
    }
    ledger.apply(&inc);
    Ok(inc)
}

/// Tr{U(−i[H, ρ])} = Tr{i[H, U]ρ}
fn commutator_power(h: &Operator, u: &Operator, rho: &Operator) -> f64 {
    let c = (*h * *u - *u * *h) * crate::Complex64::new(0.0, 1.0);
    c.expect(rho)
}

/// Ensemble rates over a time window, with standard errors across trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleRates {
    pub power: Estimate,
    pub heat: Estimate,
    pub meas_energy: Estimate,
    pub trajectories: usize,
}

/// Windowed ensemble rates from ledgers marked at `window.0` and `window.1`.
pub fn ensemble_thermo(ledgers: &[ThermoLedger], window: (f64, f64)) -> Result<EnsembleRates> {
    if ledgers.len() < 2 {
        return Err(Error::invalid("ledgers", format!("need at least 2, got {}", ledgers.len())));
    }
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::invalid("window", format!("empty window ({t0}, {t1})")));
    }
    let mut power = Moments::new();
    let mut heat = Moments::new();
    let mut meas = Moments::new();
    for (i, l) in ledgers.iter().enumerate() {
        let (a, b) = match (l.mark_at(t0), l.mark_at(t1)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid("window", format!("({t0}, {t1}) not marked in ledger {i}")));
            }
        };
        let span = t1 - t0;
        power.push((b.work - a.work) / span);
        heat.push((b.heat - a.heat) / span);
        meas.push((b.meas_energy - a.meas_energy) / span);
    }
    let est = |m: &Moments| Estimate { value: m.mean(), std_err: m.std_err() };
    Ok(EnsembleRates { power: est(&power), heat: est(&heat), meas_energy: est(&meas), trajectories: ledgers.len() })
}
