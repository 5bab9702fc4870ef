//! The two concrete feedback models: classical two-level bang-bang control and the
//! measurement-driven qubit engine (rotating frame).

use crate::error::Result;
use crate::operators::{
    non_negative, pauli_x, pauli_y, pauli_z, positive, FeedbackProtocol, LindbladChannel, Operator, QfpmeModel,
    ThresholdBranch,
};
use crate::{beta_omega, bose_einstein};

/// Two-level system with H(D) = θ(D)ω|0⟩⟨0| + (1−θ(D))ω|1⟩⟨1|, A = |1⟩⟨1| − |0⟩⟨0|.
///
/// State |0⟩ carries outcome a = −1 and |1⟩ carries a = +1. For D ≥ 0 the feedback
/// makes |1⟩ the ground state, so a correct detector keeps the system low in energy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BangBang {
    pub omega: f64,
    pub kappa: f64,
    pub n_b: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl BangBang {
    pub fn new(omega: f64, kappa: f64, n_b: f64, lambda: f64, gamma: f64) -> Result<Self> {
        let m = Self { omega, kappa, n_b, lambda, gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn with_temperature(omega: f64, temperature: f64, kappa: f64, lambda: f64, gamma: f64) -> Result<Self> {
        positive("T", temperature)?;
        Self::new(omega, kappa, bose_einstein(omega, temperature), lambda, gamma)
    }

    pub fn validate(&self) -> Result<()> {
        positive("omega", self.omega)?;
        non_negative("kappa", self.kappa)?;
        positive("n_b", self.n_b)?;
        positive("lambda", self.lambda)?;
        positive("gamma", self.gamma)
    }

    pub fn sigma(&self) -> f64 {
        self.gamma / (8.0 * self.lambda)
    }

    /// ω/T
    pub fn beta_omega(&self) -> f64 {
        beta_omega(self.n_b)
    }

    pub fn observable() -> Operator {
        Operator::diag(&[-1.0, 1.0])
    }

    /// Outcome value carried by basis state `index`.
    pub fn outcome(index: usize) -> f64 {
        if index == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Hamiltonian for the branch selected by D (θ(0) = 1).
    pub fn hamiltonian(&self, d: f64) -> Operator {
        if d >= 0.0 {
            Operator::ket_bra(2, 0, 0).scale_re(self.omega)
        } else {
            Operator::ket_bra(2, 1, 1).scale_re(self.omega)
        }
    }

    /// Flip rate out of state `a` (±1) when the detector reads D.
    ///
    /// Matching sign (D ≥ 0 with a = +1, D < 0 with a = −1): the system sits in the
    /// ground state and can only absorb, at κn_B. Otherwise it emits at κ(n_B+1).
    #[inline]
    pub fn flip_rate(&self, a: f64, d: f64) -> f64 {
        if Self::detector_matches(a, d) {
            self.kappa * self.n_b
        } else {
            self.kappa * (self.n_b + 1.0)
        }
    }

    #[inline]
    pub fn detector_matches(a: f64, d: f64) -> bool {
        (d >= 0.0) == (a > 0.0)
    }

    pub fn max_rate(&self) -> f64 {
        self.kappa * (self.n_b + 1.0)
    }

    pub fn protocol(&self) -> Result<FeedbackProtocol> {
        let bo = self.beta_omega();
        let up = Operator::ket_bra(2, 0, 1); // σ = |0⟩⟨1|
        let down = up.adjoint();
        let absorb = (self.kappa * self.n_b).sqrt();
        let emit = (self.kappa * (self.n_b + 1.0)).sqrt();
        // D ≥ 0: |0⟩ is excited, σ raises and σ† lowers.
        let plus = vec![
            LindbladChannel::new(up.scale_re(absorb), -bo, Some(1)),
            LindbladChannel::new(down.scale_re(emit), bo, Some(0)),
        ];
        let minus = vec![
            LindbladChannel::new(down.scale_re(absorb), -bo, Some(1)),
            LindbladChannel::new(up.scale_re(emit), bo, Some(0)),
        ];
        FeedbackProtocol::threshold(vec![
            ThresholdBranch { lo: f64::NEG_INFINITY, hi: 0.0, hamiltonian: self.hamiltonian(-1.0), channels: minus },
            ThresholdBranch { lo: 0.0, hi: f64::INFINITY, hamiltonian: self.hamiltonian(1.0), channels: plus },
        ])
    }

    pub fn qfpme(&self) -> Result<QfpmeModel> {
        QfpmeModel::new(self.protocol()?, Self::observable(), self.lambda, self.gamma)
    }
}

/// Qubit engine in the rotating frame: H(D) = gDσ_y, A = σ_x, thermal bath on σ_z.
///
/// Basis index 0 is the σ_z = +1 (excited) state; the bath lowering operator is |1⟩⟨0|.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Engine {
    pub omega: f64,
    pub g: f64,
    pub kappa: f64,
    pub n_b: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Engine {
    pub fn new(omega: f64, g: f64, kappa: f64, n_b: f64, lambda: f64, gamma: f64) -> Result<Self> {
        let m = Self { omega, g, kappa, n_b, lambda, gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn with_temperature(omega: f64, temperature: f64, g: f64, kappa: f64, lambda: f64, gamma: f64) -> Result<Self> {
        positive("T", temperature)?;
        Self::new(omega, g, kappa, bose_einstein(omega, temperature), lambda, gamma)
    }

    pub fn validate(&self) -> Result<()> {
        positive("omega", self.omega)?;
        positive("g", self.g)?;
        non_negative("kappa", self.kappa)?;
        positive("n_b", self.n_b)?;
        positive("lambda", self.lambda)?;
        positive("gamma", self.gamma)
    }

    pub fn sigma(&self) -> f64 {
        self.gamma / (8.0 * self.lambda)
    }

    pub fn beta_omega(&self) -> f64 {
        beta_omega(self.n_b)
    }

    pub fn observable() -> Operator {
        pauli_x()
    }

    pub fn lowering() -> Operator {
        Operator::ket_bra(2, 1, 0)
    }

    /// H_TD = (ω/2)σ_z
    pub fn thermodynamic_hamiltonian(&self) -> Operator {
        pauli_z().scale_re(0.5 * self.omega)
    }

    /// Bath channels: emission (index 0) and absorption (index 1).
    pub fn channels(&self) -> Vec<LindbladChannel> {
        let bo = self.beta_omega();
        let lower = Self::lowering();
        vec![
            LindbladChannel::new(lower.scale_re((self.kappa * (1.0 + self.n_b)).sqrt()), bo, Some(1)),
            LindbladChannel::new(lower.adjoint().scale_re((self.kappa * self.n_b).sqrt()), -bo, Some(0)),
        ]
    }

    pub fn protocol(&self) -> Result<FeedbackProtocol> {
        FeedbackProtocol::linear(Operator::zeros(2), pauli_y().scale_re(self.g), self.channels())
    }

    pub fn qfpme(&self) -> Result<QfpmeModel> {
        QfpmeModel::new(self.protocol()?, Self::observable(), self.lambda, self.gamma)
    }

    /// Largest rate in the model, used for step-size preconditions.
    pub fn max_rate(&self) -> f64 {
        self.lambda.max(self.gamma).max(self.kappa * (1.0 + self.n_b)).max(self.g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::liouvillian_apply;

    #[test]
    fn bang_bang_liouvillian_on_excited_state() {
        let m = BangBang::new(1.0, 0.3, 0.58, 1.0, 1.0).unwrap();
        let p = m.protocol().unwrap();
        let rho = Operator::ket_bra(2, 0, 0);
        let out = liouvillian_apply(&p, 0.5, &rho).unwrap();
        let expected = (Operator::ket_bra(2, 1, 1) - rho).scale_re(0.3 * 1.58);
        assert!((out - expected).sup_norm() < 1e-14);
    }

    #[test]
    fn bang_bang_branches() {
        let m = BangBang::new(2.0, 0.1, 0.5, 1.0, 1.0).unwrap();
        let p = m.protocol().unwrap();
        let neg = p.eval(-1.0);
        assert!((neg.hamiltonian - Operator::ket_bra(2, 1, 1).scale_re(2.0)).sup_norm() < 1e-15);
        let zero = p.eval(0.0);
        assert!((zero.hamiltonian - Operator::ket_bra(2, 0, 0).scale_re(2.0)).sup_norm() < 1e-15);
        assert_eq!(p.boundaries(), vec![0.0]);
    }

    #[test]
    fn engine_protocol_values() {
        let m = Engine::new(1.0, 1.0, 0.2, 0.5, 1.0, 1.0).unwrap();
        let p = m.protocol().unwrap();
        let h = p.eval(0.3).hamiltonian;
        assert!((h - pauli_y().scale_re(0.3)).sup_norm() < 1e-15);
        let rho = Operator::from_real_rows(2, &[0.6, 0.1, 0.1, 0.4]).unwrap();
        let at_zero = liouvillian_apply(&p, 0.0, &rho).unwrap();
        let bath = p.eval(0.0).channels.iter().fold(Operator::zeros(2), |acc, c| {
            acc + crate::operators::dissipator_apply(&c.jump, &rho).unwrap()
        });
        assert!((at_zero - bath).sup_norm() < 1e-15);
    }

    #[test]
    fn partner_channels_round_trip() {
        let m = Engine::new(1.0, 1.0, 0.4, 0.3, 1.0, 1.0).unwrap();
        let ch = m.channels();
        let partner = ch[0].partner(0);
        assert!((partner.jump - ch[1].jump).sup_norm() < 1e-12);
        let back = partner.partner(1);
        assert!((back.jump - ch[0].jump).sup_norm() < 1e-12);
        assert_eq!(back.sigma_k, ch[0].sigma_k);
    }

    #[test]
    fn flip_rates_follow_detector_sign() {
        let m = BangBang::new(1.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(m.flip_rate(1.0, 0.2), 0.5);
        assert_eq!(m.flip_rate(-1.0, 0.2), 1.5);
        assert_eq!(m.flip_rate(-1.0, -0.2), 0.5);
        assert_eq!(m.flip_rate(-1.0, 0.0), 1.5);
    }
}
