//! Small dense complex operators (d ≤ 4) and the superoperators of the QFPME.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use num_complex::Complex64 as C;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;
pub const HERMITIAN_TOL: f64 = 1e-12;
const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);
const I: C = C::new(0.0, 1.0);

/// Dense d×d complex matrix stored inline with a fixed 4×4 capacity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Operator {
    dim: usize,
    data: [C; MAX_DIM * MAX_DIM],
    hermitian: bool,
}

impl Operator {
    /// Panics when `dim` is 0 or larger than [`MAX_DIM`].
    pub fn zeros(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "operator dimension {dim} outside 1..=4");
        Self { dim, data: [ZERO; MAX_DIM * MAX_DIM], hermitian: true }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * MAX_DIM + i] = ONE;
        }
        m
    }

    /// Row-major entries; the hermitian flag is set when the input passes the check.
    pub fn from_rows(dim: usize, entries: &[C]) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::invalid("dim", format!("{dim} outside 1..=4")));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: entries.len() });
        }
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.data[i * MAX_DIM + j] = entries[i * dim + j];
            }
        }
        m.hermitian = m.hermitian_deviation() <= HERMITIAN_TOL;
        Ok(m)
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Result<Self> {
        let c: Vec<C> = entries.iter().map(|&x| C::new(x, 0.0)).collect();
        Self::from_rows(dim, &c)
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * MAX_DIM + i] = C::new(v, 0.0);
        }
        m
    }

    /// |i⟩⟨j|
    pub fn ket_bra(dim: usize, i: usize, j: usize) -> Self {
        let mut m = Self::zeros(dim);
        m.data[i * MAX_DIM + j] = ONE;
        m.hermitian = i == j;
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C {
        self.data[i * MAX_DIM + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C) {
        self.data[i * MAX_DIM + j] = v;
        self.hermitian = false;
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn hermitian_deviation(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                dev = dev.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        dev
    }

    /// Verifies hermiticity to [`HERMITIAN_TOL`] and sets the flag.
    pub fn checked_hermitian(mut self) -> Result<Self> {
        let deviation = self.hermitian_deviation();
        if deviation > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation });
        }
        self.hermitian = true;
        Ok(self)
    }

    /// (X + X†)/2, flagged hermitian.
    pub fn symmetrized(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.data[i * MAX_DIM + j] = 0.5 * (self.get(i, j) + self.get(j, i).conj());
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.data[i * MAX_DIM + j] = self.get(j, i).conj();
            }
        }
        m.hermitian = self.hermitian;
        m
    }

    /// Entrywise complex conjugation in the stored basis.
    pub fn conj(&self) -> Self {
        let mut m = *self;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.data[i * MAX_DIM + j] = self.get(i, j).conj();
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.data[i * MAX_DIM + j] = self.get(j, i);
            }
        }
        m.hermitian = self.hermitian;
        m
    }

    pub fn trace(&self) -> C {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Re Tr{self · rho}
    pub fn expect(&self, rho: &Operator) -> f64 {
        trace_product(self, rho).re
    }

    pub fn scale(&self, s: C) -> Self {
        let mut m = *self;
        for v in m.data.iter_mut() {
            *v *= s;
        }
        m.hermitian = self.hermitian && s.im == 0.0;
        m
    }

    pub fn scale_re(&self, s: f64) -> Self {
        let mut m = *self;
        for v in m.data.iter_mut() {
            *v *= s;
        }
        m
    }

    pub fn commutator(&self, other: &Operator) -> Self {
        let mut m = *self * *other - *other * *self;
        m.hermitian = false;
        m
    }

    pub fn anticommutator(&self, other: &Operator) -> Self {
        let mut m = *self * *other + *other * *self;
        m.hermitian = self.hermitian && other.hermitian;
        m
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max).sqrt()
    }

    pub fn diagonal(&self) -> Vec<C> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<C> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn from_dmatrix(m: &DMatrix<C>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        let entries: Vec<C> = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Self::from_rows(m.nrows(), &entries)
    }

    /// Eigen-decomposition of a hermitian operator: ascending eigenvalues and the
    /// unitary whose columns are the eigenvectors.
    pub fn eigh(&self) -> (Vec<f64>, Operator) {
        let h = self.symmetrized().to_dmatrix();
        let eig = nalgebra::SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut u = Operator::zeros(self.dim);
        for (col, &k) in order.iter().enumerate() {
            for row in 0..self.dim {
                u.data[row * MAX_DIM + col] = eig.eigenvectors[(row, k)];
            }
        }
        u.hermitian = false;
        (values, u)
    }

    /// Matrix exponential (Padé, via nalgebra).
    pub fn expm(&self) -> Self {
        let e = self.to_dmatrix().exp();
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.data[i * MAX_DIM + j] = e[(i, j)];
            }
        }
        m.hermitian = false;
        m
    }

    /// U† X U
    pub fn conjugate_by(&self, u: &Operator) -> Self {
        let mut m = u.adjoint() * *self * *u;
        m.hermitian = self.hermitian;
        m
    }
}

/// Tr{a · b} without forming the product.
#[inline]
pub fn trace_product(a: &Operator, b: &Operator) -> C {
    let d = a.dim;
    let mut t = ZERO;
    for i in 0..d {
        for k in 0..d {
            t += a.data[i * MAX_DIM + k] * b.data[k * MAX_DIM + i];
        }
    }
    t
}

impl Add for Operator {
    type Output = Operator;
    fn add(mut self, rhs: Operator) -> Operator {
        debug_assert_eq!(self.dim, rhs.dim);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += b;
        }
        self.hermitian = self.hermitian && rhs.hermitian;
        self
    }
}

impl AddAssign for Operator {
    fn add_assign(&mut self, rhs: Operator) {
        *self = *self + rhs;
    }
}

impl Sub for Operator {
    type Output = Operator;
    fn sub(mut self, rhs: Operator) -> Operator {
        debug_assert_eq!(self.dim, rhs.dim);
        for (a, b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a -= b;
        }
        self.hermitian = self.hermitian && rhs.hermitian;
        self
    }
}

impl SubAssign for Operator {
    fn sub_assign(&mut self, rhs: Operator) {
        *self = *self - rhs;
    }
}

impl Neg for Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        self.scale_re(-1.0)
    }
}

impl Mul for Operator {
    type Output = Operator;
    fn mul(self, rhs: Operator) -> Operator {
        debug_assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut m = Operator::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.data[i * MAX_DIM + k];
                if a == ZERO {
                    continue;
                }
                for j in 0..d {
                    m.data[i * MAX_DIM + j] += a * rhs.data[k * MAX_DIM + j];
                }
            }
        }
        m.hermitian = false;
        m
    }
}

impl Mul<f64> for Operator {
    type Output = Operator;
    fn mul(self, rhs: f64) -> Operator {
        self.scale_re(rhs)
    }
}

impl Mul<C> for Operator {
    type Output = Operator;
    fn mul(self, rhs: C) -> Operator {
        self.scale(rhs)
    }
}

pub fn pauli_x() -> Operator {
    Operator::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]).expect("static")
}

pub fn pauli_y() -> Operator {
    Operator::from_rows(2, &[ZERO, -I, I, ZERO]).expect("static")
}

/// diag(1, −1): index 0 is the +1 eigenstate.
pub fn pauli_z() -> Operator {
    Operator::diag(&[1.0, -1.0])
}

/// 𝒟[O]ρ = OρO† − ½{O†O, ρ}
pub fn dissipator_apply(o: &Operator, rho: &Operator) -> Result<Operator> {
    check_dims(o, rho)?;
    Ok(dissipator(o, rho))
}

#[inline]
pub(crate) fn dissipator(o: &Operator, rho: &Operator) -> Operator {
    let od = o.adjoint();
    let odo = od * *o;
    let mut out = *o * *rho * od - (odo * *rho + *rho * odo).scale_re(0.5);
    out.hermitian = rho.hermitian;
    out
}

/// Heisenberg-picture dissipator 𝒟†[O]X = O†XO − ½{O†O, X}.
pub fn dissipator_adjoint(o: &Operator, x: &Operator) -> Operator {
    let od = o.adjoint();
    let odo = od * *o;
    let mut out = od * *x * *o - (odo * *x + *x * odo).scale_re(0.5);
    out.hermitian = x.hermitian;
    out
}

/// 𝒜(D)ρ = ½{A − D, ρ}
pub fn a_superop_apply(a: &Operator, d: f64, rho: &Operator) -> Result<Operator> {
    check_dims(a, rho)?;
    if !a.is_hermitian() {
        return Err(Error::NotHermitian { deviation: a.hermitian_deviation() });
    }
    let mut out = (*a * *rho + *rho * *a).scale_re(0.5) - rho.scale_re(d);
    out.hermitian = rho.hermitian;
    Ok(out)
}

/// ℒ(D)ρ = −i[H(D), ρ] + Σ_k 𝒟[L_k(D)]ρ
pub fn liouvillian_apply(protocol: &FeedbackProtocol, d: f64, rho: &Operator) -> Result<Operator> {
    if protocol.dim() != rho.dim() {
        return Err(Error::DimensionMismatch { expected: protocol.dim(), got: rho.dim() });
    }
    Ok(protocol.eval(d).liouvillian(rho))
}

fn check_dims(a: &Operator, b: &Operator) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { expected: a.dim, got: b.dim });
    }
    Ok(())
}

/// Normalized, hermitian, positive semidefinite operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
    normalized: bool,
}

impl DensityMatrix {
    pub fn new(op: Operator) -> Result<Self> {
        let op = op.checked_hermitian()?;
        let tr = op.trace().re;
        if (tr - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("rho", format!("trace {tr} differs from 1")));
        }
        let (eigs, _) = op.eigh();
        if eigs[0] < -1e-10 {
            return Err(Error::invalid("rho", format!("negative eigenvalue {}", eigs[0])));
        }
        Ok(Self { op, normalized: true })
    }

    pub fn pure(dim: usize, index: usize) -> Self {
        Self { op: Operator::ket_bra(dim, index, index), normalized: true }
    }

    pub fn from_populations(p: &[f64]) -> Result<Self> {
        Self::new(Operator::diag(p))
    }

    /// Gibbs state e^{−H/T}/Z.
    pub fn thermal(h: &Operator, temperature: f64) -> Result<Self> {
        let (e, u) = h.eigh();
        let emin = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = e.iter().map(|&x| (-(x - emin) / temperature).exp()).collect();
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / z).collect();
        let rho = (u * Operator::diag(&p) * u.adjoint()).symmetrized();
        Self::new(rho)
    }

    pub fn op(&self) -> &Operator {
        &self.op
    }

    pub fn into_op(self) -> Operator {
        self.op
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn purity(&self) -> f64 {
        trace_product(&self.op, &self.op).re
    }
}

/// One Lindblad jump channel with its entropy increment and reverse partner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LindbladChannel {
    pub jump: Operator,
    pub sigma_k: f64,
    pub partner_index: Option<usize>,
}

impl LindbladChannel {
    pub fn new(jump: Operator, sigma_k: f64, partner_index: Option<usize>) -> Self {
        Self { jump, sigma_k, partner_index }
    }

    /// e^{−σ_k/2} L_k†
    pub fn partner_jump(&self) -> Operator {
        self.jump.adjoint().scale_re((-0.5 * self.sigma_k).exp())
    }

    /// The partner channel built from this one; applying it twice returns the original.
    pub fn partner(&self, own_index: usize) -> LindbladChannel {
        LindbladChannel { jump: self.partner_jump(), sigma_k: -self.sigma_k, partner_index: Some(own_index) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdBranch {
    pub lo: f64,
    pub hi: f64,
    pub hamiltonian: Operator,
    pub channels: Vec<LindbladChannel>,
}

/// Map from detector outcome D to Hamiltonian and dissipators.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedbackProtocol {
    /// H(D) = H₀ + D·H_f with D-independent channels.
    Linear { h0: Operator, hf: Operator, channels: Vec<LindbladChannel> },
    /// Piecewise-constant branches on half-open intervals [lo, hi).
    Threshold { branches: Vec<ThresholdBranch> },
}

/// Hamiltonian and active channels at one value of D.
#[derive(Clone, Copy, Debug)]
pub struct ProtocolValue<'a> {
    pub hamiltonian: Operator,
    pub channels: &'a [LindbladChannel],
}

impl ProtocolValue<'_> {
    pub fn liouvillian(&self, rho: &Operator) -> Operator {
        let h = &self.hamiltonian;
        let mut out = (*h * *rho - *rho * *h) * (-I);
        for ch in self.channels {
            out += dissipator(&ch.jump, rho);
        }
        out.hermitian = rho.hermitian;
        out
    }

    /// ℒ_B† X
    pub fn bath_adjoint(&self, x: &Operator) -> Operator {
        let mut out = Operator::zeros(x.dim());
        for ch in self.channels {
            out += dissipator_adjoint(&ch.jump, x);
        }
        out
    }
}

impl FeedbackProtocol {
    pub fn linear(h0: Operator, hf: Operator, channels: Vec<LindbladChannel>) -> Result<Self> {
        let h0 = h0.checked_hermitian()?;
        let hf = hf.checked_hermitian()?;
        check_dims(&h0, &hf)?;
        for ch in &channels {
            check_dims(&h0, &ch.jump)?;
        }
        Ok(FeedbackProtocol::Linear { h0, hf, channels })
    }

    pub fn threshold(branches: Vec<ThresholdBranch>) -> Result<Self> {
        let first = branches.first().ok_or_else(|| Error::invalid("branches", "empty"))?;
        if first.lo != f64::NEG_INFINITY || branches.last().map(|b| b.hi) != Some(f64::INFINITY) {
            return Err(Error::invalid("branches", "intervals must cover the real line"));
        }
        let dim = first.hamiltonian.dim();
        let mut checked = Vec::with_capacity(branches.len());
        for (i, b) in branches.into_iter().enumerate() {
            if b.lo.partial_cmp(&b.hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::invalid("branches", format!("branch {i} has empty interval")));
            }
            if let Some(prev) = checked.last() {
                let prev: &ThresholdBranch = prev;
                if prev.hi != b.lo {
                    return Err(Error::invalid("branches", format!("gap or overlap before branch {i}")));
                }
            }
            let hamiltonian = b.hamiltonian.checked_hermitian()?;
            if hamiltonian.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: hamiltonian.dim() });
            }
            for ch in &b.channels {
                check_dims(&hamiltonian, &ch.jump)?;
            }
            checked.push(ThresholdBranch { hamiltonian, ..b });
        }
        Ok(FeedbackProtocol::Threshold { branches: checked })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeedbackProtocol::Linear { h0, .. } => h0.dim(),
            FeedbackProtocol::Threshold { branches } => branches[0].hamiltonian.dim(),
        }
    }

    /// Branch containing D under the [lo, hi) convention.
    pub fn branch_index(&self, d: f64) -> usize {
        match self {
            FeedbackProtocol::Linear { .. } => 0,
            FeedbackProtocol::Threshold { branches } => {
                branches.iter().position(|b| d >= b.lo && d < b.hi).unwrap_or(branches.len() - 1)
            }
        }
    }

    /// Interior switching points of a threshold protocol.
    pub fn boundaries(&self) -> Vec<f64> {
        match self {
            FeedbackProtocol::Linear { .. } => Vec::new(),
            FeedbackProtocol::Threshold { branches } => branches[1..].iter().map(|b| b.lo).collect(),
        }
    }

    pub fn eval(&self, d: f64) -> ProtocolValue<'_> {
        match self {
            FeedbackProtocol::Linear { h0, hf, channels } => {
                let mut hamiltonian = *h0 + hf.scale_re(d);
                hamiltonian.hermitian = true;
                ProtocolValue { hamiltonian, channels }
            }
            FeedbackProtocol::Threshold { branches } => {
                let b = &branches[self.branch_index(d)];
                ProtocolValue { hamiltonian: b.hamiltonian, channels: &b.channels }
            }
        }
    }

    /// Number of channels in the largest branch.
    pub fn channel_count(&self) -> usize {
        match self {
            FeedbackProtocol::Linear { channels, .. } => channels.len(),
            FeedbackProtocol::Threshold { branches } => branches.iter().map(|b| b.channels.len()).max().unwrap_or(0),
        }
    }

    /// Largest total jump rate max_D Σ_k ‖L_k†L_k‖.
    pub fn max_rate(&self) -> f64 {
        let rate = |chs: &[LindbladChannel]| -> f64 {
            let mut total = Operator::zeros(self.dim());
            for c in chs {
                total += c.jump.adjoint() * c.jump;
            }
            total.eigh().0.last().copied().unwrap_or(0.0).max(0.0)
        };
        match self {
            FeedbackProtocol::Linear { channels, .. } => rate(channels),
            FeedbackProtocol::Threshold { branches } => {
                branches.iter().map(|b| rate(&b.channels)).fold(0.0, f64::max)
            }
        }
    }
}

/// A complete QFPME: feedback protocol, measured observable, rates.
#[derive(Clone, Debug, PartialEq)]
pub struct QfpmeModel {
    pub protocol: FeedbackProtocol,
    pub observable: Operator,
    pub lambda: f64,
    pub gamma: f64,
}

impl QfpmeModel {
    pub fn new(protocol: FeedbackProtocol, observable: Operator, lambda: f64, gamma: f64) -> Result<Self> {
        let observable = observable.checked_hermitian()?;
        if protocol.dim() != observable.dim() {
            return Err(Error::DimensionMismatch { expected: protocol.dim(), got: observable.dim() });
        }
        positive("lambda", lambda)?;
        positive("gamma", gamma)?;
        Ok(Self { protocol, observable, lambda, gamma })
    }

    pub fn dim(&self) -> usize {
        self.observable.dim()
    }

    /// Stationary outcome variance γ/(8λ).
    pub fn sigma(&self) -> f64 {
        self.gamma / (8.0 * self.lambda)
    }

    /// Full generator at D: ℒ(D)ρ + λ𝒟[A]ρ (without the D-transport terms).
    pub fn local_generator(&self, d: f64, rho: &Operator) -> Operator {
        self.protocol.eval(d).liouvillian(rho) + dissipator(&self.observable, rho).scale_re(self.lambda)
    }
}

pub(crate) fn positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::invalid(field, format!("must be finite and > 0, got {v}")));
    }
    Ok(())
}

pub(crate) fn non_negative(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::invalid(field, format!("must be finite and ≥ 0, got {v}")));
    }
    Ok(())
}
