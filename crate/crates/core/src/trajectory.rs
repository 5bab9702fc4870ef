//! Stochastic samplers: classical jump process with detector filter, diffusive Belavkin
//! filter, and the Kraus/quantum-jump unraveling with two-point measurements.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid_solver::{Grid, GridSolver, GridState};
use crate::models::BangBang;
use crate::operators::{DensityMatrix, FeedbackProtocol, Operator, QfpmeModel};
use crate::rng::RngStream;
use crate::thermo::{ledger_update, EnergyFrame, LedgerStep, StepKind, ThermoLedger};
use crate::Complex64;

pub const DUMP_MAGIC: &[u8; 8] = b"QFPMETRJ";
pub const DUMP_VERSION: u32 = 1;
/// Forward log-probabilities below this are treated as underflow.
pub const LOG_PROB_FLOOR: f64 = -700.0;
/// Conditional traces below this abort a diffusive trajectory.
pub const TRACE_COLLAPSE: f64 = 1e-6;

/// Exact Ornstein–Uhlenbeck transition over one step with frozen drive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuKernel {
    decay: f64,
    gain: f64,
    noise: f64,
    sqrt_dt: f64,
}

impl OuKernel {
    pub fn new(gamma: f64, lambda: f64, dt: f64) -> Self {
        let sigma = gamma / (8.0 * lambda);
        Self {
            decay: (-gamma * dt).exp(),
            gain: -(-gamma * dt).exp_m1(),
            noise: (sigma * -(-2.0 * gamma * dt).exp_m1()).sqrt(),
            sqrt_dt: dt.sqrt(),
        }
    }

    /// (D_next, dW) for a standard normal draw `xi`.
    #[inline]
    pub fn step(&self, d: f64, drive: f64, xi: f64) -> (f64, f64) {
        (self.decay * d + self.gain * drive + self.noise * xi, xi * self.sqrt_dt)
    }
}

/// One filter step D → D + γ(drive − D)dt + (γ/2√λ)dW, integrated exactly over dt.
pub fn ou_filter_update<R: Rng + ?Sized>(d: f64, drive: f64, gamma: f64, lambda: f64, dt: f64, rng: &mut R) -> (f64, f64) {
    debug_assert!(dt > 0.0);
    let xi: f64 = rng.sample(StandardNormal);
    OuKernel::new(gamma, lambda, dt).step(d, drive, xi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelTag {
    BangBang = 1,
    Engine = 2,
    Generic = 3,
}

impl ModelTag {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ModelTag::BangBang),
            2 => Ok(ModelTag::Engine),
            3 => Ok(ModelTag::Generic),
            _ => Err(Error::Io(format!("unknown model tag {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StatePath {
    /// a_0..a_N
    Classical(Vec<f64>),
    /// ρ_c at the start of steps 0, stride, 2·stride, …
    Quantum { stride: usize, snapshots: Vec<Operator> },
}

/// Two-point outcomes and per-step channel tags of a jump unraveling.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRecord {
    pub v_i: usize,
    pub v_f: usize,
    pub p_vi: f64,
    pub p_vf: f64,
    /// k_1..k_N: 0 for the no-jump branch, k + 1 for channel k.
    pub tags: Vec<u8>,
    /// log P[Γ, D] accumulated while sampling (shared Gaussian prefactors dropped).
    pub log_forward: f64,
}

impl JumpRecord {
    pub fn jump_count(&self) -> usize {
        self.tags.iter().filter(|&&t| t != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub model: ModelTag,
    pub dt: f64,
    pub steps: usize,
    /// D_0..D_{N+1} (classical, Kraus) or D_0..D_N (diffusive).
    pub d_path: Vec<f64>,
    pub states: StatePath,
    pub jumps: Option<JumpRecord>,
    /// z_1..z_{N+1}, Kraus mode only.
    pub z_path: Vec<f64>,
    pub stream: RngStream,
}

impl TrajectoryRecord {
    pub fn duration(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn classical_path(&self) -> Option<&[f64]> {
        match &self.states {
            StatePath::Classical(a) => Some(a),
            StatePath::Quantum { .. } => None,
        }
    }

    /// Largest |D_{n+1} − e^{−γdt}D_n − γdt·z_{n+1}| over the Kraus record.
    pub fn filter_residual(&self, gamma: f64) -> f64 {
        let e = (-gamma * self.dt).exp();
        self.z_path
            .iter()
            .enumerate()
            .map(|(n, z)| (self.d_path[n + 1] - e * self.d_path[n] - gamma * self.dt * z).abs())
            .fold(0.0, f64::max)
    }
}

/// Step grid and recording options shared by the samplers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub dt: f64,
    pub steps: usize,
    /// Unrecorded steps before step 0 (classical and diffusive samplers).
    pub burn_in: usize,
    /// ρ_c snapshot spacing in steps; 0 keeps none.
    pub snapshot_stride: usize,
    /// Ledger mark spacing in steps; 0 keeps none.
    pub mark_stride: usize,
    /// Classical start (a_0, D_0) instead of the stationary Gaussian draw.
    pub fixed_start: Option<(f64, f64)>,
}

impl RunSpec {
    pub fn new(dt: f64, steps: usize) -> Self {
        Self { dt, steps, burn_in: 0, snapshot_stride: 0, mark_stride: 0, fixed_start: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be finite and > 0, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be ≥ 1"));
        }
        Ok(())
    }

    fn marks_at(&self, n: usize) -> bool {
        self.mark_stride > 0 && n % self.mark_stride == 0
    }
}

/// Bang-bang trajectory: Bernoulli flips with D-sign-dependent rates, exact OU filter.
///
/// Per step n the detector moves first, D_{n+1} from a_n, then a_{n+1} is drawn with
/// the rates selected by D_{n+1}.
pub fn simulate_classical(model: &BangBang, run: &RunSpec, stream: RngStream) -> Result<TrajectoryRecord> {
    run.validate()?;
    model.validate()?;
    if model.max_rate() * run.dt >= 0.1 {
        return Err(Error::invalid("dt", format!("rate_max·dt = {} must be < 0.1", model.max_rate() * run.dt)));
    }
    let mut rng = stream.rng();
    let kernel = OuKernel::new(model.gamma, model.lambda, run.dt);
    let (mut a, mut d) = match run.fixed_start {
        Some(start) => start,
        None => {
            let a0 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let xi: f64 = rng.sample(StandardNormal);
            (a0, a0 + model.sigma().sqrt() * xi)
        }
    };
    let step = |a: &mut f64, d: &mut f64, rng: &mut ChaCha8Rng, flip: bool| {
        let xi: f64 = rng.sample(StandardNormal);
        *d = kernel.step(*d, *a, xi).0;
        if flip && rng.random::<f64>() < model.flip_rate(*a, *d) * run.dt {
            *a = -*a;
        }
    };
    for _ in 0..run.burn_in {
        step(&mut a, &mut d, &mut rng, true);
    }
    let mut d_path = Vec::with_capacity(run.steps + 2);
    let mut a_path = Vec::with_capacity(run.steps + 1);
    d_path.push(d);
    a_path.push(a);
    for n in 0..=run.steps {
        step(&mut a, &mut d, &mut rng, n < run.steps);
        d_path.push(d);
        if n < run.steps {
            a_path.push(a);
        }
    }
    Ok(TrajectoryRecord {
        model: ModelTag::BangBang,
        dt: run.dt,
        steps: run.steps,
        d_path,
        states: StatePath::Classical(a_path),
        jumps: None,
        z_path: Vec::new(),
        stream,
    })
}

/// Replays a classical record through the first-law ledger (U = H(D)).
pub fn classical_ledger(record: &TrajectoryRecord, model: &BangBang, mark_stride: usize) -> Result<ThermoLedger> {
    let a = record
        .classical_path()
        .ok_or_else(|| Error::ModelMismatch("classical ledger needs a classical record".into()))?;
    let protocol = model.protocol()?;
    let frame = EnergyFrame::BareHamiltonian;
    let state = |a: f64| Operator::ket_bra(2, usize::from(a > 0.0), usize::from(a > 0.0));
    let mut ledger = ThermoLedger::new();
    for n in 0..=record.steps {
        if mark_stride > 0 && n % mark_stride == 0 {
            ledger.mark(n as f64 * record.dt);
        }
        let rho = state(a[n]);
        let (d0, d1) = (record.d_path[n], record.d_path[n + 1]);
        let drive = LedgerStep { before: &rho, after: &rho, d_before: d0, d_after: d1, dt: record.dt, kind: StepKind::Measurement };
        ledger_update(&mut ledger, &drive, &protocol, &frame)?;
        if n < record.steps {
            let next = state(a[n + 1]);
            let bath = LedgerStep { before: &rho, after: &next, d_before: d1, d_after: d1, dt: record.dt, kind: StepKind::Bath };
            ledger_update(&mut ledger, &bath, &protocol, &frame)?;
        }
    }
    Ok(ledger)
}

/// Largest rate or frequency in a model, for step-size preconditions.
pub fn model_rate_scale(model: &QfpmeModel) -> f64 {
    let h_scale = match &model.protocol {
        FeedbackProtocol::Linear { h0, hf, .. } => h0.sup_norm() + hf.sup_norm(),
        FeedbackProtocol::Threshold { branches } => branches.iter().map(|b| b.hamiltonian.sup_norm()).fold(0.0, f64::max),
    };
    model.lambda.max(model.gamma).max(model.protocol.max_rate()).max(h_scale)
}

fn check_quantum_dt(model: &QfpmeModel, dt: f64) -> Result<()> {
    let scale = model_rate_scale(model);
    if scale * dt >= 0.05 {
        return Err(Error::invalid("dt", format!("dt·max rate = {} must be < 0.05", scale * dt)));
    }
    Ok(())
}

/// Eigen-decomposition of the measured observable.
#[derive(Clone, Debug)]
struct Observable {
    values: Vec<f64>,
    vectors: Operator,
}

impl Observable {
    fn new(a: &Operator) -> Self {
        let (values, vectors) = a.eigh();
        Self { values, vectors }
    }

    /// ⟨a_j|ρ|a_j⟩
    fn populations(&self, rho: &Operator) -> Vec<f64> {
        let r = rho.conjugate_by(&self.vectors);
        (0..self.values.len()).map(|j| r.get(j, j).re.max(0.0)).collect()
    }

    /// K(z) e^{shift} = V diag(e^{−λdt(z−a_j)² + shift}) V†; returns the shift.
    fn kraus(&self, z: f64, lambda_dt: f64) -> (Operator, f64) {
        let exps: Vec<f64> = self.values.iter().map(|a| lambda_dt * (z - a) * (z - a)).collect();
        let shift = exps.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = exps.iter().map(|e| (shift - e).exp()).collect();
        let k = Operator::diag(&w).conjugate_by(&self.vectors.adjoint());
        (k.symmetrized(), shift)
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn sample_mixture_d<R: Rng + ?Sized>(obs: &Observable, pops: &[f64], sigma: f64, rng: &mut R) -> f64 {
    let j = pick(pops, rng);
    let xi: f64 = rng.sample(StandardNormal);
    obs.values[j] + sigma.sqrt() * xi
}

/// ln Σ_a p_a N(D; a, σ)
fn mixture_log_density(values: &[f64], pops: &[f64], sigma: f64, d: f64) -> f64 {
    let terms: Vec<f64> = values
        .iter()
        .zip(pops)
        .filter(|(_, p)| **p > 0.0)
        .map(|(a, p)| p.ln() - (d - a) * (d - a) / (2.0 * sigma) - 0.5 * (2.0 * std::f64::consts::PI * sigma).ln())
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// e^X by scaled Taylor series; accurate for the small step generators used here.
pub(crate) fn exp_small(x: &Operator) -> Operator {
    let norm = x.sup_norm() * x.dim() as f64;
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as u32 } else { 0 };
    let y = x.scale_re(0.5f64.powi(squarings as i32));
    let mut term = Operator::identity(x.dim());
    let mut sum = term;
    for k in 1..=18 {
        term = (term * y).scale_re(1.0 / k as f64);
        sum += term;
        if term.sup_norm() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    sum
}

fn unitary_step(h: &Operator, dt: f64) -> Operator {
    exp_small(&h.scale(Complex64::new(0.0, -dt)))
}

fn sandwich(m: &Operator, rho: &Operator) -> Operator {
    (*m * *rho * m.adjoint()).symmetrized()
}

/// Diffusive (Belavkin) trajectory; D_0 is drawn from Σ_a⟨a|ρ₀|a⟩N(a, σ).
///
/// The Hamiltonian part of each step is applied as the exact unitary e^{−iH(D_n)dt};
/// dissipators and the innovation are Euler–Maruyama.
pub fn simulate_belavkin(
    model: &QfpmeModel,
    rho0: &DensityMatrix,
    run: &RunSpec,
    stream: RngStream,
    frame: Option<&EnergyFrame>,
) -> Result<(TrajectoryRecord, Option<ThermoLedger>)> {
    run.validate()?;
    check_quantum_dt(model, run.dt)?;
    if rho0.op().dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: rho0.op().dim() });
    }
    if let Some(f) = frame {
        f.check(&model.protocol)?;
    }
    let mut rng = stream.rng();
    let obs = Observable::new(&model.observable);
    let kernel = OuKernel::new(model.gamma, model.lambda, run.dt);
    let sqrt_lambda = model.lambda.sqrt();
    let a_op = model.observable;
    let mut rho = *rho0.op();
    let mut d = sample_mixture_d(&obs, &obs.populations(&rho), model.sigma(), &mut rng);
    let mut ledger = frame.map(|_| ThermoLedger::new());

    let advance = |rho: &Operator, d: f64, rng: &mut ChaCha8Rng| -> Result<(Operator, f64)> {
        let mean = a_op.expect(rho);
        let xi: f64 = rng.sample(StandardNormal);
        let (d_next, dw) = kernel.step(d, mean, xi);
        let shifted = a_op - Operator::identity(rho.dim()).scale_re(mean);
        let innovation = (shifted * *rho + *rho * shifted).scale_re(sqrt_lambda * dw);
        let h = model.protocol.eval(d).hamiltonian;
        let dissipative = model.local_generator(d, rho) + h.commutator(rho).scale(Complex64::new(0.0, 1.0));
        let rotated = sandwich(&unitary_step(&h, run.dt), rho);
        let next = (rotated + dissipative.scale_re(run.dt) + innovation).symmetrized();
        let tr = next.trace().re;
        if !(tr.is_finite() && tr > TRACE_COLLAPSE) {
            return Err(Error::TraceCollapse { trace: tr });
        }
        Ok((next.scale_re(1.0 / tr), d_next))
    };

    for _ in 0..run.burn_in {
        (rho, d) = advance(&rho, d, &mut rng)?;
    }
    let mut d_path = Vec::with_capacity(run.steps + 1);
    let mut snapshots = Vec::new();
    d_path.push(d);
    for n in 0..run.steps {
        if run.snapshot_stride > 0 && n % run.snapshot_stride == 0 {
            snapshots.push(rho);
        }
        if let Some(l) = ledger.as_mut() {
            if run.marks_at(n) {
                l.mark(n as f64 * run.dt);
            }
        }
        let (next, d_next) = advance(&rho, d, &mut rng)?;
        if let (Some(l), Some(f)) = (ledger.as_mut(), frame) {
            let step = LedgerStep { before: &rho, after: &next, d_before: d, d_after: d_next, dt: run.dt, kind: StepKind::Diffusive };
            ledger_update(l, &step, &model.protocol, f)?;
        }
        rho = next;
        d = d_next;
        d_path.push(d);
    }
    if let Some(l) = ledger.as_mut() {
        if run.marks_at(run.steps) {
            l.mark(run.steps as f64 * run.dt);
        }
    }
    if run.snapshot_stride > 0 && run.steps % run.snapshot_stride == 0 {
        snapshots.push(rho);
    }
    let record = TrajectoryRecord {
        model: ModelTag::Generic,
        dt: run.dt,
        steps: run.steps,
        d_path,
        states: StatePath::Quantum { stride: run.snapshot_stride, snapshots },
        jumps: None,
        z_path: Vec::new(),
        stream,
    };
    Ok((record, ledger))
}

/// Eigenbasis and weights of a two-point projective measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPoint {
    pub probabilities: Vec<f64>,
    /// Eigenvectors as columns.
    pub basis: Operator,
}

impl TwoPoint {
    pub fn of_state(rho: &Operator) -> Self {
        let (values, basis) = rho.eigh();
        let probabilities = values.iter().map(|p| p.max(0.0)).collect();
        Self { probabilities, basis }
    }

    fn vector(&self, v: usize) -> Vec<Complex64> {
        (0..self.basis.dim()).map(|r| self.basis.get(r, v)).collect()
    }

    /// |v⟩⟨v|, or its complex conjugate under time reversal.
    fn projector(&self, v: usize, conjugate: bool) -> Operator {
        let vec = self.vector(v);
        let d = vec.len();
        let mut p = Operator::zeros(d);
        for r in 0..d {
            for c in 0..d {
                let x = vec[r] * vec[c].conj();
                p.set(r, c, if conjugate { x.conj() } else { x });
            }
        }
        p.symmetrized()
    }

    fn weight(&self, v: usize, rho: &Operator, conjugate: bool) -> f64 {
        self.projector(v, conjugate).expect(rho).max(0.0)
    }
}

/// Kraus operators of one protocol branch at a fixed dt.
#[derive(Clone, Debug)]
struct BranchOps {
    no_jump: Operator,
    jumps: Vec<Operator>,
    /// M_k†M_k, for jump probabilities.
    weights: Vec<Operator>,
    back_no_jump: Operator,
    back_jumps: Vec<Operator>,
    sigma: Vec<f64>,
}

impl BranchOps {
    fn new(channels: &[crate::operators::LindbladChannel], dim: usize, dt: f64) -> Result<Self> {
        let mut total = Operator::zeros(dim);
        let mut jumps = Vec::new();
        let mut weights = Vec::new();
        for ch in channels {
            let m = ch.jump.scale_re(dt.sqrt());
            weights.push((m.adjoint() * m).symmetrized());
            total += m.adjoint() * m;
            jumps.push(m);
        }
        let c = Operator::identity(dim) - total.symmetrized();
        let (vals, vecs) = c.symmetrized().eigh();
        if vals[0] <= 0.0 {
            return Err(Error::invalid("dt", "dt·Σ L†L must stay below 1"));
        }
        let roots: Vec<f64> = vals.iter().map(|v| v.sqrt()).collect();
        let no_jump = Operator::diag(&roots).conjugate_by(&vecs.adjoint()).symmetrized();
        let mut back_jumps = Vec::new();
        for (k, ch) in channels.iter().enumerate() {
            let p = ch
                .partner_index
                .ok_or_else(|| Error::ModelMismatch(format!("channel {k} has no reverse partner")))?;
            let partner = channels
                .get(p)
                .ok_or_else(|| Error::ModelMismatch(format!("partner {p} of channel {k} missing")))?;
            back_jumps.push(partner.jump.scale_re(dt.sqrt()).conj());
        }
        Ok(Self {
            back_no_jump: no_jump.conj(),
            no_jump,
            jumps,
            weights,
            back_jumps,
            sigma: channels.iter().map(|c| c.sigma_k).collect(),
        })
    }
}

/// Everything the Kraus sampler and the log-probability evaluator share.
#[derive(Clone, Debug)]
pub struct KrausSetup {
    pub model: QfpmeModel,
    pub tag: ModelTag,
    pub dt: f64,
    pub initial: TwoPoint,
    pub final_: TwoPoint,
    rho_ini: Operator,
    obs: Observable,
    /// ⟨a|ρ_ini|a⟩, weights of the initial detector mixture.
    detector_weights: Vec<f64>,
    branches: Vec<BranchOps>,
}

impl KrausSetup {
    /// `rho_final` is the outcome-averaged state at the final time.
    pub fn new(model: &QfpmeModel, tag: ModelTag, rho_ini: &DensityMatrix, rho_final: &Operator, dt: f64) -> Result<Self> {
        check_quantum_dt(model, dt)?;
        let dim = model.dim();
        if rho_ini.op().dim() != dim || rho_final.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: rho_final.dim() });
        }
        let channel_sets: Vec<&[crate::operators::LindbladChannel]> = match &model.protocol {
            FeedbackProtocol::Linear { channels, .. } => vec![channels.as_slice()],
            FeedbackProtocol::Threshold { branches } => branches.iter().map(|b| b.channels.as_slice()).collect(),
        };
        let branches = channel_sets.into_iter().map(|c| BranchOps::new(c, dim, dt)).collect::<Result<Vec<_>>>()?;
        let obs = Observable::new(&model.observable);
        Ok(Self {
            model: model.clone(),
            tag,
            dt,
            initial: TwoPoint::of_state(rho_ini.op()),
            final_: TwoPoint::of_state(rho_final),
            rho_ini: *rho_ini.op(),
            detector_weights: obs.populations(rho_ini.op()),
            obs,
            branches,
        })
    }

    /// Final two-point basis from the grid-evolved outcome average of ρ_ini ⊗ P_ini[D].
    pub fn with_grid_final(model: &QfpmeModel, tag: ModelTag, rho_ini: &DensityMatrix, dt: f64, steps: usize, cells: usize) -> Result<Self> {
        let rho_final = averaged_final_state(model, rho_ini, steps as f64 * dt, cells)?;
        Self::new(model, tag, rho_ini, &rho_final, dt)
    }

    /// ln P_ini[D]
    pub fn initial_log_density(&self, d: f64) -> f64 {
        mixture_log_density(&self.obs.values, &self.detector_weights, self.model.sigma(), d)
    }

    pub fn rho_ini(&self) -> &Operator {
        &self.rho_ini
    }

    fn branch(&self, d: f64) -> &BranchOps {
        &self.branches[self.model.protocol.branch_index(d)]
    }

    fn hamiltonian(&self, d: f64) -> Operator {
        self.model.protocol.eval(d).hamiltonian
    }

    fn z_from(&self, d_from: f64, d_to: f64) -> f64 {
        let g = self.model.gamma * self.dt;
        (d_to - (-g).exp() * d_from) / g
    }

    /// σ_k of the channel tagged at forward step m (1-based), evaluated at D_m.
    pub fn jump_entropy(&self, d_m: f64, tag: u8) -> f64 {
        if tag == 0 {
            0.0
        } else {
            self.branch(d_m).sigma[usize::from(tag) - 1]
        }
    }
}

/// Outcome-averaged state after `duration`, from the grid solver started at ρ_ini ⊗ P_ini[D].
pub fn averaged_final_state(model: &QfpmeModel, rho_ini: &DensityMatrix, duration: f64, cells: usize) -> Result<Operator> {
    let grid = Grid::for_model(model, cells)?;
    let solver = GridSolver::new(model, grid)?;
    let obs = Observable::new(&model.observable);
    let weights = obs.populations(rho_ini.op());
    let mut density = vec![0.0; grid.cells()];
    for (a, w) in obs.values.iter().zip(&weights) {
        for (acc, p) in density.iter_mut().zip(grid.gaussian_density(*a, model.sigma())) {
            *acc += w * p;
        }
    }
    let state = GridState::product(grid, rho_ini.op(), &density)?;
    Ok(solver.relax(&state, duration, None)?.averaged())
}

/// Kraus/jump trajectory with two-point measurements.
pub fn simulate_kraus_jump(
    setup: &KrausSetup,
    run: &RunSpec,
    stream: RngStream,
    frame: Option<&EnergyFrame>,
) -> Result<(TrajectoryRecord, Option<ThermoLedger>)> {
    run.validate()?;
    if run.dt != setup.dt {
        return Err(Error::invalid("dt", format!("run dt {} differs from setup dt {}", run.dt, setup.dt)));
    }
    if run.burn_in != 0 {
        return Err(Error::invalid("burn_in", "the two-point scheme starts at t = 0"));
    }
    if let Some(f) = frame {
        f.check(&setup.model.protocol)?;
    }
    let model = &setup.model;
    let dt = run.dt;
    let lambda_dt = model.lambda * dt;
    let z_sd = 1.0 / (4.0 * lambda_dt).sqrt();
    let decay = (-model.gamma * dt).exp();
    let protocol = &model.protocol;
    let mut rng = stream.rng();
    let mut ledger = frame.map(|_| ThermoLedger::new());

    let v_i = pick(&setup.initial.probabilities, &mut rng);
    let p_vi = setup.initial.probabilities[v_i];
    let mut rho = setup.initial.projector(v_i, false);
    let mut d = sample_mixture_d(&setup.obs, &setup.detector_weights, model.sigma(), &mut rng);
    let mut log_p = p_vi.ln() + setup.initial_log_density(d);

    let mut d_path = Vec::with_capacity(run.steps + 2);
    let mut z_path = Vec::with_capacity(run.steps + 1);
    let mut tags = Vec::with_capacity(run.steps);
    let mut snapshots = Vec::new();
    d_path.push(d);
    for n in 0..=run.steps {
        if run.snapshot_stride > 0 && n % run.snapshot_stride == 0 {
            snapshots.push(rho);
        }
        if let Some(l) = ledger.as_mut() {
            if run.marks_at(n) {
                l.mark(n as f64 * dt);
            }
        }
        // Gaussian measurement and filter update.
        let j = pick(&setup.obs.populations(&rho), &mut rng);
        let xi: f64 = rng.sample(StandardNormal);
        let z = setup.obs.values[j] + z_sd * xi;
        let (k, shift) = setup.obs.kraus(z, lambda_dt);
        let measured = sandwich(&k, &rho);
        let norm = measured.trace().re;
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::TraceCollapse { trace: norm });
        }
        log_p += norm.ln() - 2.0 * shift;
        let measured = measured.scale_re(1.0 / norm);
        let d_next = decay * d + model.gamma * dt * z;
        if let (Some(l), Some(f)) = (ledger.as_mut(), frame) {
            let step = LedgerStep { before: &rho, after: &measured, d_before: d, d_after: d_next, dt, kind: StepKind::Measurement };
            ledger_update(l, &step, protocol, f)?;
        }
        rho = measured;
        d = d_next;
        d_path.push(d);
        z_path.push(z);
        if n == run.steps {
            break;
        }
        // Feedback step at D_{n+1}: bath Kraus branch, then the unitary.
        let ops = setup.branch(d);
        let probs: Vec<f64> = ops.weights.iter().map(|w| w.expect(&rho).max(0.0)).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tag = 0u8;
        for (kk, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tag = (kk + 1) as u8;
                break;
            }
        }
        let m = if tag == 0 { ops.no_jump } else { ops.jumps[usize::from(tag) - 1] };
        let after_bath = sandwich(&m, &rho);
        let p = after_bath.trace().re;
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::TraceCollapse { trace: p });
        }
        log_p += p.ln();
        let after_bath = after_bath.scale_re(1.0 / p);
        let evolved = sandwich(&unitary_step(&setup.hamiltonian(d), dt), &after_bath);
        if let (Some(l), Some(f)) = (ledger.as_mut(), frame) {
            let bath = LedgerStep { before: &rho, after: &after_bath, d_before: d, d_after: d, dt, kind: StepKind::Bath };
            ledger_update(l, &bath, protocol, f)?;
            let unit = LedgerStep { before: &after_bath, after: &evolved, d_before: d, d_after: d, dt, kind: StepKind::Unitary };
            ledger_update(l, &unit, protocol, f)?;
        }
        rho = evolved;
        tags.push(tag);
    }
    if let Some(l) = ledger.as_mut() {
        if run.marks_at(run.steps + 1) {
            l.mark((run.steps + 1) as f64 * dt);
        }
    }
    let final_weights: Vec<f64> = (0..model.dim()).map(|v| setup.final_.weight(v, &rho, false)).collect();
    let v_f = pick(&final_weights, &mut rng);
    log_p += final_weights[v_f].ln();
    let record = TrajectoryRecord {
        model: setup.tag,
        dt,
        steps: run.steps,
        d_path,
        states: StatePath::Quantum { stride: run.snapshot_stride, snapshots },
        jumps: Some(JumpRecord { v_i, v_f, p_vi, p_vf: setup.final_.probabilities[v_f], tags, log_forward: log_p }),
        z_path,
        stream,
    };
    Ok((record, ledger))
}

/// Forward and time-reversed log-probabilities of one Kraus record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogProbRatio {
    pub log_forward: f64,
    pub log_backward: f64,
    /// Forward probability underflowed or either side is not finite.
    pub excluded: bool,
}

impl LogProbRatio {
    /// log P[Γ, D] − log P_B[Γ̄, D̄]
    pub fn log_ratio(&self) -> f64 {
        self.log_forward - self.log_backward
    }
}

/// Re-propagates the record forward and the reversed record under the backward protocol.
///
/// The backward experiment starts from Σ p_{v_f}|ṽ_f⟩⟨ṽ_f| with D̄_n = D_{N+1−n},
/// conjugated operators and partner jumps, and ends projected onto ṽ_i. The Gaussian
/// prefactors and Jacobians common to both sides are omitted.
pub fn trajectory_log_prob_ratio(record: &TrajectoryRecord, setup: &KrausSetup) -> Result<LogProbRatio> {
    let jumps = record
        .jumps
        .as_ref()
        .ok_or_else(|| Error::ModelMismatch("log-probability ratio needs a Kraus record".into()))?;
    let n_steps = record.steps;
    if record.d_path.len() != n_steps + 2 || jumps.tags.len() != n_steps {
        return Err(Error::invalid("record", "path lengths do not match the step count"));
    }
    if record.dt != setup.dt {
        return Err(Error::invalid("dt", "record dt differs from setup dt"));
    }
    let lambda_dt = setup.model.lambda * setup.dt;
    let d = &record.d_path;

    let measure = |rho: &Operator, z: f64, conjugate: bool| -> (Operator, f64) {
        let (k, shift) = setup.obs.kraus(z, lambda_dt);
        let k = if conjugate { k.conj() } else { k };
        let m = sandwich(&k, rho);
        let norm = m.trace().re;
        (m.scale_re(1.0 / norm), norm.ln() - 2.0 * shift)
    };
    let kraus = |rho: &Operator, m: &Operator| -> (Operator, f64) {
        let r = sandwich(m, rho);
        let p = r.trace().re;
        (r.scale_re(1.0 / p), p.ln())
    };

    // Forward.
    let mut rho = setup.initial.projector(jumps.v_i, false);
    let mut log_f = setup.initial.probabilities[jumps.v_i].ln() + setup.initial_log_density(d[0]);
    for n in 0..=n_steps {
        let (r, lp) = measure(&rho, setup.z_from(d[n], d[n + 1]), false);
        rho = r;
        log_f += lp;
        if n < n_steps {
            let ops = setup.branch(d[n + 1]);
            let tag = jumps.tags[n];
            let m = if tag == 0 { ops.no_jump } else { ops.jumps[usize::from(tag) - 1] };
            let (r, lp) = kraus(&rho, &m);
            log_f += lp;
            rho = sandwich(&unitary_step(&setup.hamiltonian(d[n + 1]), setup.dt), &r);
        }
    }
    log_f += setup.final_.weight(jumps.v_f, &rho, false).ln();

    // Backward.
    let mut rho = setup.final_.projector(jumps.v_f, true);
    let mut log_b = setup.final_.probabilities[jumps.v_f].ln() + setup.initial_log_density(d[n_steps + 1]);
    for n in 0..=n_steps {
        let (r, lp) = measure(&rho, setup.z_from(d[n_steps + 1 - n], d[n_steps - n]), true);
        rho = r;
        log_b += lp;
        if n < n_steps {
            let m_fwd = n_steps - n;
            let dm = d[m_fwd];
            let u_t = unitary_step(&setup.hamiltonian(dm), setup.dt).transpose();
            rho = sandwich(&u_t, &rho);
            let ops = setup.branch(dm);
            let tag = jumps.tags[m_fwd - 1];
            let m = if tag == 0 { ops.back_no_jump } else { ops.back_jumps[usize::from(tag) - 1] };
            let (r, lp) = kraus(&rho, &m);
            log_b += lp;
            rho = r;
        }
    }
    log_b += setup.initial.weight(jumps.v_i, &rho, true).ln();

    let excluded = !(log_f.is_finite() && log_b.is_finite()) || log_f < LOG_PROB_FLOOR;
    Ok(LogProbRatio { log_forward: log_f, log_backward: log_b, excluded })
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    (0..n).map(|_| get_f64(r)).collect()
}

/// Binary dump: header (magic, version, model tag, dt, N, seed, stream), then packed arrays.
pub fn write_dump<W: Write>(record: &TrajectoryRecord, w: &mut W) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&[record.model as u8])?;
    w.write_all(&record.dt.to_le_bytes())?;
    w.write_all(&(record.steps as u64).to_le_bytes())?;
    w.write_all(&record.stream.master_seed.to_le_bytes())?;
    w.write_all(&record.stream.stream_index.to_le_bytes())?;
    put_f64s(w, &record.d_path)?;
    match &record.states {
        StatePath::Classical(a) => {
            w.write_all(&[0])?;
            put_f64s(w, a)?;
        }
        StatePath::Quantum { stride, snapshots } => {
            w.write_all(&[1])?;
            w.write_all(&(*stride as u64).to_le_bytes())?;
            let dim = snapshots.first().map_or(0, |s| s.dim());
            w.write_all(&(dim as u64).to_le_bytes())?;
            let mut flat = Vec::with_capacity(snapshots.len() * dim * dim * 2);
            for s in snapshots {
                for r in 0..dim {
                    for c in 0..dim {
                        flat.push(s.get(r, c).re);
                        flat.push(s.get(r, c).im);
                    }
                }
            }
            put_f64s(w, &flat)?;
        }
    }
    match &record.jumps {
        None => w.write_all(&[0])?,
        Some(j) => {
            w.write_all(&[1])?;
            w.write_all(&(j.v_i as u64).to_le_bytes())?;
            w.write_all(&(j.v_f as u64).to_le_bytes())?;
            w.write_all(&j.p_vi.to_le_bytes())?;
            w.write_all(&j.p_vf.to_le_bytes())?;
            w.write_all(&j.log_forward.to_le_bytes())?;
            w.write_all(&(j.tags.len() as u64).to_le_bytes())?;
            w.write_all(&j.tags)?;
        }
    }
    put_f64s(w, &record.z_path)?;
    Ok(())
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<TrajectoryRecord> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Io("not a trajectory dump".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != DUMP_VERSION {
        return Err(Error::Io(format!("dump version {version}, expected {DUMP_VERSION}")));
    }
    let model = ModelTag::from_u8(get_u8(r)?)?;
    let dt = get_f64(r)?;
    let steps = get_u64(r)? as usize;
    let stream = RngStream::new(get_u64(r)?, get_u64(r)?);
    let d_path = get_f64s(r)?;
    let states = match get_u8(r)? {
        0 => StatePath::Classical(get_f64s(r)?),
        1 => {
            let stride = get_u64(r)? as usize;
            let dim = get_u64(r)? as usize;
            let flat = get_f64s(r)?;
            let per = dim * dim * 2;
            let mut snapshots = Vec::new();
            if per > 0 {
                for chunk in flat.chunks(per) {
                    let entries: Vec<Complex64> = chunk.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
                    snapshots.push(Operator::from_rows(dim, &entries)?);
                }
            }
            StatePath::Quantum { stride, snapshots }
        }
        k => return Err(Error::Io(format!("unknown state path kind {k}"))),
    };
    let jumps = match get_u8(r)? {
        0 => None,
        _ => {
            let v_i = get_u64(r)? as usize;
            let v_f = get_u64(r)? as usize;
            let p_vi = get_f64(r)?;
            let p_vf = get_f64(r)?;
            let log_forward = get_f64(r)?;
            let n = get_u64(r)? as usize;
            let mut tags = vec![0u8; n];
            r.read_exact(&mut tags)?;
            Some(JumpRecord { v_i, v_f, p_vi, p_vf, tags, log_forward })
        }
    };
    let z_path = get_f64s(r)?;
    Ok(TrajectoryRecord { model, dt, steps, d_path, states, jumps, z_path, stream })
}
