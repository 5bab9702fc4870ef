//! Finite-volume solver of the full QFPME on a uniform D-grid.
//!
//! Cells carry ρ(D_k) as d² real coordinates in the eigenbasis of A, where the drift
//! ½{A − D, ·} acts elementwise. Transport uses the Scharfetter-Gummel exponentially
//! fitted flux per coordinate; the local part ℒ(D_k) + λ𝒟[A] is a d²×d² block per cell.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use libm::erf;

use crate::error::{Error, Result};
use crate::linalg::BlockTridiagonal;
use crate::operators::{Operator, QfpmeModel};
use crate::thermo::EnergyFrame;

pub const DEFAULT_CELLS: usize = 2001;
pub const DEFAULT_STEADY_TOL: f64 = 1e-8;

/// Uniform cells [d_min + k·h, d_min + (k+1)·h), k = 0..cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    d_min: f64,
    h: f64,
    cells: usize,
}

impl Grid {
    pub fn new(d_min: f64, d_max: f64, cells: usize) -> Result<Self> {
        if cells < 3 {
            return Err(Error::invalid("cells", format!("need at least 3, got {cells}")));
        }
        if !(d_min.is_finite() && d_max.is_finite() && d_max > d_min) {
            return Err(Error::invalid("grid", format!("bad range [{d_min}, {d_max}]")));
        }
        Ok(Self { d_min, h: (d_max - d_min) / cells as f64, cells })
    }

    /// Spacing W/⌊M/2⌋ starting at −W, so D = 0 is face ⌊M/2⌋. Odd M extends one
    /// cell past +W.
    pub fn symmetric(half_width: f64, cells: usize) -> Result<Self> {
        if cells < 3 {
            return Err(Error::invalid("cells", format!("need at least 3, got {cells}")));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::invalid("half_width", format!("must be > 0, got {half_width}")));
        }
        Ok(Self { d_min: -half_width, h: half_width / (cells / 2) as f64, cells })
    }

    /// ±(max|eig A| + 6√σ + 1), with every threshold checked to sit on a face.
    pub fn for_model(model: &QfpmeModel, cells: usize) -> Result<Self> {
        let (eig, _) = model.observable.eigh();
        let amax = eig.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let grid = Self::symmetric(amax + 6.0 * model.sigma().sqrt() + 1.0, cells)?;
        for b in model.protocol.boundaries() {
            if grid.face_index_of(b).is_none() {
                return Err(Error::invalid("grid", format!("threshold {b} does not fall on a cell face")));
            }
        }
        Ok(grid)
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.face(self.cells)
    }

    pub fn face(&self, j: usize) -> f64 {
        let x = self.d_min + j as f64 * self.h;
        if x.abs() < 1e-12 * self.h {
            0.0
        } else {
            x
        }
    }

    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.h
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|k| self.center(k)).collect()
    }

    pub fn face_index_of(&self, d: f64) -> Option<usize> {
        let j = ((d - self.d_min) / self.h).round();
        if j < 0.0 || j > self.cells as f64 {
            return None;
        }
        let j = j as usize;
        ((self.face(j) - d).abs() <= 1e-9 * self.h).then_some(j)
    }

    /// Mass of N(mean, var) in each cell divided by h.
    pub fn gaussian_density(&self, mean: f64, var: f64) -> Vec<f64> {
        let s = (2.0 * var).sqrt();
        (0..self.cells)
            .map(|k| 0.5 * (erf((self.face(k + 1) - mean) / s) - erf((self.face(k) - mean) / s)) / self.h)
            .collect()
    }
}

/// Operator-valued density ρ(D_k) on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pub grid: Grid,
    pub rho: Vec<Operator>,
    pub time: f64,
}

impl GridState {
    /// ρ(D) = ρ₀·p(D) with p given as cell densities.
    pub fn product(grid: Grid, rho0: &Operator, density: &[f64]) -> Result<Self> {
        if density.len() != grid.cells() {
            return Err(Error::DimensionMismatch { expected: grid.cells(), got: density.len() });
        }
        Ok(Self { grid, rho: density.iter().map(|p| rho0.scale_re(*p)).collect(), time: 0.0 })
    }

    /// ρ(D) = Σ_a Π_a ρ₀ Π_a · N(D; a, σ): detector equilibrated to each A-eigenvalue.
    pub fn measurement_mixture(grid: Grid, model: &QfpmeModel, rho0: &Operator) -> Result<Self> {
        let (eig, v) = model.observable.eigh();
        let d = model.dim();
        let mut rho = vec![Operator::zeros(d); grid.cells()];
        let mut used = vec![false; d];
        for i in 0..d {
            if used[i] {
                continue;
            }
            // Projector onto the (possibly degenerate) eigenspace of eig[i].
            let mut proj = Operator::zeros(d);
            for j in i..d {
                if (eig[j] - eig[i]).abs() < 1e-10 {
                    used[j] = true;
                    for r in 0..d {
                        for c in 0..d {
                            let val = proj.get(r, c) + v.get(r, j) * v.get(c, j).conj();
                            proj.set(r, c, val);
                        }
                    }
                }
            }
            let block = (proj * *rho0 * proj).symmetrized();
            let dens = grid.gaussian_density(eig[i], model.sigma());
            for (cell, p) in rho.iter_mut().zip(dens) {
                *cell += block.scale_re(p);
            }
        }
        Ok(Self { grid, rho: rho.into_iter().map(|r| r.symmetrized()).collect(), time: 0.0 })
    }

    /// Σ_k Tr ρ_k · h
    pub fn total_trace(&self) -> f64 {
        self.rho.iter().map(|r| r.trace().re).sum::<f64>() * self.grid.spacing()
    }

    /// P(D_k) = Tr ρ_k
    pub fn probability(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.trace().re).collect()
    }

    /// Tr{O ρ_k} per cell, e.g. a_x(D_k) for O = σ_x.
    pub fn field(&self, o: &Operator) -> Vec<f64> {
        self.rho.iter().map(|r| o.expect(r)).collect()
    }

    /// Outcome-averaged state ∫ρ(D)dD.
    pub fn averaged(&self) -> Operator {
        let mut acc = Operator::zeros(self.rho[0].dim());
        for r in &self.rho {
            acc += *r;
        }
        acc.scale_re(self.grid.spacing()).symmetrized()
    }

    /// ∫ f(D) Tr{O ρ(D)} dD by the midpoint rule.
    pub fn integrate<F: Fn(f64) -> f64>(&self, o: &Operator, f: F) -> f64 {
        let h = self.grid.spacing();
        self.rho.iter().enumerate().map(|(k, r)| f(self.grid.center(k)) * o.expect(r)).sum::<f64>() * h
    }

    pub fn max_hermitian_deviation(&self) -> f64 {
        self.rho.iter().map(|r| r.hermitian_deviation()).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.rho.iter().map(|r| r.eigh().0[0]).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Diag,
    Re,
    Im,
}

/// Real coordinates of a hermitian d×d matrix: diagonal, then Re/Im of each i < j.
#[derive(Clone, Debug)]
struct Coordinates {
    dim: usize,
    comps: Vec<(usize, usize, Part)>,
}

impl Coordinates {
    fn new(dim: usize) -> Self {
        let mut comps: Vec<_> = (0..dim).map(|i| (i, i, Part::Diag)).collect();
        for i in 0..dim {
            for j in i + 1..dim {
                comps.push((i, j, Part::Re));
                comps.push((i, j, Part::Im));
            }
        }
        Self { dim, comps }
    }

    fn len(&self) -> usize {
        self.comps.len()
    }

    fn basis(&self, c: usize) -> Operator {
        let (i, j, part) = self.comps[c];
        let mut m = Operator::zeros(self.dim);
        match part {
            Part::Diag => m.set(i, i, C::new(1.0, 0.0)),
            Part::Re => {
                m.set(i, j, C::new(1.0, 0.0));
                m.set(j, i, C::new(1.0, 0.0));
            }
            Part::Im => {
                m.set(i, j, C::new(0.0, 1.0));
                m.set(j, i, C::new(0.0, -1.0));
            }
        }
        m
    }

    fn read(&self, m: &Operator, out: &mut [f64]) {
        for (c, &(i, j, part)) in self.comps.iter().enumerate() {
            let v = m.get(i, j);
            out[c] = match part {
                Part::Diag => v.re,
                Part::Re => v.re,
                Part::Im => v.im,
            };
        }
    }

    fn write(&self, r: &[f64]) -> Operator {
        let mut m = Operator::zeros(self.dim);
        for (c, &(i, j, part)) in self.comps.iter().enumerate() {
            match part {
                Part::Diag => m.set(i, i, C::new(r[c], 0.0)),
                Part::Re => {
                    let v = m.get(i, j);
                    m.set(i, j, C::new(r[c], v.im));
                    m.set(j, i, C::new(r[c], -v.im));
                }
                Part::Im => {
                    let v = m.get(i, j);
                    m.set(i, j, C::new(v.re, r[c]));
                    m.set(j, i, C::new(v.re, -r[c]));
                }
            }
        }
        m.symmetrized()
    }

    fn is_diag(&self, c: usize) -> bool {
        self.comps[c].2 == Part::Diag
    }
}

/// B(x) = x/(eˣ − 1)
#[inline]
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Discretized generator of the QFPME on a fixed grid.
#[derive(Clone, Debug)]
pub struct GridSolver {
    model: QfpmeModel,
    grid: Grid,
    coords: Coordinates,
    /// Columns are eigenvectors of A (computational → eigenbasis via V†ρV).
    v: Operator,
    /// Per cell, n×n row-major local block.
    local: Vec<f64>,
    /// Per interior face j (between cells j, j+1), per coordinate: F = α r_j − β r_{j+1}.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    admissible_dt: f64,
}

/// Result of a steady-state solve with its verification residual.
#[derive(Clone, Debug)]
pub struct SteadyGrid {
    pub state: GridState,
    /// sup_k ‖Δρ_k‖/dt from one explicit step.
    pub residual: f64,
    pub iterations: usize,
}

/// Grid rates of power, heat and measurement energy, plus dU/dt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridEnergetics {
    pub power: f64,
    pub heat: f64,
    pub meas_energy: f64,
    pub du_dt: f64,
}

impl GridSolver {
    pub fn new(model: &QfpmeModel, grid: Grid) -> Result<Self> {
        let dim = model.dim();
        let coords = Coordinates::new(dim);
        let n = coords.len();
        let (eig, v) = model.observable.eigh();
        let m = grid.cells();
        let h = grid.spacing();
        let dd = model.gamma * model.sigma();

        let mut local = vec![0.0; m * n * n];
        let mut col = vec![0.0; n];
        let mut row_sum_max: f64 = 0.0;
        for k in 0..m {
            let d = grid.center(k);
            let block = &mut local[k * n * n..(k + 1) * n * n];
            for c in 0..n {
                let e = coords.basis(c);
                let rho = v * e * v.adjoint();
                let out = model.local_generator(d, &rho).conjugate_by(&v);
                coords.read(&out, &mut col);
                for r in 0..n {
                    block[r * n + c] = col[r];
                }
            }
            for r in 0..n {
                row_sum_max = row_sum_max.max(block[r * n..(r + 1) * n].iter().map(|x| x.abs()).sum());
            }
        }

        let mut alpha = vec![0.0; (m - 1) * n];
        let mut beta = vec![0.0; (m - 1) * n];
        for j in 0..m - 1 {
            let d_face = grid.face(j + 1);
            for (c, &(i, l, _)) in coords.comps.iter().enumerate() {
                let vel = model.gamma * (0.5 * (eig[i] + eig[l]) - d_face);
                let pe = vel * h / dd;
                alpha[j * n + c] = dd / h * bernoulli(-pe);
                beta[j * n + c] = dd / h * bernoulli(pe);
            }
        }

        let amax = eig.iter().fold(0.0f64, |a, e| a.max(e.abs()));
        let dmax = grid.d_min().abs().max(grid.d_max().abs());
        let speed = model.gamma * (amax + dmax);
        let spec_dt = 0.4 * (h / speed).min(h * h / dd).min(0.1 / row_sum_max.max(f64::MIN_POSITIVE));
        // Gershgorin bound of the transport diagonal keeps forward Euler contractive.
        let mut transport_max: f64 = 0.0;
        for k in 0..m {
            for c in 0..n {
                let out = if k + 1 < m { alpha[k * n + c] } else { 0.0 } + if k > 0 { beta[(k - 1) * n + c] } else { 0.0 };
                transport_max = transport_max.max(out / h);
            }
        }
        let admissible_dt = spec_dt.min(0.9 / (transport_max + row_sum_max));

        Ok(Self { model: model.clone(), grid, coords, v, local, alpha, beta, admissible_dt })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn model(&self) -> &QfpmeModel {
        &self.model
    }

    pub fn admissible_dt(&self) -> f64 {
        self.admissible_dt
    }

    fn n(&self) -> usize {
        self.coords.len()
    }

    fn pack(&self, state: &GridState) -> Result<Vec<f64>> {
        if state.grid != self.grid {
            return Err(Error::invalid("state", "grid differs from the solver grid"));
        }
        let n = self.n();
        let mut r = vec![0.0; self.grid.cells() * n];
        for (k, rho) in state.rho.iter().enumerate() {
            if rho.dim() != self.model.dim() {
                return Err(Error::DimensionMismatch { expected: self.model.dim(), got: rho.dim() });
            }
            self.coords.read(&rho.conjugate_by(&self.v), &mut r[k * n..(k + 1) * n]);
        }
        Ok(r)
    }

    fn unpack(&self, r: &[f64], time: f64) -> GridState {
        let n = self.n();
        let vd = self.v.adjoint();
        let rho = (0..self.grid.cells())
            .map(|k| self.coords.write(&r[k * n..(k + 1) * n]).conjugate_by(&vd).symmetrized())
            .collect();
        GridState { grid: self.grid, rho, time }
    }

    /// Interior face fluxes F_j, j = 0..cells−1 (face j+1 of the grid).
    fn fluxes(&self, r: &[f64]) -> Vec<f64> {
        let n = self.n();
        let faces = self.grid.cells() - 1;
        let mut f = vec![0.0; faces * n];
        for j in 0..faces {
            for c in 0..n {
                let idx = j * n + c;
                f[idx] = self.alpha[idx] * r[j * n + c] - self.beta[idx] * r[(j + 1) * n + c];
            }
        }
        f
    }

    /// dr/dt for the packed state.
    fn apply(&self, r: &[f64], out: &mut [f64]) {
        let n = self.n();
        let m = self.grid.cells();
        let h = self.grid.spacing();
        let f = self.fluxes(r);
        for k in 0..m {
            let block = &self.local[k * n * n..(k + 1) * n * n];
            let rk = &r[k * n..(k + 1) * n];
            for row in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    acc += block[row * n + c] * rk[c];
                }
                let right = if k + 1 < m { f[k * n + row] } else { 0.0 };
                let left = if k > 0 { f[(k - 1) * n + row] } else { 0.0 };
                out[k * n + row] = acc - (right - left) / h;
            }
        }
    }

    /// One forward-Euler step of all four QFPME terms.
    pub fn step(&self, state: &GridState, dt: f64) -> Result<GridState> {
        if !(dt > 0.0) || dt > self.admissible_dt * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge { dt, admissible: self.admissible_dt });
        }
        let mut r = self.pack(state)?;
        let mut dr = vec![0.0; r.len()];
        self.apply(&r, &mut dr);
        for (x, d) in r.iter_mut().zip(&dr) {
            *x += dt * d;
        }
        Ok(self.unpack(&r, state.time + dt))
    }

    /// Advances by `duration` with steps no larger than `dt` (default: admissible).
    pub fn relax(&self, state: &GridState, duration: f64, dt: Option<f64>) -> Result<GridState> {
        let dt_max = dt.unwrap_or(self.admissible_dt);
        if dt_max > self.admissible_dt * (1.0 + 1e-12) || !(dt_max > 0.0) {
            return Err(Error::StepTooLarge { dt: dt_max, admissible: self.admissible_dt });
        }
        let steps = (duration / dt_max).ceil().max(0.0) as usize;
        let mut r = self.pack(state)?;
        if steps == 0 {
            return Ok(state.clone());
        }
        let dt = duration / steps as f64;
        let mut dr = vec![0.0; r.len()];
        for _ in 0..steps {
            self.apply(&r, &mut dr);
            for (x, d) in r.iter_mut().zip(&dr) {
                *x += dt * d;
            }
        }
        Ok(self.unpack(&r, state.time + duration))
    }

    /// Sup over cells of ‖dρ_k/dt‖ for a given state.
    pub fn residual(&self, state: &GridState) -> Result<f64> {
        let r = self.pack(state)?;
        let mut dr = vec![0.0; r.len()];
        self.apply(&r, &mut dr);
        let n = self.n();
        let per_cell = |k: usize| {
            let op = self.coords.write(&dr[k * n..(k + 1) * n]);
            op.sup_norm()
        };
        Ok((0..self.grid.cells()).map(per_cell).fold(0.0, f64::max))
    }

    fn block_system(&self, shift: f64) -> BlockTridiagonal {
        let n = self.n();
        let m = self.grid.cells();
        let h = self.grid.spacing();
        let mut sys = BlockTridiagonal::zeros(m, n);
        for k in 0..m {
            let mut d = DMatrix::from_row_slice(n, n, &self.local[k * n * n..(k + 1) * n * n]);
            for c in 0..n {
                let mut out = 0.0;
                if k + 1 < m {
                    out += self.alpha[k * n + c];
                    sys.upper[k][(c, c)] = self.beta[k * n + c] / h;
                }
                if k > 0 {
                    out += self.beta[(k - 1) * n + c];
                    sys.lower[k][(c, c)] = self.alpha[(k - 1) * n + c] / h;
                }
                d[(c, c)] -= out / h + shift;
            }
            sys.diag[k] = d;
        }
        sys
    }

    fn normalize(&self, r: &mut [f64]) {
        let n = self.n();
        let h = self.grid.spacing();
        let mut tr = 0.0;
        for k in 0..self.grid.cells() {
            for c in 0..n {
                if self.coords.is_diag(c) {
                    tr += r[k * n + c];
                }
            }
        }
        tr *= h;
        for x in r.iter_mut() {
            *x /= tr;
        }
    }

    /// Null vector of the discrete generator by shifted inverse iteration, verified by
    /// the explicit-step residual ‖Δρ‖/dt < tol.
    pub fn steady_state(&self, tol: f64) -> Result<SteadyGrid> {
        if !(tol > 0.0) {
            return Err(Error::invalid("tol", format!("must be > 0, got {tol}")));
        }
        let scale = self.model.gamma + self.model.lambda + self.model.protocol.max_rate();
        let shift = 1e-10 * scale;
        let sys = self.block_system(shift);
        let d = self.model.dim();
        let start = GridState::measurement_mixture(self.grid, &self.model, &Operator::identity(d).scale_re(1.0 / d as f64))?;
        let mut r = self.pack(&start)?;
        let n = self.n();
        let m = self.grid.cells();
        let mut iterations = 0;
        for it in 1..=8 {
            iterations = it;
            let rhs: Vec<DVector<f64>> = (0..m).map(|k| DVector::from_column_slice(&r[k * n..(k + 1) * n])).collect();
            let x = sys.solve(&rhs)?;
            let mut next: Vec<f64> = x.iter().flat_map(|v| v.iter().copied()).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonConvergence { what: "grid steady state".into(), detail: "non-finite iterate".into() });
            }
            self.normalize(&mut next);
            let change = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let size = next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            r = next;
            if change <= 1e-13 * size && it >= 2 {
                break;
            }
        }
        let state = self.unpack(&r, f64::INFINITY);
        let residual = self.residual(&state)?;
        if !(residual < tol) {
            return Err(Error::NonConvergence {
                what: "grid steady state".into(),
                detail: format!("residual ‖Δρ‖/dt = {residual:.3e} exceeds {tol:.1e}"),
            });
        }
        Ok(SteadyGrid { state, residual, iterations })
    }

    /// Operator-valued probability flux at each interior face (computational basis).
    pub fn face_fluxes(&self, state: &GridState) -> Result<Vec<Operator>> {
        let r = self.pack(state)?;
        let f = self.fluxes(&r);
        let n = self.n();
        let vd = self.v.adjoint();
        Ok((0..self.grid.cells() - 1)
            .map(|j| self.coords.write(&f[j * n..(j + 1) * n]).conjugate_by(&vd))
            .collect())
    }

    /// P, J, Ė_M and dU/dt of the discrete dynamics. The transport part of P is the
    /// face sum Σ_j Tr{(U_{j+1} − U_j)F_j}, which reduces to the drift and diffusion
    /// terms for smooth U and to the jump-times-flux term at a threshold.
    pub fn thermo(&self, state: &GridState, frame: &EnergyFrame) -> Result<GridEnergetics> {
        frame.check(&self.model.protocol)?;
        let h = self.grid.spacing();
        let m = self.grid.cells();
        let u: Vec<Operator> = (0..m).map(|k| frame.u_at(&self.model.protocol, self.grid.center(k))).collect();
        let fl = self.face_fluxes(state)?;
        let mut power = 0.0;
        for j in 0..m - 1 {
            power += (u[j + 1] - u[j]).expect(&fl[j]);
        }
        let a = &self.model.observable;
        let (mut unitary, mut heat, mut meas) = (0.0, 0.0, 0.0);
        let mut du = 0.0;
        let r = self.pack(state)?;
        let mut dr = vec![0.0; r.len()];
        self.apply(&r, &mut dr);
        let dstate = self.unpack(&dr, 0.0);
        for k in 0..m {
            let pv = self.model.protocol.eval(self.grid.center(k));
            let comm = (pv.hamiltonian * u[k] - u[k] * pv.hamiltonian) * C::new(0.0, 1.0);
            unitary += comm.expect(&state.rho[k]);
            heat += pv.bath_adjoint(&u[k]).expect(&state.rho[k]);
            meas += crate::operators::dissipator_adjoint(a, &u[k]).expect(&state.rho[k]);
            du += u[k].expect(&dstate.rho[k]);
        }
        Ok(GridEnergetics {
            power: power + unitary * h,
            heat: heat * h,
            meas_energy: self.model.lambda * meas * h,
            du_dt: du * h,
        })
    }
}

/// Single explicit step; builds the discretization on every call.
pub fn qfpme_step(state: &GridState, model: &QfpmeModel, dt: f64) -> Result<GridState> {
    GridSolver::new(model, state.grid)?.step(state, dt)
}

pub fn steady_state_grid(model: &QfpmeModel, cells: usize, tol: f64) -> Result<SteadyGrid> {
    let grid = Grid::for_model(model, cells)?;
    GridSolver::new(model, grid)?.steady_state(tol)
}

pub fn grid_thermo(state: &GridState, model: &QfpmeModel, frame: &EnergyFrame) -> Result<GridEnergetics> {
    GridSolver::new(model, state.grid)?.thermo(state, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BangBang, Engine};

    #[test]
    fn zero_lies_on_a_face() {
        let g = Grid::symmetric(3.0, 2001).unwrap();
        assert_eq!(g.face_index_of(0.0), Some(1000));
        assert_eq!(g.face(1000), 0.0);
        let g = Grid::symmetric(3.0, 2000).unwrap();
        assert_eq!(g.d_max(), 3.0);
    }

    #[test]
    fn coordinates_round_trip() {
        let c = Coordinates::new(2);
        let m = Operator::from_rows(2, &[C::new(0.3, 0.0), C::new(0.1, -0.2), C::new(0.1, 0.2), C::new(0.7, 0.0)]).unwrap();
        let mut r = vec![0.0; 4];
        c.read(&m, &mut r);
        assert!((c.write(&r) - m).sup_norm() < 1e-15);
        for k in 0..4 {
            let mut e = vec![0.0; 4];
            c.read(&c.basis(k), &mut e);
            assert_eq!(e.iter().filter(|&&x| x != 0.0).count(), 1);
            assert_eq!(e[k], 1.0);
        }
    }

    #[test]
    fn bernoulli_function_limits() {
        assert!((bernoulli(0.0) - 1.0).abs() < 1e-15);
        assert!((bernoulli(1e-12) - (1.0 - 5e-13)).abs() < 1e-15);
        assert!((bernoulli(2.0) - 2.0 / (2f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(-3.0) - bernoulli(3.0) - 3.0).abs() < 1e-13);
    }

    #[test]
    fn step_conserves_trace() {
        let m = Engine::new(1.0, 1.0, 0.3, 0.5, 1.0, 1.0).unwrap().qfpme().unwrap();
        let grid = Grid::for_model(&m, 201).unwrap();
        let solver = GridSolver::new(&m, grid).unwrap();
        let s0 = GridState::measurement_mixture(grid, &m, &Operator::diag(&[0.8, 0.2])).unwrap();
        let s1 = solver.step(&s0, solver.admissible_dt()).unwrap();
        assert!((s1.total_trace() - s0.total_trace()).abs() < 1e-12);
        assert!(s1.max_hermitian_deviation() < 1e-14);
        assert!(matches!(solver.step(&s0, 2.0 * solver.admissible_dt()), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn threshold_off_face_is_rejected() {
        let m = BangBang::new(1.0, 0.1, 0.5, 1.0, 1.0).unwrap().qfpme().unwrap();
        assert!(Grid::for_model(&m, 2001).is_ok());
        let mut shifted = m.clone();
        if let crate::operators::FeedbackProtocol::Threshold { branches } = &mut shifted.protocol {
            branches[0].hi = 0.123456;
            branches[1].lo = 0.123456;
        }
        assert!(Grid::for_model(&shifted, 2001).is_err());
    }
}
