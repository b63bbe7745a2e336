//! Truncated Fock-space integrator of the homodyne stochastic master
//! equation, optionally with a qubit attached, for validating the moment
//! engine and the dispersive reduction.
//!
//! Basis ordering is `q·N + n` with `q = 0` for |g⟩ and `q = 1` for |e⟩.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{ControlLaw, RecordAverager};
use crate::model::{InitialQubit, ModelError, QubitScenario};
use crate::moments::{
    BranchRow, EngineConfig, EngineError, GaussianMoments, NoiseSource, Rows, SingleRow,
    TrajectorySummary,
};
use crate::output::{write_table, OutputError};

/// Largest population allowed in the top two Fock levels.
pub const TAIL_TOLERANCE: f64 = 1e-6;
pub const MIN_TRUNCATION: usize = 4;

type C = Complex64;
const ZERO: C = C::new(0.0, 0.0);
const I: C = C::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("truncation N = {0} is below the minimum of 4")]
    TooSmall(usize),
    #[error("tail mass {tail_mass:.3e} exceeds tolerance at N = {n}; try N = {suggested}")]
    Truncation {
        n: usize,
        tail_mass: f64,
        suggested: usize,
    },
    #[error("{0} mode needs qubit parameters")]
    MissingQubitParams(&'static str),
    #[error("unsupported initial state: {0}")]
    UnsupportedInitialState(String),
    #[error("density matrix became non-finite at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Operator stored as (row, column, value) triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp {
    pub dim: usize,
    pub entries: Vec<(usize, usize, C)>,
}

impl SparseOp {
    pub fn zeros(dim: usize) -> Self {
        SparseOp {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, i: usize, j: usize, v: C) {
        if v != ZERO {
            self.entries.push((i, j, v));
        }
    }

    pub fn scaled(&self, c: C) -> Self {
        SparseOp {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|&(i, j, v)| (i, j, v * c))
                .collect(),
        }
    }

    pub fn plus(&self, other: &SparseOp) -> Self {
        let mut out = self.clone();
        out.entries.extend_from_slice(&other.entries);
        out
    }

    pub fn adjoint(&self) -> Self {
        SparseOp {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|&(i, j, v)| (j, i, v.conj()))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<C> {
        let mut m = DMatrix::from_element(self.dim, self.dim, ZERO);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    /// self · rho
    pub fn left_mul(&self, rho: &DMatrix<C>) -> DMatrix<C> {
        let d = self.dim;
        let mut out = DMatrix::from_element(d, d, ZERO);
        for &(i, k, v) in &self.entries {
            for j in 0..d {
                out[(i, j)] += v * rho[(k, j)];
            }
        }
        out
    }

    /// rho · self
    pub fn right_mul(&self, rho: &DMatrix<C>) -> DMatrix<C> {
        let d = self.dim;
        let mut out = DMatrix::from_element(d, d, ZERO);
        for &(k, j, v) in &self.entries {
            let src = rho.column(k);
            let mut dst = out.column_mut(j);
            for i in 0..d {
                dst[i] += src[i] * v;
            }
        }
        out
    }

    /// tr(self · rho)
    pub fn expect(&self, rho: &DMatrix<C>) -> C {
        self.entries.iter().map(|&(i, k, v)| v * rho[(k, i)]).sum()
    }
}

/// Ladder, quadrature and number operators on the truncated space.
#[derive(Debug, Clone)]
pub struct FockOperators {
    pub n: usize,
    pub qubit: bool,
    pub a: SparseOp,
    pub a2: SparseOp,
    pub num: SparseOp,
    pub x: SparseOp,
}

impl FockOperators {
    pub fn new(n: usize, qubit: bool) -> Self {
        let blocks = if qubit { 2 } else { 1 };
        let dim = blocks * n;
        let mut a = SparseOp::zeros(dim);
        let mut a2 = SparseOp::zeros(dim);
        let mut num = SparseOp::zeros(dim);
        for q in 0..blocks {
            let o = q * n;
            for k in 1..n {
                a.push(o + k - 1, o + k, C::new((k as f64).sqrt(), 0.0));
                num.push(o + k, o + k, C::new(k as f64, 0.0));
            }
            for k in 2..n {
                a2.push(o + k - 2, o + k, C::new(((k * (k - 1)) as f64).sqrt(), 0.0));
            }
        }
        let x = a.plus(&a.adjoint()).scaled(C::new(1.0 / SQRT_2, 0.0));
        FockOperators {
            n,
            qubit,
            a,
            a2,
            num,
            x,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianMode {
    Single,
    Dispersive,
    FullJc,
}

/// Hamiltonian terms in the frame co-rotating with the drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HamiltonianSpec {
    /// ω a†a
    Single { omega: f64 },
    /// (ω_q/2)σz + Δ_od a†a + χ a†a σz
    Dispersive {
        qubit_splitting: f64,
        delta_od: f64,
        chi: f64,
    },
    /// (Δ_qd/2)σz + Δ_od a†a + g(a†σ₋ + aσ₊)
    FullJc {
        delta_qd: f64,
        delta_od: f64,
        g: f64,
    },
}

impl HamiltonianSpec {
    pub fn has_qubit(&self) -> bool {
        !matches!(self, HamiltonianSpec::Single { .. })
    }
}

/// Static Hamiltonian plus the control term u·x.
pub fn build_hamiltonian(spec: &HamiltonianSpec, n: usize, u: f64) -> Result<SparseOp, FockError> {
    if n < MIN_TRUNCATION {
        return Err(FockError::TooSmall(n));
    }
    let ops = FockOperators::new(n, spec.has_qubit());
    let mut h = SparseOp::zeros(ops.dim());
    let r = |v: f64| C::new(v, 0.0);
    match *spec {
        HamiltonianSpec::Single { omega } => {
            for k in 0..n {
                h.push(k, k, r(omega * k as f64));
            }
        }
        HamiltonianSpec::Dispersive {
            qubit_splitting,
            delta_od,
            chi,
        } => {
            for k in 0..n {
                let nk = k as f64;
                h.push(k, k, r(-qubit_splitting / 2.0 + delta_od * nk - chi * nk));
                h.push(
                    n + k,
                    n + k,
                    r(qubit_splitting / 2.0 + delta_od * nk + chi * nk),
                );
            }
        }
        HamiltonianSpec::FullJc {
            delta_qd,
            delta_od,
            g,
        } => {
            for k in 0..n {
                let nk = k as f64;
                h.push(k, k, r(-delta_qd / 2.0 + delta_od * nk));
                h.push(n + k, n + k, r(delta_qd / 2.0 + delta_od * nk));
            }
            // a†σ₋ : |e,k⟩ → √(k+1)|g,k+1⟩, plus its adjoint
            for k in 0..n - 1 {
                let v = r(g * ((k + 1) as f64).sqrt());
                h.push(k + 1, n + k, v);
                h.push(n + k, k + 1, v);
            }
        }
    }
    if u != 0.0 {
        h = h.plus(&ops.x.scaled(r(u)));
    }
    Ok(h)
}

/// Oscillator expectation values ⟨a⟩, ⟨a²⟩, ⟨a†a⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderExpectations {
    pub a: C,
    pub a2: C,
    pub num: f64,
}

impl LadderExpectations {
    pub fn moments(&self) -> GaussianMoments {
        let x = SQRT_2 * self.a.re;
        let p = SQRT_2 * self.a.im;
        GaussianMoments {
            x,
            p,
            vx: self.a2.re + self.num + 0.5 - x * x,
            vp: -self.a2.re + self.num + 0.5 - p * p,
            cxp: self.a2.im - x * p,
        }
    }
}

/// Density matrix on |n⟩ or |q⟩⊗|n⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct FockDensity {
    pub n: usize,
    pub qubit: bool,
    pub rho: DMatrix<C>,
}

/// Fock amplitudes of |α⟩, truncated to n levels.
pub fn coherent_amplitudes(n: usize, alpha: C) -> Vec<C> {
    let mut c = Vec::with_capacity(n);
    let mut cur = C::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for k in 0..n {
        if k > 0 {
            cur = cur * alpha / (k as f64).sqrt();
        }
        c.push(cur);
    }
    c
}

/// α = (x + ip)/√2
pub fn alpha_of(x: f64, p: f64) -> C {
    C::new(x, p) / SQRT_2
}

impl FockDensity {
    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn vacuum(n: usize) -> Result<Self, FockError> {
        FockDensity::coherent(n, ZERO)
    }

    pub fn coherent(n: usize, alpha: C) -> Result<Self, FockError> {
        if n < MIN_TRUNCATION {
            return Err(FockError::TooSmall(n));
        }
        let c = coherent_amplitudes(n, alpha);
        let rho = DMatrix::from_fn(n, n, |i, j| c[i] * c[j].conj());
        FockDensity {
            n,
            qubit: false,
            rho,
        }
        .normalized_checked()
    }

    /// Displaced thermal state with mean occupation `nbar`, built in an
    /// enlarged basis and truncated.
    pub fn displaced_thermal(n: usize, alpha: C, nbar: f64) -> Result<Self, FockError> {
        if n < MIN_TRUNCATION {
            return Err(FockError::TooSmall(n));
        }
        if nbar == 0.0 {
            return FockDensity::coherent(n, alpha);
        }
        let big = 2 * n + 16;
        let ratio = nbar / (1.0 + nbar);
        let th = DMatrix::from_fn(big, big, |i, j| {
            if i == j {
                C::new(ratio.powi(i as i32) / (1.0 + nbar), 0.0)
            } else {
                ZERO
            }
        });
        let a = FockOperators::new(big, false).a.to_dense();
        let gen = a.adjoint() * alpha - &a * alpha.conj();
        let d = gen.exp();
        let full = &d * th * d.adjoint();
        let rho = full.view((0, 0), (n, n)).into_owned();
        FockDensity {
            n,
            qubit: false,
            rho,
        }
        .normalized_checked()
    }

    /// Gaussian state with the given moments; only isotropic (vx = vp,
    /// cxp = 0) states are supported.
    pub fn from_moments(n: usize, m: &GaussianMoments) -> Result<Self, FockError> {
        if m.cxp != 0.0 || m.vx != m.vp || m.vx < 0.5 {
            return Err(FockError::UnsupportedInitialState(format!(
                "need vx = vp ≥ 1/2 and cxp = 0, got ({}, {}, {})",
                m.vx, m.vp, m.cxp
            )));
        }
        FockDensity::displaced_thermal(n, alpha_of(m.x, m.p), m.vx - 0.5)
    }

    /// ρ_q ⊗ ρ_osc
    pub fn with_qubit(&self, q: &[[(f64, f64); 2]; 2]) -> Self {
        let n = self.n;
        let rho = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            let (qi, qj) = (i / n, j / n);
            C::new(q[qi][qj].0, q[qi][qj].1) * self.rho[(i % n, j % n)]
        });
        FockDensity {
            n,
            qubit: true,
            rho,
        }
    }

    pub fn trace(&self) -> C {
        self.rho.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.rho - self.rho.adjoint())
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()) * C::new(0.5, 0.0);
        h.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Population of the top two Fock levels (summed over the qubit).
    pub fn tail_mass(&self) -> f64 {
        let blocks = if self.qubit { 2 } else { 1 };
        (0..blocks)
            .flat_map(|q| [q * self.n + self.n - 2, q * self.n + self.n - 1])
            .map(|k| self.rho[(k, k)].re)
            .sum()
    }

    pub fn expectations(&self, ops: &FockOperators) -> LadderExpectations {
        LadderExpectations {
            a: ops.a.expect(&self.rho),
            a2: ops.a2.expect(&self.rho),
            num: ops.num.expect(&self.rho).re,
        }
    }

    /// Moments of the reduced oscillator state.
    pub fn moments(&self, ops: &FockOperators) -> GaussianMoments {
        self.expectations(ops).moments()
    }

    /// Qubit population and the normalized oscillator block ⟨q|ρ|q⟩.
    pub fn conditioned(&self, q: usize) -> (f64, FockDensity) {
        let n = self.n;
        let block = self.rho.view((q * n, q * n), (n, n)).into_owned();
        let pop = block.trace().re;
        let rho = if pop > 0.0 {
            block / C::new(pop, 0.0)
        } else {
            block
        };
        (
            pop,
            FockDensity {
                n,
                qubit: false,
                rho,
            },
        )
    }

    /// Qubit coherence ρ_eg = Σ_n ⟨e,n|ρ|g,n⟩.
    pub fn qubit_coherence(&self) -> C {
        if !self.qubit {
            return ZERO;
        }
        let n = self.n;
        (0..n).map(|k| self.rho[(n + k, k)]).sum()
    }

    /// ⟨α|ρ|α⟩ for an oscillator-only state.
    pub fn coherent_fidelity(&self, alpha: C) -> f64 {
        let c = coherent_amplitudes(self.n, alpha);
        let mut acc = ZERO;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += c[i].conj() * self.rho[(i, j)] * c[j];
            }
        }
        acc.re
    }

    fn normalized_checked(mut self) -> Result<Self, FockError> {
        let tr = self.trace().re;
        self.rho /= C::new(tr, 0.0);
        check_tail(&self)?;
        Ok(self)
    }
}

/// Smallest N (multiple of 8) for which a coherent state of mean photon
/// number `mean_photons` leaves less than 10⁻⁸ in the top two levels.
pub fn suggest_truncation(mean_photons: f64) -> usize {
    let lambda = mean_photons.max(0.0);
    let mut n = 8usize;
    loop {
        // Poisson tail P(k ≥ n − 2)
        let mut term = (-lambda).exp();
        let mut below = 0.0;
        for k in 0..n - 2 {
            below += term;
            term *= lambda / (k + 1) as f64;
        }
        if 1.0 - below < 1e-8 || n >= 4096 {
            return n;
        }
        n += 8;
    }
}

fn check_tail(rho: &FockDensity) -> Result<(), FockError> {
    let tail = rho.tail_mass();
    if tail > TAIL_TOLERANCE {
        let blocks = if rho.qubit { 2 } else { 1 };
        let mean: f64 = (0..blocks)
            .flat_map(|q| (0..rho.n).map(move |k| (q, k)))
            .map(|(q, k)| k as f64 * rho.rho[(q * rho.n + k, q * rho.n + k)].re)
            .sum();
        return Err(FockError::Truncation {
            n: rho.n,
            tail_mass: tail,
            suggested: suggest_truncation(mean).max(2 * rho.n),
        });
    }
    Ok(())
}

/// Result of one SME step.
#[derive(Debug, Clone)]
pub struct SmeOutcome {
    pub rho: FockDensity,
    pub dy: f64,
    /// |tr ρ − 1| before renormalization.
    pub trace_drift: f64,
}

/// One Euler step of dρ = (−i[H + u·x, ρ] + γD[a]ρ)dt + √(ηγ)H[a]ρ dW,
/// followed by hermitization and trace renormalization.
#[allow(clippy::too_many_arguments)]
pub fn sme_step(
    state: &FockDensity,
    h0: &SparseOp,
    ops: &FockOperators,
    gamma: f64,
    eta: f64,
    u: f64,
    dw: f64,
    dt: f64,
) -> Result<SmeOutcome, FockError> {
    let rho = &state.rho;
    let a_rho = ops.a.left_mul(rho);
    let n_rho = ops.num.left_mul(rho);
    let mut h_rho = h0.left_mul(rho);
    if u != 0.0 {
        h_rho += ops.x.left_mul(rho) * C::new(u, 0.0);
    }
    let a_rho_ad = ops.a.adjoint().right_mul(&a_rho);
    let mean_a_sum = 2.0 * a_rho.trace().re; // ⟨a + a†⟩

    let comm = &h_rho - h_rho.adjoint();
    let dissip = a_rho_ad - (&n_rho + n_rho.adjoint()) * C::new(0.5, 0.0);
    let meas = &a_rho + a_rho.adjoint() - rho * C::new(mean_a_sum, 0.0);

    let mut next = rho
        + (comm * (-I) + dissip * C::new(gamma, 0.0)) * C::new(dt, 0.0)
        + meas * C::new((eta * gamma).sqrt() * dw, 0.0);
    let trace = next.trace();
    next = (&next + next.adjoint()) * C::new(0.5, 0.0);
    let tr = next.trace().re;
    next /= C::new(tr, 0.0);
    if next.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(FockError::NonFinite(0));
    }
    let dy = mean_a_sum / SQRT_2 * dt + dw / (2.0 * eta * gamma).sqrt();
    let out = FockDensity {
        n: state.n,
        qubit: state.qubit,
        rho: next,
    };
    check_tail(&out)?;
    Ok(SmeOutcome {
        rho: out,
        dy,
        trace_drift: (trace - C::new(1.0, 0.0)).norm(),
    })
}

/// Oracle run settings. The engine block supplies parameters, step
/// sizes, seeds, warmup and noise mode; `qubit` is required for the
/// dispersive and full_jc modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub engine: EngineConfig,
    pub n: usize,
    pub mode: HamiltonianMode,
    #[serde(default)]
    pub qubit: Option<QubitScenario>,
}

impl OracleConfig {
    fn spec_at(&self, t: f64) -> Result<HamiltonianSpec, FockError> {
        let p = &self.engine.params;
        match self.mode {
            HamiltonianMode::Single => Ok(HamiltonianSpec::Single { omega: p.omega }),
            HamiltonianMode::Dispersive | HamiltonianMode::FullJc => {
                let label = if self.mode == HamiltonianMode::Dispersive {
                    "dispersive"
                } else {
                    "full_jc"
                };
                let q = self
                    .qubit
                    .as_ref()
                    .ok_or(FockError::MissingQubitParams(label))?;
                let sched = q.reduce()?;
                let omega_d = q
                    .omega_d_schedule
                    .iter()
                    .rev()
                    .find(|s| t >= s.time)
                    .unwrap_or(&q.omega_d_schedule[0])
                    .omega_d;
                let delta_od = q.omega_o - omega_d;
                Ok(if self.mode == HamiltonianMode::Dispersive {
                    HamiltonianSpec::Dispersive {
                        qubit_splitting: q.omega_q - omega_d,
                        delta_od,
                        chi: sched.chi,
                    }
                } else {
                    HamiltonianSpec::FullJc {
                        delta_qd: q.omega_q - omega_d,
                        delta_od,
                        g: q.g,
                    }
                })
            }
        }
    }

    fn initial_state(&self) -> Result<FockDensity, FockError> {
        let osc = FockDensity::from_moments(self.n, &self.engine.initial)?;
        match self.mode {
            HamiltonianMode::Single => Ok(osc),
            _ => {
                let q = self
                    .qubit
                    .as_ref()
                    .map(|q| q.initial_qubit)
                    .unwrap_or(InitialQubit::Ground);
                Ok(osc.with_qubit(&q.density()?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub master_seed: u64,
    pub index: u64,
    pub n: usize,
    /// Single mode: oscillator moments. Qubit modes: centroids of the
    /// oscillator conditioned on |g⟩ and |e⟩, with Y and u from the one
    /// physical record, `sigma` = −ln(|ρ_eg(t)|/|ρ_eg(0)|) and `theta` the
    /// unwrapped phase change of ρ_eg.
    pub rows: Rows,
    pub tail_mass: Vec<f64>,
    pub summary: TrajectorySummary,
    pub max_trace_drift: f64,
    /// Smallest eigenvalue of the final ρ; the Euler step lets it dip
    /// below zero by an amount of order dt.
    pub final_min_eigenvalue: f64,
}

impl OracleRecord {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), OutputError> {
        let mut cols: Vec<&str> = self.rows.columns().to_vec();
        cols.extend(["N", "tail_mass"]);
        let rows = self
            .rows
            .value_rows()
            .into_iter()
            .zip(&self.tail_mass)
            .map(|(mut r, &tail)| {
                r.push(self.n as f64);
                r.push(tail);
                r
            });
        write_table(w, &cols, rows)
    }
}

fn unwrap_step(prev: f64, next: f64) -> f64 {
    let mut d = next - prev;
    while d > PI {
        d -= 2.0 * PI;
    }
    while d < -PI {
        d += 2.0 * PI;
    }
    d
}

/// Closed-loop trajectory on the density matrix, drawing the same noise
/// stream as [`crate::moments::simulate_trajectory`] for equal
/// (seed, index).
pub fn run_oracle(
    config: &OracleConfig,
    master_seed: u64,
    index: u64,
) -> Result<OracleRecord, FockError> {
    let ec = &config.engine;
    ec.validate()?;
    let qubit = config.mode != HamiltonianMode::Single;
    let ops = FockOperators::new(config.n, qubit);
    let block_ops = FockOperators::new(config.n, false);
    let p = &ec.params;
    let law = ControlLaw::new(p.k0, p.k1, p.k3);
    let mut noise = NoiseSource::new(master_seed, index, ec.noise);
    let mut avg = RecordAverager::new(ec.warmup_time());
    let mut state = config.initial_state()?;
    let mut spec = config.spec_at(0.0)?;
    let mut h0 = build_hamiltonian(&spec, config.n, 0.0)?;
    let steps = ec.steps();
    let dt = ec.dt;
    let mut single_rows = Vec::new();
    let mut branch_rows = Vec::new();
    let mut tails = Vec::new();
    let mut dy_cum = 0.0;
    let mut max_drift: f64 = 0.0;
    let mut min_prod = f64::INFINITY;
    let coh0 = state.qubit_coherence();
    let mut phase = 0.0;
    let mut last_arg = coh0.arg();

    for n in 0..=steps {
        let t = n as f64 * dt;
        if qubit {
            let s = config.spec_at(t)?;
            if s != spec {
                spec = s;
                h0 = build_hamiltonian(&spec, config.n, 0.0)?;
                if ec.reset_at_switch {
                    avg.reset();
                }
            }
        }
        let y = avg.value();
        let u = law.eval(y);
        if n % ec.stride == 0 || n == steps {
            tails.push(state.tail_mass());
            if qubit {
                let (_, g) = state.conditioned(0);
                let (_, e) = state.conditioned(1);
                let (mg, me) = (g.moments(&block_ops), e.moments(&block_ops));
                let coh = state.qubit_coherence();
                if coh.norm() > 0.0 && coh0.norm() > 0.0 {
                    phase += unwrap_step(last_arg, coh.arg());
                    last_arg = coh.arg();
                }
                let sigma = if coh0.norm() > 0.0 {
                    -(coh.norm() / coh0.norm()).ln()
                } else {
                    0.0
                };
                branch_rows.push(BranchRow {
                    t,
                    x_g: mg.x,
                    p_g: mg.p,
                    x_e: me.x,
                    p_e: me.p,
                    y_g: y,
                    y_e: y,
                    u_g: u,
                    u_e: u,
                    sigma,
                    theta: phase,
                });
            } else {
                let m = state.moments(&ops);
                min_prod = min_prod.min(m.uncertainty_product());
                single_rows.push(SingleRow {
                    t,
                    x: m.x,
                    p: m.p,
                    vx: m.vx,
                    vp: m.vp,
                    cxp: m.cxp,
                    y,
                    u,
                    dy_cum,
                });
            }
        }
        if n == steps {
            break;
        }
        let dw = noise.next(dt);
        let out = sme_step(&state, &h0, &ops, p.gamma, p.eta, u, dw, dt).map_err(|e| match e {
            FockError::NonFinite(_) => FockError::NonFinite(n),
            other => other,
        })?;
        max_drift = max_drift.max(out.trace_drift);
        state = out.rho;
        dy_cum += out.dy;
        avg.update(out.dy, dt);
    }
    let rows = if qubit {
        Rows::Branches(branch_rows)
    } else {
        Rows::Single(single_rows)
    };
    Ok(OracleRecord {
        master_seed,
        index,
        n: config.n,
        rows,
        tail_mass: tails,
        summary: TrajectorySummary {
            steps,
            t_final: steps as f64 * dt,
            final_y: vec![avg.value()],
            min_uncertainty_product: min_prod,
        },
        max_trace_drift: max_drift,
        final_min_eigenvalue: state.min_eigenvalue(),
    })
}

/// −d(arg z)/dt by least squares on the unwrapped phase.
pub fn fit_rotation_frequency(times: &[f64], values: &[C]) -> Option<f64> {
    if times.len() < 2 || times.len() != values.len() {
        return None;
    }
    let mut phase = values[0].arg();
    let mut pts = vec![(times[0], phase)];
    for w in values.windows(2).zip(&times[1..]) {
        phase += unwrap_step(w.0[0].arg(), w.0[1].arg());
        pts.push((*w.1, phase));
    }
    crate::bifurcation::least_squares_slope(&pts).map(|s| -s)
}

/// Rotation frequency of ⟨a⟩ with the qubit held in |g⟩ (`excited =
/// false`) or |e⟩, starting from a weak coherent state, without feedback,
/// damping or noise.
pub fn branch_frequency(
    spec: &HamiltonianSpec,
    n: usize,
    excited: bool,
    alpha: f64,
    t_final: f64,
    dt: f64,
) -> Result<f64, FockError> {
    if !spec.has_qubit() {
        return Err(FockError::MissingQubitParams("branch frequency"));
    }
    let ops = FockOperators::new(n, true);
    let h0 = build_hamiltonian(spec, n, 0.0)?;
    let q = if excited {
        InitialQubit::Excited
    } else {
        InitialQubit::Ground
    };
    let mut state = FockDensity::coherent(n, C::new(alpha, 0.0))?.with_qubit(&q.density()?);
    let steps = (t_final / dt).round() as usize;
    let every = (steps / 4000).max(1);
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for k in 0..=steps {
        if k % every == 0 {
            ts.push(k as f64 * dt);
            vs.push(ops.a.expect(&state.rho));
        }
        if k < steps {
            // γ = 0: unitary evolution; η only scales the dW term, which is zero
            state = sme_step(&state, &h0, &ops, 0.0, 1.0, 0.0, 0.0, dt)?.rho;
        }
    }
    fit_rotation_frequency(&ts, &vs).ok_or(FockError::NonFinite(steps))
}
