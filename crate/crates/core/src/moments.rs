//! Conditional Gaussian-moment dynamics of the monitored oscillator, the
//! closed feedback loop, and the deterministic mean-field equations.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bifurcation::CentroidSystem;
use crate::feedback::{ControlLaw, RecordAverager};
use crate::model::{check_schedule_times, DispersiveSchedule, ModelError, PhysicalParams};
use crate::output::{write_table, OutputError};

/// Slack allowed on the Heisenberg bound vx·vp − cxp² ≥ 1/4.
pub const UNCERTAINTY_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("state became non-finite at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl EngineError {
    fn at(self, step: usize, t: f64) -> Self {
        match self {
            EngineError::NonFinite { .. } => EngineError::NonFinite { step, t },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub x: f64,
    pub p: f64,
    pub vx: f64,
    pub vp: f64,
    pub cxp: f64,
}

impl Default for GaussianMoments {
    fn default() -> Self {
        GaussianMoments::coherent(0.0, 0.0)
    }
}

impl GaussianMoments {
    pub fn coherent(x: f64, p: f64) -> Self {
        GaussianMoments {
            x,
            p,
            vx: 0.5,
            vp: 0.5,
            cxp: 0.0,
        }
    }

    pub fn uncertainty_product(&self) -> f64 {
        self.vx * self.vp - self.cxp * self.cxp
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.p, self.vx, self.vp, self.cxp]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Frequency, damping and detection efficiency of one oscillator branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub omega: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Oscillator {
    pub fn new(omega: f64, gamma: f64, eta: f64) -> Self {
        Oscillator { omega, gamma, eta }
    }

    /// √(2ηγ)
    pub fn measurement_strength(&self) -> f64 {
        (2.0 * self.eta * self.gamma).sqrt()
    }
}

/// One Euler–Maruyama step of (x, p); second moments are left untouched.
/// Returns the new moments and the record increment dy.
pub fn step_first_moments(
    m: &GaussianMoments,
    osc: &Oscillator,
    u: f64,
    dw: f64,
    dt: f64,
) -> Result<(GaussianMoments, f64), EngineError> {
    let h = osc.gamma / 2.0;
    let s = osc.measurement_strength();
    let next = GaussianMoments {
        x: m.x + (-h * m.x + osc.omega * m.p) * dt + s * (m.vx - 0.5) * dw,
        p: m.p + (-osc.omega * m.x - h * m.p - u) * dt + s * m.cxp * dw,
        ..*m
    };
    let dy = m.x * dt + dw / s;
    if !next.is_finite() || !dy.is_finite() {
        return Err(EngineError::NonFinite {
            step: 0,
            t: f64::NAN,
        });
    }
    Ok((next, dy))
}

/// Deterministic Riccati step of (vx, vp, cxp); first moments untouched.
pub fn step_second_moments(m: &GaussianMoments, osc: &Oscillator, dt: f64) -> GaussianMoments {
    let Oscillator { omega, gamma, eta } = *osc;
    let k = 2.0 * eta * gamma;
    let ex = m.vx - 0.5;
    GaussianMoments {
        vx: m.vx + (-gamma * m.vx + 2.0 * omega * m.cxp + gamma / 2.0 - k * ex * ex) * dt,
        vp: m.vp + (-gamma * m.vp - 2.0 * omega * m.cxp + gamma / 2.0 - k * m.cxp * m.cxp) * dt,
        cxp: m.cxp + (-gamma * m.cxp + omega * (m.vp - m.vx) - k * ex * m.cxp) * dt,
        ..*m
    }
}

/// First and second moments together, both from the pre-step state.
pub fn step_moments(
    m: &GaussianMoments,
    osc: &Oscillator,
    u: f64,
    dw: f64,
    dt: f64,
) -> Result<(GaussianMoments, f64), EngineError> {
    let (first, dy) = step_first_moments(m, osc, u, dw, dt)?;
    let second = step_second_moments(m, osc, dt);
    Ok((
        GaussianMoments {
            x: first.x,
            p: first.p,
            ..second
        },
        dy,
    ))
}

/// Oscillator moments conditioned on each qubit eigenstate, their record
/// averages, and the accumulated Σ and Θ integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub moments_g: GaussianMoments,
    pub moments_e: GaussianMoments,
    pub y_g: RecordAverager,
    pub y_e: RecordAverager,
    pub sigma: f64,
    pub theta: f64,
}

impl BranchState {
    pub fn new(initial: GaussianMoments, warmup: f64) -> Self {
        BranchState {
            moments_g: initial,
            moments_e: initial,
            y_g: RecordAverager::new(warmup),
            y_e: RecordAverager::new(warmup),
            sigma: 0.0,
            theta: 0.0,
        }
    }
}

/// Advances both branches and the Σ, Θ integrals. `dw` holds the g and e
/// noise increments; pass the same value twice for a shared record.
/// Returns the new state and the (g, e) record increments.
#[allow(clippy::too_many_arguments)]
pub fn step_qubit_branches(
    b: &BranchState,
    osc_g: &Oscillator,
    osc_e: &Oscillator,
    chi: f64,
    u: (f64, f64),
    dw: (f64, f64),
    dt: f64,
) -> Result<(BranchState, (f64, f64)), EngineError> {
    if !osc_g.omega.is_finite() || !osc_e.omega.is_finite() {
        return Err(EngineError::NonFinite {
            step: 0,
            t: f64::NAN,
        });
    }
    let (g, e) = (&b.moments_g, &b.moments_e);
    let (mg, dy_g) = step_moments(g, osc_g, u.0, dw.0, dt)?;
    let (me, dy_e) = step_moments(e, osc_e, u.1, dw.1, dt)?;
    let mut next = *b;
    next.moments_g = mg;
    next.moments_e = me;
    next.sigma += chi * (e.x * g.p - e.p * g.x) * dt;
    next.theta += chi * (e.x * g.x + e.p * g.p) * dt;
    next.y_g.update(dy_g, dt);
    next.y_e.update(dy_e, dt);
    Ok((next, (dy_g, dy_e)))
}

/// Which deterministic centroid equations to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFieldForm {
    /// Y replaced by x: the autonomous cubic system.
    #[default]
    Closed,
    /// (x, p, S) with Y = S/t, the noise-free limit of the feedback loop.
    Averaged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPoint {
    pub t: f64,
    pub x: f64,
    pub p: f64,
    pub y: f64,
}

/// Fourth-order Runge–Kutta integration of the centroid equations.
///
/// In the averaged form `y0` is the value of Y used until `warmup` has
/// elapsed.
pub fn integrate_mean_field(
    sys: &CentroidSystem,
    form: MeanFieldForm,
    initial: (f64, f64, f64),
    t_final: f64,
    dt: f64,
    warmup: f64,
) -> Vec<MeanFieldPoint> {
    let steps = (t_final / dt).round() as usize;
    let law = ControlLaw::new(sys.k0, sys.k1, sys.k3);
    let h = sys.gamma / 2.0;
    let (x0, p0, y0) = initial;
    let y_of = |t: f64, x: f64, s: f64| match form {
        MeanFieldForm::Closed => x,
        MeanFieldForm::Averaged => {
            if t > 0.0 && t >= warmup {
                s / t
            } else {
                y0
            }
        }
    };
    let rhs = |t: f64, st: [f64; 3]| -> [f64; 3] {
        let [x, p, s] = st;
        let u = law.eval(y_of(t, x, s));
        [-h * x + sys.omega * p, -sys.omega * x - h * p - u, x]
    };

    let mut out = Vec::with_capacity(steps + 1);
    let mut st = [x0, p0, 0.0];
    out.push(MeanFieldPoint {
        t: 0.0,
        x: x0,
        p: p0,
        y: y_of(0.0, x0, 0.0),
    });
    for n in 0..steps {
        let t = n as f64 * dt;
        let add =
            |a: [f64; 3], k: [f64; 3], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]];
        let k1 = rhs(t, st);
        let k2 = rhs(t + dt / 2.0, add(st, k1, dt / 2.0));
        let k3 = rhs(t + dt / 2.0, add(st, k2, dt / 2.0));
        let k4 = rhs(t + dt, add(st, k3, dt));
        for i in 0..3 {
            st[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t1 = (n + 1) as f64 * dt;
        out.push(MeanFieldPoint {
            t: t1,
            x: st[0],
            p: st[1],
            y: y_of(t1, st[0], st[2]),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Wiener,
    /// dW ≡ 0: the noise-free diagnostic limit.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One record drives both branches (a superposition being measured).
    #[default]
    Shared,
    /// Separate records (separately prepared eigenstates).
    Independent,
}

/// Gaussian increments of variance dt from a (master seed, index) stream.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    mode: NoiseMode,
}

impl NoiseSource {
    pub fn new(master_seed: u64, index: u64, mode: NoiseMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(index);
        NoiseSource { rng, mode }
    }

    pub fn next(&mut self, dt: f64) -> f64 {
        match self.mode {
            NoiseMode::Wiener => {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * dt.sqrt()
            }
            NoiseMode::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineModel {
    /// One oscillator at frequency `params.omega`.
    Single,
    /// Two qubit-conditioned branches at Δ_od ∓ χ, with Δ_od following
    /// the (time, Δ_od) schedule.
    Branches {
        chi: f64,
        detunings: Vec<(f64, f64)>,
        #[serde(default)]
        sharing: SharingMode,
    },
}

impl EngineModel {
    pub fn from_schedule(schedule: &DispersiveSchedule, sharing: SharingMode) -> Self {
        EngineModel::Branches {
            chi: schedule.chi,
            detunings: schedule.detunings.clone(),
            sharing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub params: PhysicalParams,
    pub model: EngineModel,
    #[serde(default)]
    pub initial: GaussianMoments,
    pub dt: f64,
    pub t_final: f64,
    /// Record every `stride`-th step (and always the last one).
    pub stride: usize,
    /// Y reads as zero for this many steps after start or a reset.
    pub warmup_steps: usize,
    /// Restart the record averages at each drive switch.
    #[serde(default)]
    pub reset_at_switch: bool,
    #[serde(default)]
    pub noise: NoiseMode,
}

impl EngineConfig {
    pub fn single(params: PhysicalParams, dt: f64, t_final: f64) -> Self {
        EngineConfig {
            params,
            model: EngineModel::Single,
            initial: GaussianMoments::default(),
            dt,
            t_final,
            stride: 1,
            warmup_steps: 10,
            reset_at_switch: false,
            noise: NoiseMode::Wiener,
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn warmup_time(&self) -> f64 {
        if self.warmup_steps == 0 {
            0.0
        } else {
            (self.warmup_steps as f64 - 0.5) * self.dt
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.t_final.is_finite() && self.t_final >= self.dt) {
            return bad("t_final must be at least dt");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !self.initial.is_finite() || self.initial.vx <= 0.0 || self.initial.vp <= 0.0 {
            return bad("initial moments must be finite with positive variances");
        }
        if let EngineModel::Branches { chi, detunings, .. } = &self.model {
            if !chi.is_finite() {
                return bad("chi must be finite");
            }
            check_schedule_times(detunings.iter().map(|d| d.0))?;
            if detunings.iter().any(|d| !d.1.is_finite()) {
                return bad("detunings must be finite");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleRow {
    pub t: f64,
    pub x: f64,
    pub p: f64,
    pub vx: f64,
    pub vp: f64,
    pub cxp: f64,
    pub y: f64,
    pub u: f64,
    pub dy_cum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub t: f64,
    pub x_g: f64,
    pub p_g: f64,
    pub x_e: f64,
    pub p_e: f64,
    pub y_g: f64,
    pub y_e: f64,
    pub u_g: f64,
    pub u_e: f64,
    pub sigma: f64,
    pub theta: f64,
}

pub const SINGLE_COLUMNS: [&str; 9] = ["t", "x", "p", "vx", "vp", "cxp", "Y", "u", "dy_cum"];
pub const BRANCH_COLUMNS: [&str; 11] = [
    "t", "x_g", "p_g", "x_e", "p_e", "Y_g", "Y_e", "u_g", "u_e", "sigma", "theta",
];

impl SingleRow {
    pub fn values(&self) -> Vec<f64> {
        vec![
            self.t,
            self.x,
            self.p,
            self.vx,
            self.vp,
            self.cxp,
            self.y,
            self.u,
            self.dy_cum,
        ]
    }
}

impl BranchRow {
    pub fn values(&self) -> Vec<f64> {
        vec![
            self.t, self.x_g, self.p_g, self.x_e, self.p_e, self.y_g, self.y_e, self.u_g, self.u_e,
            self.sigma, self.theta,
        ]
    }

    pub fn sample(&self) -> crate::bifurcation::BranchSample {
        crate::bifurcation::BranchSample {
            t: self.t,
            x_g: self.x_g,
            p_g: self.p_g,
            x_e: self.x_e,
            p_e: self.p_e,
            sigma: self.sigma,
            theta: self.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "rows", rename_all = "snake_case")]
pub enum Rows {
    Single(Vec<SingleRow>),
    Branches(Vec<BranchRow>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Single(r) => r.len(),
            Rows::Branches(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            Rows::Single(_) => &SINGLE_COLUMNS,
            Rows::Branches(_) => &BRANCH_COLUMNS,
        }
    }

    pub fn value_rows(&self) -> Vec<Vec<f64>> {
        match self {
            Rows::Single(r) => r.iter().map(SingleRow::values).collect(),
            Rows::Branches(r) => r.iter().map(BranchRow::values).collect(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        match self {
            Rows::Single(r) => r.iter().map(|r| r.t).collect(),
            Rows::Branches(r) => r.iter().map(|r| r.t).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub steps: usize,
    pub t_final: f64,
    /// Final record averages: [Y] or [Y_g, Y_e].
    pub final_y: Vec<f64>,
    /// Smallest vx·vp − cxp² seen over all steps and branches.
    pub min_uncertainty_product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub master_seed: u64,
    pub index: u64,
    pub dt: f64,
    pub params: PhysicalParams,
    pub rows: Rows,
    pub summary: TrajectorySummary,
}

impl TrajectoryRecord {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), OutputError> {
        write_table(w, self.rows.columns(), self.rows.value_rows())
    }
}

fn detuning_at(detunings: &[(f64, f64)], t: f64) -> f64 {
    let mut current = detunings[0].1;
    for &(time, d) in detunings {
        if t >= time {
            current = d;
        }
    }
    current
}

/// Runs one closed-loop trajectory with noise stream `index` of `master_seed`.
pub fn simulate_trajectory(
    config: &EngineConfig,
    master_seed: u64,
    index: u64,
) -> Result<TrajectoryRecord, EngineError> {
    config.validate()?;
    let rows = match &config.model {
        EngineModel::Single => simulate_single(config, master_seed, index)?,
        EngineModel::Branches {
            chi,
            detunings,
            sharing,
        } => simulate_branches(config, *chi, detunings, *sharing, master_seed, index)?,
    };
    let (rows, summary) = rows;
    Ok(TrajectoryRecord {
        master_seed,
        index,
        dt: config.dt,
        params: config.params.clone(),
        rows,
        summary,
    })
}

fn simulate_single(
    config: &EngineConfig,
    master_seed: u64,
    index: u64,
) -> Result<(Rows, TrajectorySummary), EngineError> {
    let p = &config.params;
    let osc = Oscillator::new(p.omega, p.gamma, p.eta);
    let law = ControlLaw::new(p.k0, p.k1, p.k3);
    let mut noise = NoiseSource::new(master_seed, index, config.noise);
    let mut m = config.initial;
    let mut avg = RecordAverager::new(config.warmup_time());
    let mut dy_cum = 0.0;
    let mut min_prod = m.uncertainty_product();
    let steps = config.steps();
    let dt = config.dt;
    let mut rows = Vec::with_capacity(steps / config.stride + 2);

    for n in 0..=steps {
        let t = n as f64 * dt;
        let y = avg.value();
        let u = law.eval(y);
        if n % config.stride == 0 || n == steps {
            rows.push(SingleRow {
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
        if n == steps {
            break;
        }
        let dw = noise.next(dt);
        let (next, dy) = step_moments(&m, &osc, u, dw, dt).map_err(|e| e.at(n, t))?;
        m = next;
        dy_cum += dy;
        avg.update(dy, dt);
        min_prod = min_prod.min(m.uncertainty_product());
    }
    let summary = TrajectorySummary {
        steps,
        t_final: steps as f64 * dt,
        final_y: vec![avg.value()],
        min_uncertainty_product: min_prod,
    };
    Ok((Rows::Single(rows), summary))
}

fn simulate_branches(
    config: &EngineConfig,
    chi: f64,
    detunings: &[(f64, f64)],
    sharing: SharingMode,
    master_seed: u64,
    index: u64,
) -> Result<(Rows, TrajectorySummary), EngineError> {
    let p = &config.params;
    let law = ControlLaw::new(p.k0, p.k1, p.k3);
    let mut noise = NoiseSource::new(master_seed, index, config.noise);
    let mut b = BranchState::new(config.initial, config.warmup_time());
    let mut min_prod = config.initial.uncertainty_product();
    let steps = config.steps();
    let dt = config.dt;
    let mut rows = Vec::with_capacity(steps / config.stride + 2);
    for n in 0..=steps {
        let t = n as f64 * dt;
        let prev = n.saturating_sub(1) as f64 * dt;
        let switched = n > 0 && detunings[1..].iter().any(|d| d.0 > prev && d.0 <= t);
        if switched && config.reset_at_switch {
            b.y_g.reset();
            b.y_e.reset();
        }
        let current = detuning_at(detunings, t);
        let (y_g, y_e) = (b.y_g.value(), b.y_e.value());
        let u = (law.eval(y_g), law.eval(y_e));
        if n % config.stride == 0 || n == steps {
            rows.push(BranchRow {
                t,
                x_g: b.moments_g.x,
                p_g: b.moments_g.p,
                x_e: b.moments_e.x,
                p_e: b.moments_e.p,
                y_g,
                y_e,
                u_g: u.0,
                u_e: u.1,
                sigma: b.sigma,
                theta: b.theta,
            });
        }
        if n == steps {
            break;
        }
        let dw = match sharing {
            SharingMode::Shared => {
                let w = noise.next(dt);
                (w, w)
            }
            SharingMode::Independent => {
                let wg = noise.next(dt);
                (wg, noise.next(dt))
            }
        };
        let osc_g = Oscillator::new(current - chi, p.gamma, p.eta);
        let osc_e = Oscillator::new(current + chi, p.gamma, p.eta);
        let (next, _) =
            step_qubit_branches(&b, &osc_g, &osc_e, chi, u, dw, dt).map_err(|e| e.at(n, t))?;
        b = next;
        min_prod = min_prod
            .min(b.moments_g.uncertainty_product())
            .min(b.moments_e.uncertainty_product());
    }
    let summary = TrajectorySummary {
        steps,
        t_final: steps as f64 * dt,
        final_y: vec![b.y_g.value(), b.y_e.value()],
        min_uncertainty_product: min_prod,
    };
    Ok((Rows::Branches(rows), summary))
}

/// Trajectories 0..count in parallel; results stay in index order.
pub fn run_ensemble(
    config: &EngineConfig,
    master_seed: u64,
    count: usize,
) -> Vec<Result<TrajectoryRecord, EngineError>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| simulate_trajectory(config, master_seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bifurcation::fixed_points;
    use crate::model::{validate_params, FrequencyUnit, RawParams, ValidationOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fig1(omega: f64) -> PhysicalParams {
        let raw = RawParams {
            units: FrequencyUnit::MhzAngular,
            omega,
            gamma: 250.0,
            k0: 50.0,
            k1: 500.0,
            k3: 50.0,
            ..RawParams::default()
        };
        validate_params(&raw, ValidationOptions::default()).unwrap()
    }

    #[test]
    fn stationary_fixed_point_is_preserved_exactly_without_noise() {
        let p = fig1(3.5);
        let fp = &fixed_points(p.omega, p.gamma, p.k0, p.k1, p.k3).unwrap()[0];
        let osc = Oscillator::new(p.omega, p.gamma, p.eta);
        let law = ControlLaw::new(p.k0, p.k1, p.k3);
        let mut m = GaussianMoments::coherent(fp.x, fp.p);
        for _ in 0..1000 {
            m = step_moments(&m, &osc, law.eval(fp.x), 0.0, 0.04).unwrap().0;
        }
        assert!((m.x - fp.x).abs() < 1e-15 * 10.0);
        assert!((m.p - fp.p).abs() < 1e-14);
        assert_eq!((m.vx, m.vp, m.cxp), (0.5, 0.5, 0.0));
    }

    #[test]
    fn dw_coefficient_of_x_vanishes_at_half_variance() {
        let osc = Oscillator::new(1.0, 1.0, 1.0);
        let m = GaussianMoments::coherent(0.3, -0.2);
        let a = step_first_moments(&m, &osc, 0.0, 0.0, 0.01).unwrap().0;
        let b = step_first_moments(&m, &osc, 0.0, 0.7, 0.01).unwrap().0;
        assert_eq!(a.x, b.x);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn record_increment_definition() {
        let osc = Oscillator::new(1.0, 0.5, 1.0);
        let m = GaussianMoments::coherent(0.4, 0.0);
        let (_, dy) = step_first_moments(&m, &osc, 0.0, 0.1, 0.01).unwrap();
        assert_relative_eq!(dy, 0.4 * 0.01 + 0.1, max_relative = 1e-15);
    }

    #[test]
    fn overflow_is_reported() {
        let osc = Oscillator::new(1.0, 1.0, 1.0);
        let m = GaussianMoments::coherent(f64::MAX, f64::MAX);
        assert!(matches!(
            step_first_moments(&m, &osc, 0.0, 0.0, 10.0),
            Err(EngineError::NonFinite { .. })
        ));
    }

    #[test]
    fn coherent_variances_are_stationary() {
        let osc = Oscillator::new(2.0, 0.7, 0.6);
        let mut m = GaussianMoments::coherent(0.0, 0.0);
        for _ in 0..10_000 {
            m = step_second_moments(&m, &osc, 1e-3);
        }
        assert_eq!((m.vx, m.vp, m.cxp), (0.5, 0.5, 0.0));
    }

    #[test]
    fn excess_variance_relaxes() {
        let osc = Oscillator::new(1.3, 2.0, 1.0);
        let mut m = GaussianMoments {
            vx: 1.0,
            vp: 1.0,
            ..GaussianMoments::default()
        };
        let dt = 1e-3;
        for _ in 0..(20.0 / osc.gamma / dt) as usize {
            m = step_second_moments(&m, &osc, dt);
        }
        assert!((m.vx - 0.5).abs() < 1e-6);
        assert!((m.vp - 0.5).abs() < 1e-6);
        assert!(m.cxp.abs() < 1e-6);
    }

    #[test]
    fn unmonitored_relaxation_follows_closed_form() {
        // η → 0: the (vx + vp) sum obeys ṡ = −γs + γ, so s − 1 decays as e^{−γt}
        let osc = Oscillator::new(0.9, 1.0, 1e-12);
        let dt = 1e-4;
        let mut m = GaussianMoments {
            vx: 1.5,
            vp: 0.5,
            ..GaussianMoments::default()
        };
        let steps = 20_000;
        for _ in 0..steps {
            m = step_second_moments(&m, &osc, dt);
        }
        let t = steps as f64 * dt;
        let want = 1.0 + (-osc.gamma * t).exp();
        assert!((m.vx + m.vp - want).abs() < 1e-4);
        let mut m = GaussianMoments::coherent(0.0, 0.0);
        for _ in 0..1000 {
            m = step_second_moments(&m, &osc, dt);
        }
        assert_eq!((m.vx, m.vp, m.cxp), (0.5, 0.5, 0.0));
    }

    #[test]
    fn uncoupled_branches_coincide() {
        let osc = Oscillator::new(0.2, 1.0, 1.0);
        let mut b = BranchState::new(GaussianMoments::default(), 0.0);
        let mut noise = NoiseSource::new(3, 0, NoiseMode::Wiener);
        let law = ControlLaw::new(0.1, 2.0, 0.5);
        for _ in 0..2000 {
            let w = noise.next(0.01);
            let u = (law.eval(b.y_g.value()), law.eval(b.y_e.value()));
            b = step_qubit_branches(&b, &osc, &osc, 0.0, u, (w, w), 0.01)
                .unwrap()
                .0;
            assert_eq!(b.moments_g, b.moments_e);
            assert_eq!(b.sigma, 0.0);
            assert_eq!(b.theta, 0.0);
        }
    }

    #[test]
    fn mean_field_below_threshold() {
        let p = fig1(3.5);
        let sys = CentroidSystem::from_params(&p);
        let traj = integrate_mean_field(
            &sys,
            MeanFieldForm::Closed,
            (0.0, 0.0, 0.0),
            200.0,
            0.01,
            0.0,
        );
        let last = traj.last().unwrap();
        assert!((last.x - 0.0126).abs() < 5e-5);
        assert!((last.p - 0.450).abs() < 1e-3);
    }

    #[test]
    fn mean_field_bifurcated_positive_start() {
        let p = fig1(65.0);
        let sys = CentroidSystem::from_params(&p);
        let traj = integrate_mean_field(
            &sys,
            MeanFieldForm::Closed,
            (0.5, 0.0, 0.0),
            200.0,
            0.01,
            0.0,
        );
        let last = traj.last().unwrap();
        let upper = fixed_points(p.omega, p.gamma, p.k0, p.k1, p.k3).unwrap()[2].clone();
        assert!((last.x - upper.x).abs() < 1e-6);
        assert!((last.p - upper.p).abs() < 1e-6);
        assert_relative_eq!(
            last.p,
            p.gamma * last.x / (2.0 * p.omega),
            max_relative = 1e-6
        );
    }

    #[test]
    fn mean_field_linear_stable_decays() {
        let sys = CentroidSystem::new(1.0, 0.5, 0.0, 0.3, 0.0);
        let traj = integrate_mean_field(
            &sys,
            MeanFieldForm::Closed,
            (1.0, -1.0, 0.0),
            100.0,
            0.01,
            0.0,
        );
        let last = traj.last().unwrap();
        assert!(last.x.abs() < 1e-8 && last.p.abs() < 1e-8);
    }

    #[test]
    fn noise_free_trajectory_tracks_averaged_mean_field() {
        let p = fig1(65.0);
        let dt = 0.04;
        let mut cfg = EngineConfig::single(p.clone(), dt, 100.0);
        cfg.noise = NoiseMode::Zero;
        cfg.initial = GaussianMoments::coherent(0.5, 0.0);
        cfg.warmup_steps = 10;
        let rec = simulate_trajectory(&cfg, 1, 0).unwrap();
        let sys = CentroidSystem::from_params(&p);
        let fine = integrate_mean_field(
            &sys,
            MeanFieldForm::Averaged,
            (0.5, 0.0, 0.0),
            100.0,
            dt / 10.0,
            cfg.warmup_time(),
        );
        let Rows::Single(rows) = &rec.rows else {
            panic!()
        };
        let mut worst: f64 = 0.0;
        for r in rows.iter().step_by(25) {
            let k = (r.t / (dt / 10.0)).round() as usize;
            worst = worst
                .max((r.x - fine[k].x).abs())
                .max((r.y - fine[k].y).abs());
        }
        // one-step error of the Euler scheme: O(γ·dt) relative
        assert!(worst < 0.05, "worst {worst}");
    }

    #[test]
    fn trajectories_are_bit_reproducible() {
        let cfg = EngineConfig {
            stride: 7,
            ..EngineConfig::single(fig1(65.0), 0.04, 40.0)
        };
        let a = simulate_trajectory(&cfg, 99, 3).unwrap();
        let b = simulate_trajectory(&cfg, 99, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_trajectory(&cfg, 99, 4).unwrap();
        assert_ne!(a.rows, c.rows);
        let ens = run_ensemble(&cfg, 99, 5);
        assert_eq!(ens[3].as_ref().unwrap(), &a);
    }

    #[test]
    fn final_average_equals_record_over_time() {
        let cfg = EngineConfig {
            warmup_steps: 0,
            ..EngineConfig::single(fig1(3.5), 0.04, 80.0)
        };
        let rec = simulate_trajectory(&cfg, 5, 0).unwrap();
        let Rows::Single(rows) = &rec.rows else {
            panic!()
        };
        let last = rows.last().unwrap();
        assert_relative_eq!(
            rec.summary.final_y[0],
            last.dy_cum / rec.summary.t_final,
            max_relative = 1e-12
        );
        assert_eq!(last.y, rec.summary.final_y[0]);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = EngineConfig::single(fig1(3.5), 0.0, 1.0);
        assert!(matches!(
            simulate_trajectory(&cfg, 0, 0),
            Err(EngineError::InvalidConfig(_))
        ));
        cfg.dt = 0.01;
        cfg.stride = 0;
        assert!(matches!(
            simulate_trajectory(&cfg, 0, 0),
            Err(EngineError::InvalidConfig(_))
        ));
        cfg.stride = 1;
        cfg.model = EngineModel::Branches {
            chi: 0.1,
            detunings: vec![(0.0, 1.0), (0.0, 2.0)],
            sharing: SharingMode::Shared,
        };
        assert!(matches!(
            simulate_trajectory(&cfg, 0, 0),
            Err(EngineError::Model(_))
        ));
    }

    #[test]
    fn branch_mode_switches_detuning_and_optionally_resets() {
        let p = fig1(3.5);
        let mut cfg = EngineConfig::single(p, 0.04, 20.0);
        cfg.model = EngineModel::Branches {
            chi: 0.001,
            detunings: vec![(0.0, 0.0035), (10.0, 0.05)],
            sharing: SharingMode::Independent,
        };
        cfg.reset_at_switch = true;
        let rec = simulate_trajectory(&cfg, 2, 0).unwrap();
        let Rows::Branches(rows) = &rec.rows else {
            panic!()
        };
        let at_switch = rows.iter().find(|r| r.t >= 10.0).unwrap();
        assert_eq!(at_switch.y_g, 0.0);
        assert_eq!(at_switch.y_e, 0.0);
        cfg.reset_at_switch = false;
        let rec = simulate_trajectory(&cfg, 2, 0).unwrap();
        let Rows::Branches(rows) = &rec.rows else {
            panic!()
        };
        assert_ne!(rows.iter().find(|r| r.t >= 10.0).unwrap().y_g, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn second_moments_ignore_feedback_gains(k0 in 0.0f64..100.0, k1 in 0.0f64..1000.0, k3 in 0.0f64..100.0) {
            let base = fig1(65.0);
            let mut other = base.clone();
            other.k0 = k0 * 1e-3;
            other.k1 = k1 * 1e-3;
            other.k3 = k3 * 1e-3;
            let mk = |p: PhysicalParams| EngineConfig {
                initial: GaussianMoments { vx: 1.0, vp: 1.0, ..GaussianMoments::default() },
                ..EngineConfig::single(p, 0.04, 8.0)
            };
            let (Rows::Single(a), Rows::Single(b)) = (
                simulate_trajectory(&mk(base), 7, 0).unwrap().rows,
                simulate_trajectory(&mk(other), 7, 0).unwrap().rows,
            ) else { panic!() };
            for (ra, rb) in a.iter().zip(&b) {
                prop_assert_eq!((ra.vx, ra.vp, ra.cxp), (rb.vx, rb.vp, rb.cxp));
            }
        }

        #[test]
        fn uncertainty_bound_holds(omega in 0.0f64..3.0, gamma in 0.1f64..3.0, eta in 0.05f64..1.0, v0 in 0.5f64..3.0) {
            let osc = Oscillator::new(omega, gamma, eta);
            let mut m = GaussianMoments { vx: v0, vp: 0.25 / v0 + 0.5, ..GaussianMoments::default() };
            let dt = 1e-3 / gamma.max(omega);
            for _ in 0..5000 {
                m = step_second_moments(&m, &osc, dt);
                prop_assert!(m.uncertainty_product() >= 0.25 - UNCERTAINTY_SLACK);
            }
        }
    }
}
