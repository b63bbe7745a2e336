//! Fixed points of the centroid dynamics
//!
//! ```text
//! ẋ = −γ/2·x + ω·p
//! ṗ = −(ω − k1)·x − k3·x³ − γ/2·p + k0
//! ```
//!
//! their stability, the pitchfork point ω*, parameter sweeps, and the
//! measurement-induced dephasing rates of the two qubit branches.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::PhysicalParams;

/// Eigenvalue real parts above this are not counted as decaying.
pub const STABILITY_TOLERANCE: f64 = 1e-9;

const IMAG_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BifurcationError {
    #[error("k1 = {k1} is below gamma = {gamma}; no pitchfork point")]
    NoBifurcation { k1: f64, gamma: f64 },
    #[error("ω = 0: p cannot be eliminated; the only equilibrium is on the p axis")]
    ZeroFrequency { axis_point: FixedPoint },
    #[error("degenerate linear system: a whole line of equilibria")]
    DegenerateLine,
    #[error("sweep needs at least two grid points, got {0}")]
    GridTooSmall(usize),
    #[error("non-finite parameter {0}")]
    NonFinite(&'static str),
    #[error("not in the bifurcated regime: −ω² + k1ω − γ²/4 = {0} ≤ 0")]
    NotBifurcated(f64),
    #[error("k3 must be positive for a bifurcated branch")]
    ZeroCubicGain,
    #[error("empty branch history")]
    EmptyHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchLabel {
    Central,
    Upper,
    Lower,
}

impl BranchLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchLabel::Central => "central",
            BranchLabel::Upper => "upper",
            BranchLabel::Lower => "lower",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub x: f64,
    pub p: f64,
    pub stability: Stability,
    pub branch_label: BranchLabel,
    /// Jacobian eigenvalues as (re, im).
    pub eigenvalues: [(f64, f64); 2],
    /// Largest real part within [`STABILITY_TOLERANCE`] of zero.
    pub marginal: bool,
    /// Relative residual of the right-hand side at (x, p).
    pub residual: f64,
}

/// Centroid dynamics parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidSystem {
    pub omega: f64,
    pub gamma: f64,
    pub k0: f64,
    pub k1: f64,
    pub k3: f64,
}

impl CentroidSystem {
    pub fn new(omega: f64, gamma: f64, k0: f64, k1: f64, k3: f64) -> Self {
        CentroidSystem {
            omega,
            gamma,
            k0,
            k1,
            k3,
        }
    }

    pub fn from_params(p: &PhysicalParams) -> Self {
        CentroidSystem::new(p.omega, p.gamma, p.k0, p.k1, p.k3)
    }

    pub fn rhs(&self, x: f64, p: f64) -> (f64, f64) {
        let h = self.gamma / 2.0;
        (
            -h * x + self.omega * p,
            -(self.omega - self.k1) * x - self.k3 * x * x * x - h * p + self.k0,
        )
    }

    /// Largest ratio of |rhs component| to the sum of its term magnitudes.
    pub fn relative_residual(&self, x: f64, p: f64) -> f64 {
        let h = self.gamma / 2.0;
        let (fx, fp) = self.rhs(x, p);
        let sx = h * x.abs() + (self.omega * p).abs();
        let sp = ((self.omega - self.k1) * x).abs()
            + (self.k3 * x * x * x).abs()
            + h * p.abs()
            + self.k0.abs();
        let rel = |f: f64, s: f64| if s > 0.0 { f.abs() / s } else { f.abs() };
        rel(fx, sx).max(rel(fp, sp))
    }

    pub fn jacobian(&self, x: f64) -> [[f64; 2]; 2] {
        let h = self.gamma / 2.0;
        [
            [-h, self.omega],
            [self.k1 - self.omega - 3.0 * self.k3 * x * x, -h],
        ]
    }

    pub fn eigenvalues(&self, x: f64) -> [Complex64; 2] {
        // trace −γ, so λ = −γ/2 ± √(ω(k1 − ω − 3k3x²))
        let disc = Complex64::new(
            self.omega * (self.k1 - self.omega - 3.0 * self.k3 * x * x),
            0.0,
        );
        let root = disc.sqrt();
        let centre = Complex64::new(-self.gamma / 2.0, 0.0);
        [centre + root, centre - root]
    }

    fn classify(&self, x: f64, p: f64, label: BranchLabel) -> FixedPoint {
        let ev = self.eigenvalues(x);
        let max_re = ev[0].re.max(ev[1].re);
        let marginal = max_re.abs() <= STABILITY_TOLERANCE;
        let stability = if max_re < -STABILITY_TOLERANCE {
            Stability::Stable
        } else {
            Stability::Unstable
        };
        FixedPoint {
            x,
            p,
            stability,
            branch_label: label,
            eigenvalues: [(ev[0].re, ev[0].im), (ev[1].re, ev[1].im)],
            marginal,
            residual: self.relative_residual(x, p),
        }
    }

    /// Equilibrium at ω = 0, where x = 0 and p = 2k0/γ.
    pub fn axis_fixed_point(&self) -> FixedPoint {
        let sys = CentroidSystem {
            omega: 0.0,
            ..*self
        };
        sys.classify(0.0, 2.0 * self.k0 / self.gamma, BranchLabel::Central)
    }

    /// D(ω) = ω² − k1ω + γ²/4.
    pub fn detuning_polynomial(&self) -> f64 {
        quadratic_form(self.omega, self.k1, self.gamma)
    }
}

pub(crate) fn quadratic_form(omega: f64, k1: f64, gamma: f64) -> f64 {
    omega * omega - k1 * omega + gamma * gamma / 4.0
}

/// ω* = (k1 − √(k1² − γ²))/2.
pub fn bifurcation_point(k1: f64, gamma: f64) -> Result<f64, BifurcationError> {
    if !k1.is_finite() || !gamma.is_finite() {
        return Err(BifurcationError::NonFinite("k1/gamma"));
    }
    if k1 < gamma {
        return Err(BifurcationError::NoBifurcation { k1, gamma });
    }
    let disc = (k1 * k1 - gamma * gamma).max(0.0);
    // (k1 − √disc)/2 = γ²/(2(k1 + √disc)) avoids cancellation for k1 ≫ γ
    Ok(gamma * gamma / (2.0 * (k1 + disc.sqrt())))
}

pub fn fixed_points(
    omega: f64,
    gamma: f64,
    k0: f64,
    k1: f64,
    k3: f64,
) -> Result<Vec<FixedPoint>, BifurcationError> {
    for (name, v) in [
        ("omega", omega),
        ("gamma", gamma),
        ("k0", k0),
        ("k1", k1),
        ("k3", k3),
    ] {
        if !v.is_finite() {
            return Err(BifurcationError::NonFinite(name));
        }
    }
    let sys = CentroidSystem::new(omega, gamma, k0, k1, k3);
    if omega == 0.0 {
        return Err(BifurcationError::ZeroFrequency {
            axis_point: sys.axis_fixed_point(),
        });
    }
    // with p = γx/(2ω): k3ω·x³ + D·x − k0ω = 0
    let d = sys.detuning_polynomial();
    let xs: Vec<f64> = if k3 == 0.0 {
        if d == 0.0 {
            if k0 == 0.0 {
                return Err(BifurcationError::DegenerateLine);
            }
            Vec::new()
        } else {
            vec![k0 * omega / d]
        }
    } else {
        depressed_cubic_real_roots(d / (k3 * omega), -k0 / k3)
    };
    let labels: &[BranchLabel] = match xs.len() {
        1 => &[BranchLabel::Central],
        2 => &[BranchLabel::Lower, BranchLabel::Upper],
        _ => &[BranchLabel::Lower, BranchLabel::Central, BranchLabel::Upper],
    };
    Ok(xs
        .iter()
        .zip(labels)
        .map(|(&x, &label)| sys.classify(x, gamma * x / (2.0 * omega), label))
        .collect())
}

/// Real roots of x³ + a·x + b = 0, ascending, Newton-polished.
pub fn depressed_cubic_real_roots(a: f64, b: f64) -> Vec<f64> {
    let cr = |v: Complex64| v.powf(1.0 / 3.0);
    let disc = Complex64::new(b * b / 4.0 + a * a * a / 27.0, 0.0).sqrt();
    let half = Complex64::new(-b / 2.0, 0.0);
    let mut c = half + disc;
    if c.norm() < 1e-300 {
        c = half - disc;
    }
    let candidates: Vec<Complex64> = if c.norm() < 1e-300 {
        vec![Complex64::new(0.0, 0.0); 3]
    } else {
        let u = cr(c);
        let v = -a / (3.0 * u);
        let w = Complex64::new(-0.5, 3f64.sqrt() / 2.0);
        let w2 = w * w;
        vec![u + v, w * u + w2 * v, w2 * u + w * v]
    };

    let mut roots: Vec<f64> = candidates
        .into_iter()
        .filter(|z| z.im.abs() <= IMAG_TOLERANCE * z.re.abs().max(1.0))
        .map(|z| polish_cubic_root(z.re, a, b))
        .collect();
    roots.sort_by(|p, q| p.total_cmp(q));
    roots.dedup_by(|p, q| (*p - *q).abs() <= IMAG_TOLERANCE * p.abs().max(1.0));
    roots
}

fn polish_cubic_root(mut x: f64, a: f64, b: f64) -> f64 {
    for _ in 0..60 {
        let f = x * x * x + a * x + b;
        let scale = (x * x * x).abs() + (a * x).abs() + b.abs();
        if f.abs() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        let df = 3.0 * x * x + a;
        if df == 0.0 {
            break;
        }
        let step = f / df;
        x -= step;
        if step.abs() <= 1e-16 * x.abs() {
            break;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSlice {
    pub omega: f64,
    pub points: Vec<FixedPoint>,
}

impl SweepSlice {
    pub fn stable_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| p.stability == Stability::Stable)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityTransition {
    pub omega_before: f64,
    pub omega_after: f64,
    pub stable_before: usize,
    pub stable_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub slices: Vec<SweepSlice>,
    pub transitions: Vec<StabilityTransition>,
}

impl BifurcationDiagram {
    pub fn first_transition(&self, from: usize, to: usize) -> Option<StabilityTransition> {
        self.transitions
            .iter()
            .copied()
            .find(|t| t.stable_before == from && t.stable_after == to)
    }

    pub fn grid_spacing(&self) -> f64 {
        match self.slices.as_slice() {
            [a, b, ..] => b.omega - a.omega,
            _ => 0.0,
        }
    }
}

/// Fixed points over a uniform ω grid, with stable-count transitions marked.
pub fn sweep_bifurcation(
    gamma: f64,
    k0: f64,
    k1: f64,
    k3: f64,
    omega_range: (f64, f64),
    grid: usize,
) -> Result<BifurcationDiagram, BifurcationError> {
    if grid < 2 {
        return Err(BifurcationError::GridTooSmall(grid));
    }
    let (lo, hi) = omega_range;
    let step = (hi - lo) / (grid - 1) as f64;
    let slices = (0..grid)
        .map(|i| {
            let omega = if i + 1 == grid {
                hi
            } else {
                lo + step * i as f64
            };
            fixed_points(omega, gamma, k0, k1, k3).map(|points| SweepSlice { omega, points })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let transitions = slices
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (w[0].stable_count(), w[1].stable_count());
            (a != b).then_some(StabilityTransition {
                omega_before: w[0].omega,
                omega_after: w[1].omega,
                stable_before: a,
                stable_after: b,
            })
        })
        .collect();
    Ok(BifurcationDiagram {
        slices,
        transitions,
    })
}

/// Γ = χ(x_e·p_g − p_e·x_g).
pub fn dephasing_rate(x_e: f64, p_e: f64, x_g: f64, p_g: f64, chi: f64) -> f64 {
    chi * (x_e * p_g - p_e * x_g)
}

/// Centroids ((x_g, p_g), (x_e, p_e)).
pub type BranchPoints = ((f64, f64), (f64, f64));

/// Constants entering the two-branch readout analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    pub gamma: f64,
    pub k0: f64,
    pub k1: f64,
    pub k3: f64,
    pub chi: f64,
}

impl ReadoutParams {
    pub fn from_params(p: &PhysicalParams) -> Self {
        ReadoutParams {
            gamma: p.gamma,
            k0: p.k0,
            k1: p.k1,
            k3: p.k3,
            chi: p.chi,
        }
    }

    fn omega_star(&self) -> Result<f64, BifurcationError> {
        bifurcation_point(self.k1, self.gamma)
    }

    fn d(&self, w: f64) -> f64 {
        quadratic_form(w, self.k1, self.gamma)
    }

    /// Centroid below ω*: x = k0ω/D(ω), p = (γ/2ω)x = k0(γ/2)/D(ω).
    pub fn central_point(&self, w: f64) -> (f64, f64) {
        let d = self.d(w);
        (self.k0 * w / d, self.k0 * self.gamma / 2.0 / d)
    }

    /// Positive bifurcated centroid above ω* (k0 neglected).
    pub fn branch_point(&self, w: f64) -> Result<(f64, f64), BifurcationError> {
        let r = -self.d(w);
        if r <= 0.0 {
            return Err(BifurcationError::NotBifurcated(r));
        }
        if self.k3 <= 0.0 {
            return Err(BifurcationError::ZeroCubicGain);
        }
        let x = (r / (self.k3 * w)).sqrt();
        Ok((x, self.gamma * x / (2.0 * w)))
    }

    /// Branch frequencies (ω_g, ω_e) = (ω* − 3χ, ω* − χ).
    pub fn weak_omegas(&self) -> Result<(f64, f64), BifurcationError> {
        let ws = self.omega_star()?;
        Ok((ws - 3.0 * self.chi, ws - self.chi))
    }

    /// Branch frequencies (ω̃_g, ω̃_e) = (ω* − χ, ω* + χ).
    pub fn strong_omegas(&self) -> Result<(f64, f64), BifurcationError> {
        let ws = self.omega_star()?;
        Ok((ws - self.chi, ws + self.chi))
    }

    /// Analytic stationary centroids ((x_g, p_g), (x_e, p_e)), weak drive.
    pub fn weak_points(&self) -> Result<BranchPoints, BifurcationError> {
        let (wg, we) = self.weak_omegas()?;
        Ok((self.central_point(wg), self.central_point(we)))
    }

    /// Analytic stationary centroids, strong drive (e on the positive branch).
    pub fn strong_points(&self) -> Result<BranchPoints, BifurcationError> {
        let (wg, we) = self.strong_omegas()?;
        Ok((self.central_point(wg), self.branch_point(we)?))
    }
}

/// Γ_weak = γk0²χ² / (D(ω_g)·D(ω_e)).
pub fn dephasing_weak(params: &ReadoutParams) -> Result<f64, BifurcationError> {
    let (wg, we) = params.weak_omegas()?;
    if params.chi == 0.0 {
        return Ok(0.0);
    }
    let ReadoutParams { gamma, k0, chi, .. } = *params;
    Ok(gamma * k0 * k0 * chi * chi / (params.d(wg) * params.d(we)))
}

/// Γ_strong = (k0γχ²/√(k3ω̃_e³))·√(−D(ω̃_e)) / D(ω̃_g).
pub fn dephasing_strong(params: &ReadoutParams) -> Result<f64, BifurcationError> {
    let (wg, we) = params.strong_omegas()?;
    if params.chi == 0.0 {
        return Ok(0.0);
    }
    let ReadoutParams {
        gamma, k0, k3, chi, ..
    } = *params;
    let r = -params.d(we);
    if r <= 0.0 {
        return Err(BifurcationError::NotBifurcated(r));
    }
    if k3 <= 0.0 {
        return Err(BifurcationError::ZeroCubicGain);
    }
    Ok(k0 * gamma * chi * chi / (k3 * we * we * we).sqrt() * r.sqrt() / params.d(wg))
}

/// |⟨α|β⟩| for coherent states with centroids (x, p) = √2(Re α, Im α).
pub fn coherent_overlap(x_a: f64, p_a: f64, x_b: f64, p_b: f64) -> f64 {
    let dx = x_a - x_b;
    let dp = p_a - p_b;
    (-(dx * dx + dp * dp) / 4.0).exp()
}

/// One sample of a two-branch run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSample {
    pub t: f64,
    pub x_g: f64,
    pub p_g: f64,
    pub x_e: f64,
    pub p_e: f64,
    pub sigma: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherencePoint {
    pub t: f64,
    /// |ρ_eg(t)| / |ρ_eg(0)|
    pub magnitude: f64,
    /// ω_q·t + Θ(t)
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DephasingReport {
    pub gamma_weak: f64,
    pub gamma_strong: f64,
    pub gamma_measured_weak: Option<f64>,
    pub gamma_measured_strong: Option<f64>,
    pub coherence: Vec<CoherencePoint>,
}

pub fn coherence_factor(
    history: &[BranchSample],
    gamma2: f64,
    omega_q: f64,
) -> Result<Vec<CoherencePoint>, BifurcationError> {
    if history.is_empty() {
        return Err(BifurcationError::EmptyHistory);
    }
    Ok(history
        .iter()
        .map(|s| CoherencePoint {
            t: s.t,
            magnitude: (-gamma2 * s.t - s.sigma).exp()
                / coherent_overlap(s.x_g, s.p_g, s.x_e, s.p_e),
            phase: omega_q * s.t + s.theta,
        })
        .collect())
}

/// Ordinary least-squares slope of y against t.
pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sty, mut stt) = (0.0, 0.0);
    for &(t, y) in points {
        sty += (t - mt) * (y - my);
        stt += (t - mt) * (t - mt);
    }
    (stt > 0.0).then(|| sty / stt)
}

/// Σ-slope over the final half of [start + transient, end].
pub fn fit_sigma_slope(
    history: &[BranchSample],
    start: f64,
    end: f64,
    transient: f64,
) -> Option<f64> {
    let lo = start + transient;
    if lo >= end {
        return None;
    }
    let from = lo + 0.5 * (end - lo);
    let pts: Vec<(f64, f64)> = history
        .iter()
        .filter(|s| s.t >= from && s.t <= end)
        .map(|s| (s.t, s.sigma))
        .collect();
    least_squares_slope(&pts)
}

/// Analytic rates plus Σ-slope fits on either side of a drive switch.
pub fn dephasing_report(
    history: &[BranchSample],
    params: &ReadoutParams,
    switch_time: f64,
    gamma2: f64,
    omega_q: f64,
) -> Result<DephasingReport, BifurcationError> {
    let coherence = coherence_factor(history, gamma2, omega_q)?;
    let t_end = history.last().map(|s| s.t).unwrap_or(0.0);
    let transient = 5.0 / params.gamma;
    Ok(DephasingReport {
        gamma_weak: dephasing_weak(params)?,
        gamma_strong: dephasing_strong(params)?,
        gamma_measured_weak: fit_sigma_slope(history, history[0].t, switch_time, transient),
        gamma_measured_strong: fit_sigma_slope(history, switch_time, t_end, transient),
        coherence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrequencyUnit;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const G: f64 = 250.0;
    const K0: f64 = 50.0;
    const K1: f64 = 500.0;
    const K3: f64 = 50.0;

    /// Bisection on f over [lo, hi]; independent of the Cardano path.
    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) * f(hi) <= 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn omega_star_values() {
        let ws = bifurcation_point(K1, G).unwrap();
        assert!((ws - 33.494).abs() < 1e-3);
        assert_eq!(bifurcation_point(7.0, 7.0).unwrap(), 3.5);
        let u = FrequencyUnit::MhzCyclic;
        let ws = bifurcation_point(u.to_internal(200.0), u.to_internal(100.0)).unwrap();
        assert!((u.from_internal(ws) - 13.397).abs() < 1e-3);
        assert!(matches!(
            bifurcation_point(1.0, 2.0),
            Err(BifurcationError::NoBifurcation { .. })
        ));
    }

    #[test]
    fn omega_star_matches_stability_change() {
        let ws = bifurcation_point(K1, G).unwrap();
        let below = fixed_points(ws * 0.999, G, 0.0, K1, K3).unwrap();
        let above = fixed_points(ws * 1.001, G, 0.0, K1, K3).unwrap();
        assert_eq!(
            below
                .iter()
                .filter(|p| p.stability == Stability::Stable)
                .count(),
            1
        );
        assert_eq!(
            above
                .iter()
                .filter(|p| p.stability == Stability::Stable)
                .count(),
            2
        );
    }

    #[test]
    fn single_stable_point_below_threshold() {
        let fps = fixed_points(3.5, G, K0, K1, K3).unwrap();
        assert_eq!(fps.len(), 1);
        let fp = &fps[0];
        assert_eq!(fp.stability, Stability::Stable);
        assert_eq!(fp.branch_label, BranchLabel::Central);
        assert!((fp.x - 0.0126).abs() < 5e-5);
        assert!((fp.p - 0.450).abs() < 1e-3);
        assert!(fp.residual < 1e-9);
    }

    #[test]
    fn bifurcated_roots_match_bisection() {
        let fps = fixed_points(65.0, G, K0, K1, K3).unwrap();
        assert_eq!(fps.len(), 3);
        let sys = CentroidSystem::new(65.0, G, K0, K1, K3);
        let d = sys.detuning_polynomial();
        let f = |x: f64| K3 * 65.0 * x * x * x + d * x - K0 * 65.0;
        let lower = bisect(f, -3.0, -1.0);
        let central = bisect(f, -1.0, 0.0);
        let upper = bisect(f, 1.0, 3.0);
        for (fp, want) in fps.iter().zip([lower, central, upper]) {
            assert_relative_eq!(fp.x, want, max_relative = 1e-12);
            assert!(fp.residual < 1e-9);
        }
        assert_eq!(fps[0].stability, Stability::Stable);
        assert_eq!(fps[1].stability, Stability::Unstable);
        assert_eq!(fps[2].stability, Stability::Stable);
        // k0 shifts the pair off ±1.973 by about k0ω/(2|D|) ≈ 0.128
        let symmetric = (-d / (K3 * 65.0)).sqrt();
        assert!((symmetric - 1.973).abs() < 1e-3);
        assert!((fps[2].x - symmetric - 0.128).abs() < 0.02);
        assert!((fps[0].x + symmetric - 0.128).abs() < 0.02);
    }

    #[test]
    fn symmetric_pitchfork_without_bias() {
        let w = 65.0;
        let fps = fixed_points(w, G, 0.0, K1, K3).unwrap();
        let amp = ((-w * w + K1 * w - G * G / 4.0) / (K3 * w)).sqrt();
        assert_eq!(fps.len(), 3);
        assert_relative_eq!(fps[0].x, -amp, max_relative = 1e-12);
        assert!(fps[1].x.abs() < 1e-12);
        assert_relative_eq!(fps[2].x, amp, max_relative = 1e-12);
        assert_eq!(fps[1].stability, Stability::Unstable);
    }

    #[test]
    fn zero_frequency_reports_axis_point() {
        match fixed_points(0.0, G, K0, K1, K3) {
            Err(BifurcationError::ZeroFrequency { axis_point }) => {
                assert_eq!(axis_point.x, 0.0);
                assert_relative_eq!(axis_point.p, 2.0 * K0 / G);
                assert_eq!(axis_point.stability, Stability::Stable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_special_case() {
        let fps = fixed_points(3.5, G, K0, K1, 0.0).unwrap();
        assert_eq!(fps.len(), 1);
        assert_relative_eq!(fps[0].x, K0 * 3.5 / (3.5 * 3.5 - K1 * 3.5 + G * G / 4.0));
    }

    #[test]
    fn fig1_sweep_transition_is_a_saddle_node() {
        // with k0 > 0 the pitchfork is imperfect: the second stable branch
        // appears where the cubic discriminant changes sign, not at ω*
        let diag = sweep_bifurcation(G, K0, K1, K3, (1.0, 100.0), 991).unwrap();
        let tr = diag.first_transition(1, 2).unwrap();
        let sys = |w: f64| CentroidSystem::new(w, G, K0, K1, K3);
        // 4a³ + 27b² = 0 for x³ + ax + b
        let disc = |w: f64| {
            let a = sys(w).detuning_polynomial() / (K3 * w);
            let b = -K0 / K3;
            4.0 * a * a * a + 27.0 * b * b
        };
        let sn = bisect(disc, 34.0, 60.0);
        assert!(
            tr.omega_before <= sn && sn <= tr.omega_after,
            "{tr:?} vs {sn}"
        );
        assert!((sn - 43.2).abs() < 0.1);

        let diag0 = sweep_bifurcation(G, 0.0, K1, K3, (1.0, 100.0), 991).unwrap();
        let tr0 = diag0.first_transition(1, 2).unwrap();
        let ws = bifurcation_point(K1, G).unwrap();
        assert!(tr0.omega_before <= ws && ws <= tr0.omega_after);
    }

    #[test]
    fn unbiased_sweep_is_mirror_symmetric() {
        let diag = sweep_bifurcation(G, 0.0, K1, K3, (1.0, 100.0), 50).unwrap();
        for s in &diag.slices {
            let mut xs: Vec<f64> = s.points.iter().map(|p| p.x).collect();
            let mut mirrored: Vec<f64> = xs.iter().map(|x| -x).collect();
            xs.sort_by(f64::total_cmp);
            mirrored.sort_by(f64::total_cmp);
            for (a, b) in xs.iter().zip(&mirrored) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn doubling_k3_scales_branches() {
        let a = fixed_points(65.0, G, 0.0, K1, K3).unwrap();
        let b = fixed_points(65.0, G, 0.0, K1, 2.0 * K3).unwrap();
        assert_relative_eq!(b[2].x, a[2].x / 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn sweep_rejects_small_grid() {
        assert_eq!(
            sweep_bifurcation(G, K0, K1, K3, (1.0, 2.0), 1),
            Err(BifurcationError::GridTooSmall(1))
        );
    }

    fn cqed(k3_mhz: f64) -> ReadoutParams {
        let u = FrequencyUnit::MhzCyclic;
        ReadoutParams {
            gamma: u.to_internal(100.0),
            k0: u.to_internal(20.0),
            k1: u.to_internal(200.0),
            k3: u.to_internal(k3_mhz),
            chi: u.to_internal(4.0),
        }
    }

    #[test]
    fn dephasing_rate_trivial_cases() {
        assert_eq!(dephasing_rate(1.0, 2.0, 3.0, 4.0, 0.0), 0.0);
        assert_eq!(dephasing_rate(1.5, -0.3, 1.5, -0.3, 2.0), 0.0);
    }

    #[test]
    fn closed_forms_equal_rate_at_analytic_points() {
        for k3 in [2.0, 10.0] {
            let p = cqed(k3);
            let ((xg, pg), (xe, pe)) = p.weak_points().unwrap();
            assert_relative_eq!(
                dephasing_weak(&p).unwrap(),
                dephasing_rate(xe, pe, xg, pg, p.chi),
                max_relative = 1e-12
            );
            let ((xg, pg), (xe, pe)) = p.strong_points().unwrap();
            assert_relative_eq!(
                dephasing_strong(&p).unwrap(),
                dephasing_rate(xe, pe, xg, pg, p.chi),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn circuit_qed_rates() {
        let u = FrequencyUnit::MhzCyclic;
        let weak = u.from_internal(dephasing_weak(&cqed(2.0)).unwrap());
        let strong2 = u.from_internal(dephasing_strong(&cqed(2.0)).unwrap());
        let strong10 = u.from_internal(dephasing_strong(&cqed(10.0)).unwrap());
        assert!((weak / 0.36 - 1.0).abs() < 0.2, "{weak}");
        assert!((strong2 / 10.22 - 1.0).abs() < 0.2, "{strong2}");
        assert!((strong10 / 4.57 - 1.0).abs() < 0.2, "{strong10}");
        assert_relative_eq!(strong2 / strong10, 5f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn uncoupled_rates_vanish() {
        let mut p = cqed(2.0);
        p.chi = 0.0;
        assert_eq!(dephasing_weak(&p).unwrap(), 0.0);
        assert_eq!(dephasing_strong(&p).unwrap(), 0.0);
    }

    #[test]
    fn overlap_of_unit_displacement() {
        // |α| = 1 → |x + ip| = √2
        let v = coherent_overlap(0.0, 0.0, 2f64.sqrt(), 0.0);
        assert_relative_eq!(v, (-0.5f64).exp(), max_relative = 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn identical_branches_keep_full_coherence() {
        let hist: Vec<BranchSample> = (0..10)
            .map(|i| BranchSample {
                t: i as f64,
                x_g: 0.3,
                p_g: 0.1,
                x_e: 0.3,
                p_e: 0.1,
                sigma: 0.0,
                theta: 0.0,
            })
            .collect();
        for c in coherence_factor(&hist, 0.0, 1.0).unwrap() {
            assert_eq!(c.magnitude, 1.0);
        }
        assert_eq!(
            coherence_factor(&[], 0.0, 1.0),
            Err(BifurcationError::EmptyHistory)
        );
    }

    #[test]
    fn slope_fit_recovers_line() {
        let hist: Vec<BranchSample> = (0..=200)
            .map(|i| {
                let t = i as f64 * 0.5;
                BranchSample {
                    t,
                    x_g: 0.0,
                    p_g: 0.0,
                    x_e: 0.0,
                    p_e: 0.0,
                    sigma: if t < 50.0 {
                        0.01 * t
                    } else {
                        0.5 + 0.2 * (t - 50.0)
                    },
                    theta: 0.0,
                }
            })
            .collect();
        assert_relative_eq!(
            fit_sigma_slope(&hist, 0.0, 50.0, 5.0).unwrap(),
            0.01,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            fit_sigma_slope(&hist, 50.0, 100.0, 5.0).unwrap(),
            0.2,
            max_relative = 1e-9
        );
    }

    proptest! {
        #[test]
        fn stability_count_across_threshold(
            gamma in 0.05f64..5.0,
            ratio in 1.05f64..6.0,
            k3 in 0.01f64..5.0,
            frac in 0.05f64..0.95,
        ) {
            let k1 = gamma * ratio;
            let ws = bifurcation_point(k1, gamma).unwrap();
            let upper = k1 - ws; // second root of D(ω)
            let below = ws * frac;
            let above = ws + (upper - ws) * frac;
            let fb = fixed_points(below, gamma, 0.0, k1, k3).unwrap();
            let fa = fixed_points(above, gamma, 0.0, k1, k3).unwrap();
            let count = |v: &[FixedPoint], s: Stability| v.iter().filter(|p| p.stability == s).count();
            prop_assert_eq!(count(&fb, Stability::Stable), 1);
            prop_assert_eq!(count(&fa, Stability::Stable), 2);
            prop_assert_eq!(count(&fa, Stability::Unstable), 1);
            for fp in fb.iter().chain(&fa) {
                prop_assert!(fp.residual < 1e-9);
                let j = CentroidSystem::new(if fb.contains(fp) { below } else { above }, gamma, 0.0, k1, k3).jacobian(fp.x);
                let trace = j[0][0] + j[1][1];
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                prop_assert!(trace < 0.0);
                if fp.stability == Stability::Stable {
                    prop_assert!(det > 0.0);
                }
            }
        }

        #[test]
        fn branch_amplitude_vanishes_at_threshold(gamma in 0.05f64..5.0, ratio in 1.05f64..6.0, k3 in 0.01f64..5.0) {
            let k1 = gamma * ratio;
            let ws = bifurcation_point(k1, gamma).unwrap();
            let amp = |w: f64| ((-w * w + k1 * w - gamma * gamma / 4.0) / (k3 * w)).max(0.0).sqrt();
            prop_assert!(amp(ws * (1.0 + 1e-8)) < 1e-3 * (1.0 + amp(ws * 1.5)));
        }

        #[test]
        fn cubic_roots_are_roots(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            for x in depressed_cubic_real_roots(a, b) {
                let scale = (x * x * x).abs() + (a * x).abs() + b.abs();
                prop_assert!((x * x * x + a * x + b).abs() <= 1e-12 * scale.max(1e-300));
            }
            // a cubic has at least one real root
            prop_assert!(!depressed_cubic_real_roots(a, b).is_empty());
        }
    }
}
