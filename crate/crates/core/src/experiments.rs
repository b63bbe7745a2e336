//! Scenario configuration, built-in presets, ensemble orchestration,
//! readout fidelity and report emission.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bifurcation::{
    bifurcation_point, dephasing_report, fixed_points, sweep_bifurcation, BranchSample,
    ReadoutParams,
};
use crate::fock::{
    run_oracle, suggest_truncation, FockError, HamiltonianMode, OracleConfig, OracleRecord,
};
use crate::model::{
    validate_params, DriveSwitch, FrequencyUnit, InitialQubit, ModelError, PhysicalParams,
    QubitScenario, RawParams, ValidationOptions,
};
use crate::moments::{
    run_ensemble, EngineConfig, EngineError, EngineModel, GaussianMoments, NoiseMode, Rows,
    SharingMode, TrajectoryRecord, UNCERTAINTY_SLACK,
};
use crate::output::{fmt_f64, write_table, OutputError};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TRUNCATION: usize = 40;
pub const PRESET_NAMES: [&str; 5] = [
    "pitchfork-a",
    "pitchfork-b",
    "atom-cavity-weak",
    "atom-cavity-strong",
    "circuit-qed",
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no datasets to report")]
    NoDatasets,
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("decision time {time} lies outside [{start}, {end}]")]
    DecisionTimeOutOfRange { time: f64, start: f64, end: f64 },
    #[error("ensembles are on different time grids")]
    GridMismatch,
    #[error("every trajectory failed; first error: {0}")]
    AllFailed(String),
}

impl ExperimentError {
    /// True for errors in the configuration rather than the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ExperimentError::Parse { .. }
                | ExperimentError::Config(_)
                | ExperimentError::UnknownPreset(_)
                | ExperimentError::NoDatasets
                | ExperimentError::Model(_)
                | ExperimentError::Engine(EngineError::InvalidConfig(_))
                | ExperimentError::Engine(EngineError::Model(_))
                | ExperimentError::Fock(FockError::MissingQubitParams(_))
                | ExperimentError::Fock(FockError::TooSmall(_))
                | ExperimentError::Fock(FockError::UnsupportedInitialState(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Pitchfork,
    AtomCavity,
    CircuitQed,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    #[default]
    Moments,
    Fock,
    Both,
}

/// Qubit coupling, quoted in `units`; switch times are in ns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum QubitSpec {
    /// Absolute frequencies and a drive-frequency schedule.
    Frequencies {
        #[serde(default)]
        units: FrequencyUnit,
        omega_q: f64,
        omega_o: f64,
        g: f64,
        omega_d_schedule: Vec<DriveSwitch>,
        #[serde(default = "InitialQubit::plus")]
        initial_qubit: InitialQubit,
    },
    /// Qubit-oscillator detuning and a fixed oscillator-drive detuning.
    Detunings {
        #[serde(default)]
        units: FrequencyUnit,
        delta_qo: f64,
        g: f64,
        delta_od: f64,
        #[serde(default = "InitialQubit::plus")]
        initial_qubit: InitialQubit,
    },
}

impl QubitSpec {
    /// The equivalent scenario in internal units. A detuning-only spec is
    /// placed in the frame where ω_o = 0.
    pub fn scenario(&self) -> QubitScenario {
        match self {
            QubitSpec::Frequencies {
                units,
                omega_q,
                omega_o,
                g,
                omega_d_schedule,
                initial_qubit,
            } => QubitScenario {
                omega_q: units.to_internal(*omega_q),
                omega_o: units.to_internal(*omega_o),
                g: units.to_internal(*g),
                omega_d_schedule: omega_d_schedule
                    .iter()
                    .map(|s| DriveSwitch {
                        time: s.time,
                        omega_d: units.to_internal(s.omega_d),
                    })
                    .collect(),
                initial_qubit: *initial_qubit,
            },
            QubitSpec::Detunings {
                units,
                delta_qo,
                g,
                delta_od,
                initial_qubit,
            } => QubitScenario {
                omega_q: units.to_internal(*delta_qo),
                omega_o: 0.0,
                g: units.to_internal(*g),
                omega_d_schedule: vec![DriveSwitch {
                    time: 0.0,
                    omega_d: -units.to_internal(*delta_od),
                }],
                initial_qubit: *initial_qubit,
            },
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_warmup() -> usize {
    10
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integration {
    /// Step in ns; defaults to min(10⁻²/γ, 10⁻²/k1).
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_final: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Display time unit for figure tables, in ns.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    pub count: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockSettings {
    /// Truncation; suggested from the analytic fixed points when absent.
    #[serde(default)]
    pub n: Option<usize>,
    /// Hamiltonian for qubit scenarios (dispersive or full_jc).
    #[serde(default)]
    pub mode: Option<HamiltonianMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub kind: ScenarioKind,
    pub params: RawParams,
    #[serde(default)]
    pub qubit: Option<QubitSpec>,
    pub integration: Integration,
    pub ensemble: Ensemble,
    #[serde(default)]
    pub sharing: SharingMode,
    #[serde(default)]
    pub engine: EngineChoice,
    #[serde(default)]
    pub fock: FockSettings,
    #[serde(default)]
    pub initial: GaussianMoments,
    #[serde(default)]
    pub reset_at_switch: bool,
    #[serde(default)]
    pub noise: NoiseMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Parses a JSON scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ExperimentError> {
    let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(ExperimentError::Config(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ExperimentError> {
    parse_config(&fs::read_to_string(path)?)
}

const PAPER_INITIAL: GaussianMoments = GaussianMoments {
    x: 0.0,
    p: 0.0,
    vx: 1.0,
    vp: 1.0,
    cxp: 0.0,
};

fn pitchfork(name: &str, omega: f64, count: usize) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        kind: ScenarioKind::Pitchfork,
        params: RawParams {
            units: FrequencyUnit::MhzAngular,
            omega,
            gamma: 250.0,
            k0: 50.0,
            k1: 500.0,
            k3: 50.0,
            ..RawParams::default()
        },
        qubit: None,
        integration: Integration {
            dt: None,
            t_final: 800.0,
            stride: 100,
            warmup_steps: 10,
            tau: 2.0,
        },
        ensemble: Ensemble {
            count,
            master_seed: 2024,
        },
        sharing: SharingMode::Independent,
        engine: EngineChoice::Moments,
        fock: FockSettings::default(),
        initial: PAPER_INITIAL,
        reset_at_switch: false,
        noise: NoiseMode::Wiener,
        output_dir: None,
    }
}

fn atom_cavity(name: &str, delta_od: f64) -> ScenarioConfig {
    let u = FrequencyUnit::MhzCyclic;
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        kind: ScenarioKind::AtomCavity,
        params: RawParams {
            units: u,
            gamma: 1.4,
            k0: 1.0,
            k1: 6.0,
            k3: 1.0,
            ..RawParams::default()
        },
        qubit: Some(QubitSpec::Detunings {
            units: u,
            delta_qo: 35.0,
            g: 8.0,
            delta_od,
            initial_qubit: InitialQubit::plus(),
        }),
        integration: Integration {
            dt: None,
            t_final: 8000.0,
            stride: 100,
            // about 2.3/γ; shorter warmups let early record noise throw the
            // negative-frequency branch out of its finite basin
            warmup_steps: 1000,
            tau: 160.0,
        },
        ensemble: Ensemble {
            count: 200,
            master_seed: 2024,
        },
        sharing: SharingMode::Independent,
        engine: EngineChoice::Moments,
        fock: FockSettings::default(),
        initial: PAPER_INITIAL,
        reset_at_switch: false,
        noise: NoiseMode::Wiener,
        output_dir: None,
    }
}

fn circuit_qed() -> ScenarioConfig {
    let u = FrequencyUnit::MhzCyclic;
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "circuit-qed".to_string(),
        kind: ScenarioKind::CircuitQed,
        params: RawParams {
            units: u,
            gamma: 100.0,
            k0: 20.0,
            k1: 200.0,
            k3: 2.0,
            ..RawParams::default()
        },
        qubit: Some(QubitSpec::Frequencies {
            units: u,
            omega_q: 5100.0,
            omega_o: 5000.0,
            g: 20.0,
            omega_d_schedule: vec![
                DriveSwitch {
                    time: 0.0,
                    omega_d: 4995.0,
                },
                DriveSwitch {
                    time: 50.0,
                    omega_d: 4987.0,
                },
            ],
            initial_qubit: InitialQubit::plus(),
        }),
        integration: Integration {
            dt: None,
            t_final: 200.0,
            stride: 10,
            warmup_steps: 10,
            tau: 0.5,
        },
        ensemble: Ensemble {
            count: 50,
            master_seed: 2024,
        },
        sharing: SharingMode::Shared,
        engine: EngineChoice::Moments,
        fock: FockSettings::default(),
        initial: PAPER_INITIAL,
        reset_at_switch: false,
        noise: NoiseMode::Wiener,
        output_dir: None,
    }
}

pub fn preset(name: &str) -> Result<ScenarioConfig, ExperimentError> {
    match name {
        "pitchfork-a" => Ok(pitchfork(name, 3.5, 1)),
        "pitchfork-b" => Ok(pitchfork(name, 65.0, 4)),
        "atom-cavity-weak" => Ok(atom_cavity(name, -3.57)),
        "atom-cavity-strong" => Ok(atom_cavity(name, 0.083)),
        "circuit-qed" => Ok(circuit_qed()),
        other => Err(ExperimentError::UnknownPreset(other.to_string())),
    }
}

/// A configuration with everything converted to internal units.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScenario {
    pub config: ScenarioConfig,
    pub params: PhysicalParams,
    pub engine: EngineConfig,
    pub qubit: Option<QubitScenario>,
}

impl ScenarioConfig {
    pub fn resolve(&self) -> Result<ResolvedScenario, ExperimentError> {
        if self.ensemble.count == 0 {
            return Err(ExperimentError::Config(
                "ensemble count must be at least 1".into(),
            ));
        }
        let options = ValidationOptions {
            require_bifurcation: self.kind != ScenarioKind::Custom,
            readout_regimes: self.qubit.is_some(),
        };
        let mut params = validate_params(&self.params, options)?;
        let qubit = self.qubit.as_ref().map(QubitSpec::scenario);
        let model = match &qubit {
            None => EngineModel::Single,
            Some(q) => {
                let sched = q.reduce()?;
                params.chi = sched.chi;
                params.delta_od = sched.detunings[0].1;
                params.flags = crate::model::smallness_flags(&params, options);
                EngineModel::from_schedule(&sched, self.sharing)
            }
        };
        let dt = self.integration.dt.unwrap_or_else(|| params.default_dt());
        let engine = EngineConfig {
            params: params.clone(),
            model,
            initial: self.initial,
            dt,
            t_final: self.integration.t_final,
            stride: self.integration.stride,
            warmup_steps: self.integration.warmup_steps,
            reset_at_switch: self.reset_at_switch,
            noise: self.noise,
        };
        engine.validate()?;
        Ok(ResolvedScenario {
            config: self.clone(),
            params,
            engine,
            qubit,
        })
    }
}

impl ResolvedScenario {
    /// Truncation for the oracle: configured, or large enough for the
    /// analytic fixed points of every branch frequency in the schedule.
    pub fn truncation(&self) -> usize {
        if let Some(n) = self.config.fock.n {
            return n;
        }
        let p = &self.params;
        let omegas: Vec<f64> = match &self.engine.model {
            EngineModel::Single => vec![p.omega],
            EngineModel::Branches { chi, detunings, .. } => detunings
                .iter()
                .flat_map(|d| [d.1 - chi, d.1 + chi])
                .collect(),
        };
        let photons = omegas
            .iter()
            .filter_map(|&w| fixed_points(w, p.gamma, p.k0, p.k1, p.k3).ok())
            .flatten()
            .map(|fp| (fp.x * fp.x + fp.p * fp.p) / 2.0)
            .fold(0.0, f64::max);
        suggest_truncation(photons).max(DEFAULT_TRUNCATION)
    }

    pub fn oracle_config(&self) -> OracleConfig {
        let mode = match (&self.qubit, self.config.fock.mode) {
            (None, _) => HamiltonianMode::Single,
            (Some(_), Some(m)) => m,
            (Some(_), None) => HamiltonianMode::Dispersive,
        };
        OracleConfig {
            engine: self.engine.clone(),
            n: self.truncation(),
            mode,
            qubit: self.qubit.clone(),
        }
    }

    /// Drive detunings placing both branches below ω* (weak) or straddling
    /// it (strong), for comparison with configured values.
    pub fn drive_cross_check(&self) -> Option<DriveCrossCheck> {
        let q = self.qubit.as_ref()?;
        let ws = bifurcation_point(self.params.k1, self.params.gamma).ok()?;
        let chi = self.params.chi;
        let d = crate::model::drive_schedule(q.omega_o, ws, chi);
        Some(DriveCrossCheck {
            omega_star: ws,
            chi,
            weak_delta_od: q.omega_o - d.weak,
            strong_delta_od: q.omega_o - d.strong,
            configured_delta_od: q
                .omega_d_schedule
                .iter()
                .map(|s| q.omega_o - s.omega_d)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveCrossCheck {
    pub omega_star: f64,
    pub chi: f64,
    pub weak_delta_od: f64,
    pub strong_delta_od: f64,
    pub configured_delta_od: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantChecks {
    pub min_uncertainty_product: f64,
    pub uncertainty_bound_holds: bool,
    pub failed_trajectories: usize,
    /// Oracle only: largest |tr ρ − 1| before renormalization.
    pub max_trace_drift: Option<f64>,
    pub max_tail_mass: Option<f64>,
    /// Oracle diagnostics. The density-matrix Euler step loses positivity
    /// at first order in dt, so these are reported rather than enforced.
    pub oracle_min_uncertainty_product: Option<f64>,
    pub oracle_min_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFailure {
    pub index: u64,
    pub engine: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub scenario: ScenarioConfig,
    pub params: PhysicalParams,
    pub dt: f64,
    pub steps: usize,
    pub master_seed: u64,
    pub trajectory_indices: Vec<u64>,
    pub fock_truncation: Option<usize>,
    pub drive_cross_check: Option<DriveCrossCheck>,
    pub invariants: InvariantChecks,
    pub failures: Vec<TrajectoryFailure>,
    pub files: Vec<String>,
}

/// Per-column mean and sample standard deviation at each recorded time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl EnsembleSummary {
    pub fn from_rows(columns: &[&str], runs: &[Vec<Vec<f64>>]) -> Result<Self, ExperimentError> {
        let first = runs.first().ok_or(ExperimentError::EmptyEnsemble)?;
        if runs.iter().any(|r| r.len() != first.len()) {
            return Err(ExperimentError::GridMismatch);
        }
        let n = runs.len() as f64;
        let width = columns.len();
        let mut mean = Vec::with_capacity(first.len());
        let mut std = Vec::with_capacity(first.len());
        for k in 0..first.len() {
            let mut m = vec![0.0; width - 1];
            for r in runs {
                for c in 1..width {
                    m[c - 1] += r[k][c];
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            let mut s = vec![0.0; width - 1];
            if runs.len() > 1 {
                for r in runs {
                    for c in 1..width {
                        s[c - 1] += (r[k][c] - m[c - 1]).powi(2);
                    }
                }
                s.iter_mut().for_each(|v| *v = (*v / (n - 1.0)).sqrt());
            }
            mean.push(m);
            std.push(s);
        }
        Ok(EnsembleSummary {
            columns: columns[1..].iter().map(|c| c.to_string()).collect(),
            times: first.iter().map(|r| r[0]).collect(),
            mean,
            std,
        })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), OutputError> {
        let mut header = vec!["t".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.times.iter().enumerate().map(|(k, &t)| {
            let mut row = vec![t];
            for c in 0..self.columns.len() {
                row.push(self.mean[k][c]);
                row.push(self.std[k][c]);
            }
            row
        });
        write_table(w, &header_refs, rows)
    }
}

/// Everything one scenario run produced.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub scenario: ResolvedScenario,
    pub output_dir: Option<PathBuf>,
    pub records: Vec<TrajectoryRecord>,
    pub oracle_records: Vec<OracleRecord>,
    pub failures: Vec<TrajectoryFailure>,
    pub summary: EnsembleSummary,
    pub manifest: Manifest,
}

impl DatasetBundle {
    /// Record averages per trajectory: (Y_g series, Y_e series) in branch
    /// mode, or the single Y series twice.
    pub fn y_series(&self) -> (EnsembleSeries, EnsembleSeries) {
        let times = self
            .records
            .first()
            .map(|r| r.rows.times())
            .unwrap_or_default();
        let mut g = Vec::new();
        let mut e = Vec::new();
        for r in &self.records {
            match &r.rows {
                Rows::Single(rows) => {
                    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
                    g.push(y.clone());
                    e.push(y);
                }
                Rows::Branches(rows) => {
                    g.push(rows.iter().map(|r| r.y_g).collect());
                    e.push(rows.iter().map(|r| r.y_e).collect());
                }
            }
        }
        (
            EnsembleSeries {
                times: times.clone(),
                values: g,
            },
            EnsembleSeries { times, values: e },
        )
    }

    pub fn branch_histories(&self) -> Vec<Vec<BranchSample>> {
        self.records
            .iter()
            .filter_map(|r| match &r.rows {
                Rows::Branches(rows) => Some(rows.iter().map(|r| r.sample()).collect()),
                Rows::Single(_) => None,
            })
            .collect()
    }
}

/// Configuration overrides applied on top of a preset or file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trajectories: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub engine: Option<EngineChoice>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(s) = self.seed {
            cfg.ensemble.master_seed = s;
        }
        if let Some(n) = self.trajectories {
            cfg.ensemble.count = n;
        }
        if let Some(d) = &self.out_dir {
            cfg.output_dir = Some(d.clone());
        }
        if let Some(e) = self.engine {
            cfg.engine = e;
        }
        if let Some(dt) = self.dt {
            cfg.integration.dt = Some(dt);
        }
        if let Some(t) = self.t_final {
            cfg.integration.t_final = t;
        }
    }
}

/// Runs the configured ensemble and, if an output directory is set,
/// writes per-trajectory CSVs, `summary.csv` and `manifest.json`.
pub fn run_scenario(config: &ScenarioConfig) -> Result<DatasetBundle, ExperimentError> {
    let scenario = config.resolve()?;
    let ec = &scenario.engine;
    let seed = config.ensemble.master_seed;
    let count = config.ensemble.count;
    let mut failures = Vec::new();

    let mut records = Vec::new();
    if config.engine != EngineChoice::Fock {
        for (i, r) in run_ensemble(ec, seed, count).into_iter().enumerate() {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => failures.push(TrajectoryFailure {
                    index: i as u64,
                    engine: "moments".into(),
                    error: e.to_string(),
                }),
            }
        }
    }
    let mut oracle_records = Vec::new();
    let mut truncation = None;
    if config.engine != EngineChoice::Moments {
        let oc = scenario.oracle_config();
        truncation = Some(oc.n);
        let results: Vec<_> = (0..count as u64)
            .into_par_iter()
            .map(|i| run_oracle(&oc, seed, i))
            .collect();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(rec) => oracle_records.push(rec),
                Err(e) => failures.push(TrajectoryFailure {
                    index: i as u64,
                    engine: "fock".into(),
                    error: e.to_string(),
                }),
            }
        }
    }
    if records.is_empty() && oracle_records.is_empty() {
        let first = failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_default();
        return Err(ExperimentError::AllFailed(first));
    }

    let summary = if !records.is_empty() {
        let runs: Vec<_> = records.iter().map(|r| r.rows.value_rows()).collect();
        EnsembleSummary::from_rows(records[0].rows.columns(), &runs)?
    } else {
        let runs: Vec<_> = oracle_records.iter().map(|r| r.rows.value_rows()).collect();
        EnsembleSummary::from_rows(oracle_records[0].rows.columns(), &runs)?
    };

    let min_prod = records
        .iter()
        .map(|r| r.summary.min_uncertainty_product)
        .fold(f64::INFINITY, f64::min);
    let oracle_stat = |f: &dyn Fn(&OracleRecord) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
        (!oracle_records.is_empty()).then(|| oracle_records.iter().map(f).fold(init, pick))
    };
    let invariants = InvariantChecks {
        min_uncertainty_product: min_prod,
        uncertainty_bound_holds: min_prod >= 0.25 - UNCERTAINTY_SLACK,
        failed_trajectories: failures.len(),
        max_trace_drift: oracle_stat(&|r| r.max_trace_drift, 0.0, f64::max),
        max_tail_mass: oracle_stat(
            &|r| r.tail_mass.iter().copied().fold(0.0, f64::max),
            0.0,
            f64::max,
        ),
        oracle_min_uncertainty_product: oracle_stat(
            &|r| r.summary.min_uncertainty_product,
            f64::INFINITY,
            f64::min,
        ),
        oracle_min_eigenvalue: oracle_stat(&|r| r.final_min_eigenvalue, f64::INFINITY, f64::min),
    };

    let mut files = Vec::new();
    for r in &records {
        files.push(format!("trajectories/trajectory_{:05}.csv", r.index));
    }
    for r in &oracle_records {
        files.push(format!("trajectories/oracle_{:05}.csv", r.index));
    }
    files.push("summary.csv".into());

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: config.clone(),
        params: scenario.params.clone(),
        dt: ec.dt,
        steps: ec.steps(),
        master_seed: seed,
        trajectory_indices: (0..count as u64).collect(),
        fock_truncation: truncation,
        drive_cross_check: scenario.drive_cross_check(),
        invariants,
        failures: failures.clone(),
        files,
    };

    let bundle = DatasetBundle {
        output_dir: config.output_dir.clone(),
        scenario,
        records,
        oracle_records,
        failures,
        summary,
        manifest,
    };
    if let Some(dir) = &bundle.output_dir {
        write_bundle(&bundle, dir)?;
    }
    Ok(bundle)
}

fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<(), ExperimentError> {
    let traj = dir.join("trajectories");
    fs::create_dir_all(&traj)?;
    for r in &bundle.records {
        r.write_csv(fs::File::create(
            traj.join(format!("trajectory_{:05}.csv", r.index)),
        )?)?;
    }
    for r in &bundle.oracle_records {
        r.write_csv(fs::File::create(
            traj.join(format!("oracle_{:05}.csv", r.index)),
        )?)?;
    }
    bundle
        .summary
        .write_csv(fs::File::create(dir.join("summary.csv"))?)?;
    let text = serde_json::to_string_pretty(&bundle.manifest)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// One scalar series per trajectory on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl EnsembleSeries {
    /// Grid index nearest to `t`; times up to half a grid cell beyond
    /// either end snap to that end.
    pub fn index_at(&self, t: f64) -> Result<usize, ExperimentError> {
        let (start, end) = match (self.times.first(), self.times.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(ExperimentError::EmptyEnsemble),
        };
        let n = self.times.len();
        let (lo_cell, hi_cell) = if n > 1 {
            (self.times[1] - start, end - self.times[n - 2])
        } else {
            (0.0, 0.0)
        };
        if !(t >= start - 0.5 * lo_cell && t <= end + 0.5 * hi_cell) {
            return Err(ExperimentError::DecisionTimeOutOfRange {
                time: t,
                start,
                end,
            });
        }
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return Ok(0);
        }
        if k == self.times.len() || (t - self.times[k - 1]) <= (self.times[k] - t) {
            Ok(k - 1)
        } else {
            Ok(k)
        }
    }

    pub fn at(&self, t: f64) -> Result<Vec<f64>, ExperimentError> {
        let k = self.index_at(t)?;
        Ok(self.values.iter().map(|v| v[k]).collect())
    }

    pub fn mean_at(&self, t: f64) -> Result<f64, ExperimentError> {
        let v = self.at(t)?;
        if v.is_empty() {
            return Err(ExperimentError::EmptyEnsemble);
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityResult {
    pub fidelity: f64,
    pub threshold: f64,
    pub p_miss: f64,
    pub p_false_alarm: f64,
    pub decision_time: f64,
}

/// 1 − (P(miss) + P(false alarm))/2 for a threshold test on Y at
/// `decision_time`. The threshold defaults to the midpoint of the two
/// ensemble means; "e" is declared on the side of the e-ensemble mean.
pub fn readout_fidelity(
    traj_g: &EnsembleSeries,
    traj_e: &EnsembleSeries,
    decision_time: f64,
    threshold: Option<f64>,
) -> Result<FidelityResult, ExperimentError> {
    if traj_g.values.is_empty() || traj_e.values.is_empty() {
        return Err(ExperimentError::EmptyEnsemble);
    }
    if traj_g.times != traj_e.times {
        return Err(ExperimentError::GridMismatch);
    }
    let g = traj_g.at(decision_time)?;
    let e = traj_e.at(decision_time)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mg, me) = (mean(&g), mean(&e));
    let th = threshold.unwrap_or(0.5 * (mg + me));
    let says_e = |y: f64| if me >= mg { y > th } else { y < th };
    let p_miss = e.iter().filter(|&&y| !says_e(y)).count() as f64 / e.len() as f64;
    let p_fa = g.iter().filter(|&&y| says_e(y)).count() as f64 / g.len() as f64;
    Ok(FidelityResult {
        fidelity: 1.0 - 0.5 * (p_miss + p_fa),
        threshold: th,
        p_miss,
        p_false_alarm: p_fa,
        decision_time,
    })
}

/// Fitted and analytic dephasing rates for one branch ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DephasingFit {
    pub gamma_weak: f64,
    pub gamma_strong: f64,
    pub measured_weak: Option<f64>,
    pub measured_strong: Option<f64>,
}

/// Ensemble-mean Σ-slopes before and after the first drive switch.
pub fn fit_dephasing(bundle: &DatasetBundle) -> Result<Option<DephasingFit>, ExperimentError> {
    let EngineModel::Branches { detunings, .. } = &bundle.scenario.engine.model else {
        return Ok(None);
    };
    let Some(&(switch, _)) = detunings.get(1) else {
        return Ok(None);
    };
    let histories = bundle.branch_histories();
    let first = histories.first().ok_or(ExperimentError::EmptyEnsemble)?;
    let n = histories.len() as f64;
    let mean: Vec<BranchSample> = (0..first.len())
        .map(|k| {
            let mut s = first[k];
            s.sigma = histories.iter().map(|h| h[k].sigma).sum::<f64>() / n;
            s.theta = histories.iter().map(|h| h[k].theta).sum::<f64>() / n;
            s
        })
        .collect();
    let p = &bundle.scenario.params;
    let readout = ReadoutParams::from_params(p);
    let rep = dephasing_report(&mean, &readout, switch, p.gamma2, 0.0)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    Ok(Some(DephasingFit {
        gamma_weak: rep.gamma_weak,
        gamma_strong: rep.gamma_strong,
        measured_weak: rep.gamma_measured_weak,
        measured_strong: rep.gamma_measured_strong,
    }))
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes bifurcation diagrams, dephasing fits, a fidelity table and
/// long-format figure tables (t/τ against Y) for the given datasets.
pub fn emit_report(
    datasets: &[DatasetBundle],
    out_dir: &Path,
) -> Result<ReportFiles, ExperimentError> {
    if datasets.is_empty() {
        return Err(ExperimentError::NoDatasets);
    }
    // compute everything before touching the filesystem
    let mut diagrams = Vec::new();
    let mut dephasing = Vec::new();
    let mut fidelity = Vec::new();
    for d in datasets {
        let p = &d.scenario.params;
        let name = &d.scenario.config.name;
        if d.scenario.config.kind == ScenarioKind::Pitchfork {
            let u = d.scenario.config.params.units;
            let diag = sweep_bifurcation(
                p.gamma,
                p.k0,
                p.k1,
                p.k3,
                (u.to_internal(1.0), u.to_internal(100.0)),
                991,
            )
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
            diagrams.push((name.clone(), diag));
        }
        if let Some(fit) = fit_dephasing(d)? {
            dephasing.push((name.clone(), fit));
        }
        if let EngineModel::Branches { .. } = d.scenario.engine.model {
            let (g, e) = d.y_series();
            if let Some(&t) = g.times.last() {
                fidelity.push((name.clone(), readout_fidelity(&g, &e, t, None)?));
            }
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (name, diag) in &diagrams {
        let path = out_dir.join(format!("bifurcation_{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(OutputError::from)?;
        w.write_record(["omega", "x_fp", "p_fp", "stability", "branch_label"])
            .map_err(OutputError::from)?;
        for s in &diag.slices {
            for fp in &s.points {
                w.write_record([
                    fmt_f64(s.omega),
                    fmt_f64(fp.x),
                    fmt_f64(fp.p),
                    fp.stability.as_str().to_string(),
                    fp.branch_label.as_str().to_string(),
                ])
                .map_err(OutputError::from)?;
            }
        }
        w.flush()?;
        files.push(path);
    }
    if !dephasing.is_empty() {
        let path = out_dir.join("dephasing.csv");
        let mut w = csv::Writer::from_path(&path).map_err(OutputError::from)?;
        w.write_record([
            "scenario",
            "gamma_weak",
            "gamma_measured_weak",
            "gamma_strong",
            "gamma_measured_strong",
        ])
        .map_err(OutputError::from)?;
        for (name, f) in &dephasing {
            w.write_record([
                name.clone(),
                fmt_f64(f.gamma_weak),
                opt(f.measured_weak),
                fmt_f64(f.gamma_strong),
                opt(f.measured_strong),
            ])
            .map_err(OutputError::from)?;
        }
        w.flush()?;
        files.push(path);
    }
    if !fidelity.is_empty() {
        let path = out_dir.join("fidelity.csv");
        let mut w = csv::Writer::from_path(&path).map_err(OutputError::from)?;
        w.write_record(["scenario", "decision_time", "threshold", "fidelity"])
            .map_err(OutputError::from)?;
        for (name, f) in &fidelity {
            w.write_record([
                name.clone(),
                fmt_f64(f.decision_time),
                fmt_f64(f.threshold),
                fmt_f64(f.fidelity),
            ])
            .map_err(OutputError::from)?;
        }
        w.flush()?;
        files.push(path);
    }
    for d in datasets {
        let name = &d.scenario.config.name;
        let tau = d.scenario.config.integration.tau;
        let path = out_dir.join(format!("figure_{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(OutputError::from)?;
        w.write_record(["scenario", "trajectory", "series", "t_over_tau", "value"])
            .map_err(OutputError::from)?;
        for r in &d.records {
            let mut emit = |series: &str, t: f64, v: f64| {
                w.write_record([
                    name.clone(),
                    r.index.to_string(),
                    series.to_string(),
                    fmt_f64(t / tau),
                    fmt_f64(v),
                ])
            };
            match &r.rows {
                Rows::Single(rows) => {
                    for row in rows {
                        emit("Y", row.t, row.y).map_err(OutputError::from)?;
                    }
                }
                Rows::Branches(rows) => {
                    for row in rows {
                        emit("Y_g", row.t, row.y_g).map_err(OutputError::from)?;
                        emit("Y_e", row.t, row.y_e).map_err(OutputError::from)?;
                        emit("sigma", row.t, row.sigma).map_err(OutputError::from)?;
                    }
                }
            }
        }
        w.flush()?;
        files.push(path);
    }
    Ok(ReportFiles { files })
}

/// Outcome of one `--check` assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Self-consistency checks for a finished run: invariants for every
/// scenario, plus analytic comparisons for the preset kinds.
pub fn checks(bundle: &DatasetBundle) -> Result<Vec<Check>, ExperimentError> {
    let inv = &bundle.manifest.invariants;
    let mut out = Vec::new();
    if !bundle.records.is_empty() {
        out.push(check(
            "uncertainty_bound",
            inv.uncertainty_bound_holds,
            format!("min V_x V_p - C^2 = {:.6e}", inv.min_uncertainty_product),
        ));
    }
    out.push(check(
        "no_aborts",
        bundle.failures.is_empty(),
        format!("{} failed trajectories", bundle.failures.len()),
    ));
    if let Some(tail) = inv.max_tail_mass {
        out.push(check(
            "fock_tail_mass",
            tail < crate::fock::TAIL_TOLERANCE,
            format!("max tail mass {tail:.3e}"),
        ));
    }
    let p = &bundle.scenario.params;
    let (g, e) = bundle.y_series();
    let Some(&t_end) = g.times.last() else {
        return Ok(out);
    };
    match bundle.scenario.config.kind {
        ScenarioKind::Pitchfork => {
            let stable: Vec<f64> = fixed_points(p.omega, p.gamma, p.k0, p.k1, p.k3)
                .map_err(|err| ExperimentError::Config(err.to_string()))?
                .into_iter()
                .filter(|fp| fp.stability == crate::bifurcation::Stability::Stable)
                .map(|fp| fp.x)
                .collect();
            let worst = g
                .at(t_end)?
                .iter()
                .map(|y| {
                    stable
                        .iter()
                        .map(|x| (y - x).abs())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max);
            let tol = if stable.len() > 1 { 0.1 } else { 0.05 };
            out.push(check(
                "final_y_near_stable_point",
                worst <= tol,
                format!("largest distance {worst:.4} (tolerance {tol}) to {stable:?}"),
            ));
        }
        ScenarioKind::AtomCavity => {
            let sep = (e.mean_at(t_end)? - g.mean_at(t_end)?).abs();
            let readout = ReadoutParams::from_params(p);
            let weak = readout
                .weak_points()
                .ok()
                .map(|((xg, _), (xe, _))| (xe - xg).abs());
            let cc = bundle.scenario.drive_cross_check();
            let is_weak = cc
                .as_ref()
                .map(|c| {
                    (c.configured_delta_od[0] - c.weak_delta_od).abs()
                        < (c.configured_delta_od[0] - c.strong_delta_od).abs()
                })
                .unwrap_or(true);
            if is_weak {
                out.push(check(
                    "weak_drive_branches_indistinguishable",
                    sep < 0.05,
                    format!("|<Y_e> - <Y_g>| = {sep:.4}"),
                ));
            } else if let Some(w) = weak {
                out.push(check(
                    "strong_drive_branches_separated",
                    sep > 10.0 * w,
                    format!("|<Y_e> - <Y_g>| = {sep:.4}, analytic weak separation {w:.4}"),
                ));
            }
        }
        ScenarioKind::CircuitQed => {
            if let EngineModel::Branches { detunings, .. } = &bundle.scenario.engine.model {
                if let Some(&(t_switch, _)) = detunings.get(1) {
                    let t_after = (t_switch + 150.0).min(t_end);
                    let before = (e.mean_at(t_switch)? - g.mean_at(t_switch)?).abs();
                    let after = (e.mean_at(t_after)? - g.mean_at(t_after)?).abs();
                    out.push(check(
                        "separation_jump",
                        after >= 10.0 * before,
                        format!("separation {before:.4} at switch, {after:.4} at t = {t_after} ns"),
                    ));
                }
            }
        }
        ScenarioKind::Custom => {}
    }
    Ok(out)
}
