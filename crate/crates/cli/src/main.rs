use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qfeedback::bifurcation::{fixed_points, sweep_bifurcation, BifurcationError};
use qfeedback::experiments::{
    checks, emit_report, load_config, preset, readout_fidelity, run_scenario, DatasetBundle,
    EngineChoice, ExperimentError, Overrides, ScenarioConfig,
};
use qfeedback::moments::SharingMode;
use qfeedback::output::fmt_f64;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qfeedback",
    version,
    about = "Feedback-stabilized oscillator readout simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario ensemble and write trajectory, summary and manifest files.
    Simulate(RunArgs),
    /// Tabulate fixed points over a range of oscillator frequencies.
    Sweep(SweepArgs),
    /// Print the fixed points of the averaged centroid equations.
    FixedPoints(FixedPointArgs),
    /// Run the truncated Fock-space density-matrix oracle.
    Oracle(RunArgs),
    /// Estimate single-shot readout fidelity from independent branch records.
    Readout(ReadoutArgs),
    /// Run one or more scenarios and write the report tables.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Source {
    /// JSON scenario file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Moments,
    Fock,
    Both,
}

impl From<EngineArg> for EngineChoice {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Moments => EngineChoice::Moments,
            EngineArg::Fock => EngineChoice::Fock,
            EngineArg::Both => EngineChoice::Both,
        }
    }
}

#[derive(Args, Clone)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trajectories: Option<usize>,
    /// Output directory (default: out/<scenario name>).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Step in ns.
    #[arg(long)]
    dt: Option<f64>,
    /// Final time in ns.
    #[arg(long)]
    t_final: Option<f64>,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            trajectories: self.trajectories,
            out_dir: self.out_dir.clone(),
            engine: self.engine.map(Into::into),
            dt: self.dt,
            t_final: self.t_final,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Evaluate self-consistency checks; exit 3 if any fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    /// Lower end of the ω range, in the scenario's units.
    #[arg(long)]
    omega_min: f64,
    /// Upper end of the ω range, in the scenario's units.
    #[arg(long)]
    omega_max: f64,
    #[arg(long, default_value_t = 501)]
    grid: usize,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixedPointArgs {
    #[command(flatten)]
    source: Source,
    /// Oscillator frequency in the scenario's units (default: the configured ω).
    #[arg(long)]
    omega: Option<f64>,
    /// Exit 3 unless every residual is below 1e-9.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct ReadoutArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Decision time in ns (default: final time).
    #[arg(long)]
    decision_time: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Exit 3 if the fidelity is below this value.
    #[arg(long)]
    check: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Built-in scenarios to include (repeatable).
    #[arg(long)]
    preset: Vec<String>,
    /// Scenario files to include (repeatable).
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long, default_value = "out/report")]
    out_dir: PathBuf,
}

enum Failure {
    Config(String),
    Numeric(String),
    Check,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

impl From<BifurcationError> for Failure {
    fn from(e: BifurcationError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numeric(e.to_string())
    }
}

fn load(source: &Source) -> Result<ScenarioConfig, Failure> {
    match (&source.config, &source.preset) {
        (Some(path), _) => Ok(load_config(path)?),
        (None, Some(name)) => Ok(preset(name)?),
        (None, None) => Err(Failure::Config(
            "one of --config or --preset is required".into(),
        )),
    }
}

fn prepare(source: &Source, overrides: &OverrideArgs) -> Result<ScenarioConfig, Failure> {
    let mut cfg = load(source)?;
    overrides.overrides().apply(&mut cfg);
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("out").join(&cfg.name));
    }
    Ok(cfg)
}

fn report_run(bundle: &DatasetBundle) {
    let m = &bundle.manifest;
    println!(
        "{}: {} moment and {} oracle trajectories, {} steps of {} ns",
        bundle.scenario.config.name,
        bundle.records.len(),
        bundle.oracle_records.len(),
        m.steps,
        m.dt
    );
    for f in &bundle.failures {
        eprintln!(
            "warning: trajectory {} ({}) aborted: {}",
            f.index, f.engine, f.error
        );
    }
    if let Some(dir) = &bundle.output_dir {
        println!("wrote {}", dir.display());
    }
}

fn run_checks(bundle: &DatasetBundle) -> Result<(), Failure> {
    let mut ok = true;
    for c in checks(bundle)? {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn simulate(args: &RunArgs, force_fock: bool) -> Result<(), Failure> {
    let mut cfg = prepare(&args.source, &args.overrides)?;
    if force_fock && cfg.engine == EngineChoice::Moments {
        cfg.engine = EngineChoice::Fock;
    }
    let bundle = run_scenario(&cfg)?;
    report_run(&bundle);
    if args.check {
        run_checks(&bundle)?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let cfg = load(&args.source)?;
    let p = cfg.resolve()?.params;
    let u = cfg.params.units;
    let diag = sweep_bifurcation(
        p.gamma,
        p.k0,
        p.k1,
        p.k3,
        (u.to_internal(args.omega_min), u.to_internal(args.omega_max)),
        args.grid,
    )?;
    let out: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Failure::Numeric(e.to_string());
    w.write_record(["omega", "x_fp", "p_fp", "stability", "branch_label"])
        .map_err(io)?;
    for s in &diag.slices {
        for fp in &s.points {
            w.write_record([
                fmt_f64(u.from_internal(s.omega)),
                fmt_f64(fp.x),
                fmt_f64(fp.p),
                fp.stability.as_str().into(),
                fp.branch_label.as_str().into(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    for t in &diag.transitions {
        eprintln!(
            "stable count {} -> {} between omega = {} and {}",
            t.stable_before,
            t.stable_after,
            u.from_internal(t.omega_before),
            u.from_internal(t.omega_after)
        );
    }
    Ok(())
}

fn fixed(args: &FixedPointArgs) -> Result<(), Failure> {
    let cfg = load(&args.source)?;
    let p = cfg.resolve()?.params;
    let u = cfg.params.units;
    let omega = args.omega.map(|w| u.to_internal(w)).unwrap_or(p.omega);
    let points = fixed_points(omega, p.gamma, p.k0, p.k1, p.k3)?;
    println!("x,p,stability,branch_label,residual");
    let mut ok = true;
    for fp in &points {
        println!(
            "{},{},{},{},{}",
            fmt_f64(fp.x),
            fmt_f64(fp.p),
            fp.stability.as_str(),
            fp.branch_label.as_str(),
            fmt_f64(fp.residual)
        );
        ok &= fp.residual < 1e-9;
    }
    if args.check && !ok {
        return Err(Failure::Check);
    }
    Ok(())
}

fn readout(args: &ReadoutArgs) -> Result<(), Failure> {
    let mut cfg = prepare(&args.source, &args.overrides)?;
    if cfg.qubit.is_none() {
        return Err(Failure::Config(
            "readout needs a scenario with a qubit".into(),
        ));
    }
    cfg.sharing = SharingMode::Independent;
    let bundle = run_scenario(&cfg)?;
    report_run(&bundle);
    let (g, e) = bundle.y_series();
    let t = args
        .decision_time
        .or_else(|| g.times.last().copied())
        .ok_or(Failure::Numeric("empty ensemble".into()))?;
    let f = readout_fidelity(&g, &e, t, args.threshold)?;
    println!(
        "fidelity {:.4} at t = {} ns (threshold {:.6}, P(miss) {:.4}, P(false alarm) {:.4})",
        f.fidelity, f.decision_time, f.threshold, f.p_miss, f.p_false_alarm
    );
    match args.check {
        Some(min) if f.fidelity < min => Err(Failure::Check),
        _ => Ok(()),
    }
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let mut configs = Vec::new();
    for name in &args.preset {
        configs.push(preset(name)?);
    }
    for path in &args.config {
        configs.push(load_config(path)?);
    }
    let mut bundles = Vec::new();
    for mut cfg in configs {
        if let Some(s) = args.seed {
            cfg.ensemble.master_seed = s;
        }
        if let Some(n) = args.trajectories {
            cfg.ensemble.count = n;
        }
        cfg.output_dir = Some(args.out_dir.join(&cfg.name));
        let bundle = run_scenario(&cfg)?;
        report_run(&bundle);
        bundles.push(bundle);
    }
    let files = emit_report(&bundles, &args.out_dir)?;
    for f in files.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, false),
        Command::Oracle(a) => simulate(a, true),
        Command::Sweep(a) => sweep(a),
        Command::FixedPoints(a) => fixed(a),
        Command::Readout(a) => readout(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Check) => {
            eprintln!("check failed");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
