//! Command-line front end: closed-loop simulation, trace monitoring and program dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::controller::{
    calibrate_noise_std, check_satisfaction, simulate, ControlError, Controller, NoiseKind, NoiseModel,
    SatisfactionReport, Trajectory,
};
use crate::encoder::{matrix_to_csv, EncodedProgram, Softening};
use crate::formula::{parse_formula, IntervalUnits, ParseOptions, PredicateMap};
use crate::robustness::{boolean_sat, dasr, dsasr, eval_predicates, space_robustness, LatestK1, Signal};
use crate::scenario::{NoiseSpec, Region, ResolvedScenario, Scenario, ScenarioError};

pub const EXIT_SATISFIED: u8 = 0;
pub const EXIT_UNSATISFIED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "stlmpc", version, about = "STL control synthesis by linear programming in a receding-horizon loop")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed loop of a scenario and write trajectory, summary and plot data.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a formula on a recorded trace at one step.
    Monitor(MonitorArgs),
    /// Write the programs assembled at one step, with their E, Q and R matrices.
    DumpLp {
        scenario: PathBuf,
        /// Step at which to assemble; earlier steps are simulated first.
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the scenario with intervals in steps and every default spelled out.
    Normalize { scenario: PathBuf },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Noise seed, overriding the scenario.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the scenario, then to `out`.
    #[arg(long, env = "STLMPC_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Relax the satisfaction rows with a penalized slack.
    #[arg(long, overrides_with = "no_soften")]
    pub soften: bool,
    #[arg(long, overrides_with = "soften")]
    pub no_soften: bool,
    /// Solver feasibility and optimality tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Slack penalty used with softening.
    #[arg(long)]
    pub penalty: Option<f64>,
    /// Number of closed-loop steps, overriding the scenario.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Calibrate Gaussian state noise to this signal-to-noise ratio.
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct MonitorArgs {
    /// CSV with a `k` column and either `z1, z2, ...` or `x1, x2, ...` columns.
    pub trace: PathBuf,
    #[arg(long)]
    pub formula: String,
    #[arg(long)]
    pub at: i64,
    /// Scenario providing the predicate map for state traces and the sampling period.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Read interval bounds as seconds.
    #[arg(long)]
    pub seconds: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            _ => EXIT_INVALID,
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Infeasible { .. } | ControlError::Unbounded { .. } | ControlError::Lp(_) => {
                CliError::Infeasible(e.to_string())
            }
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { context: format!("writing {}", path.display()), source })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io { context: format!("creating {}", path.display()), source })
}

/// Runs one command; the text meant for stdout is appended to `out`.
pub fn run(cli: &Cli, out: &mut String) -> Result<u8, CliError> {
    match &cli.command {
        Command::Simulate { scenario, run } => run_simulate(scenario, run, out),
        Command::Monitor(args) => run_monitor(args, out),
        Command::DumpLp { scenario, step, run } => run_dump_lp(scenario, *step, run, out),
        Command::Normalize { scenario } => {
            let sc = Scenario::load(scenario)?;
            out.push_str(&sc.normalized()?.to_toml_string()?);
            Ok(EXIT_SATISFIED)
        }
    }
}

/// Loads a scenario and applies command-line overrides.
pub fn load_scenario(path: &Path, args: &RunArgs) -> Result<(Scenario, ResolvedScenario), CliError> {
    let mut sc = Scenario::load(path)?;
    if args.soften {
        sc.controller.soften = true;
    }
    if args.no_soften {
        sc.controller.soften = false;
    }
    if let Some(t) = args.tol {
        sc.controller.tolerance = t;
    }
    if let Some(p) = args.penalty {
        sc.controller.penalty = Some(p);
    }
    if let Some(s) = args.steps {
        sc.controller.steps = s;
    }
    if let Some(seed) = args.seed {
        sc.noise.seed = seed;
    }
    if let Some(db) = args.snr_db {
        sc.noise.kind = crate::scenario::NoiseName::Gaussian;
        sc.noise.std = None;
        sc.noise.target_snr_db = Some(db);
    }
    let resolved = sc.resolve()?;
    Ok((sc, resolved))
}

pub fn build_controller(r: &ResolvedScenario) -> Result<Controller, CliError> {
    Ok(Controller::new(
        r.system.clone(),
        r.predicates.clone(),
        r.spec.clone(),
        Box::new(r.k1.clone()),
        r.config,
    )?)
}

/// Noise model for a run, calibrating against a noise-free pilot run when a target SNR is set.
pub fn noise_model(r: &ResolvedScenario) -> Result<NoiseModel, CliError> {
    match &r.noise {
        NoiseSpec::Fixed(kind, seed) => Ok(NoiseModel { kind: kind.clone(), seed: *seed }),
        NoiseSpec::TargetSnr { db, seed } => {
            let mut pilot = build_controller(r)?;
            let traj = simulate(&mut pilot, &r.x0, r.steps, &NoiseModel::none())?;
            let std = calibrate_noise_std(&traj, *db);
            info!("noise deviation {std} calibrated for {db} dB");
            Ok(NoiseModel::gaussian(vec![std; r.system.state_dim()], *seed))
        }
    }
}

/// Closed-loop run of a resolved scenario, with the satisfaction verdict.
pub fn run_resolved(r: &ResolvedScenario) -> Result<(Trajectory, SatisfactionReport, NoiseModel), CliError> {
    let noise = noise_model(r)?;
    let mut c = build_controller(r)?;
    let traj = simulate(&mut c, &r.x0, r.steps, &noise)?;
    let report = check_satisfaction(&r.spec, &traj.signal()).map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok((traj, report, noise))
}

fn output_dir(sc: &Scenario, args: &RunArgs) -> PathBuf {
    args.out_dir
        .clone()
        .or_else(|| sc.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Debug, Serialize)]
struct RegionVisit {
    label: String,
    first_step: Option<usize>,
    steps_inside: usize,
}

#[derive(Debug, Serialize)]
struct NoiseSummary {
    model: NoiseModel,
    snr_db: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    scenario: Option<String>,
    specification: String,
    satisfied: bool,
    report: SatisfactionReport,
    steps: usize,
    horizon: usize,
    softening: bool,
    max_slack: f64,
    state_min: Vec<f64>,
    state_max: Vec<f64>,
    max_abs_input: Vec<f64>,
    regions: Vec<RegionVisit>,
    noise: NoiseSummary,
    solve_seconds: f64,
}

fn plot_axes(sc: &Scenario, n: usize) -> Option<[usize; 2]> {
    sc.output.plot_axes.or((n >= 2).then_some([0, 1]))
}

fn inside(r: &Region, p: [f64; 2]) -> bool {
    r.x[0] <= p[0] && p[0] <= r.x[1] && r.y[0] <= p[1] && p[1] <= r.y[1]
}

fn region_visits(sc: &Scenario, traj: &Trajectory) -> Vec<RegionVisit> {
    let n = traj.states.first().map_or(0, Vec::len);
    let Some([a, b]) = plot_axes(sc, n) else { return Vec::new() };
    sc.regions
        .iter()
        .map(|r| {
            let hits: Vec<usize> =
                (0..traj.states.len()).filter(|&k| inside(r, [traj.states[k][a], traj.states[k][b]])).collect();
            RegionVisit { label: r.label.clone(), first_step: hits.first().copied(), steps_inside: hits.len() }
        })
        .collect()
}

fn column_stats(rows: &[Vec<f64>], f: impl Fn(f64, f64) -> f64, init: f64, map: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = rows.first().map_or(0, Vec::len);
    (0..n).map(|i| rows.iter().map(|r| map(r[i])).fold(init, &f)).collect()
}

fn plot_files(sc: &Scenario, traj: &Trajectory) -> Vec<(&'static str, String)> {
    let n = traj.states.first().map_or(0, Vec::len);
    let mut time = String::from("t_seconds");
    for i in 1..=n {
        let _ = write!(time, ",x{i}");
    }
    time.push('\n');
    for (k, x) in traj.states.iter().enumerate() {
        let _ = write!(time, "{}", k as f64 * traj.sampling_period);
        for v in x {
            let _ = write!(time, ",{v}");
        }
        time.push('\n');
    }
    let mut files = vec![("plot_time.csv", time)];
    if let Some([a, b]) = plot_axes(sc, n) {
        let mut path = format!("x{},x{}\n", a + 1, b + 1);
        for x in &traj.states {
            let _ = writeln!(path, "{},{}", x[a], x[b]);
        }
        files.push(("plot_path.csv", path));
        let mut regions = String::from("label,x_min,x_max,y_min,y_max\n");
        for r in &sc.regions {
            let _ = writeln!(regions, "{},{},{},{},{}", r.label, r.x[0], r.x[1], r.y[0], r.y[1]);
        }
        files.push(("plot_regions.csv", regions));
    }
    files
}

fn run_simulate(path: &Path, args: &RunArgs, out: &mut String) -> Result<u8, CliError> {
    let (sc, r) = load_scenario(path, args)?;
    let (traj, report, noise) = run_resolved(&r)?;
    let dir = output_dir(&sc, args);
    create_dir(&dir)?;

    let summary = Summary {
        scenario: sc.name.clone(),
        specification: r.spec.to_string(),
        satisfied: report.satisfied,
        report: report.clone(),
        steps: r.steps,
        horizon: r.config.horizon,
        softening: !matches!(r.config.encode.softening, Softening::Off),
        max_slack: traj.steps.iter().map(|s| s.slack).fold(0.0, f64::max),
        state_min: column_stats(&traj.states, f64::min, f64::INFINITY, |v| v),
        state_max: column_stats(&traj.states, f64::max, f64::NEG_INFINITY, |v| v),
        max_abs_input: column_stats(&traj.inputs, f64::max, 0.0, f64::abs),
        regions: region_visits(&sc, &traj),
        noise: NoiseSummary {
            snr_db: (noise.kind != NoiseKind::None).then(|| traj.snr_db()),
            model: noise,
        },
        solve_seconds: traj.steps.iter().map(|s| s.solve_seconds).sum(),
    };
    write_file(&dir.join("trajectory.csv"), &traj.to_csv())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), &json)?;
    for (name, text) in plot_files(&sc, &traj) {
        write_file(&dir.join(name), &text)?;
    }

    let _ = writeln!(out, "specification: {}", summary.specification);
    for s in &report.subformulas {
        let _ = writeln!(out, "  {:<5} {}", if s.satisfied { "ok" } else { "FAIL" }, s.formula);
    }
    if let Some(note) = &report.note {
        let _ = writeln!(out, "note: {note}");
    }
    for v in &summary.regions {
        match v.first_step {
            Some(k) => {
                let _ = writeln!(out, "region {}: first entered at step {k} ({} steps inside)", v.label, v.steps_inside);
            }
            None => {
                let _ = writeln!(out, "region {}: never entered", v.label);
            }
        }
    }
    if let Some(db) = summary.noise.snr_db {
        let _ = writeln!(out, "snr: {db:.2} dB");
    }
    let _ = writeln!(out, "satisfied: {}", report.satisfied);
    let _ = writeln!(out, "outputs: {}", dir.display());
    Ok(if report.satisfied { EXIT_SATISFIED } else { EXIT_UNSATISFIED })
}

/// Reads a trace CSV. Returns the first step, the rows, and whether the columns are
/// predicate values (`z*`) rather than states (`x*`).
pub fn read_trace(path: &Path) -> Result<(i64, Vec<Vec<f64>>, bool), CliError> {
    let bad = |m: String| CliError::Invalid(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let k_col = headers.iter().position(|h| h.trim() == "k").ok_or_else(|| bad("no `k` column".into()))?;
    let numbered = |prefix: char| -> Vec<usize> {
        let mut cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                let h = h.trim();
                h.strip_prefix(prefix).and_then(|rest| rest.parse::<usize>().ok()).map(|n| (n, i))
            })
            .collect();
        cols.sort();
        cols.into_iter().map(|(_, i)| i).collect()
    };
    let (cols, is_z) = match (numbered('z'), numbered('x')) {
        (z, _) if !z.is_empty() => (z, true),
        (_, x) if !x.is_empty() => (x, false),
        _ => return Err(bad("no `z1..` or `x1..` columns".into())),
    };
    let mut start = None;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: column {} is not a number", line + 2, &headers[i])))
        };
        let k = num(k_col)?;
        if k.fract() != 0.0 {
            return Err(bad(format!("row {}: step {k} is not an integer", line + 2)));
        }
        let k = k as i64;
        let s = *start.get_or_insert(k);
        if k != s + rows.len() as i64 {
            return Err(bad(format!("row {}: steps must be consecutive", line + 2)));
        }
        rows.push(cols.iter().map(|&i| num(i)).collect::<Result<Vec<_>, _>>()?);
    }
    let start = start.ok_or_else(|| bad("trace is empty".into()))?;
    Ok((start, rows, is_z))
}

fn run_monitor(args: &MonitorArgs, out: &mut String) -> Result<u8, CliError> {
    let scenario = args.scenario.as_deref().map(Scenario::load).transpose()?;
    let opts = ParseOptions {
        units: if args.seconds { IntervalUnits::Seconds } else { IntervalUnits::Steps },
        sampling_period: scenario.as_ref().map(|s| s.system.sampling_period),
    };
    let f = parse_formula(&args.formula, opts).map_err(|e| CliError::Invalid(format!("formula: {e}")))?;
    let (start, rows, is_z) = read_trace(&args.trace)?;
    let values = if is_z {
        rows
    } else {
        let sc = scenario
            .as_ref()
            .ok_or_else(|| CliError::Invalid("a state trace needs --scenario for its predicates".into()))?;
        let pm: PredicateMap = sc.predicate_map()?;
        rows.iter()
            .map(|x| eval_predicates(&pm, x).map_err(|e| CliError::Invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?
    };
    let signal = Signal::new(start, values).map_err(|e| CliError::Invalid(e.to_string()))?;
    f.validate(signal.dim()).map_err(|e| CliError::Invalid(e.to_string()))?;
    let k = args.at;
    let inv = |e: crate::robustness::RobustnessError| CliError::Invalid(e.to_string());
    let sat = boolean_sat(&f, &signal, k).map_err(inv)?;
    let sr = space_robustness(&f, &signal, k).map_err(inv)?;
    let da = dasr(&f, &signal, k).map_err(inv)?;
    let ds = dsasr(&f, &signal, k, &LatestK1).map_err(inv)?;
    let _ = writeln!(out, "formula: {f}");
    let _ = writeln!(out, "step: {k}");
    let _ = writeln!(out, "boolean: {sat}");
    let _ = writeln!(out, "space_robustness: {sr}");
    let _ = writeln!(out, "dasr: {da}");
    let _ = writeln!(out, "dsasr: {ds}");
    Ok(if sat { EXIT_SATISFIED } else { EXIT_UNSATISFIED })
}

fn dump_program(dir: &Path, tag: &str, p: &EncodedProgram, out: &mut String) -> Result<(), CliError> {
    write_file(&dir.join(format!("lp_{tag}.txt")), &p.to_text())?;
    for (j, me) in p.members.iter().enumerate() {
        write_file(&dir.join(format!("E_{tag}_m{j}.csv")), &me.e.to_csv())?;
    }
    let (q, r) = p.qr().map_err(|e| CliError::Invalid(e.to_string()))?;
    write_file(&dir.join(format!("Q_{tag}.csv")), &matrix_to_csv(&q))?;
    write_file(&dir.join(format!("R_{tag}.csv")), &matrix_to_csv(&r))?;
    let bounded = (0..p.lp.num_vars())
        .filter(|&j| p.lp.lower()[j].is_finite() || p.lp.upper()[j].is_finite())
        .count();
    let _ = writeln!(
        out,
        "{tag}: {} variables, {} rows (epigraph {} + auxiliary {} + hard {}), {} bounded variables, penalty {}",
        p.lp.num_vars(),
        p.lp.num_rows(),
        p.rows.epigraph,
        p.rows.auxiliary,
        p.rows.hard,
        bounded,
        p.penalty.map_or("none".to_string(), |m| format!("{m:e}")),
    );
    Ok(())
}

fn run_dump_lp(path: &Path, step: usize, args: &RunArgs, out: &mut String) -> Result<u8, CliError> {
    let (sc, r) = load_scenario(path, args)?;
    let noise = noise_model(&r)?;
    let mut c = build_controller(&r)?;
    let x = if step == 0 {
        r.x0.clone()
    } else {
        simulate(&mut c, &r.x0, step, &noise)?.states.pop().expect("simulated states")
    };
    let programs = c.inspect(&DVector::from_vec(x))?;
    let dir = output_dir(&sc, args);
    create_dir(&dir)?;
    if programs.is_empty() {
        let _ = writeln!(out, "step {step} is idle: no program is solved");
    }
    for (b, p) in &programs {
        dump_program(&dir, &format!("k{step}_b{b}"), p, out)?;
    }
    let _ = writeln!(out, "outputs: {}", dir.display());
    Ok(EXIT_SATISFIED)
}
