//! Receding-horizon loop: at every step the program for the current window is assembled
//! and solved, and the first input of the optimal sequence is applied.

use std::time::Instant;

use log::debug;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::system::LtiSystem;

use crate::encoder::{
    assemble, build_stacked, compile_branches, Activation, AssemblyContext, Branch, EncodeError, EncodeOptions,
    EncodedProgram, StackedModel,
};
use crate::formula::{Formula, Mode, PredicateMap, Specification};
use crate::lpsolver::{solve, LpError, LpSolution, LpStatus, SolverOptions};
use crate::robustness::{boolean_sat, eval_predicates, K1Policy, RobustnessError, Signal};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error("step {k}: every branch is infeasible")]
    Infeasible { k: i64 },
    #[error("step {k}: the program is unbounded")]
    Unbounded { k: i64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub encode: EncodeOptions,
    pub solver: SolverOptions,
    /// Solve disjunction branches on the rayon pool.
    pub parallel: bool,
}

impl ControllerConfig {
    pub fn new(horizon: usize) -> Self {
        ControllerConfig { horizon, encode: EncodeOptions::default(), solver: SolverOptions::default(), parallel: true }
    }
}

/// Step counter and recorded predicate values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub k0: i64,
    history_start: i64,
    history: Vec<Vec<f64>>,
}

impl ControllerState {
    pub fn history(&self) -> Signal {
        Signal::new(self.history_start, self.history.clone()).expect("history rows share one width")
    }

    /// Steps elapsed since the event for one-time specifications, `None` before it.
    pub fn k_event(&self, mode: Mode) -> Option<u32> {
        match mode {
            Mode::AllTime => None,
            Mode::OneTime { trigger } => (self.k0 >= trigger as i64).then(|| (self.k0 - trigger as i64) as u32),
        }
    }
}

/// Result of one branch solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchResult {
    pub status: LpStatus,
    /// Robustness sum without the slack penalty; `None` unless optimal.
    pub score: Option<f64>,
    pub slack: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: i64,
    /// No program was solved: one-time specification not yet active or already elapsed.
    pub idle: bool,
    pub status: Option<String>,
    pub objective: Option<f64>,
    /// Simplified average robustness summed over the kept rows of the chosen branch.
    pub robustness: Option<f64>,
    pub slack: f64,
    pub branch: Option<usize>,
    pub iterations: usize,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub input: Vec<f64>,
    pub record: StepRecord,
    pub branches: Vec<Option<BranchResult>>,
    /// Predicted input sequence of the chosen branch.
    pub plan: Vec<Vec<f64>>,
}

pub struct Controller {
    system: LtiSystem,
    predicates: PredicateMap,
    spec: Specification,
    branches: Vec<Branch>,
    stacked: StackedModel,
    policy: Box<dyn K1Policy + Send>,
    config: ControllerConfig,
    state: ControllerState,
    started: bool,
}

impl Controller {
    pub fn new(
        system: LtiSystem,
        predicates: PredicateMap,
        spec: Specification,
        policy: Box<dyn K1Policy + Send>,
        config: ControllerConfig,
    ) -> Result<Self, ControlError> {
        spec.body.validate(predicates.len()).map_err(|e| ControlError::Config(e.to_string()))?;
        if predicates.state_dim() != system.state_dim() {
            return Err(ControlError::Dimension(format!(
                "predicate map acts on {} states, system has {}",
                predicates.state_dim(),
                system.state_dim()
            )));
        }
        let h = spec.length();
        if (config.horizon as u64) < h as u64 {
            return Err(EncodeError::HorizonTooShort { horizon: config.horizon, length: h }.into());
        }
        let branches = compile_branches(&spec.body)?;
        let stacked = build_stacked(&system, &predicates, config.horizon)?;
        Ok(Controller {
            system,
            predicates,
            spec,
            branches,
            stacked,
            policy,
            config,
            state: ControllerState { k0: 0, history_start: 0, history: Vec::new() },
            started: false,
        })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn system(&self) -> &LtiSystem {
        &self.system
    }

    pub fn predicates(&self) -> &PredicateMap {
        &self.predicates
    }

    pub fn specification(&self) -> &Specification {
        &self.spec
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Replaces the start-up history: `values[i]` is `z(start + i)`, and the first call to
    /// [`Controller::step`] must then be at `start + values.len()`.
    pub fn seed_history(&mut self, start: i64, values: Vec<Vec<f64>>) -> Result<(), ControlError> {
        if values.iter().any(|v| v.len() != self.predicates.len()) {
            return Err(ControlError::Dimension("history rows must have one entry per predicate".into()));
        }
        self.state = ControllerState { k0: start + values.len() as i64, history_start: start, history: values };
        self.started = true;
        Ok(())
    }

    fn record(&mut self, z: Vec<f64>) {
        if !self.started {
            // Unknown history: replicate the first sample backwards.
            let h = self.spec.length() as i64;
            self.state.history_start = self.state.k0 - h;
            self.state.history = vec![z.clone(); h as usize];
            self.started = true;
        }
        self.state.history.push(z);
    }

    /// Assembles the program of one branch at the current step.
    pub fn program(&self, branch: usize, activation: Activation, x: &DVector<f64>) -> Result<EncodedProgram, ControlError> {
        let past = self.state.history();
        let ctx = AssemblyContext {
            stacked: &self.stacked,
            system: &self.system,
            x0: x,
            past: &past,
            k0: self.state.k0,
            activation,
            policy: self.policy.as_ref(),
            options: self.config.encode,
        };
        Ok(assemble(&self.branches[branch], ctx)?)
    }

    fn active_branches(&self) -> (Option<Activation>, Vec<usize>) {
        let activation = match self.state.k_event(self.spec.mode) {
            None if matches!(self.spec.mode, Mode::OneTime { .. }) => None,
            None => Some(Activation::AllTime),
            Some(k_event) => Some(Activation::OneTime { k_event }),
        };
        let active = (0..self.branches.len())
            .filter(|&i| match activation {
                None => false,
                Some(Activation::AllTime) => true,
                Some(Activation::OneTime { k_event }) => {
                    let h = self.branches[i].members.iter().map(|m| m.length()).max().unwrap_or(0);
                    k_event < h
                }
            })
            .collect();
        (activation, active)
    }

    /// Programs that [`Controller::step`] would solve for state `x`, without advancing.
    /// Empty when the step is idle.
    pub fn inspect(&mut self, x: &DVector<f64>) -> Result<Vec<(usize, EncodedProgram)>, ControlError> {
        if x.len() != self.system.state_dim() {
            return Err(ControlError::Dimension(format!("state has {} entries", x.len())));
        }
        let saved = (self.state.clone(), self.started);
        let z = eval_predicates(&self.predicates, x.as_slice())?;
        self.record(z);
        let (activation, active) = self.active_branches();
        let out = match activation {
            None => Ok(Vec::new()),
            Some(act) => active.into_iter().map(|i| Ok((i, self.program(i, act, x)?))).collect(),
        };
        (self.state, self.started) = saved;
        out
    }

    /// Records `z(k0)` from `x`, chooses `u(k0)` and advances to `k0 + 1`.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<StepOutcome, ControlError> {
        if x.len() != self.system.state_dim() {
            return Err(ControlError::Dimension(format!("state has {} entries", x.len())));
        }
        let z = eval_predicates(&self.predicates, x.as_slice())?;
        self.record(z);
        let k = self.state.k0;
        let started = Instant::now();

        let (activation, active) = self.active_branches();

        if active.is_empty() {
            self.state.k0 += 1;
            return Ok(StepOutcome {
                input: vec![0.0; self.system.input_dim()],
                record: StepRecord {
                    k,
                    idle: true,
                    status: None,
                    objective: None,
                    robustness: None,
                    slack: 0.0,
                    branch: None,
                    iterations: 0,
                    solve_seconds: 0.0,
                },
                branches: vec![None; self.branches.len()],
                plan: Vec::new(),
            });
        }
        let activation = activation.expect("active branches imply an activation");

        let solve_branch = |i: usize| -> Result<(EncodedProgram, LpSolution), ControlError> {
            let p = self.program(i, activation, x)?;
            let sol = solve(&p.lp, &self.config.solver)?;
            Ok((p, sol))
        };
        let solved: Vec<Result<(EncodedProgram, LpSolution), ControlError>> =
            if self.config.parallel && active.len() > 1 {
                active.par_iter().map(|&i| solve_branch(i)).collect()
            } else {
                active.iter().map(|&i| solve_branch(i)).collect()
            };

        let mut results: Vec<Option<BranchResult>> = vec![None; self.branches.len()];
        let mut programs = Vec::with_capacity(active.len());
        for (&i, r) in active.iter().zip(solved) {
            let (p, sol) = r?;
            let optimal = sol.status == LpStatus::Optimal;
            results[i] = Some(BranchResult {
                status: sol.status,
                score: optimal.then(|| p.robustness_sum(&sol.x)),
                slack: if optimal { p.slack(&sol.x) } else { 0.0 },
                iterations: sol.iterations,
            });
            programs.push((i, p, sol));
        }
        let choice = select_branch(&results, self.config.solver.tolerance.max(1e-9) * 1e3);
        let Some(best) = choice else {
            return Err(if results.iter().flatten().any(|r| r.status == LpStatus::Unbounded) {
                ControlError::Unbounded { k }
            } else {
                ControlError::Infeasible { k }
            });
        };
        let (_, p, sol) = programs.into_iter().find(|(i, _, _)| *i == best).expect("chosen branch was solved");
        let res = results[best].clone().expect("chosen branch has a result");
        // Simplex round-off may leave the solution a hair outside the input box.
        let (lo, hi) = (self.system.input_lower(), self.system.input_upper());
        let input: Vec<f64> =
            p.first_input(&sol.x).iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])).collect();
        let plan = p.inputs(&sol.x);
        debug!("k={k} branch={best} C={:?} xi={} iters={}", res.score, res.slack, res.iterations);
        self.state.k0 += 1;
        Ok(StepOutcome {
            input,
            record: StepRecord {
                k,
                idle: false,
                status: Some(sol.status.to_string()),
                objective: Some(sol.objective),
                robustness: res.score,
                slack: res.slack,
                branch: Some(best),
                iterations: results.iter().flatten().map(|r| r.iterations).sum(),
                solve_seconds: started.elapsed().as_secs_f64(),
            },
            branches: results,
            plan,
        })
    }
}

/// Picks among optimal branches: those needing no slack (`ξ <= slack_tol`) first, then the
/// largest robustness sum, then the lowest index.
pub fn select_branch(results: &[Option<BranchResult>], slack_tol: f64) -> Option<usize> {
    let mut best: Option<(usize, bool, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        let Some(BranchResult { status: LpStatus::Optimal, score: Some(score), slack, .. }) = r else {
            continue;
        };
        let clean = *slack <= slack_tol;
        let better = match best {
            None => true,
            Some((_, best_clean, best_score)) => {
                (clean && !best_clean)
                    || (clean == best_clean && *score > best_score + 1e-9 * (1.0 + best_score.abs()))
            }
        };
        if better {
            best = Some((i, clean, *score));
        }
    }
    best.map(|(i, _, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    /// Zero-mean Gaussian added to the state update, one standard deviation per component.
    Gaussian { std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel { kind: NoiseKind::None, seed: 0 }
    }

    pub fn gaussian(std: Vec<f64>, seed: u64) -> Self {
        NoiseModel { kind: NoiseKind::Gaussian { std }, seed }
    }

    fn sampler(&self, dim: usize) -> Result<NoiseSampler, ControlError> {
        match &self.kind {
            NoiseKind::None => Ok(NoiseSampler::None(dim)),
            NoiseKind::Gaussian { std } => {
                if std.len() != dim {
                    return Err(ControlError::Dimension(format!(
                        "{} noise deviations for {dim} states",
                        std.len()
                    )));
                }
                let dists = std
                    .iter()
                    .map(|&s| Normal::new(0.0, s).map_err(|e| ControlError::Config(format!("noise deviation {s}: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(NoiseSampler::Gaussian(ChaCha8Rng::seed_from_u64(self.seed), dists))
            }
        }
    }
}

enum NoiseSampler {
    None(usize),
    Gaussian(ChaCha8Rng, Vec<Normal<f64>>),
}

impl NoiseSampler {
    fn sample(&mut self) -> Vec<f64> {
        match self {
            NoiseSampler::None(dim) => vec![0.0; *dim],
            NoiseSampler::Gaussian(rng, dists) => dists.iter().map(|d| d.sample(rng)).collect(),
        }
    }
}

/// Closed-loop run. States, predicate values and noise are recorded per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sampling_period: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub predicates: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn signal(&self) -> Signal {
        Signal::new(0, self.predicates.clone()).expect("predicate rows share one width")
    }

    /// Mean squared state entry over the run.
    pub fn state_power(&self) -> f64 {
        mean_square(&self.states)
    }

    pub fn noise_power(&self) -> f64 {
        mean_square(&self.noise)
    }

    /// `10·log10(P_x / P_v)`; `+∞` without noise.
    pub fn snr_db(&self) -> f64 {
        snr_db(self.state_power(), self.noise_power())
    }

    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let g = self.predicates.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string(), "t_seconds".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=g).map(|i| format!("z{i}")));
        header.extend(["objective", "robustness", "xi", "branch"].map(String::from));
        let mut out = header.join(",");
        out.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string(), format!("{}", k as f64 * self.sampling_period)];
            row.extend(x.iter().map(|v| format!("{v}")));
            match self.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            row.extend(self.predicates[k].iter().map(|v| format!("{v}")));
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
            match self.steps.get(k) {
                Some(s) => {
                    row.push(opt(s.objective));
                    row.push(opt(s.robustness));
                    row.push(format!("{}", s.slack));
                    row.push(s.branch.map_or(String::new(), |b| b.to_string()));
                }
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn mean_square(rows: &[Vec<f64>]) -> f64 {
    let count: usize = rows.iter().map(Vec::len).sum();
    if count == 0 {
        return 0.0;
    }
    rows.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64
}

/// `10·log10(P_x / P_v)`; `+∞` when `P_v` is zero.
pub fn snr_db(signal_power: f64, noise_power: f64) -> f64 {
    if noise_power == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal_power / noise_power).log10()
    }
}

/// Per-component deviation giving `target_db` against the state power of a noise-free
/// pilot run.
pub fn calibrate_noise_std(pilot: &Trajectory, target_db: f64) -> f64 {
    (pilot.state_power() / 10f64.powf(target_db / 10.0)).sqrt()
}

/// Runs `steps` closed-loop steps from `x0`: `x(k+1) = A·x(k) + B·u(k) + w(k)`.
pub fn simulate(
    controller: &mut Controller,
    x0: &[f64],
    steps: usize,
    noise: &NoiseModel,
) -> Result<Trajectory, ControlError> {
    let sys = controller.system().clone();
    if x0.len() != sys.state_dim() {
        return Err(ControlError::Dimension(format!("initial state has {} entries", x0.len())));
    }
    let mut sampler = noise.sampler(sys.state_dim())?;
    let mut x = DVector::from_column_slice(x0);
    let mut traj = Trajectory {
        sampling_period: sys.sampling_period(),
        states: vec![x0.to_vec()],
        inputs: Vec::with_capacity(steps),
        predicates: vec![eval_predicates(controller.predicates(), x0)?],
        noise: Vec::with_capacity(steps),
        steps: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let out = controller.step(&x)?;
        let w = sampler.sample();
        let u = DVector::from_column_slice(&out.input);
        x = sys.step(&x, &u) + DVector::from_column_slice(&w);
        traj.inputs.push(out.input);
        traj.noise.push(w);
        traj.steps.push(out.record);
        traj.states.push(x.as_slice().to_vec());
        traj.predicates.push(eval_predicates(controller.predicates(), x.as_slice())?);
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubformulaVerdict {
    pub formula: String,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub satisfied: bool,
    /// Evaluation steps at which the body was checked.
    pub checked: Vec<i64>,
    pub subformulas: Vec<SubformulaVerdict>,
    /// Set when the run is too short to decide the specification.
    pub note: Option<String>,
}

/// Checks a recorded run: for all-time specifications at every step whose window fits in
/// the run, for one-time specifications at the event step.
pub fn check_satisfaction(spec: &Specification, signal: &Signal) -> Result<SatisfactionReport, RobustnessError> {
    let h = spec.length() as i64;
    let last = signal.end() - h;
    let (checked, note) = match spec.mode {
        Mode::AllTime => {
            let steps: Vec<i64> = (signal.start()..=last).collect();
            let note = steps.is_empty().then(|| format!("run shorter than the formula length {h}"));
            (steps, note)
        }
        Mode::OneTime { trigger } => {
            let t = trigger as i64;
            if t <= last && t >= signal.start() {
                (vec![t], None)
            } else {
                (Vec::new(), Some(format!("event at step {t} needs the run to reach step {}", t + h)))
            }
        }
    };
    let parts: Vec<&Formula> = match &spec.body {
        Formula::And(cs) => cs.iter().collect(),
        f => vec![f],
    };
    let mut subformulas = Vec::with_capacity(parts.len());
    for f in parts {
        let mut ok = !checked.is_empty();
        for &k in &checked {
            if !boolean_sat(f, signal, k)? {
                ok = false;
                break;
            }
        }
        subformulas.push(SubformulaVerdict { formula: f.to_string(), satisfied: ok });
    }
    let satisfied = !checked.is_empty() && subformulas.iter().all(|s| s.satisfied);
    Ok(SatisfactionReport { satisfied, checked, subformulas, note })
}
