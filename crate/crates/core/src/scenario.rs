//! TOML scenario files: system, predicates, specification, controller and noise settings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerConfig, NoiseKind};
use crate::encoder::{EncodeOptions, Softening};
use crate::formula::{
    parse_specification, FormulaError, IntervalUnits, Mode, ParseError, ParseOptions, PredicateMap, Specification,
};
use crate::lpsolver::SolverOptions;
use crate::robustness::{K1Choice, K1Plan};
use crate::system::{LtiSystem, SystemError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario syntax: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("writing scenario: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error("formula: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sampling_period: f64,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub x0: Vec<f64>,
}

/// One row of `z = C·x + c`: the predicate `row·x + offset >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub row: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    AllTime,
    OneTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K1Named {
    Earliest,
    Latest,
}

/// Witness-step choice for one until/eventually node (pre-order index among the
/// temporal operators of the formula). Exactly one of `offset`, `choice`, `table`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct K1Entry {
    pub node: usize,
    /// `k1 = k + offset`, in the scenario's interval units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<K1Named>,
    /// Absolute `[k, k1]` step pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<[i64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecificationSection {
    pub formula: String,
    #[serde(default)]
    pub interval_units: IntervalUnits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_step: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k1: Vec<K1Entry>,
}

fn default_true() -> bool {
    true
}

fn default_margin() -> f64 {
    EncodeOptions::default().margin
}

fn default_tolerance() -> f64 {
    SolverOptions::default().tolerance
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: usize,
    pub steps: usize,
    #[serde(default)]
    pub soften: bool,
    /// Slack penalty; default is `10^6` times the largest cost coefficient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseName {
    #[default]
    None,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub kind: NoiseName,
    /// Per-component standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    /// Calibrate a common deviation against a noise-free pilot run instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Zero-based state indices used as the planar axes of the plot data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot_axes: Option<[usize; 2]>,
}

/// Axis-aligned rectangle written to the plot data; not used by the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub label: String,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub system: SystemSection,
    #[serde(rename = "predicate")]
    pub predicates: Vec<PredicateEntry>,
    pub specification: SpecificationSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, rename = "region", skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<Region>,
}

/// Everything needed to run a scenario, checked for consistency.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub system: LtiSystem,
    pub predicates: PredicateMap,
    pub spec: Specification,
    pub k1: K1Plan,
    pub config: ControllerConfig,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Fixed(NoiseKind, u64),
    TargetSnr { db: f64, seed: u64 },
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Scenario::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string_pretty(self)?)
    }

    fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            units: self.specification.interval_units,
            sampling_period: Some(self.system.sampling_period),
        }
    }

    fn steps_from_units(&self, value: f64, what: &str) -> Result<i64, ScenarioError> {
        let steps = match self.specification.interval_units {
            IntervalUnits::Steps => value,
            IntervalUnits::Seconds => value / self.system.sampling_period,
        };
        let rounded = steps.round();
        if !steps.is_finite() || (steps - rounded).abs() > 1e-9 * steps.abs().max(1.0) {
            return Err(invalid(format!("{what} = {value} is not a whole number of steps")));
        }
        Ok(rounded as i64)
    }

    pub fn specification(&self) -> Result<Specification, ScenarioError> {
        let mut spec = parse_specification(&self.specification.formula, self.parse_options())?;
        let prefixed = matches!(spec.mode, Mode::OneTime { .. });
        match (self.specification.mode, prefixed) {
            (Some(ModeName::AllTime), true) => {
                return Err(invalid("mode = \"all_time\" but the formula has an event prefix"));
            }
            (Some(ModeName::OneTime), false) => {
                spec.mode = Mode::OneTime { trigger: self.specification.event_step.unwrap_or(0) }
            }
            (None, false) if self.specification.event_step.is_some() => {
                return Err(invalid("event_step is set for an all-time specification"));
            }
            (_, true) => {
                if let Some(step) = self.specification.event_step {
                    match spec.mode {
                        Mode::OneTime { trigger } if trigger != 0 && trigger != step => {
                            return Err(invalid(format!(
                                "event step {trigger} in the formula disagrees with event_step = {step}"
                            )));
                        }
                        _ => spec.mode = Mode::OneTime { trigger: step },
                    }
                }
            }
            _ => {}
        }
        Ok(spec)
    }

    pub fn k1_plan(&self) -> Result<K1Plan, ScenarioError> {
        let mut plan = K1Plan::new();
        for e in &self.specification.k1 {
            let set = [e.offset.is_some(), e.choice.is_some(), e.table.is_some()].iter().filter(|b| **b).count();
            if set != 1 {
                return Err(invalid(format!("k1 entry for node {} needs exactly one of offset, choice, table", e.node)));
            }
            let choice = if let Some(off) = e.offset {
                let steps = self.steps_from_units(off, "k1 offset")?;
                if steps < 0 {
                    return Err(invalid(format!("k1 offset for node {} is negative", e.node)));
                }
                K1Choice::Offset(steps as u32)
            } else if let Some(c) = e.choice {
                match c {
                    K1Named::Earliest => K1Choice::Earliest,
                    K1Named::Latest => K1Choice::Latest,
                }
            } else {
                let table = e.table.as_ref().expect("one field is set");
                K1Choice::Table(table.iter().map(|[k, k1]| (*k, *k1)).collect::<BTreeMap<_, _>>())
            };
            if plan.get(e.node).is_some() {
                return Err(invalid(format!("k1 for node {} is given twice", e.node)));
            }
            plan.set(e.node, choice);
        }
        Ok(plan)
    }

    pub fn predicate_map(&self) -> Result<PredicateMap, ScenarioError> {
        let rows: Vec<Vec<f64>> = self.predicates.iter().map(|p| p.row.clone()).collect();
        let offsets: Vec<f64> = self.predicates.iter().map(|p| p.offset).collect();
        let pm = PredicateMap::from_rows(&rows, &offsets)?;
        let labels = self
            .predicates
            .iter()
            .enumerate()
            .map(|(i, p)| p.label.clone().unwrap_or_else(|| format!("p{}", i + 1)))
            .collect();
        Ok(pm.with_labels(labels)?)
    }

    /// Builds and cross-checks all run inputs.
    pub fn resolve(&self) -> Result<ResolvedScenario, ScenarioError> {
        let s = &self.system;
        let system = LtiSystem::from_rows(&s.a, &s.b, s.sampling_period, &s.input_lower, &s.input_upper)?;
        if s.x0.len() != system.state_dim() {
            return Err(invalid(format!("x0 has {} entries, the system has {} states", s.x0.len(), system.state_dim())));
        }
        let predicates = self.predicate_map()?;
        if predicates.state_dim() != system.state_dim() {
            return Err(invalid(format!(
                "predicate rows have {} entries, the system has {} states",
                predicates.state_dim(),
                system.state_dim()
            )));
        }
        let spec = self.specification()?;
        spec.body.validate(predicates.len())?;
        let h = spec.length();
        let c = &self.controller;
        if (c.horizon as u64) < h as u64 || c.horizon == 0 {
            return Err(invalid(format!(
                "horizon N = {} must be at least the formula length h = {h} and positive",
                c.horizon
            )));
        }
        if c.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(c.margin.is_finite() && c.margin >= 0.0) {
            return Err(invalid("margin must be finite and nonnegative"));
        }
        if !(c.tolerance.is_finite() && c.tolerance > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        let softening = match (c.soften, c.penalty) {
            (false, _) => Softening::Off,
            (true, None) => Softening::Auto,
            (true, Some(pm)) if pm.is_finite() && pm >= 0.0 => Softening::Penalty(pm),
            (true, Some(pm)) => return Err(invalid(format!("penalty {pm} must be finite and nonnegative"))),
        };
        let config = ControllerConfig {
            horizon: c.horizon,
            encode: EncodeOptions { softening, margin: c.margin },
            solver: SolverOptions::with_tolerance(c.tolerance),
            parallel: c.parallel,
        };
        let n = &self.noise;
        let noise = match n.kind {
            NoiseName::None => {
                if n.std.is_some() || n.target_snr_db.is_some() {
                    return Err(invalid("noise parameters given with kind = \"none\""));
                }
                NoiseSpec::Fixed(NoiseKind::None, n.seed)
            }
            NoiseName::Gaussian => match (&n.std, n.target_snr_db) {
                (Some(std), None) => {
                    if std.len() != system.state_dim() || std.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(invalid("noise std needs one finite nonnegative entry per state"));
                    }
                    NoiseSpec::Fixed(NoiseKind::Gaussian { std: std.clone() }, n.seed)
                }
                (None, Some(db)) if db.is_finite() => NoiseSpec::TargetSnr { db, seed: n.seed },
                _ => return Err(invalid("gaussian noise needs exactly one of std or a finite target_snr_db")),
            },
        };
        if let Some(axes) = self.output.plot_axes {
            if axes.iter().any(|&i| i >= system.state_dim()) {
                return Err(invalid(format!("plot axes {axes:?} exceed the state dimension")));
            }
        }
        for r in &self.regions {
            if !(r.x[0] <= r.x[1] && r.y[0] <= r.y[1]) {
                return Err(invalid(format!("region {} has reversed bounds", r.label)));
            }
        }
        Ok(ResolvedScenario {
            system,
            predicates,
            spec,
            k1: self.k1_plan()?,
            config,
            x0: s.x0.clone(),
            steps: c.steps,
            noise,
        })
    }

    /// Same scenario with intervals and offsets in steps and the mode spelled out.
    pub fn normalized(&self) -> Result<Scenario, ScenarioError> {
        let resolved = self.resolve()?;
        let mut out = self.clone();
        out.specification.formula = resolved.spec.body.to_string();
        out.specification.interval_units = IntervalUnits::Steps;
        match resolved.spec.mode {
            Mode::AllTime => {
                out.specification.mode = Some(ModeName::AllTime);
                out.specification.event_step = None;
            }
            Mode::OneTime { trigger } => {
                out.specification.mode = Some(ModeName::OneTime);
                out.specification.event_step = Some(trigger);
            }
        }
        let mut k1 = Vec::new();
        for (node, choice) in resolved.k1.iter() {
            let mut e = K1Entry { node, offset: None, choice: None, table: None };
            match choice {
                K1Choice::Offset(o) => e.offset = Some(*o as f64),
                K1Choice::Earliest => e.choice = Some(K1Named::Earliest),
                K1Choice::Latest => e.choice = Some(K1Named::Latest),
                K1Choice::Table(t) => e.table = Some(t.iter().map(|(k, k1)| [*k, *k1]).collect()),
            }
            k1.push(e);
        }
        out.specification.k1 = k1;
        out.predicates = self
            .predicates
            .iter()
            .enumerate()
            .map(|(i, p)| PredicateEntry {
                label: Some(p.label.clone().unwrap_or_else(|| format!("p{}", i + 1))),
                ..p.clone()
            })
            .collect();
        Ok(out)
    }
}
