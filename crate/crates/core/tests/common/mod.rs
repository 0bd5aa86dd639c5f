//! Test-side oracles and instance generators shared by the integration tests and the
//! acceptance harness. Nothing here calls into the library's semantics or matrices.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stlmpc::controller::{check_satisfaction, simulate, ControlError, Controller, ControllerConfig, NoiseModel};
use stlmpc::encoder::{assemble, build_stacked, compile_branches, Activation, AssemblyContext, EncodeOptions, Softening};
use stlmpc::formula::{Formula, Interval, PredicateMap, Specification};
use stlmpc::lpsolver::{solve, LpProblem, LpStatus, SolverOptions};
use stlmpc::robustness::{dsasr, LatestK1, Signal};
use stlmpc::system::LtiSystem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

/// `(predicate index, negated)`; a conjunct is a list of these.
pub type Lit = (usize, bool);

#[derive(Debug, Clone)]
pub enum Op {
    Until { lhs: Vec<Lit>, rhs: Vec<Lit>, a: u32, b: u32 },
    Eventually { arg: Vec<Lit>, a: u32, b: u32 },
    Always { arg: Vec<Lit>, a: u32, b: u32 },
}

impl Op {
    pub fn hi(&self) -> u32 {
        match self {
            Op::Until { b, .. } | Op::Eventually { b, .. } | Op::Always { b, .. } => *b,
        }
    }

    pub fn to_formula(&self) -> Formula {
        let conj = |lits: &[Lit]| {
            let ps: Vec<Formula> =
                lits.iter().map(|&(i, neg)| if neg { Formula::not_pred(i) } else { Formula::pred(i) }).collect();
            if ps.len() == 1 {
                ps.into_iter().next().unwrap()
            } else {
                Formula::and(ps)
            }
        };
        match self {
            Op::Until { lhs, rhs, a, b } => Formula::until(conj(lhs), conj(rhs), Interval::new(*a, *b).unwrap()),
            Op::Eventually { arg, a, b } => Formula::eventually(conj(arg), Interval::new(*a, *b).unwrap()),
            Op::Always { arg, a, b } => Formula::always(conj(arg), Interval::new(*a, *b).unwrap()),
        }
    }
}

pub fn body_formula(ops: &[Op]) -> Formula {
    if ops.len() == 1 {
        ops[0].to_formula()
    } else {
        Formula::and(ops.iter().map(Op::to_formula).collect())
    }
}

/// Predicate values indexed by absolute step.
#[derive(Debug, Clone)]
pub struct Trace {
    pub start: i64,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn at(&self, t: i64) -> &[f64] {
        &self.rows[(t - self.start) as usize]
    }

    pub fn signal(&self) -> Signal {
        Signal::new(self.start, self.rows.clone()).unwrap()
    }
}

pub fn conj_value(lits: &[Lit], z: &[f64]) -> f64 {
    lits.iter().map(|&(i, neg)| if neg { -z[i] } else { z[i] }).fold(f64::INFINITY, f64::min)
}

/// Simplified average robustness with the witness at the end of the interval.
pub fn oracle_dsasr(op: &Op, z: &Trace, k: i64) -> f64 {
    let mean = |lits: &[Lit], from: i64, to: i64| {
        (from..=to).map(|t| conj_value(lits, z.at(t))).sum::<f64>() / (to - from + 1) as f64
    };
    match op {
        Op::Eventually { arg, b, .. } => conj_value(arg, z.at(k + *b as i64)),
        Op::Always { arg, a, b } => mean(arg, k + *a as i64, k + *b as i64),
        Op::Until { lhs, rhs, b, .. } => {
            let k1 = k + *b as i64;
            0.5 * (mean(lhs, k, k1) + conj_value(rhs, z.at(k1)))
        }
    }
}

pub fn oracle_conj(ops: &[Op], z: &Trace, k: i64) -> f64 {
    ops.iter().map(|op| oracle_dsasr(op, z, k)).fold(f64::INFINITY, f64::min)
}

fn random_conjunct(r: &mut ChaCha8Rng, g: usize) -> Vec<Lit> {
    let len = r.random_range(1..=2usize);
    let mut lits: Vec<Lit> = Vec::new();
    while lits.len() < len {
        let l = (r.random_range(0..g), r.random_bool(0.3));
        if !lits.contains(&l) {
            lits.push(l);
        }
        if g == 1 && lits.len() == 1 {
            break;
        }
    }
    lits
}

pub fn random_op(r: &mut ChaCha8Rng, g: usize, max_b: u32) -> Op {
    let a = r.random_range(0..=max_b.min(2));
    let b = r.random_range(a..=max_b);
    match r.random_range(0..3) {
        0 => Op::Until { lhs: random_conjunct(r, g), rhs: random_conjunct(r, g), a, b },
        1 => Op::Eventually { arg: random_conjunct(r, g), a, b },
        _ => Op::Always { arg: random_conjunct(r, g), a, b },
    }
}

pub struct RandomPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl RandomPlant {
    pub fn new(r: &mut ChaCha8Rng, n: usize, m: usize, g: usize) -> Self {
        let a = DMatrix::from_fn(n, n, |i, j| (i == j) as u8 as f64 + 0.3 * uniform(r, -1.0, 1.0));
        let b = DMatrix::from_fn(n, m, |_, _| uniform(r, -1.0, 1.0));
        let c = DMatrix::from_fn(g, n, |_, _| uniform(r, -1.0, 1.0));
        let offset = DVector::from_fn(g, |_, _| uniform(r, -1.0, 1.0));
        RandomPlant { a, b, c, offset }
    }

    pub fn system(&self, bound: f64) -> LtiSystem {
        let m = self.b.ncols();
        LtiSystem::new(
            self.a.clone(),
            self.b.clone(),
            1.0,
            DVector::from_element(m, -bound),
            DVector::from_element(m, bound),
        )
        .unwrap()
    }

    pub fn predicates(&self) -> PredicateMap {
        let labels = (1..=self.c.nrows()).map(|i| format!("p{i}")).collect();
        PredicateMap::new(self.c.clone(), self.offset.clone(), labels).unwrap()
    }

    pub fn z(&self, x: &DVector<f64>) -> Vec<f64> {
        (&self.c * x + &self.offset).as_slice().to_vec()
    }
}

/// Largest deviations found on one encoder instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct EncoderCheck {
    /// `Σ_rows min_members (E · z_all)` against the oracle sum.
    pub matrix: f64,
    /// Library semantics summed over the window against the oracle sum.
    pub semantics: f64,
    /// Optimum of the assembled program with the inputs pinned, against the oracle sum.
    pub program: f64,
    pub one_time: bool,
    pub members: usize,
}

/// One randomized encoder instance: system, formula, window position, past and inputs.
pub fn encoder_case(seed: u64) -> EncoderCheck {
    let mut r = rng(seed);
    let n = r.random_range(1..=3usize);
    let m = r.random_range(1..=2usize);
    let g = r.random_range(1..=3usize);
    let plant = RandomPlant::new(&mut r, n, m, g);
    let members = match r.random_range(0..4) {
        3 => r.random_range(2..=3usize),
        _ => 1,
    };
    let ops: Vec<Op> = (0..members).map(|_| random_op(&mut r, g, 4)).collect();
    let h = ops.iter().map(Op::hi).max().unwrap();
    let horizon = r.random_range((h as usize).max(1)..=8usize.max(h as usize));
    let one_time = h >= 1 && r.random_bool(0.25);
    let k_event = if one_time { r.random_range(0..h) } else { 0 };
    let k0: i64 = r.random_range(0..=4);

    let x0 = DVector::from_fn(n, |_, _| uniform(&mut r, -1.0, 1.0));
    let start = k0 - h as i64;
    let mut rows: Vec<Vec<f64>> =
        (start..k0).map(|_| (0..g).map(|_| uniform(&mut r, -2.0, 2.0)).collect()).collect();
    rows.push(plant.z(&x0));
    let inputs: Vec<DVector<f64>> = (0..horizon).map(|_| DVector::from_fn(m, |_, _| uniform(&mut r, -1.0, 1.0))).collect();
    let mut x = x0.clone();
    for u in &inputs {
        x = &plant.a * &x + &plant.b * u;
        rows.push(plant.z(&x));
    }
    let trace = Trace { start, rows };
    let past = Signal::new(start, trace.rows[..=(k0 - start) as usize].to_vec()).unwrap();

    let k_low = k0 - h as i64 + 1;
    let eval: Vec<i64> = if one_time {
        vec![k0 - k_event as i64]
    } else {
        (k_low..=k0 + horizon as i64 - h as i64).collect()
    };
    let expected: f64 = eval.iter().map(|&k| oracle_conj(&ops, &trace, k)).sum();

    let body = body_formula(&ops);
    let signal = trace.signal();
    let semantics: f64 = eval.iter().map(|&k| dsasr(&body, &signal, k, &LatestK1).unwrap()).sum();

    let sys = plant.system(1.0);
    let pm = plant.predicates();
    let stacked = build_stacked(&sys, &pm, horizon).unwrap();
    let branches = compile_branches(&body).unwrap();
    assert_eq!(branches.len(), 1);
    let ctx = AssemblyContext {
        stacked: &stacked,
        system: &sys,
        x0: &x0,
        past: &past,
        k0,
        activation: if one_time { Activation::OneTime { k_event } } else { Activation::AllTime },
        policy: &LatestK1,
        options: EncodeOptions { softening: Softening::Penalty(1e3), margin: 0.0 },
    };
    let program = assemble(&branches[0], ctx).unwrap();

    // Column j of E is channel j % channels at step k_low + j / channels.
    let mut via_matrix = 0.0;
    for i in 0..program.members[0].e.rows() {
        let mut best = f64::INFINITY;
        for (me, op) in program.members.iter().zip(&ops) {
            let e = me.e.matrix();
            let ch = me.e.channels();
            let channels: Vec<&[Lit]> = match op {
                Op::Until { lhs, rhs, .. } => vec![lhs, rhs],
                Op::Eventually { arg, .. } | Op::Always { arg, .. } => vec![arg],
            };
            let mut v = 0.0;
            for j in 0..e.ncols() {
                let w = e[(i, j)];
                if w != 0.0 {
                    let t = k_low + (j / ch) as i64;
                    v += w * conj_value(channels[j % ch], trace.at(t));
                }
            }
            best = best.min(v);
        }
        via_matrix += best;
    }

    let mut lp: LpProblem = program.lp.clone();
    let flat: Vec<f64> = inputs.iter().flat_map(|u| u.iter().copied()).collect();
    for (j, v) in program.layout.inputs.clone().zip(&flat) {
        lp.set_bounds(j, *v, *v);
    }
    let sol = solve(&lp, &SolverOptions::default()).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal, "pinned program must be solvable (seed {seed})");
    let via_program = program.robustness_sum(&sol.x);

    EncoderCheck {
        matrix: (via_matrix - expected).abs(),
        semantics: (semantics - expected).abs(),
        program: (via_program - expected).abs(),
        one_time,
        members,
    }
}

/// Random dense LP with integer data. Every variable has at least one finite bound, so a
/// nonempty feasible set always has a vertex.
pub fn random_lp(seed: u64) -> LpProblem {
    let mut r = rng(seed);
    let n = r.random_range(1..=6usize);
    let rows = r.random_range(0..=10usize);
    let mut lp = LpProblem::new(n);
    lp.set_cost((0..n).map(|_| r.random_range(-5..=5) as f64).collect()).unwrap();
    for j in 0..n {
        match r.random_range(0..3) {
            0 => {
                let l = r.random_range(-5..=3);
                let u = r.random_range(l..=5);
                lp.set_bounds(j, l as f64, u as f64);
            }
            1 => lp.set_bounds(j, r.random_range(-5..=5) as f64, f64::INFINITY),
            _ => lp.set_bounds(j, f64::NEG_INFINITY, r.random_range(-5..=5) as f64),
        }
    }
    for _ in 0..rows {
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-5..=5) as f64).collect();
        lp.add_row(a, r.random_range(-5..=10) as f64).unwrap();
    }
    lp
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Best objective over the vertices of `{x : rows·x <= rhs}`, or `None` without vertices.
fn best_vertex(rows: &[Vec<f64>], rhs: &[f64], cost: &[f64]) -> Option<f64> {
    let n = cost.len();
    let mut best: Option<f64> = None;
    combinations(rows.len(), n, &mut |pick| {
        let a = DMatrix::from_fn(n, n, |i, j| rows[pick[i]][j]);
        let b = DVector::from_fn(n, |i, _| rhs[pick[i]]);
        let lu = a.lu();
        if lu.determinant().abs() < 1e-9 {
            return;
        }
        let Some(x) = lu.solve(&b) else { return };
        let feasible = rows.iter().zip(rhs).all(|(row, &bi)| {
            let lhs: f64 = row.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
            lhs <= bi + 1e-9 * (1.0 + bi.abs())
        });
        if feasible {
            let v: f64 = cost.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    });
    best
}

/// Status and optimum by vertex enumeration. Unboundedness is decided on the recession
/// cone, normalized to the unit box.
pub fn brute_force(lp: &LpProblem) -> (LpStatus, f64) {
    let n = lp.num_vars();
    let mut rows: Vec<Vec<f64>> = lp.rows().to_vec();
    let mut rhs: Vec<f64> = lp.rhs().to_vec();
    let mut cone_rows: Vec<Vec<f64>> = lp.rows().to_vec();
    let mut cone_rhs = vec![0.0; rows.len()];
    for j in 0..n {
        let unit = |s: f64| {
            let mut e = vec![0.0; n];
            e[j] = s;
            e
        };
        let (l, u) = (lp.lower()[j], lp.upper()[j]);
        if l.is_finite() {
            rows.push(unit(-1.0));
            rhs.push(-l);
            cone_rows.push(unit(-1.0));
            cone_rhs.push(0.0);
        }
        if u.is_finite() {
            rows.push(unit(1.0));
            rhs.push(u);
            cone_rows.push(unit(1.0));
            cone_rhs.push(0.0);
        }
        cone_rows.push(unit(1.0));
        cone_rhs.push(1.0);
        cone_rows.push(unit(-1.0));
        cone_rhs.push(1.0);
    }
    let Some(best) = best_vertex(&rows, &rhs, lp.cost()) else {
        return (LpStatus::Infeasible, f64::NAN);
    };
    let ray = best_vertex(&cone_rows, &cone_rhs, lp.cost()).expect("the normalized cone contains 0");
    if ray > 1e-9 {
        (LpStatus::Unbounded, f64::INFINITY)
    } else {
        (LpStatus::Optimal, best)
    }
}

/// Outcome of one noise-free closed loop on a random small instance.
#[derive(Debug, Clone)]
pub enum SoundnessOutcome {
    /// Some step had no feasible program; the implication holds vacuously.
    Infeasible,
    Checked { satisfied: bool, spec: String },
}

pub fn soundness_case(seed: u64) -> SoundnessOutcome {
    let mut r = rng(seed);
    let n = r.random_range(1..=2usize);
    let g = r.random_range(1..=3usize);
    let a = DMatrix::from_fn(n, n, |i, j| (i == j) as u8 as f64 + 0.2 * uniform(&mut r, -1.0, 1.0));
    let b = DMatrix::from_fn(n, 1, |_, _| uniform(&mut r, 0.3, 1.0));
    // Half-planes through a neighbourhood of the origin keep many instances feasible.
    let c = DMatrix::from_fn(g, n, |_, _| uniform(&mut r, -1.0, 1.0));
    let offset = DVector::from_fn(g, |_, _| uniform(&mut r, 0.2, 2.0));
    let sys = LtiSystem::new(a, b, 1.0, DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)).unwrap();
    let labels = (1..=g).map(|i| format!("p{i}")).collect();
    let pm = PredicateMap::new(c, offset, labels).unwrap();

    let count = r.random_range(1..=3usize);
    let mut ops: Vec<Formula> = Vec::new();
    for _ in 0..count {
        let mut op = random_op(&mut r, g, 3);
        if op.hi() == 0 {
            op = Op::Eventually { arg: vec![(0, false)], a: 0, b: 1 };
        }
        ops.push(op.to_formula());
    }
    let body = match (ops.len(), r.random_range(0..3)) {
        (1, _) => ops.pop().unwrap(),
        (_, 0) => Formula::or(ops),
        (3, 1) => {
            let last = ops.pop().unwrap();
            Formula::and(vec![Formula::or(ops), last])
        }
        _ => Formula::and(ops),
    };
    let spec = if r.random_bool(0.3) {
        Specification::one_time(body, r.random_range(0..=2))
    } else {
        Specification::all_time(body)
    };
    let h = spec.length() as usize;
    let horizon = r.random_range(h..=h + 3);
    let steps = r.random_range(h + 2..=h + 6);
    let x0: Vec<f64> = (0..n).map(|_| uniform(&mut r, -0.5, 0.5)).collect();
    let text = spec.to_string();
    let mut ctl = Controller::new(sys, pm, spec.clone(), Box::new(LatestK1), ControllerConfig::new(horizon)).unwrap();
    match simulate(&mut ctl, &x0, steps, &NoiseModel::none()) {
        Err(ControlError::Infeasible { .. }) => SoundnessOutcome::Infeasible,
        Err(e) => panic!("seed {seed}: {e}"),
        Ok(traj) => {
            let report = check_satisfaction(&spec, &traj.signal()).unwrap();
            SoundnessOutcome::Checked { satisfied: report.satisfied, spec: text }
        }
    }
}

/// Random signal for the semantics comparisons, long enough for formulas up to length 8.
pub fn random_signal(r: &mut ChaCha8Rng, g: usize) -> Signal {
    let len = r.random_range(9..=14usize);
    let rows = (0..len).map(|_| (0..g).map(|_| uniform(r, -3.0, 3.0)).collect()).collect();
    Signal::new(0, rows).unwrap()
}

/// Scalar integrator `x+ = x + u`, `|u| <= 1`, with predicates `x - lo_i >= 0` / `hi_i - x >= 0`
/// given as `(coefficient, offset)` pairs.
pub fn scalar_plant(preds: &[(f64, f64)]) -> (LtiSystem, PredicateMap) {
    let sys = LtiSystem::from_rows(&[vec![1.0]], &[vec![1.0]], 1.0, &[-1.0], &[1.0]).unwrap();
    let rows: Vec<Vec<f64>> = preds.iter().map(|p| vec![p.0]).collect();
    let offs: Vec<f64> = preds.iter().map(|p| p.1).collect();
    (sys, PredicateMap::from_rows(&rows, &offs).unwrap())
}
