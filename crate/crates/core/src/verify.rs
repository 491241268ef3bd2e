//! Self-checks runnable from the command line: gradient checks, closed-form
//! dynamics against numerical integration, the truncated loss against a
//! brute-force evaluation, and the baselines as special cases of the full
//! model.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::data::ObservationSequence;
use crate::dynamics::{dynamics_matrix, evolve, ode_reference, DynamicsKind};
use crate::graph::{Edge, GraphTopology};
use crate::loss::{constant_predictions, sequence_loss, untruncated_reference, LossConfig, WeightFn};
use crate::model::{Architecture, Frame, Model, ModelKind, PredictionSet};
use crate::train::{gradcheck_model, tiny_instance};

pub const GRADCHECK_RTOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const DYNAMICS_TOL: f64 = 1e-6;
pub const LOSS_TOL: f64 = 1e-12;
pub const DYNAMICS_DRAWS: usize = 100;
pub const LOSS_DRAWS: usize = 50;
/// Frequencies used for the periodic-to-exponential limit.
pub const VANISHING_FREQUENCY: f64 = 1e-8;
pub const BASELINE_TOL: f64 = 1e-10;
pub const BASELINE_DRAWS: usize = 10;
const RK4_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    Gradcheck,
    DynamicsOracle,
    LossOracle,
    Baselines,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gradcheck => "gradcheck",
            Self::DynamicsOracle => "dynamics-oracle",
            Self::LossOracle => "loss-oracle",
            Self::Baselines => "baselines",
            Self::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gradcheck" => Ok(Self::Gradcheck),
            "dynamics-oracle" => Ok(Self::DynamicsOracle),
            "loss-oracle" => Ok(Self::LossOracle),
            "baselines" => Ok(Self::Baselines),
            "all" => Ok(Self::All),
            other => Err(format!(
                "unknown suite `{other}` (expected gradcheck, dynamics-oracle, loss-oracle, baselines or all)"
            )),
        }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: Suite, name: impl Into<String>, cases: usize, max_error: f64, tolerance: f64, detail: String) -> Self {
        Self {
            suite: suite.name().into(),
            name: name.into(),
            cases,
            max_error,
            tolerance,
            passed: max_error < tolerance,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: max error {:.3e} (tolerance {:.0e}, {} cases){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_error,
            self.tolerance,
            self.cases,
            if self.detail.is_empty() { String::new() } else { format!(", {}", self.detail) }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run(suite: Suite, seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        checks.extend(gradcheck_suite(seed));
    }
    if matches!(suite, Suite::DynamicsOracle | Suite::All) {
        checks.extend(dynamics_suite(seed));
    }
    if matches!(suite, Suite::LossOracle | Suite::All) {
        checks.push(loss_suite(seed));
    }
    if matches!(suite, Suite::Baselines | Suite::All) {
        checks.extend(baseline_suite(seed));
    }
    VerifyReport { seed, checks }
}

/// Backward vs central differences for the full model with every dynamics
/// kind on the small instance.
pub fn gradcheck_suite(seed: u64) -> Vec<CheckResult> {
    DynamicsKind::ALL
        .iter()
        .map(|&kind| {
            let (model, params, graph, seq, loss) = tiny_instance(kind, seed);
            match gradcheck_model(&model, &params, &graph, &seq, &loss, GRADCHECK_STEP) {
                Ok(report) => {
                    let worst = report
                        .groups
                        .iter()
                        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                        .map(|g| format!("worst {} in {}", g.worst_param, g.group))
                        .unwrap_or_default();
                    let entries = report.groups.iter().map(|g| g.entries).sum();
                    CheckResult::new(Suite::Gradcheck, kind.name(), entries, report.max_rel_err(), GRADCHECK_RTOL, worst)
                }
                Err(e) => CheckResult::new(Suite::Gradcheck, kind.name(), 0, f64::INFINITY, GRADCHECK_RTOL, e.to_string()),
            }
        })
        .collect()
}

/// Closed-form evolution vs RK4 for random parameters, states and gaps, and
/// the periodic kind with vanishing frequencies vs the exponential kind.
pub fn dynamics_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for kind in [DynamicsKind::Exponential, DynamicsKind::Periodic] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..DYNAMICS_DRAWS {
            let (w, c, dt) = random_dynamics(&mut rng);
            let closed = evolve(kind, &w, &c, dt).expect("valid draw");
            let numeric = ode_reference(&dynamics_matrix(kind, &w, c.len()), &c, dt, RK4_STEPS);
            worst = worst.max(max_abs_diff(&closed, &numeric));
        }
        out.push(CheckResult::new(
            Suite::DynamicsOracle,
            format!("{}-vs-rk4", kind.name()),
            DYNAMICS_DRAWS,
            worst,
            DYNAMICS_TOL,
            String::new(),
        ));
    }
    out.push(periodic_limit(seed));
    out
}

/// Periodic evolution with every frequency at [`VANISHING_FREQUENCY`]
/// against exponential evolution sharing each pair's decay.
pub fn periodic_limit(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11_4017);
    let mut worst: f64 = 0.0;
    for _ in 0..DYNAMICS_DRAWS {
        let (mut w, c, dt) = random_dynamics(&mut rng);
        let half = c.len() / 2;
        w[half..].iter_mut().for_each(|b| *b = VANISHING_FREQUENCY);
        let shared: Vec<f64> = (0..c.len()).map(|i| w[i / 2]).collect();
        let periodic = evolve(DynamicsKind::Periodic, &w, &c, dt).expect("valid draw");
        let exponential = evolve(DynamicsKind::Exponential, &shared, &c, dt).expect("valid draw");
        worst = worst.max(max_abs_diff(&periodic, &exponential));
    }
    CheckResult::new(Suite::DynamicsOracle, "periodic-limit", DYNAMICS_DRAWS, worst, DYNAMICS_TOL, String::new())
}

/// Truncated loss with `n_max >= n_t` vs the untruncated double sum on
/// random masked sequences.
pub fn loss_suite(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let weights = [WeightFn::W1, WeightFn::W2, WeightFn::W3, WeightFn::W4];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    while cases < LOSS_DRAWS {
        let n_t = rng.gen_range(4..14);
        let (v, d_y) = (rng.gen_range(1..6), rng.gen_range(1..3));
        let seq = random_sequence(&mut rng, n_t, v, d_y);
        let cfg = LossConfig {
            weight: weights[cases % weights.len()],
            n_init: rng.gen_range(0..n_t - 2),
            n_max: n_t + rng.gen_range(0..3),
        };
        let salt = rng.gen::<u64>();
        let value = |i: usize, j: usize, n: usize, d: usize| -> Vec<f64> {
            (0..d)
                .map(|k| {
                    let mut h = ChaCha8Rng::seed_from_u64(salt ^ ((i * 1_000_003 + j * 1009 + n * 31 + k) as u64));
                    h.gen_range(-2.0..2.0)
                })
                .collect()
        };
        let d_y = seq.d_y();
        let tape = Tape::new();
        let frame = Frame::single(&seq);
        let preds = constant_predictions(&tape, &frame, cfg.n_init, cfg.n_max, |_, i, j, n| value(i, j, n, d_y));
        let (Ok(got), Ok(want)) = (
            sequence_loss(&tape, &preds, &seq, &cfg),
            untruncated_reference(&seq, &cfg.weight, cfg.n_init, |i, j, n| value(i - 1, j - 1, n, d_y)),
        ) else {
            continue;
        };
        worst = worst.max((got.value().item() - want).abs());
        cases += 1;
    }
    CheckResult::new(Suite::LossOracle, "truncation-vs-brute-force", cases, worst, LOSS_TOL, String::new())
}

/// TGNN4I on an edgeless graph against GRU-D (node) with the same
/// parameters minus neighbor weights, for each dynamics kind, and GRU-D
/// (joint) on a single node against GRU-D (node).
pub fn baseline_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for kind in DynamicsKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xed6e ^ kind as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..BASELINE_DRAWS {
            let v = rng.gen_range(2..6);
            let arch = Architecture::preset(ModelKind::Tgnn4i, kind, 4);
            let full = Model::new(arch.clone(), v, 1, 0).expect("valid model");
            let node = Model::new(Architecture { kind: ModelKind::GrudNode, ..arch }, v, 1, 0).expect("valid model");
            let params = random_params(&full, &mut rng);
            let node_params = without_neighbor_weights(&params);
            let n_t = rng.gen_range(4..10);
            let seq = random_sequence(&mut rng, n_t, v, 1);
            let ring: Vec<Edge> = (0..v).map(|n| Edge { src: n, dst: (n + 1) % v, weight: 0.7 }).collect();
            let ring = GraphTopology::new(v, ring).expect("valid graph");
            worst = worst.max(max_prediction_diff(
                (&full, &params, &GraphTopology::empty(v)),
                (&node, &node_params, &ring),
                &[&seq],
            ));
        }
        out.push(CheckResult::new(
            Suite::Baselines,
            format!("edgeless-{}-vs-grud-node", kind.name()),
            BASELINE_DRAWS,
            worst,
            BASELINE_TOL,
            String::new(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1017);
    let mut worst: f64 = 0.0;
    for draw in 0..BASELINE_DRAWS {
        let kind = DynamicsKind::ALL[draw % 3];
        let arch = Architecture::preset(ModelKind::GrudNode, kind, 6);
        let node = Model::new(arch.clone(), 1, 2, 0).expect("valid model");
        let joint = Model::new(Architecture { kind: ModelKind::GrudJoint, ..arch }, 1, 2, 0).expect("valid model");
        let params = random_params(&node, &mut rng);
        let n_t = rng.gen_range(4..10);
        let seqs: Vec<ObservationSequence> = (0..3).map(|_| random_sequence(&mut rng, n_t, 1, 2)).collect();
        let refs: Vec<&ObservationSequence> = seqs.iter().collect();
        let g = GraphTopology::empty(1);
        worst = worst.max(max_prediction_diff((&node, &params, &g), (&joint, &params, &g), &refs));
    }
    out.push(CheckResult::new(
        Suite::Baselines,
        "joint-one-node-vs-grud-node",
        BASELINE_DRAWS,
        worst,
        BASELINE_TOL,
        String::new(),
    ));
    out
}

fn random_params(model: &Model, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut params = model.init_params(rng.gen());
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.6..0.6));
    }
    params
}

fn without_neighbor_weights(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if let Some(base) = name.strip_suffix(".w1") {
            out.insert(format!("{base}.w"), t.clone());
        } else if !name.ends_with(".w2") {
            out.insert(name, t.clone());
        }
    }
    out
}

/// Largest difference between the predictions of two models on the same
/// frame, or infinity if they fail or disagree on which pairs they predict.
fn max_prediction_diff(
    a: (&Model, &ParamStore, &GraphTopology),
    b: (&Model, &ParamStore, &GraphTopology),
    seqs: &[&ObservationSequence],
) -> f64 {
    let Ok(frame) = Frame::new(seqs.to_vec()) else {
        return f64::INFINITY;
    };
    let tape = Tape::new();
    let run = |(model, params, graph): (&Model, &ParamStore, &GraphTopology)| {
        model.unroll(&tape, &params.leaves(&tape), graph, &frame, 1, 3)
    };
    let (Ok(pa), Ok(pb)) = (run(a), run(b)) else {
        return f64::INFINITY;
    };
    prediction_diff(&pa, &pb)
}

fn prediction_diff(a: &PredictionSet, b: &PredictionSet) -> f64 {
    if a.pairs() != b.pairs() {
        return f64::INFINITY;
    }
    a.blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| max_abs_diff(x.values.value().data(), y.values.value().data()))
        .fold(0.0, f64::max)
}

fn random_dynamics(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let d = 2 * rng.gen_range(1..5);
    let w = (0..d).map(|_| rng.gen_range(0.01..5.0)).collect();
    let c = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (w, c, rng.gen_range(0.0..=1.0))
}

/// Increasing times in (0, 1], each step with at least one observed node.
pub fn random_sequence(rng: &mut ChaCha8Rng, n_t: usize, v: usize, d_y: usize) -> ObservationSequence {
    let mut times: Vec<f64> = (0..n_t).map(|_| rng.gen_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    for k in 1..n_t {
        if times[k] <= times[k - 1] {
            times[k] = times[k - 1] + 1e-3;
        }
    }
    let mut mask: Vec<bool> = (0..n_t * v).map(|_| rng.gen_bool(0.5)).collect();
    for i in 0..n_t {
        let n = rng.gen_range(0..v);
        mask[i * v + n] = true;
    }
    let y = mask
        .iter()
        .flat_map(|&m| (0..d_y).map(move |_| m))
        .map(|m| if m { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();
    ObservationSequence::new(times, v, d_y, 0, mask, y, Vec::new()).expect("valid sequence")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
