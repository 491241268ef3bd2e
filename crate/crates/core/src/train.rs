//! Adam, the training loop with early stopping, evaluation with
//! horizon-binned errors, finite-difference gradient checks and
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, ParamLeaves, ParamStore, Tape, Var};
use crate::data::{DatasetSplit, ObservationSequence};
use crate::dynamics::{DynamicsError, DynamicsKind};
use crate::graph::GraphTopology;
use crate::loss::{frame_loss, prediction_errors, LossConfig, LossError, WeightFn};
use crate::model::{Architecture, Frame, Model, ModelError, ModelKind};
use crate::par::Execution;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl TrainError {
    fn is_numerical(&self) -> bool {
        let autodiff = |e: &AutodiffError| {
            matches!(e, AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGradient { .. })
        };
        match self {
            Self::Autodiff(e) | Self::Loss(LossError::Autodiff(e)) => autodiff(e),
            Self::Model(ModelError::Autodiff(e)) | Self::Model(ModelError::Dynamics(DynamicsError::Autodiff(e))) => {
                autodiff(e)
            }
            Self::Model(ModelError::Dynamics(DynamicsError::NonPositiveParam(_))) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::Config(format!("no state for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(TrainError::Config(format!(
                "shape mismatch for {name}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (mk, gk) in m.data_mut().iter_mut().zip(g.data()) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
        }
        let v = state.v.get_mut(name).expect("same names as m");
        for (vk, gk) in v.data_mut().iter_mut().zip(g.data()) {
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
        }
        let (m, v) = (state.m.get(name).expect("m"), state.v.get(name).expect("v"));
        for ((pk, mk), vk) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pk -= cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Training objective; also used for validation and early stopping.
    pub loss: LossConfig,
    /// Reported metric on the test set.
    pub metric: LossConfig,
    /// Sequences per recorded tape; batches are split into chunks of this
    /// size, evaluated independently and reduced in a fixed order.
    pub chunk_size: usize,
}

impl TrainConfig {
    /// Defaults for the synthetic experiment at desk scale.
    pub fn desk(kind: ModelKind, dynamics: DynamicsKind) -> Self {
        Self {
            arch: Architecture::preset(kind, dynamics, 32),
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            loss: LossConfig::default(),
            metric: LossConfig::default(),
            chunk_size: 4,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.chunk_size == 0 {
            return Err(TrainError::Config(
                "learning rate, batch size and chunk size must be positive".into(),
            ));
        }
        if self.arch.kind.is_trainable() && self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be positive".into()));
        }
        self.loss.validate()?;
        self.metric.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Prediction error statistics for one horizon bin `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub mse: f64,
    pub count: usize,
}

pub const BIN_WIDTH: f64 = 0.02;

pub fn bin_index(dt: f64) -> usize {
    (dt / BIN_WIDTH).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean per-sequence loss.
    pub loss: f64,
    pub bins: Vec<BinRow>,
    pub num_predictions: usize,
}

impl EvalResult {
    pub fn loss_x100(&self) -> f64 {
        self.loss * 100.0
    }
}

/// Sequences grouped by length, in first-appearance order, then cut into
/// frames of at most `chunk` sequences.
fn frames<'a>(seqs: &[&'a ObservationSequence], chunk: usize) -> Vec<Frame<'a>> {
    let mut groups: Vec<(usize, Vec<&'a ObservationSequence>)> = Vec::new();
    for &s in seqs {
        match groups.iter_mut().find(|(n, _)| *n == s.len()) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.len(), vec![s])),
        }
    }
    groups
        .into_iter()
        .flat_map(|(_, g)| {
            g.chunks(chunk)
                .map(|c| Frame::new(c.to_vec()).expect("equal lengths"))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Mean loss over `seqs` plus per-horizon errors of every prediction.
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    graph: &GraphTopology,
    seqs: &[ObservationSequence],
    config: &LossConfig,
    chunk: usize,
    exec: &Execution,
) -> Result<EvalResult, TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let refs: Vec<&ObservationSequence> = seqs.iter().collect();
    let frames = frames(&refs, chunk.max(1));
    let parts = exec.map(frames.len(), |k| -> Result<_, TrainError> {
        let frame = &frames[k];
        let tape = Tape::new();
        let leaves = params.leaves(&tape);
        let preds = model.unroll(&tape, &leaves, graph, frame, config.n_init, config.n_max)?;
        let loss = frame_loss(&tape, &preds, frame, config, 1.0)?.value().item();
        let errs: Vec<(f64, f64)> = prediction_errors(&preds, frame)
            .into_iter()
            .map(|e| (e.dt, e.sq_err))
            .collect();
        Ok((loss, errs))
    });
    let mut total = 0.0;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut n = 0;
    for part in parts {
        let (loss, errs) = part?;
        total += loss;
        for (dt, e) in errs {
            let slot = sums.entry(bin_index(dt)).or_insert((0.0, 0));
            slot.0 += e;
            slot.1 += 1;
            n += 1;
        }
    }
    let last = sums.keys().next_back().copied().map_or(0, |k| k + 1);
    let bins = (0..last)
        .map(|k| {
            let (sum, count) = sums.get(&k).copied().unwrap_or((0.0, 0));
            BinRow {
                lo: k as f64 * BIN_WIDTH,
                hi: (k + 1) as f64 * BIN_WIDTH,
                mse: if count > 0 { sum / count as f64 } else { 0.0 },
                count,
            }
        })
        .collect();
    Ok(EvalResult {
        loss: total / seqs.len() as f64,
        bins,
        num_predictions: n,
    })
}

/// Mean loss of a batch and its gradient.
pub fn batch_gradient(
    model: &Model,
    params: &ParamStore,
    graph: &GraphTopology,
    batch: &[&ObservationSequence],
    config: &LossConfig,
    chunk: usize,
    exec: &Execution,
) -> Result<(f64, ParamStore), TrainError> {
    let scale = 1.0 / batch.len() as f64;
    let frames = frames(batch, chunk.max(1));
    let parts = exec.map(frames.len(), |k| -> Result<_, TrainError> {
        let frame = &frames[k];
        let tape = Tape::new();
        let leaves = params.leaves(&tape);
        let preds = model.unroll(&tape, &leaves, graph, frame, config.n_init, config.n_max)?;
        let loss = frame_loss(&tape, &preds, frame, config, scale)?;
        let value = loss.value().item();
        let mut grads = tape.backward(loss)?;
        Ok((value, leaves.gradients(&mut grads)))
    });
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (v, g) = part?;
        total += v;
        grads.accumulate(&g)?;
    }
    Ok((total, grads))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub dynamics: DynamicsKind,
    pub seed: u64,
    pub config_hash: String,
    pub num_params: usize,
    /// Mean training objective per epoch.
    pub train_curve: Vec<f64>,
    /// Validation objective per epoch.
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val: f64,
    /// Test metric, times 100.
    pub test_loss_x100: f64,
    pub test_predictions: usize,
    pub test_bins: Vec<BinRow>,
    pub wall_clock_secs: f64,
}

/// Equality on everything except wall-clock time.
impl PartialEq for MetricsReport {
    fn eq(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        let (a, b) = (strip(self), strip(other));
        serde_json::to_value(&a).ok() == serde_json::to_value(&b).ok()
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `bin_lo,bin_hi,mse,count` rows.
    pub fn bins_csv(&self) -> String {
        bins_csv(&self.test_bins)
    }
}

pub fn bins_csv(bins: &[BinRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "mse", "count"]).expect("in-memory write");
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.mse.to_string(), b.count.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Per-epoch progress.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub secs: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore,
    pub report: MetricsReport,
}

pub fn train(config: &TrainConfig, data: &DatasetSplit, exec: &Execution) -> Result<TrainOutcome, TrainError> {
    train_with_progress(config, data, exec, |_| {})
}

/// Epoch loop over shuffled batches of equal-length sequences; keeps the
/// parameters with the lowest validation objective and stops after
/// `patience` epochs without improvement.
pub fn train_with_progress(
    config: &TrainConfig,
    data: &DatasetSplit,
    exec: &Execution,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(TrainError::Config("train, validation and test splits must be nonempty".into()));
    }
    let start = Instant::now();
    let model = Model::new(config.arch.clone(), data.num_nodes(), data.d_y, data.d_x)?;
    let mut params = model.init_params(config.seed);
    let graph = &data.graph;
    let mut report = MetricsReport {
        model: config.arch.kind,
        dynamics: config.arch.dynamics,
        seed: config.seed,
        config_hash: config.hash(),
        num_params: params.num_scalars(),
        train_curve: Vec::new(),
        val_curve: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        best_val: f64::NAN,
        test_loss_x100: f64::NAN,
        test_predictions: 0,
        test_bins: Vec::new(),
        wall_clock_secs: 0.0,
    };

    if config.arch.kind.is_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0fb_a7c4);
        let mut adam = AdamState::new(&params);
        let adam_cfg = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let mut best = (f64::INFINITY, params.clone(), 0);
        let mut since_best = 0;
        for epoch in 1..=config.max_epochs {
            let epoch_start = Instant::now();
            let batches = epoch_batches(&data.train, config.batch_size, &mut rng);
            let mut weighted = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let diverged = |detail: String| TrainError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail,
                };
                let (loss, grads) =
                    batch_gradient(&model, &params, graph, batch, &config.loss, config.chunk_size, exec).map_err(
                        |e| if e.is_numerical() { diverged(e.to_string()) } else { e },
                    )?;
                if !loss.is_finite() {
                    return Err(diverged(format!("loss {loss}")));
                }
                weighted += loss * batch.len() as f64;
                adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            }
            let train_loss = weighted / data.train.len() as f64;
            let val = evaluate(&model, &params, graph, &data.val, &config.loss, config.chunk_size, exec)
                .map_err(|e| {
                    if e.is_numerical() {
                        TrainError::Divergence {
                            epoch,
                            batch: 0,
                            detail: format!("validation: {e}"),
                        }
                    } else {
                        e
                    }
                })?
                .loss;
            report.train_curve.push(train_loss);
            report.val_curve.push(val);
            report.epochs_run = epoch;
            if val < best.0 {
                best = (val, params.clone(), epoch);
                since_best = 0;
            } else {
                since_best += 1;
            }
            progress(&EpochLog {
                epoch,
                train_loss,
                val_loss: val,
                best_epoch: best.2,
                secs: epoch_start.elapsed().as_secs_f64(),
            });
            if since_best >= config.patience {
                break;
            }
        }
        report.best_val = best.0;
        report.best_epoch = best.2;
        params = best.1;
    } else {
        report.best_val = evaluate(&model, &params, graph, &data.val, &config.loss, config.chunk_size, exec)?.loss;
    }

    let test = evaluate(&model, &params, graph, &data.test, &config.metric, config.chunk_size, exec)?;
    report.test_loss_x100 = test.loss_x100();
    report.test_predictions = test.num_predictions;
    report.test_bins = test.bins;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, params, report })
}

/// Shuffled batches; each batch holds sequences of one length.
fn epoch_batches<'a>(seqs: &'a [ObservationSequence], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a ObservationSequence>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(rng);
    let mut by_len: BTreeMap<usize, Vec<&ObservationSequence>> = BTreeMap::new();
    for k in order {
        by_len.entry(seqs[k].len()).or_default().push(&seqs[k]);
    }
    let mut batches: Vec<Vec<&ObservationSequence>> = by_len
        .into_values()
        .flat_map(|g| g.chunks(batch_size).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect();
    batches.shuffle(rng);
    batches
}

/// Largest relative error between backward and finite-difference gradients
/// in one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_err() < rtol
    }
}

/// Values smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares backward gradients of `f` with central differences of step
/// `step`, entry by entry, for every named group.
pub fn gradcheck<F>(params: &ParamStore, groups: &[(&str, Vec<String>)], step: f64, f: F) -> Result<GradcheckReport, TrainError>
where
    F: for<'t> Fn(&'t Tape, &ParamLeaves<'t>) -> Result<Var<'t>, TrainError>,
{
    let eval = |p: &ParamStore| -> Result<f64, TrainError> {
        let tape = Tape::new();
        Ok(f(&tape, &p.leaves(&tape))?.value().item())
    };
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let loss = f(&tape, &leaves)?;
    let mut grads = tape.backward(loss)?;
    let analytic = leaves.gradients(&mut grads);
    let mut report = Vec::new();
    let mut probe = params.clone();
    for (group, names) in groups {
        let mut check = GroupCheck {
            group: group.to_string(),
            entries: 0,
            max_rel_err: 0.0,
            worst_param: String::new(),
        };
        for name in names {
            let n = params
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("no parameter {name}")))?
                .numel();
            for k in 0..n {
                let orig = params.get(name).expect("checked").data()[k];
                probe.get_mut(name).expect("same names").data_mut()[k] = orig + step;
                let up = eval(&probe)?;
                probe.get_mut(name).expect("same names").data_mut()[k] = orig - step;
                let down = eval(&probe)?;
                probe.get_mut(name).expect("same names").data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * step);
                let err = relative_error(analytic.get(name).expect("same names").data()[k], numeric);
                check.entries += 1;
                if err > check.max_rel_err {
                    check.max_rel_err = err;
                    check.worst_param = format!("{name}[{k}]");
                }
            }
        }
        report.push(check);
    }
    Ok(GradcheckReport { groups: report })
}

/// Gradient check of the sequence loss for a model on one sequence.
pub fn gradcheck_model(
    model: &Model,
    params: &ParamStore,
    graph: &GraphTopology,
    seq: &ObservationSequence,
    loss: &LossConfig,
    step: f64,
) -> Result<GradcheckReport, TrainError> {
    let frame = Frame::single(seq);
    let groups = model.param_groups();
    let groups: Vec<(&str, Vec<String>)> = groups.into_iter().collect();
    gradcheck(params, &groups, step, |tape, leaves| {
        let preds = model.unroll(tape, leaves, graph, &frame, loss.n_init, loss.n_max)?;
        Ok(frame_loss(tape, &preds, &frame, loss, 1.0)?)
    })
}

/// The small instance used for gradient checks: 4 nodes, 6 steps, latent size 4.
pub fn tiny_instance(dynamics: DynamicsKind, seed: u64) -> (Model, ParamStore, GraphTopology, ObservationSequence, LossConfig) {
    use crate::graph::Edge;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = |src, dst, weight| Edge { src, dst, weight };
    let graph = GraphTopology::new(4, vec![e(0, 1, 1.0), e(1, 2, 0.6), e(3, 2, 0.9), e(2, 3, 0.4), e(0, 3, 0.7)])
        .expect("valid graph");
    let model = Model::new(Architecture::preset(ModelKind::Tgnn4i, dynamics, 4), 4, 1, 1).expect("valid model");
    let mut params = model.init_params(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let mut times = Vec::new();
    let mut t = 0.0;
    for _ in 0..6 {
        t += rng.gen_range(0.02..0.08);
        times.push(t);
    }
    let mut mask: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.6)).collect();
    for i in 0..6 {
        mask[i * 4 + i % 4] = true;
    }
    let y: Vec<f64> = mask.iter().map(|&m| if m { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect();
    let x: Vec<f64> = mask.iter().map(|&m| if m { rng.gen_range(0.0..0.2) } else { 0.0 }).collect();
    let seq = ObservationSequence::new(times, 4, 1, 1, mask, y, x).expect("valid sequence");
    let loss = LossConfig {
        weight: WeightFn::W2,
        n_init: 1,
        n_max: 10,
    };
    (model, params, graph, seq, loss)
}

/// What a checkpoint was trained as, checked before reuse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: Architecture,
    pub num_nodes: usize,
    pub d_y: usize,
    pub d_x: usize,
    pub layer_counts: BTreeMap<String, usize>,
    /// Evaluation settings the recorded test metric used.
    pub metric: LossConfig,
    pub graph_checksum: String,
    pub params_sha256: String,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    params: &ParamStore,
    graph: &GraphTopology,
    metric: &LossConfig,
) -> Result<CheckpointManifest, TrainError> {
    let fail = |path: &Path, e: std::io::Error| TrainError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
    let json = params.to_json();
    let path = dir.join("params.json");
    fs::write(&path, &json).map_err(|e| fail(&path, e))?;
    let [state, input, pred] = model.stacks();
    let layer_counts = BTreeMap::from([
        ("state".to_string(), state.layers.len()),
        ("input".to_string(), input.layers.len()),
        ("pred".to_string(), pred.layers.len()),
    ]);
    let manifest = CheckpointManifest {
        arch: model.architecture().clone(),
        num_nodes: model.num_nodes(),
        d_y: model.d_y(),
        d_x: model.d_x(),
        layer_counts,
        metric: *metric,
        graph_checksum: graph.checksum(),
        params_sha256: hex::encode(Sha256::digest(json.as_bytes())),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| fail(&path, e))?;
    Ok(manifest)
}

/// Loads a checkpoint and checks it against the graph it will run on.
pub fn load_checkpoint(dir: &Path, graph: &GraphTopology) -> Result<(Model, ParamStore, CheckpointManifest), TrainError> {
    let fail = |path: PathBuf, message: String| TrainError::Checkpoint { path, message };
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| fail(path.clone(), e.to_string()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| fail(path.clone(), e.to_string()))?;
    if manifest.graph_checksum != graph.checksum() {
        return Err(fail(path, "graph checksum differs from the dataset graph".into()));
    }
    let model = Model::new(manifest.arch.clone(), manifest.num_nodes, manifest.d_y, manifest.d_x)?;
    let ppath = dir.join("params.json");
    let params = ParamStore::load(&ppath).map_err(|e| fail(ppath.clone(), e.to_string()))?;
    model.check_params(&params)?;
    Ok((model, params, manifest))
}
