//! TGNN4I and its baselines.
//!
//! Every recurrent model shares one cell: node states decay continuously
//! between observations (`h = h_bar + c(t)`), and at each observation time
//! a two-part GRU updates the full state and the decay target from seven
//! chunks of a state pathway and an input pathway. TGNN4I evaluates both
//! pathways and the predictive head with message-passing layers; GRU-D
//! (node) uses plain matrices; GRU-D (joint) runs one state per sequence
//! over the concatenated node series.

mod frame;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamLeaves, ParamStore, Tape, Tensor, Var};
use crate::dynamics::{evolve_var, DynamicsError, DynamicsKind};
use crate::gnn::{FrameGraph, LayerKind, Stack};
use crate::graph::GraphTopology;

pub use frame::{split_nodes, Frame};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{0}")]
    Config(String),
    #[error("sequence of {n_t} steps is too short for {n_init} warm-up steps")]
    TooShort { n_t: usize, n_init: usize },
    #[error("time index {0} has no observed node")]
    EmptyStep(usize),
    #[error("cannot predict at time {t}: a node was last updated at {last}")]
    PredictBeforeUpdate { t: f64, last: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Tgnn4i,
    GrudNode,
    GrudJoint,
    PredictPrevious,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Tgnn4i, Self::GrudNode, Self::GrudJoint, Self::PredictPrevious];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tgnn4i => "tgnn4i",
            Self::GrudNode => "grud-node",
            Self::GrudJoint => "grud-joint",
            Self::PredictPrevious => "predict-prev",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != Self::PredictPrevious
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model `{s}`")))
    }
}

/// Model family and layer sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub dynamics: DynamicsKind,
    /// Latent size per node (per sequence for the joint model).
    pub d_h: usize,
    /// Width of intermediate layers in every stack.
    pub hidden: usize,
    /// Layers in each GRU pathway.
    pub gru_layers: usize,
    /// Leading layers of the predictive head that see the neighborhood.
    pub g_gnn_layers: usize,
    /// Trailing fully connected layers of the predictive head.
    pub g_fc_layers: usize,
}

impl Architecture {
    /// Default sizes per model family.
    pub fn preset(kind: ModelKind, dynamics: DynamicsKind, d_h: usize) -> Self {
        let (gru_layers, g_gnn_layers) = match kind {
            ModelKind::Tgnn4i => (2, 2),
            _ => (1, 0),
        };
        Self {
            kind,
            dynamics,
            d_h,
            hidden: d_h,
            gru_layers,
            g_gnn_layers,
            g_fc_layers: 2,
        }
    }
}

/// Per-row continuous-time state: decay target, jump value, dynamics
/// parameters (absent for static dynamics) and last update time.
#[derive(Clone, Debug)]
pub struct NodeLatentBank<'t> {
    pub h_bar: Var<'t>,
    pub c: Var<'t>,
    pub w: Option<Var<'t>>,
    pub t_last: Vec<f64>,
}

/// Gate activations of one update, for inspection.
#[derive(Clone, Debug)]
pub struct Gates<'t> {
    pub r: Var<'t>,
    pub z: Var<'t>,
    pub r_bar: Var<'t>,
    pub z_bar: Var<'t>,
}

/// Predictions `y_hat_{i -> j}` for every row of a frame. Step indices are
/// zero-based; rows whose node is unobserved at `j` are present but carry
/// no loss weight.
#[derive(Clone, Debug)]
pub struct PredictionBlock<'t> {
    pub i: usize,
    pub j: usize,
    pub values: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct PredictionSet<'t> {
    pub n_init: usize,
    pub n_max: usize,
    pub blocks: Vec<PredictionBlock<'t>>,
}

impl PredictionSet<'_> {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `(i, j)` pairs in emission order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.i, b.j)).collect()
    }
}

/// `(i, j)` prediction pairs (zero-based) for a sequence of `n_t` steps.
pub fn prediction_pairs(n_t: usize, n_init: usize, n_max: usize) -> Vec<(usize, usize)> {
    (n_init..n_t)
        .flat_map(|i| (i + 1..=(i + n_max).min(n_t - 1)).map(move |j| (i, j)))
        .collect()
}

pub fn check_length(n_t: usize, n_init: usize) -> Result<(), ModelError> {
    if n_init + 2 > n_t {
        return Err(ModelError::TooShort { n_t, n_init });
    }
    Ok(())
}

const CHUNKS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    num_nodes: usize,
    d_y: usize,
    d_x: usize,
    state: Stack,
    input: Stack,
    pred: Stack,
}

impl Model {
    pub fn new(arch: Architecture, num_nodes: usize, d_y: usize, d_x: usize) -> Result<Self, ModelError> {
        if num_nodes == 0 || d_y == 0 {
            return Err(ModelError::Config("model needs at least one node and output".into()));
        }
        let trainable = arch.kind.is_trainable();
        if trainable {
            if arch.d_h == 0 || arch.hidden == 0 || arch.gru_layers == 0 {
                return Err(ModelError::Config("latent size, hidden width and GRU layers must be positive".into()));
            }
            if arch.g_gnn_layers + arch.g_fc_layers == 0 {
                return Err(ModelError::Config("predictive head needs at least one layer".into()));
            }
            arch.dynamics.check_dim(arch.d_h)?;
        }
        let d = arch.d_h;
        let (pathway, head) = match arch.kind {
            ModelKind::Tgnn4i => (LayerKind::Gnn, LayerKind::Gnn),
            _ => (LayerKind::Dense { bias: false }, LayerKind::Dense { bias: false }),
        };
        let (input_width, pred_in, pred_out) = match arch.kind {
            ModelKind::GrudJoint => (num_nodes * (d_y + d_x + 1), d + num_nodes * d_x, num_nodes * d_y),
            _ => (d_y + d_x + 1, d + d_x, d_y),
        };
        let pathway_kinds = vec![pathway; arch.gru_layers];
        let mut head_kinds = vec![head; arch.g_gnn_layers];
        head_kinds.extend(std::iter::repeat_n(LayerKind::Dense { bias: true }, arch.g_fc_layers));
        Ok(Self {
            state: Stack::chain("state", &pathway_kinds, d, arch.hidden, CHUNKS * d),
            input: Stack::chain("input", &pathway_kinds, input_width, arch.hidden, CHUNKS * d),
            pred: Stack::chain("pred", &head_kinds, pred_in, arch.hidden, pred_out),
            arch,
            num_nodes,
            d_y,
            d_x,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn stacks(&self) -> [&Stack; 3] {
        [&self.state, &self.input, &self.pred]
    }

    /// Rows of learned initial state: one per node, or one for the joint model.
    fn init_rows(&self) -> usize {
        match self.arch.kind {
            ModelKind::GrudJoint => 1,
            _ => self.num_nodes,
        }
    }

    /// Fresh parameters: uniform `±1/sqrt(fan_in)` weights, zero biases and
    /// zero initial states.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        if !self.arch.kind.is_trainable() {
            return store;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stack in self.stacks() {
            stack.init_params(&mut rng, &mut store);
        }
        store.insert("gru.bias", Tensor::zeros(&[1, CHUNKS * self.arch.d_h]));
        store.insert("init.h", Tensor::zeros(&[self.init_rows(), self.arch.d_h]));
        store
    }

    /// Parameter names grouped by role.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<String>)> {
        if !self.arch.kind.is_trainable() {
            return Vec::new();
        }
        let names = |s: &Stack| s.layers.iter().flat_map(|l| l.param_names()).collect::<Vec<_>>();
        vec![
            ("state-pathway", names(&self.state)),
            ("input-pathway", names(&self.input)),
            ("gru-bias", vec!["gru.bias".into()]),
            ("predictive-head", names(&self.pred)),
            ("initial-state", vec!["init.h".into()]),
        ]
    }

    /// Checks that `params` holds exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<(), ModelError> {
        let expected = self.init_params(0);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    fn frame_graph(&self, graph: &GraphTopology, frame: &Frame) -> FrameGraph {
        match self.arch.kind {
            ModelKind::Tgnn4i => FrameGraph::replicated(graph, frame.num_sequences()),
            ModelKind::GrudJoint => FrameGraph::edgeless(frame.num_sequences()),
            _ => FrameGraph::edgeless(frame.rows()),
        }
    }

    fn check_frame(&self, graph: &GraphTopology, frame: &Frame) -> Result<(), ModelError> {
        if frame.num_nodes() != self.num_nodes
            || graph.num_nodes() != self.num_nodes
            || frame.d_y() != self.d_y
            || frame.d_x() != self.d_x
        {
            return Err(ModelError::Config(format!(
                "data ({} nodes, d_y {}, d_x {}) does not match model ({} nodes, d_y {}, d_x {})",
                frame.num_nodes(),
                frame.d_y(),
                frame.d_x(),
                self.num_nodes,
                self.d_y,
                self.d_x
            )));
        }
        Ok(())
    }

    /// Bank before the first observation: `h_bar = 0`, `c = h(0)`,
    /// `w = softplus(b_7)`, last update at time 0.
    pub fn initial_bank<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamLeaves<'t>,
        rows: usize,
    ) -> Result<NodeLatentBank<'t>, ModelError> {
        let d = self.arch.d_h;
        let per = self.init_rows();
        let init_index: Rc<[usize]> = (0..rows).map(|r| r % per).collect();
        let zeros: Rc<[usize]> = vec![0; rows].into();
        let c = params.get("init.h")?.gather_rows(init_index)?;
        let w = match self.arch.dynamics {
            DynamicsKind::Static => None,
            _ => Some(
                params
                    .get("gru.bias")?
                    .slice_cols(6 * d, 7 * d)?
                    .softplus()?
                    .gather_rows(zeros)?,
            ),
        };
        Ok(NodeLatentBank {
            h_bar: tape.constant(Tensor::zeros(&[rows, d])),
            c,
            w,
            t_last: vec![0.0; rows],
        })
    }

    /// Full latent state of every row at the given per-row times.
    pub fn state_at<'t>(&self, bank: &NodeLatentBank<'t>, times: &[f64]) -> Result<Var<'t>, ModelError> {
        let mut dt = Vec::with_capacity(times.len());
        for (&t, &last) in times.iter().zip(&bank.t_last) {
            if t < last {
                return Err(ModelError::PredictBeforeUpdate { t, last });
            }
            dt.push(t - last);
        }
        let evolved = evolve_var(self.arch.dynamics, bank.c, bank.w, dt.into())?;
        Ok(bank.h_bar.add(&evolved)?)
    }

    /// GRU update at per-row times `times` with input rows `input`. Rows
    /// outside `mask` keep their bank entry.
    pub fn update<'t>(
        &self,
        params: &ParamLeaves<'t>,
        graph: &FrameGraph,
        bank: &NodeLatentBank<'t>,
        times: &[f64],
        mask: Rc<[bool]>,
        input: Tensor,
    ) -> Result<(NodeLatentBank<'t>, Gates<'t>), ModelError> {
        let tape = bank.h_bar.tape();
        let h = self.state_at(bank, times)?;
        let u = self.state.apply(params, h, graph)?.split_cols(CHUNKS)?;
        let v = self
            .input
            .apply(params, tape.constant(input), graph)?
            .add_row(&params.get("gru.bias")?)?
            .split_cols(CHUNKS)?;

        let gate = |k: usize| -> Result<Var<'t>, AutodiffError> { v[k].add(&u[k])?.sigmoid() };
        let blend = |z: &Var<'t>, old: &Var<'t>, new: &Var<'t>| -> Result<Var<'t>, AutodiffError> {
            old.add(&z.mul(&new.sub(old)?)?)
        };
        let r = gate(0)?;
        let z = gate(1)?;
        let q = v[2].add(&r.mul(&u[2])?)?.tanh()?;
        let h_new = blend(&z, &h, &q)?;
        let r_bar = gate(3)?;
        let z_bar = gate(4)?;
        let q_bar = v[5].add(&r_bar.mul(&u[5])?)?.tanh()?;
        let h_bar_new = blend(&z_bar, &bank.h_bar, &q_bar)?;
        let c_new = h_new.sub(&h_bar_new)?;
        let w_new = match self.arch.dynamics {
            DynamicsKind::Static => None,
            _ => Some(v[6].add(&u[6])?.softplus()?),
        };

        let all = mask.iter().all(|&m| m);
        let merge = |new: Var<'t>, old: Var<'t>| -> Result<Var<'t>, AutodiffError> {
            if all {
                Ok(new)
            } else {
                new.where_rows(Rc::clone(&mask), &old)
            }
        };
        let w = match (w_new, bank.w) {
            (Some(new), Some(old)) => Some(merge(new, old)?),
            _ => None,
        };
        let t_last = bank
            .t_last
            .iter()
            .zip(times)
            .zip(mask.iter())
            .map(|((&old, &t), &m)| if m { t } else { old })
            .collect();
        let next = NodeLatentBank {
            h_bar: merge(h_bar_new, bank.h_bar)?,
            c: merge(c_new, bank.c)?,
            w,
            t_last,
        };
        Ok((next, Gates { r, z, r_bar, z_bar }))
    }

    /// Evolves every row to `times`, appends `x` and applies the predictive head.
    pub fn predict<'t>(
        &self,
        params: &ParamLeaves<'t>,
        graph: &FrameGraph,
        bank: &NodeLatentBank<'t>,
        times: &[f64],
        x: Tensor,
    ) -> Result<Var<'t>, ModelError> {
        let tape = bank.h_bar.tape();
        let h = self.state_at(bank, times)?;
        let input = tape.concat_cols(&[h, tape.constant(x)])?;
        Ok(self.pred.apply(params, input, graph)?)
    }

    /// Updates at every step and, from step `n_init` on (zero-based),
    /// predicts the next `n_max` steps before any later update.
    pub fn unroll<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamLeaves<'t>,
        graph: &GraphTopology,
        frame: &Frame,
        n_init: usize,
        n_max: usize,
    ) -> Result<PredictionSet<'t>, ModelError> {
        self.check_frame(graph, frame)?;
        let n_t = frame.len();
        check_length(n_t, n_init)?;
        if self.arch.kind == ModelKind::PredictPrevious {
            return Ok(predict_previous(tape, frame, n_init, n_max));
        }
        let fg = self.frame_graph(graph, frame);
        let joint = self.arch.kind == ModelKind::GrudJoint;
        let rows = if joint { frame.num_sequences() } else { frame.rows() };
        let mut bank = self.initial_bank(tape, params, rows)?;
        let mut blocks = Vec::new();
        let last_useful = if n_max == 0 { 0 } else { n_t - 1 };
        for i in 0..last_useful {
            let step_mask = frame.mask(i);
            for s in frame.sequences() {
                if s.num_observed(i) == 0 {
                    return Err(ModelError::EmptyStep(i));
                }
            }
            let (times, mask, input) = if joint {
                (frame.seq_times(i), vec![true; rows].into(), frame.joint_input(i))
            } else {
                (frame.row_times(i), step_mask, frame.node_input(i))
            };
            bank = self.update(params, &fg, &bank, &times, mask, input)?.0;
            if i < n_init {
                continue;
            }
            for j in i + 1..=(i + n_max).min(n_t - 1) {
                let values = if joint {
                    self.predict(params, &fg, &bank, &frame.seq_times(j), frame.joint_x(j))?
                        .reshape(&[frame.rows(), self.d_y])?
                } else {
                    self.predict(params, &fg, &bank, &frame.row_times(j), frame.x(j))?
                };
                blocks.push(PredictionBlock { i, j, values });
            }
        }
        Ok(PredictionSet { n_init, n_max, blocks })
    }
}

/// Last observed value of each node up to step `i`, zero if never observed.
pub fn last_observed(seq: &crate::data::ObservationSequence, i: usize, n: usize) -> Vec<f64> {
    (0..=i)
        .rev()
        .find(|&k| seq.observed(k, n))
        .map_or_else(|| vec![0.0; seq.d_y()], |k| seq.y_at(k, n).to_vec())
}

/// Forecasts the last observed value per node. Predictions are constants
/// on `tape`.
pub fn predict_previous<'t>(tape: &'t Tape, frame: &Frame, n_init: usize, n_max: usize) -> PredictionSet<'t> {
    let (v, d_y) = (frame.num_nodes(), frame.d_y());
    let mut last = vec![0.0; frame.rows() * d_y];
    let mut blocks = Vec::new();
    for i in 0..frame.len() {
        for (s, seq) in frame.sequences().iter().enumerate() {
            for n in 0..v {
                if seq.observed(i, n) {
                    let r = s * v + n;
                    last[r * d_y..(r + 1) * d_y].copy_from_slice(seq.y_at(i, n));
                }
            }
        }
        if i < n_init || n_max == 0 || i + 1 >= frame.len() {
            continue;
        }
        let values = tape.constant(Tensor::matrix(frame.rows(), d_y, last.clone()).expect("sized"));
        for j in i + 1..=(i + n_max).min(frame.len() - 1) {
            blocks.push(PredictionBlock { i, j, values });
        }
    }
    PredictionSet { n_init, n_max, blocks }
}
