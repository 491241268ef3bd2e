//! Irregularly observed graph time series: the sequence type, the synthetic
//! periodic generator, subsampling of regular series, standard input
//! features, splits and the on-disk dataset format.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{build_delaunay_dag, GraphError, GraphTopology};
use crate::par::Execution;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{file}: record {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
}

fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One graph time series with `len()` observation times. Values and
/// features are stored row-major as `[time][node][dim]` and are exactly
/// zero wherever the node is unobserved.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSequence {
    times: Vec<f64>,
    num_nodes: usize,
    d_y: usize,
    d_x: usize,
    mask: Vec<bool>,
    y: Vec<f64>,
    x: Vec<f64>,
}

impl ObservationSequence {
    pub fn new(
        times: Vec<f64>,
        num_nodes: usize,
        d_y: usize,
        d_x: usize,
        mask: Vec<bool>,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self, DataError> {
        let n_t = times.len();
        if n_t == 0 || num_nodes == 0 || d_y == 0 {
            return Err(invalid("sequence needs at least one time, node and output dim"));
        }
        if mask.len() != n_t * num_nodes
            || y.len() != n_t * num_nodes * d_y
            || x.len() != n_t * num_nodes * d_x
        {
            return Err(invalid(format!(
                "array lengths (mask {}, y {}, x {}) do not match {} times x {} nodes",
                mask.len(),
                y.len(),
                x.len(),
                n_t,
                num_nodes
            )));
        }
        for (i, pair) in times.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(invalid(format!(
                    "times not strictly increasing at index {}: {} then {}",
                    i + 1,
                    pair[0],
                    pair[1]
                )));
            }
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(invalid("non-finite time"));
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite value"));
        }
        let seq = Self {
            times,
            num_nodes,
            d_y,
            d_x,
            mask,
            y,
            x,
        };
        for i in 0..n_t {
            if seq.num_observed(i) == 0 {
                return Err(invalid(format!("time index {i} has no observed node")));
            }
            for n in 0..num_nodes {
                if !seq.observed(i, n)
                    && (seq.y_at(i, n).iter().any(|&v| v != 0.0)
                        || seq.x_at(i, n).iter().any(|&v| v != 0.0))
                {
                    return Err(invalid(format!(
                        "node {n} is unobserved at time index {i} but has nonzero values"
                    )));
                }
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
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

    pub fn observed(&self, i: usize, n: usize) -> bool {
        self.mask[i * self.num_nodes + n]
    }

    pub fn mask_at(&self, i: usize) -> &[bool] {
        &self.mask[i * self.num_nodes..(i + 1) * self.num_nodes]
    }

    pub fn num_observed(&self, i: usize) -> usize {
        self.mask_at(i).iter().filter(|&&m| m).count()
    }

    pub fn total_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn y_at(&self, i: usize, n: usize) -> &[f64] {
        let k = (i * self.num_nodes + n) * self.d_y;
        &self.y[k..k + self.d_y]
    }

    pub fn x_at(&self, i: usize, n: usize) -> &[f64] {
        let k = (i * self.num_nodes + n) * self.d_x;
        &self.x[k..k + self.d_x]
    }

    /// All node values at time index `i` (`num_nodes * d_y`).
    pub fn y_step(&self, i: usize) -> &[f64] {
        let w = self.num_nodes * self.d_y;
        &self.y[i * w..(i + 1) * w]
    }

    pub fn x_step(&self, i: usize) -> &[f64] {
        let w = self.num_nodes * self.d_x;
        &self.x[i * w..(i + 1) * w]
    }

    /// Keeps time indices `keep` (sorted, unique) with the given per-entry mask.
    fn restrict(&self, keep: &[usize], entry_mask: impl Fn(usize, usize) -> bool) -> Result<Self, DataError> {
        let (v, dy, dx) = (self.num_nodes, self.d_y, self.d_x);
        let mut times = Vec::new();
        let mut mask = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        for (k, &i) in keep.iter().enumerate() {
            let row: Vec<bool> = (0..v).map(|n| self.observed(i, n) && entry_mask(k, n)).collect();
            if !row.iter().any(|&m| m) {
                continue;
            }
            times.push(self.times[i]);
            for (n, &m) in row.iter().enumerate() {
                mask.push(m);
                if m {
                    y.extend_from_slice(self.y_at(i, n));
                    x.extend_from_slice(self.x_at(i, n));
                } else {
                    y.extend(std::iter::repeat_n(0.0, dy));
                    x.extend(std::iter::repeat_n(0.0, dx));
                }
            }
        }
        if times.is_empty() {
            return Err(invalid("subsampling left no observations"));
        }
        Self::new(times, v, dy, dx, mask, y, x)
    }
}

/// Divides all times by `span`, the length of the original time grid.
pub fn rescale_time(seq: &ObservationSequence, span: f64) -> Result<ObservationSequence, DataError> {
    if !(span > 0.0) || !span.is_finite() {
        return Err(DataError::Argument(format!("time span must be positive, got {span}")));
    }
    let mut out = seq.clone();
    for t in &mut out.times {
        *t /= span;
    }
    for (i, pair) in out.times.windows(2).enumerate() {
        if !(pair[1] > pair[0]) {
            return Err(invalid(format!("rescaling merged times at index {}", i + 1)));
        }
    }
    Ok(out)
}

/// Keeps `keep_times` uniformly chosen time indices, then `round(p * kept * |V|)`
/// of the resulting node observations. Rows left empty are dropped.
pub fn irregularize_one(
    seq: &ObservationSequence,
    keep_times: usize,
    p: f64,
    rng: &mut impl Rng,
) -> Result<ObservationSequence, DataError> {
    if keep_times == 0 || keep_times > seq.len() {
        return Err(DataError::Argument(format!(
            "keep_times must be in 1..={}, got {keep_times}",
            seq.len()
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(DataError::Argument(format!("observation fraction must be in (0, 1], got {p}")));
    }
    let mut times = sample(rng, seq.len(), keep_times).into_vec();
    times.sort_unstable();
    let v = seq.num_nodes();
    let total = keep_times * v;
    let keep_obs = (p * total as f64).round() as usize;
    let mut kept = vec![false; total];
    for k in sample(rng, total, keep_obs.min(total)) {
        kept[k] = true;
    }
    seq.restrict(&times, |k, n| kept[k * v + n])
}

/// Subsamples every sequence with its own random stream derived from `seed`.
pub fn irregularize(
    seqs: &[ObservationSequence],
    keep_times: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<ObservationSequence>, DataError> {
    seqs.iter()
        .enumerate()
        .map(|(k, s)| irregularize_one(s, keep_times, p, &mut stream_rng(seed, k as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Time since the node was last observed.
    StalenessOnly,
    /// Rescaled time (the time of day for day-long sequences), then staleness.
    TimeOfDayAndStaleness,
}

impl FeatureKind {
    pub fn width(self) -> usize {
        match self {
            Self::StalenessOnly => 1,
            Self::TimeOfDayAndStaleness => 2,
        }
    }
}

/// Appends standard features after any existing ones. A node's first
/// observation gets staleness `t_i`, the time since the sequence start.
pub fn add_standard_features(seq: &ObservationSequence, kind: FeatureKind) -> ObservationSequence {
    let (v, dx) = (seq.num_nodes, seq.d_x);
    let new_dx = dx + kind.width();
    let mut x = Vec::with_capacity(seq.len() * v * new_dx);
    let mut last = vec![0.0; v];
    for i in 0..seq.len() {
        let t = seq.times[i];
        for (n, last) in last.iter_mut().enumerate() {
            x.extend_from_slice(seq.x_at(i, n));
            if seq.observed(i, n) {
                if kind == FeatureKind::TimeOfDayAndStaleness {
                    x.push(t);
                }
                x.push(t - *last);
                *last = t;
            } else {
                x.extend(std::iter::repeat_n(0.0, kind.width()));
            }
        }
    }
    ObservationSequence {
        d_x: new_dx,
        x,
        ..seq.clone()
    }
}

/// Train/validation/test sequences over one shared graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub graph: GraphTopology,
    pub d_y: usize,
    pub d_x: usize,
    pub train: Vec<ObservationSequence>,
    pub val: Vec<ObservationSequence>,
    pub test: Vec<ObservationSequence>,
    pub seed: Option<u64>,
    /// Free-form description of how the data was produced.
    pub provenance: serde_json::Value,
}

impl DatasetSplit {
    pub fn new(
        graph: GraphTopology,
        train: Vec<ObservationSequence>,
        val: Vec<ObservationSequence>,
        test: Vec<ObservationSequence>,
    ) -> Result<Self, DataError> {
        let first = train
            .first()
            .or(val.first())
            .or(test.first())
            .ok_or_else(|| DataError::Argument("dataset has no sequences".into()))?;
        let (d_y, d_x) = (first.d_y, first.d_x);
        for s in train.iter().chain(&val).chain(&test) {
            if s.num_nodes != graph.num_nodes() || s.d_y != d_y || s.d_x != d_x {
                return Err(invalid(format!(
                    "sequence shape ({} nodes, d_y {}, d_x {}) differs from dataset ({} nodes, d_y {d_y}, d_x {d_x})",
                    s.num_nodes,
                    s.d_y,
                    s.d_x,
                    graph.num_nodes()
                )));
            }
        }
        Ok(Self {
            graph,
            d_y,
            d_x,
            train,
            val,
            test,
            seed: None,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_sequences(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Sequence counts for the given ratios: rounded train and validation
/// shares, the remainder for testing.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DataError> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || !total.is_finite() {
        return Err(DataError::Argument(format!("split ratios must be positive, got {ratios:?}")));
    }
    let train = (n as f64 * ratios[0] / total).round() as usize;
    let val = (n as f64 * ratios[1] / total).round() as usize;
    let counts = [train, val, n.saturating_sub(train + val)];
    if counts.contains(&0) || train + val > n {
        return Err(DataError::Argument(format!(
            "{n} sequences are too few for nonempty splits with ratios {ratios:?}"
        )));
    }
    Ok(counts)
}

/// Random partition by sequence.
pub fn split_dataset(
    graph: GraphTopology,
    seqs: Vec<ObservationSequence>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let counts = split_counts(seqs.len(), ratios)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<ObservationSequence>> = seqs.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<ObservationSequence> {
        order[range].iter().map(|&k| slots[k].take().expect("each index once")).collect()
    };
    let train = take(0..counts[0]);
    let val = take(counts[0]..counts[0] + counts[1]);
    let test = take(counts[0] + counts[1]..order.len());
    let mut split = DatasetSplit::new(graph, train, val, test)?;
    split.seed = Some(seed);
    Ok(split)
}

/// Random stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_nodes: usize,
    pub num_sequences: usize,
    pub times_per_seq: usize,
    pub grid: usize,
    pub obs_fraction: f64,
    pub lag: f64,
    pub noise_std: f64,
    pub phi_range: [f64; 2],
    /// Train/validation/test sequence counts; must sum to `num_sequences`.
    pub split: [usize; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_nodes: 20,
            num_sequences: 200,
            times_per_seq: 70,
            grid: 1000,
            obs_fraction: 0.5,
            lag: 0.05,
            noise_std: 0.01,
            phi_range: [20.0, 100.0],
            split: [100, 50, 50],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Argument(m));
        if self.num_nodes < 3 {
            return fail(format!("need at least 3 nodes, got {}", self.num_nodes));
        }
        if self.grid < 2 || self.times_per_seq == 0 || self.times_per_seq > self.grid {
            return fail(format!(
                "times per sequence must be in 1..={} (grid {})",
                self.grid, self.grid
            ));
        }
        if !(self.obs_fraction > 0.0 && self.obs_fraction <= 1.0) {
            return fail(format!("observation fraction must be in (0, 1], got {}", self.obs_fraction));
        }
        if !(self.lag >= 0.0) || !(self.noise_std >= 0.0) {
            return fail("lag and noise std must be nonnegative".into());
        }
        if !(self.phi_range[0] <= self.phi_range[1]) {
            return fail(format!("bad frequency range {:?}", self.phi_range));
        }
        if self.split.iter().sum::<usize>() != self.num_sequences || self.split.contains(&0) {
            return fail(format!(
                "split {:?} must be nonempty and sum to {} sequences",
                self.split, self.num_sequences
            ));
        }
        Ok(())
    }

    /// Grid spacing: the grid covers [0, 1] with `grid` points.
    pub fn grid_step(&self) -> f64 {
        1.0 / (self.grid - 1) as f64
    }

    /// The lag in whole grid steps.
    pub fn lag_steps(&self) -> usize {
        (self.lag / self.grid_step()).round() as usize
    }
}

/// Generated dataset plus the latent quantities needed to reconstruct the
/// clean signals.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub split: DatasetSplit,
    pub positions: Vec<[f64; 2]>,
    pub phi: Vec<f64>,
    /// Phase offsets per sequence, in train, validation, test order.
    pub eta: Vec<Vec<f64>>,
}

/// Clean signals on the grid: `s_n(t) = sin(phi_n t + eta_n) +
/// (0.5 / |N(n)|) sum_{m in N(n)} s_m(t - lag)`, with `s = 0` before time 0.
/// Returns `[node][grid index]`.
pub fn synthetic_clean_signals(
    graph: &GraphTopology,
    phi: &[f64],
    eta: &[f64],
    grid: usize,
    lag_steps: usize,
) -> Result<Vec<Vec<f64>>, DataError> {
    let v = graph.num_nodes();
    let step = 1.0 / (grid - 1) as f64;
    let mut s = vec![vec![0.0; grid]; v];
    for n in graph.topological_order()? {
        let parents = graph.in_neighbors(n)?.to_vec();
        for g in 0..grid {
            let t = g as f64 * step;
            let mut value = (phi[n] * t + eta[n]).sin();
            if !parents.is_empty() && g >= lag_steps {
                let sum: f64 = parents.iter().map(|&(m, _)| s[m][g - lag_steps]).sum();
                value += 0.5 * sum / parents.len() as f64;
            }
            s[n][g] = value;
        }
    }
    Ok(s)
}

/// The periodic synthetic dataset: a Delaunay DAG over uniform points, node
/// signals with lagged parent influence, irregular subsampling and a
/// staleness input feature.
pub fn generate_synthetic(config: &SyntheticConfig, exec: &Execution) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let v = config.num_nodes;
    let mut rng = stream_rng(config.seed, 0);
    let mut attempt = 0;
    let (positions, graph) = loop {
        let positions: Vec<[f64; 2]> = (0..v).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        match build_delaunay_dag(&positions, &order) {
            Ok(g) => break (positions, g),
            Err(GraphError::Degenerate(_)) if attempt < 16 => attempt += 1,
            Err(e) => return Err(e.into()),
        }
    };
    let phi: Vec<f64> = (0..v)
        .map(|_| rng.gen_range(config.phi_range[0]..=config.phi_range[1]))
        .collect();
    let lag_steps = config.lag_steps();
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| DataError::Argument(e.to_string()))?;

    let results = exec.map(config.num_sequences, |k| {
        let mut rng = stream_rng(config.seed, k as u64 + 1);
        let eta: Vec<f64> = (0..v).map(|_| rng.gen_range(0.0..TAU)).collect();
        let clean = synthetic_clean_signals(&graph, &phi, &eta, config.grid, lag_steps)?;
        let mut y = Vec::with_capacity(config.grid * v);
        for g in 0..config.grid {
            for signal in &clean {
                y.push(signal[g] + noise.sample(&mut rng));
            }
        }
        let regular = ObservationSequence::new(
            (0..config.grid).map(|g| g as f64).collect(),
            v,
            1,
            0,
            vec![true; config.grid * v],
            y,
            Vec::new(),
        )?;
        let irregular = irregularize_one(&regular, config.times_per_seq, config.obs_fraction, &mut rng)?;
        let rescaled = rescale_time(&irregular, (config.grid - 1) as f64)?;
        Ok::<_, DataError>((add_standard_features(&rescaled, FeatureKind::StalenessOnly), eta))
    });
    let mut seqs = Vec::with_capacity(config.num_sequences);
    let mut etas = Vec::with_capacity(config.num_sequences);
    for r in results {
        let (s, e) = r?;
        seqs.push(s);
        etas.push(e);
    }
    let test = seqs.split_off(config.split[0] + config.split[1]);
    let val = seqs.split_off(config.split[0]);
    let mut split = DatasetSplit::new(graph, seqs, val, test)?;
    split.seed = Some(config.seed);
    split.provenance = serde_json::json!({
        "generator": "synthetic-periodic",
        "config": config,
        "grid_lag_steps": lag_steps,
        "features": FeatureKind::StalenessOnly,
        "kept_times": "resampled per sequence",
    });
    Ok(SyntheticDataset {
        split,
        positions,
        phi,
        eta: etas,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    d_y: usize,
    d_x: usize,
    seed: Option<u64>,
    splits: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    provenance: serde_json::Value,
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Writes `graph.csv`, `meta.json` and one `seq_<id>.csv` per sequence.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    split.graph.save_csv(&dir.join("graph.csv"))?;
    let mut splits = BTreeMap::new();
    let mut id = 0;
    for (name, seqs) in SPLIT_NAMES.iter().zip([&split.train, &split.val, &split.test]) {
        let mut ids = Vec::with_capacity(seqs.len());
        for s in seqs {
            let path = dir.join(format!("seq_{id}.csv"));
            write_sequence(s, &path)?;
            ids.push(id);
            id += 1;
        }
        splits.insert(name.to_string(), ids);
    }
    let meta = Meta {
        num_nodes: split.num_nodes(),
        d_y: split.d_y,
        d_x: split.d_x,
        seed: split.seed,
        splits,
        provenance: split.provenance.clone(),
    };
    let path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_sequence(s: &ObservationSequence, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    let mut header = vec!["t".to_string(), "node".into(), "observed".into()];
    header.extend((0..s.d_y).map(|k| format!("y_{k}")));
    header.extend((0..s.d_x).map(|k| format!("x_{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, 0, e))?;
    for i in 0..s.len() {
        for n in 0..s.num_nodes {
            if !s.observed(i, n) {
                continue;
            }
            let mut rec = vec![s.times[i].to_string(), n.to_string(), "1".into()];
            rec.extend(s.y_at(i, n).iter().chain(s.x_at(i, n)).map(f64::to_string));
            w.write_record(&rec).map_err(|e| csv_err(path, 0, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, line: usize, e: csv::Error) -> DataError {
    let line = e.position().map_or(line, |p| p.line() as usize);
    DataError::Parse {
        file: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

/// Parses one sequence file; see [`save_dataset`] for the layout.
pub fn read_sequence(path: &Path, num_nodes: usize, d_y: usize, d_x: usize) -> Result<ObservationSequence, DataError> {
    let file = path.display().to_string();
    let fail = |line: usize, message: String| DataError::Parse {
        file: file.clone(),
        line,
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, 1, e))?.clone();
    let mut expected = vec!["t".to_string(), "node".into(), "observed".into()];
    expected.extend((0..d_y).map(|k| format!("y_{k}")));
    expected.extend((0..d_x).map(|k| format!("x_{k}")));
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(fail(1, format!("expected header {}", expected.join(","))));
    }
    let width = d_y + d_x;
    let mut times: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| csv_err(path, line, e))?;
        let num = |idx: usize| -> Result<f64, DataError> {
            rec[idx]
                .trim()
                .parse::<f64>()
                .map_err(|e| fail(line, format!("column {}: {e}", expected[idx])))
        };
        let t = num(0)?;
        let node: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e| fail(line, format!("node: {e}")))?;
        if node >= num_nodes {
            return Err(fail(line, format!("node {node} out of range for {num_nodes} nodes")));
        }
        let observed = match rec[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(fail(line, format!("observed must be 0 or 1, got {other:?}"))),
        };
        let row: Vec<f64> = (0..width).map(|c| num(3 + c)).collect::<Result<_, _>>()?;
        if !observed {
            if row.iter().any(|&v| v != 0.0) {
                return Err(fail(line, "unobserved entry carries nonzero values".into()));
            }
            continue;
        }
        match times.last() {
            Some(&last) if t < last => {
                return Err(fail(line, format!("time {t} after {last}: times must be sorted")));
            }
            Some(&last) if t == last => {}
            _ => {
                times.push(t);
                mask.extend(std::iter::repeat_n(false, num_nodes));
                values.extend(std::iter::repeat_n(0.0, num_nodes * width));
            }
        }
        let i = times.len() - 1;
        if mask[i * num_nodes + node] {
            return Err(fail(line, format!("duplicate entry for node {node} at time {t}")));
        }
        mask[i * num_nodes + node] = true;
        values[(i * num_nodes + node) * width..(i * num_nodes + node + 1) * width].copy_from_slice(&row);
    }
    let mut y = Vec::with_capacity(mask.len() * d_y);
    let mut x = Vec::with_capacity(mask.len() * d_x);
    for entry in values.chunks(width.max(1)).take(mask.len()) {
        y.extend_from_slice(&entry[..d_y]);
        x.extend_from_slice(&entry[d_y..width]);
    }
    ObservationSequence::new(times, num_nodes, d_y, d_x, mask, y, x).map_err(|e| fail(0, e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Meta = serde_json::from_str(&text)?;
    let graph = GraphTopology::load_csv(&dir.join("graph.csv"), meta.num_nodes)?;
    let mut parts = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let ids = meta.splits.get(name).cloned().unwrap_or_default();
        let seqs = ids
            .iter()
            .map(|id| read_sequence(&dir.join(format!("seq_{id}.csv")), meta.num_nodes, meta.d_y, meta.d_x))
            .collect::<Result<Vec<_>, _>>()?;
        parts.push(seqs);
    }
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let mut split = DatasetSplit::new(graph, train, val, test)?;
    if split.d_x != meta.d_x || split.d_y != meta.d_y {
        return Err(invalid("meta.json dimensions disagree with sequence files"));
    }
    split.seed = meta.seed;
    split.provenance = meta.provenance;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small_config(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            num_nodes: 8,
            num_sequences: 6,
            times_per_seq: 20,
            grid: 200,
            split: [3, 2, 1],
            ..SyntheticConfig::default()
        }
    }

    fn regular(seed: u64, n_t: usize, v: usize) -> ObservationSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObservationSequence::new(
            (0..n_t).map(|i| i as f64).collect(),
            v,
            2,
            1,
            vec![true; n_t * v],
            (0..n_t * v * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..n_t * v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sequence_invariants_are_enforced() {
        let ok = ObservationSequence::new(vec![0.1, 0.2], 2, 1, 0, vec![true, false, false, true], vec![1.0, 0.0, 0.0, 2.0], vec![]);
        assert!(ok.is_ok());
        let unsorted = ObservationSequence::new(vec![0.2, 0.1], 1, 1, 0, vec![true, true], vec![1.0, 1.0], vec![]);
        assert!(unsorted.is_err());
        let empty_row = ObservationSequence::new(vec![0.1, 0.2], 1, 1, 0, vec![true, false], vec![1.0, 0.0], vec![]);
        assert!(empty_row.is_err());
        let leaked = ObservationSequence::new(vec![0.1], 2, 1, 0, vec![true, false], vec![1.0, 5.0], vec![]);
        assert!(leaked.unwrap_err().to_string().contains("nonzero"));
    }

    #[test]
    fn root_node_signal_is_pure_sinusoid() {
        let cfg = small_config(3);
        let data = generate_synthetic(&cfg, &Execution::sequential()).unwrap();
        let g = &data.split.graph;
        let root = (0..g.num_nodes()).find(|&n| g.in_degree(n) == 0).unwrap();
        let clean = synthetic_clean_signals(g, &data.phi, &data.eta[0], cfg.grid, cfg.lag_steps()).unwrap();
        for (k, value) in clean[root].iter().enumerate() {
            let t = k as f64 * cfg.grid_step();
            assert_eq!(*value, (data.phi[root] * t + data.eta[0][root]).sin());
        }
    }

    #[test]
    fn clean_signals_satisfy_recursion() {
        let cfg = small_config(4);
        let data = generate_synthetic(&cfg, &Execution::sequential()).unwrap();
        let g = &data.split.graph;
        let lag = cfg.lag_steps();
        let s = synthetic_clean_signals(g, &data.phi, &data.eta[1], cfg.grid, lag).unwrap();
        for n in 0..g.num_nodes() {
            let parents = g.in_neighbors(n).unwrap();
            for k in 0..cfg.grid {
                let t = k as f64 * cfg.grid_step();
                let lagged = |m: usize| if k >= lag { s[m][k - lag] } else { 0.0 };
                let mean = if parents.is_empty() {
                    0.0
                } else {
                    parents.iter().map(|&(m, _)| lagged(m)).sum::<f64>() / parents.len() as f64
                };
                let residual = s[n][k] - (data.phi[n] * t + data.eta[1][n]).sin() - 0.5 * mean;
                assert!(residual.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_shapes_and_noise_level() {
        let cfg = SyntheticConfig {
            num_sequences: 20,
            split: [10, 5, 5],
            seed: 11,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg, &Execution::parallel()).unwrap();
        let split = &data.split;
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (10, 5, 5));
        assert_eq!(split.num_nodes(), 20);
        assert_eq!((split.d_y, split.d_x), (1, 1));
        let all: Vec<_> = split.train.iter().chain(&split.val).chain(&split.test).collect();
        let (mut sq, mut count, mut obs, mut slots) = (0.0, 0usize, 0usize, 0usize);
        for (k, seq) in all.iter().enumerate() {
            assert!(seq.len() <= 70 && seq.len() >= 60);
            obs += seq.total_observed();
            slots += 70 * 20;
            let clean = synthetic_clean_signals(&split.graph, &data.phi, &data.eta[k], cfg.grid, cfg.lag_steps()).unwrap();
            for i in 0..seq.len() {
                let g = (seq.times()[i] * 999.0).round() as usize;
                for (n, signal) in clean.iter().enumerate() {
                    if seq.observed(i, n) {
                        let e = seq.y_at(i, n)[0] - signal[g];
                        sq += e * e;
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(obs, 20 * 700);
        assert!((obs as f64 / slots as f64 - 0.5).abs() < 1e-12);
        let var = sq / count as f64;
        assert!((var - 1e-4).abs() < 1e-5, "noise variance {var}");
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let cfg = small_config(9);
        let a = generate_synthetic(&cfg, &Execution::sequential()).unwrap();
        let b = generate_synthetic(&cfg, &Execution::with_workers(Some(4))).unwrap();
        assert_eq!(a.split, b.split);
        let c = generate_synthetic(&small_config(10), &Execution::sequential()).unwrap();
        assert_ne!(a.split.train, c.split.train);
    }

    #[test]
    fn irregularize_examples() {
        let seq = regular(1, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(irregularize_one(&seq, 12, 1.0, &mut rng).unwrap(), seq);
        let day = regular(2, 288, 2);
        let out = irregularize_one(&day, 72, 1.0, &mut rng).unwrap();
        assert_eq!(out.len(), 72);
        assert!(irregularize_one(&seq, 13, 0.5, &mut rng).is_err());
        assert!(irregularize_one(&seq, 5, 0.0, &mut rng).is_err());
        let one = regular(3, 1, 1);
        assert!(irregularize_one(&one, 1, 0.4, &mut rng).is_err());
    }

    #[test]
    fn rescale_examples() {
        let seq = ObservationSequence::new(vec![0.25, 0.5, 1.0], 1, 1, 0, vec![true; 3], vec![1.0; 3], vec![]).unwrap();
        assert_eq!(rescale_time(&seq, 1.0).unwrap(), seq);
        let day = regular(4, 288, 1);
        let scaled = rescale_time(&day, 287.0).unwrap();
        assert!(scaled.times().iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(rescale_time(&seq, 0.0).is_err());
    }

    #[test]
    fn staleness_features() {
        let seq = ObservationSequence::new(
            vec![0.1, 0.3, 0.6],
            2,
            1,
            0,
            vec![true, false, true, true, false, true],
            vec![1.0, 0.0, 2.0, 3.0, 0.0, 4.0],
            vec![],
        )
        .unwrap();
        let s = add_standard_features(&seq, FeatureKind::StalenessOnly);
        assert_eq!(s.d_x(), 1);
        assert_eq!(s.x_at(0, 0), &[0.1]);
        assert_eq!(s.x_at(0, 1), &[0.0]);
        assert!((s.x_at(1, 0)[0] - 0.2).abs() < 1e-15);
        assert_eq!(s.x_at(1, 1), &[0.3]);
        assert!((s.x_at(2, 1)[0] - 0.3).abs() < 1e-15);
        let tod = add_standard_features(&seq, FeatureKind::TimeOfDayAndStaleness);
        assert_eq!(tod.x_at(2, 1), &[0.6, s.x_at(2, 1)[0]]);
        assert_eq!(tod.x_at(2, 0), &[0.0, 0.0]);
    }

    #[test]
    fn split_examples() {
        let seqs: Vec<_> = (0..10).map(|k| regular(k, 3, 2)).collect();
        let g = GraphTopology::empty(2);
        let a = split_dataset(g.clone(), seqs.clone(), [0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (7, 1, 2));
        let mut all: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
        all.sort_by(|p, q| p.y_step(0)[0].total_cmp(&q.y_step(0)[0]));
        let mut orig = seqs.clone();
        orig.sort_by(|p, q| p.y_step(0)[0].total_cmp(&q.y_step(0)[0]));
        assert_eq!(all, orig);
        assert_eq!(split_dataset(g.clone(), seqs.clone(), [0.7, 0.1, 0.2], 5).unwrap(), a);
        assert!(split_dataset(g, seqs[..2].to_vec(), [0.7, 0.1, 0.2], 5).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let data = generate_synthetic(&small_config(2), &Execution::sequential()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data.split, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, data.split);
    }

    fn write_seq(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("seq.csv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn loader_rejects_inconsistent_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_seq(dir.path(), "t,node,observed,y_0\n0.1,0,1,2.5\n0.2,1,1,1\n");
        let s = read_sequence(&good, 2, 1, 0).unwrap();
        assert_eq!(s.len(), 2);
        assert!(!s.observed(0, 1));

        let leaked = write_seq(dir.path(), "t,node,observed,y_0\n0.1,0,1,2.5\n0.2,1,0,1\n");
        let err = read_sequence(&leaked, 2, 1, 0).unwrap_err().to_string();
        assert!(err.contains("record 3"), "{err}");

        let unsorted = write_seq(dir.path(), "t,node,observed,y_0\n0.2,0,1,2.5\n0.1,1,1,1\n");
        assert!(read_sequence(&unsorted, 2, 1, 0).unwrap_err().to_string().contains("sorted"));

        let header = write_seq(dir.path(), "t,node,y_0\n0.2,0,1\n");
        assert!(read_sequence(&header, 2, 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn irregularize_preserves_values_and_counts(seed in 0u64..1000, keep in 1usize..=15, p in 0.05f64..1.0) {
            let seq = regular(seed, 15, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let Ok(out) = irregularize_one(&seq, keep, p, &mut rng) else { return Ok(()); };
            prop_assert_eq!(out.total_observed(), (p * (keep * 4) as f64).round() as usize);
            for i in 0..out.len() {
                let src = seq.times().iter().position(|&t| t == out.times()[i]).unwrap();
                for n in 0..4 {
                    if out.observed(i, n) {
                        prop_assert_eq!(out.y_at(i, n), seq.y_at(src, n));
                        prop_assert_eq!(out.x_at(i, n), seq.x_at(src, n));
                    }
                }
                prop_assert!(out.num_observed(i) > 0);
            }
        }

        #[test]
        fn staleness_matches_scan(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = irregularize_one(&regular(seed, 20, 3), 12, 0.4, &mut rng);
            let Ok(base) = base else { return Ok(()); };
            let s = add_standard_features(&base, FeatureKind::StalenessOnly);
            for i in 0..s.len() {
                for n in 0..3 {
                    if !s.observed(i, n) {
                        prop_assert_eq!(s.x_at(i, n)[1], 0.0);
                        continue;
                    }
                    let prev = (0..i).rev().find(|&k| s.observed(k, n)).map_or(0.0, |k| s.times()[k]);
                    prop_assert_eq!(s.x_at(i, n)[1], s.times()[i] - prev);
                }
            }
        }

        #[test]
        fn rescale_preserves_order(seed in 0u64..1000, span in 0.5f64..500.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = 0.0;
            let times: Vec<f64> = (0..10).map(|_| { t += rng.gen_range(0.01..1.0); t }).collect();
            let seq = ObservationSequence::new(times, 1, 1, 0, vec![true; 10], vec![1.0; 10], vec![]).unwrap();
            let out = rescale_time(&seq, span).unwrap();
            prop_assert!(out.times().windows(2).all(|w| w[1] > w[0]));
        }
    }
}
