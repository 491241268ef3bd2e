//! Multi-horizon forecasting loss.
//!
//! For one sequence,
//! `L = (1/N_obs) sum_m sum_{i > N_init} sum_{j in tau(m,i), j <= i + N_max}
//!      l(y_hat_{i->j}, y_j) w(t_j - t_i) / min(N_max, j - N_init - 1)`
//! with one-based step indices and `N_obs` the node observations at steps
//! `N_init + 2 ..= N_t`. The per-observation loss `l` is the squared error
//! averaged over output dimensions.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::ObservationSequence;
use crate::model::{Frame, PredictionSet};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("no supervised targets: sequence has no observations after the warm-up")]
    NoTargets,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("predictions were made with N_init={got_init}, N_max={got_max}; loss expects {want_init}, {want_max}")]
    Mismatch {
        got_init: usize,
        got_max: usize,
        want_init: usize,
        want_max: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Prioritization of forecast horizons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightFn {
    Constant,
    Exponential { omega: f64 },
    Gaussian { mu: f64, omega: f64 },
    Indicator { lo: f64, hi: f64 },
}

impl WeightFn {
    /// `w1 = 1`.
    pub const W1: Self = Self::Constant;
    /// `w2 = exp(-dt / 0.04)`.
    pub const W2: Self = Self::Exponential { omega: 0.04 };
    /// `w3 = exp(-((dt - 0.1) / 0.02)^2)`.
    pub const W3: Self = Self::Gaussian { mu: 0.1, omega: 0.02 };
    /// `w4 = 1{dt in [0.18, 0.22]}`.
    pub const W4: Self = Self::Indicator { lo: 0.18, hi: 0.22 };

    pub fn eval(&self, dt: f64) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::Exponential { omega } => (-dt / omega).exp(),
            Self::Gaussian { mu, omega } => (-((dt - mu) / omega).powi(2)).exp(),
            Self::Indicator { lo, hi } => {
                if (lo..=hi).contains(&dt) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Least upper bound over `dt >= 0`.
    pub fn supremum(&self) -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            Self::Constant => Ok(()),
            Self::Exponential { omega } | Self::Gaussian { omega, .. } if !(omega > 0.0) => {
                Err(LossError::Config(format!("omega must be positive, got {omega}")))
            }
            Self::Gaussian { mu, .. } if !mu.is_finite() => Err(LossError::Config(format!("bad mu {mu}"))),
            Self::Indicator { lo, hi } if !(lo < hi) => {
                Err(LossError::Config(format!("indicator window needs lo < hi, got [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for WeightFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Constant => write!(f, "constant"),
            Self::Exponential { omega } => write!(f, "exponential(omega={omega})"),
            Self::Gaussian { mu, omega } => write!(f, "gaussian(mu={mu}, omega={omega})"),
            Self::Indicator { lo, hi } => write!(f, "indicator[{lo}, {hi}]"),
        }
    }
}

impl FromStr for WeightFn {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "w1" | "constant" => Ok(Self::W1),
            "w2" | "exponential" => Ok(Self::W2),
            "w3" | "gaussian" => Ok(Self::W3),
            "w4" | "indicator" => Ok(Self::W4),
            other => Err(LossError::Config(format!("unknown weight function `{other}` (expected w1..w4)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weight: WeightFn,
    pub n_init: usize,
    pub n_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weight: WeightFn::W2,
            n_init: 5,
            n_max: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.n_max == 0 {
            return Err(LossError::Config("N_max must be at least 1".into()));
        }
        self.weight.validate()
    }

    /// Weight of predicting step `j` from step `i` (zero-based) across
    /// `dt`, including the truncation denominator.
    pub fn pair_weight(&self, i: usize, j: usize, dt: f64) -> f64 {
        debug_assert!(i >= self.n_init && j > i && j <= i + self.n_max);
        self.weight.eval(dt) / self.n_max.min(j - self.n_init) as f64
    }
}

/// Node observations at one-based steps `n_init + 2 ..= N_t`.
pub fn n_obs(seq: &ObservationSequence, n_init: usize) -> usize {
    (n_init + 1..seq.len()).map(|i| seq.num_observed(i)).sum()
}

/// `sum_s scale * L_s` over the sequences of `frame`.
pub fn frame_loss<'t>(
    tape: &'t Tape,
    preds: &PredictionSet<'t>,
    frame: &Frame,
    config: &LossConfig,
    scale: f64,
) -> Result<Var<'t>, LossError> {
    config.validate()?;
    if preds.n_init != config.n_init || preds.n_max != config.n_max {
        return Err(LossError::Mismatch {
            got_init: preds.n_init,
            got_max: preds.n_max,
            want_init: config.n_init,
            want_max: config.n_max,
        });
    }
    let v = frame.num_nodes();
    let d_y = frame.d_y();
    let norms = frame
        .sequences()
        .iter()
        .map(|s| match n_obs(s, config.n_init) {
            0 => Err(LossError::NoTargets),
            n => Ok(scale / (n as f64 * d_y as f64)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut terms = Vec::with_capacity(preds.blocks.len());
    for b in &preds.blocks {
        let mut coef = Vec::with_capacity(frame.rows());
        for (s, seq) in frame.sequences().iter().enumerate() {
            let dt = seq.times()[b.j] - seq.times()[b.i];
            let w = config.pair_weight(b.i, b.j, dt) * norms[s];
            coef.extend(seq.mask_at(b.j).iter().map(|&m| if m { w } else { 0.0 }));
        }
        debug_assert_eq!(coef.len(), v * frame.num_sequences());
        if coef.iter().all(|&c| c == 0.0) {
            continue;
        }
        let target = tape.constant(frame.y(b.j));
        let term = b.values.sub(&target)?.square()?.scale_rows(coef.into())?.sum()?;
        terms.push(term);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(tape.add_n(&terms)?)
}

/// Loss of a single sequence.
pub fn sequence_loss<'t>(
    tape: &'t Tape,
    preds: &PredictionSet<'t>,
    seq: &ObservationSequence,
    config: &LossConfig,
) -> Result<Var<'t>, LossError> {
    frame_loss(tape, preds, &Frame::single(seq), config, 1.0)
}

/// Arithmetic mean of per-sequence losses.
pub fn batch_loss<'t>(losses: &[Var<'t>]) -> Result<Var<'t>, LossError> {
    let first = losses.first().ok_or(LossError::EmptyBatch)?;
    Ok(first.tape().add_n(losses)?.scale(1.0 / losses.len() as f64)?)
}

/// Direct evaluation of the untruncated loss with `pred(i, j, m)` giving
/// `y_hat_{i->j}^m` for one-based steps.
pub fn untruncated_reference(
    seq: &ObservationSequence,
    weight: &WeightFn,
    n_init: usize,
    pred: impl Fn(usize, usize, usize) -> Vec<f64>,
) -> Result<f64, LossError> {
    let n_t = seq.len();
    let at = |i: usize| i - 1;
    let mut n_obs = 0usize;
    for i in n_init + 2..=n_t {
        n_obs += seq.num_observed(at(i));
    }
    if n_obs == 0 {
        return Err(LossError::NoTargets);
    }
    let mut total = 0.0;
    for m in 0..seq.num_nodes() {
        for i in n_init + 1..=n_t {
            for j in (i + 1..=n_t).filter(|&j| seq.observed(at(j), m)) {
                let y_hat = pred(i, j, m);
                let y = seq.y_at(at(j), m);
                let l = y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
                let dt = seq.times()[at(j)] - seq.times()[at(i)];
                total += l * weight.eval(dt) / (j - n_init - 1) as f64;
            }
        }
    }
    Ok(total / n_obs as f64)
}

/// Squared error of one prediction, averaged over output dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionError {
    pub seq: usize,
    pub i: usize,
    pub j: usize,
    pub node: usize,
    pub dt: f64,
    pub sq_err: f64,
}

/// Errors of all predictions whose target node is observed.
pub fn prediction_errors(preds: &PredictionSet, frame: &Frame) -> Vec<PredictionError> {
    let (v, d_y) = (frame.num_nodes(), frame.d_y());
    let mut out = Vec::new();
    for b in &preds.blocks {
        let values = b.values.value();
        for (s, seq) in frame.sequences().iter().enumerate() {
            let dt = seq.times()[b.j] - seq.times()[b.i];
            for n in 0..v {
                if !seq.observed(b.j, n) {
                    continue;
                }
                let sq = values
                    .row(s * v + n)
                    .iter()
                    .zip(seq.y_at(b.j, n))
                    .map(|(a, y)| (a - y) * (a - y))
                    .sum::<f64>()
                    / d_y as f64;
                out.push(PredictionError {
                    seq: s,
                    i: b.i,
                    j: b.j,
                    node: n,
                    dt,
                    sq_err: sq,
                });
            }
        }
    }
    out
}

/// Rows of constant predictions keyed like [`PredictionSet`], for tests and
/// external predictors.
pub fn constant_predictions<'t>(
    tape: &'t Tape,
    frame: &Frame,
    n_init: usize,
    n_max: usize,
    value: impl Fn(usize, usize, usize, usize) -> Vec<f64>,
) -> PredictionSet<'t> {
    let v = frame.num_nodes();
    let blocks = crate::model::prediction_pairs(frame.len(), n_init, n_max)
        .into_iter()
        .map(|(i, j)| {
            let data: Vec<f64> = (0..frame.rows())
                .flat_map(|r| value(r / v, i, j, r % v))
                .collect();
            let t = Tensor::matrix(frame.rows(), frame.d_y(), data).expect("sized");
            crate::model::PredictionBlock {
                i,
                j,
                values: tape.constant(t),
            }
        })
        .collect();
    PredictionSet { n_init, n_max, blocks }
}

/// Per-row coefficient vector shared by the loss, exposed for inspection.
pub fn target_weights(frame: &Frame, config: &LossConfig, i: usize, j: usize) -> Rc<[f64]> {
    frame
        .sequences()
        .iter()
        .flat_map(|seq| {
            let w = config.pair_weight(i, j, seq.times()[j] - seq.times()[i]);
            seq.mask_at(j).iter().map(move |&m| if m { w } else { 0.0 })
        })
        .collect()
}
