use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::data::ObservationSequence;

use super::ModelError;

/// Several sequences of equal length stacked row-wise: row `s * V + n` is
/// node `n` of sequence `s`. Each sequence keeps its own time points.
#[derive(Clone, Debug)]
pub struct Frame<'a> {
    seqs: Vec<&'a ObservationSequence>,
    n_t: usize,
    num_nodes: usize,
    d_y: usize,
    d_x: usize,
}

impl<'a> Frame<'a> {
    pub fn new(seqs: Vec<&'a ObservationSequence>) -> Result<Self, ModelError> {
        let first = *seqs
            .first()
            .ok_or_else(|| ModelError::Config("frame needs at least one sequence".into()))?;
        for s in &seqs {
            if s.len() != first.len()
                || s.num_nodes() != first.num_nodes()
                || s.d_y() != first.d_y()
                || s.d_x() != first.d_x()
            {
                return Err(ModelError::Config(format!(
                    "frame sequences differ in shape: {} steps x {} nodes vs {} x {}",
                    s.len(),
                    s.num_nodes(),
                    first.len(),
                    first.num_nodes()
                )));
            }
        }
        Ok(Self {
            n_t: first.len(),
            num_nodes: first.num_nodes(),
            d_y: first.d_y(),
            d_x: first.d_x(),
            seqs,
        })
    }

    pub fn single(seq: &'a ObservationSequence) -> Self {
        Self::new(vec![seq]).expect("one sequence")
    }

    pub fn sequences(&self) -> &[&'a ObservationSequence] {
        &self.seqs
    }

    pub fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn len(&self) -> usize {
        self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.n_t == 0
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

    pub fn rows(&self) -> usize {
        self.seqs.len() * self.num_nodes
    }

    /// Time of step `i` for each sequence.
    pub fn seq_times(&self, i: usize) -> Vec<f64> {
        self.seqs.iter().map(|s| s.times()[i]).collect()
    }

    /// Time of step `i` repeated for every node row.
    pub fn row_times(&self, i: usize) -> Vec<f64> {
        self.seqs
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.times()[i], self.num_nodes))
            .collect()
    }

    pub fn mask(&self, i: usize) -> Rc<[bool]> {
        self.seqs.iter().flat_map(|s| s.mask_at(i).iter().copied()).collect()
    }

    pub fn y(&self, i: usize) -> Tensor {
        let data = self.seqs.iter().flat_map(|s| s.y_step(i).iter().copied()).collect();
        Tensor::matrix(self.rows(), self.d_y, data).expect("sized")
    }

    pub fn x(&self, i: usize) -> Tensor {
        let data = self.seqs.iter().flat_map(|s| s.x_step(i).iter().copied()).collect();
        Tensor::matrix(self.rows(), self.d_x, data).expect("sized")
    }

    /// Per-node GRU input `[y, x, observed]`.
    pub fn node_input(&self, i: usize) -> Tensor {
        let width = self.d_y + self.d_x + 1;
        let mut data = Vec::with_capacity(self.rows() * width);
        for s in &self.seqs {
            for n in 0..self.num_nodes {
                data.extend_from_slice(s.y_at(i, n));
                data.extend_from_slice(s.x_at(i, n));
                data.push(if s.observed(i, n) { 1.0 } else { 0.0 });
            }
        }
        Tensor::matrix(self.rows(), width, data).expect("sized")
    }

    /// Whole-graph GRU input `[y_1..y_V, x_1..x_V, observed_1..observed_V]`,
    /// one row per sequence.
    pub fn joint_input(&self, i: usize) -> Tensor {
        let v = self.num_nodes;
        let width = v * (self.d_y + self.d_x + 1);
        let mut data = Vec::with_capacity(self.seqs.len() * width);
        for s in &self.seqs {
            data.extend_from_slice(s.y_step(i));
            data.extend_from_slice(s.x_step(i));
            data.extend(s.mask_at(i).iter().map(|&m| if m { 1.0 } else { 0.0 }));
        }
        Tensor::matrix(self.seqs.len(), width, data).expect("sized")
    }

    /// Concatenated node features, one row per sequence.
    pub fn joint_x(&self, i: usize) -> Tensor {
        let data = self.seqs.iter().flat_map(|s| s.x_step(i).iter().copied()).collect();
        Tensor::matrix(self.seqs.len(), self.num_nodes * self.d_x, data).expect("sized")
    }
}

/// Splits a concatenated `[v_1, ..., v_V]` row into `V` rows of width `d`.
pub fn split_nodes(row: &[f64], d: usize) -> Vec<Vec<f64>> {
    row.chunks(d).map(<[f64]>::to_vec).collect()
}
