//! Message-passing layers and layer stacks.
//!
//! A GNN layer maps node features `x` to
//! `x_n W1 + (1/|N(n)|) sum_{m in N(n)} e_mn x_m W2`, with weight matrices
//! stored as `d_in x d_out` so rows multiply from the left. Nodes without
//! in-neighbors get only the first term.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamLeaves, ParamStore, RowCombination, Tape, Tensor, Var};
use crate::graph::GraphTopology;

/// Edge structure of one or more stacked copies of a graph, laid out as
/// rows `copy * num_nodes + node`.
#[derive(Clone, Debug)]
pub struct FrameGraph {
    rows: usize,
    num_edges: usize,
    /// Weighted in-neighbor mean: row `n` gets `e_mn / |N(n)|` of row `m`.
    mean: Rc<RowCombination>,
}

impl FrameGraph {
    pub fn new(graph: &GraphTopology) -> Self {
        Self::replicated(graph, 1)
    }

    /// Block-diagonal replication of `graph` over `copies` disjoint row blocks.
    pub fn replicated(graph: &GraphTopology, copies: usize) -> Self {
        let v = graph.num_nodes();
        let mut terms = Vec::with_capacity(copies * graph.num_edges());
        for copy in 0..copies {
            let base = copy * v;
            for e in graph.edges() {
                let share = e.weight / graph.in_degree(e.dst) as f64;
                terms.push((base + e.dst, base + e.src, share));
            }
        }
        let rows = copies * v;
        Self {
            rows,
            num_edges: terms.len(),
            mean: Rc::new(RowCombination::new(rows, rows, terms).expect("edges index existing nodes")),
        }
    }

    /// `rows` isolated nodes.
    pub fn edgeless(rows: usize) -> Self {
        Self {
            rows,
            num_edges: 0,
            mean: Rc::new(RowCombination::new(rows, rows, Vec::new()).expect("no terms")),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Message-passing layer with self and neighbor weights, no bias.
    Gnn,
    /// Node-wise affine map.
    Dense { bias: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
}

impl LayerSpec {
    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            LayerKind::Gnn => vec![format!("{}.w1", self.name), format!("{}.w2", self.name)],
            LayerKind::Dense { bias: true } => {
                vec![format!("{}.w", self.name), format!("{}.b", self.name)]
            }
            LayerKind::Dense { bias: false } => vec![format!("{}.w", self.name)],
        }
    }

    /// Uniform weights in `±1/sqrt(d_in)`, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let bound = 1.0 / (self.d_in as f64).sqrt();
        let weight = |rng: &mut dyn rand::RngCore| {
            let data = (0..self.d_in * self.d_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Tensor::matrix(self.d_in, self.d_out, data).expect("sized")
        };
        match self.kind {
            LayerKind::Gnn => {
                store.insert(format!("{}.w1", self.name), weight(rng));
                store.insert(format!("{}.w2", self.name), weight(rng));
            }
            LayerKind::Dense { bias } => {
                store.insert(format!("{}.w", self.name), weight(rng));
                if bias {
                    store.insert(format!("{}.b", self.name), Tensor::zeros(&[1, self.d_out]));
                }
            }
        }
    }

    pub fn apply<'t>(
        &self,
        params: &ParamLeaves<'t>,
        x: Var<'t>,
        graph: &FrameGraph,
    ) -> Result<Var<'t>, AutodiffError> {
        if x.cols() != self.d_in {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer input",
                shapes: vec![x.shape(), vec![self.d_in, self.d_out]],
            });
        }
        match self.kind {
            LayerKind::Gnn => {
                if x.rows() != graph.rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "gnn layer rows",
                        shapes: vec![x.shape(), vec![graph.rows]],
                    });
                }
                let w1 = params.get(&format!("{}.w1", self.name))?;
                if graph.num_edges() == 0 {
                    return x.matmul(&w1);
                }
                // [x, A x] [W1; W2], with A the weighted in-neighbor mean.
                let w2 = params.get(&format!("{}.w2", self.name))?;
                let tape = x.tape();
                let mixed = tape.concat_cols(&[x, x.combine_rows(Rc::clone(&graph.mean))?])?;
                mixed.matmul(&tape.concat_rows(&[w1, w2])?)
            }
            LayerKind::Dense { bias } => {
                let out = x.matmul(&params.get(&format!("{}.w", self.name))?)?;
                if !bias {
                    return Ok(out);
                }
                out.add_row(&params.get(&format!("{}.b", self.name))?)
            }
        }
    }
}

/// Layers applied in sequence with ReLU between consecutive layers and no
/// activation after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<LayerSpec>,
}

impl Stack {
    /// Chains `kinds.len()` layers from `d_in` through `hidden` to `d_out`.
    pub fn chain(prefix: &str, kinds: &[LayerKind], d_in: usize, hidden: usize, d_out: usize) -> Self {
        let n = kinds.len();
        let layers = kinds
            .iter()
            .enumerate()
            .map(|(l, &kind)| LayerSpec {
                name: format!("{prefix}.{l}"),
                kind,
                d_in: if l == 0 { d_in } else { hidden },
                d_out: if l + 1 == n { d_out } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn check_chain(&self) -> Result<(), AutodiffError> {
        for pair in self.layers.windows(2) {
            if pair[0].d_out != pair[1].d_in {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack chain",
                    shapes: vec![
                        vec![pair[0].d_in, pair[0].d_out],
                        vec![pair[1].d_in, pair[1].d_out],
                    ],
                });
            }
        }
        if self.layers.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "stack" });
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        for layer in &self.layers {
            layer.init_params(rng, store);
        }
    }

    pub fn apply<'t>(
        &self,
        params: &ParamLeaves<'t>,
        x: Var<'t>,
        graph: &FrameGraph,
    ) -> Result<Var<'t>, AutodiffError> {
        self.check_chain()?;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(params, h, graph)?;
            if l + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Applies one GNN layer with explicit weights (`d_in x d_out`) to plain
/// node features.
pub fn gnn_layer_apply(
    w1: &Tensor,
    w2: &Tensor,
    features: &Tensor,
    graph: &GraphTopology,
) -> Result<Tensor, AutodiffError> {
    let spec = LayerSpec {
        name: "layer".into(),
        kind: LayerKind::Gnn,
        d_in: w1.rows(),
        d_out: w1.cols(),
    };
    if w2.shape() != w1.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "gnn layer weights",
            shapes: vec![w1.shape().to_vec(), w2.shape().to_vec()],
        });
    }
    let mut store = ParamStore::new();
    store.insert("layer.w1", w1.clone());
    store.insert("layer.w2", w2.clone());
    let tape = Tape::new();
    let leaves = store.leaves(&tape);
    let x = tape.constant(features.clone());
    let out = spec.apply(&leaves, x, &FrameGraph::new(graph))?;
    Ok((*out.value()).clone())
}

/// Applies a stack to plain node features.
pub fn gnn_stack_apply(
    stack: &Stack,
    params: &ParamStore,
    features: &Tensor,
    graph: &GraphTopology,
) -> Result<Tensor, AutodiffError> {
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let x = tape.constant(features.clone());
    let out = stack.apply(&leaves, x, &FrameGraph::new(graph))?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge(src: usize, dst: usize, weight: f64) -> Edge {
        Edge { src, dst, weight }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn edgeless_identity_layer_is_identity() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 4.0, 0.5, 0.0]).unwrap();
        let out = gnn_layer_apply(&Tensor::identity(2), &Tensor::zeros(&[2, 2]), &x, &GraphTopology::empty(3))
            .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_neighbor_message() {
        let g = GraphTopology::new(2, vec![edge(0, 1, 1.0)]).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -0.7, 9.0, 9.0]).unwrap();
        let out = gnn_layer_apply(&Tensor::zeros(&[2, 2]), &Tensor::identity(2), &x, &g).unwrap();
        assert_eq!(out.row(1), &[0.3, -0.7]);
        assert_eq!(out.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn weighted_mean_over_structural_neighborhood() {
        let g = GraphTopology::new(3, vec![edge(0, 2, 1.0), edge(1, 2, 0.5)]).unwrap();
        let x = Tensor::matrix(3, 1, vec![2.0, 4.0, 100.0]).unwrap();
        let out = gnn_layer_apply(&Tensor::zeros(&[1, 1]), &Tensor::identity(1), &x, &g).unwrap();
        assert_eq!(out.get(2, 0), 2.0);
    }

    #[test]
    fn zero_rows_contribute_nothing_but_still_count() {
        let g = GraphTopology::new(3, vec![edge(0, 2, 1.0), edge(1, 2, 1.0)]).unwrap();
        let x = Tensor::matrix(3, 1, vec![3.0, 0.0, 0.0]).unwrap();
        let out = gnn_layer_apply(&Tensor::zeros(&[1, 1]), &Tensor::identity(1), &x, &g).unwrap();
        assert_eq!(out.get(2, 0), 1.5);
    }

    #[test]
    fn stack_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GraphTopology::new(3, vec![edge(0, 1, 0.4), edge(2, 1, 1.0), edge(1, 0, 0.9)]).unwrap();
        let x = random_tensor(&mut rng, 3, 4);
        let stack = Stack::chain("s", &[LayerKind::Gnn], 4, 4, 3);
        let mut store = ParamStore::new();
        stack.init_params(&mut rng, &mut store);
        let single = gnn_layer_apply(store.get("s.0.w1").unwrap(), store.get("s.0.w2").unwrap(), &x, &g).unwrap();
        assert_eq!(gnn_stack_apply(&stack, &store, &x, &g).unwrap(), single);

        let deep = Stack::chain("d", &[LayerKind::Gnn, LayerKind::Gnn], 4, 5, 2);
        let mut zeros = ParamStore::new();
        deep.init_params(&mut rng, &mut zeros);
        let zeros = zeros.zeros_like();
        let out = gnn_stack_apply(&deep, &zeros, &x, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let bad = Stack {
            layers: vec![deep.layers[0].clone(), stack.layers[0].clone()],
        };
        assert!(bad.check_chain().is_err());
    }

    #[test]
    fn two_layers_reach_two_hops_but_not_three() {
        // Path 0 -> 1 -> 2 -> 3; probe node 3.
        let g = GraphTopology::new(4, (0..3).map(|i| edge(i, i + 1, 1.0)).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = Stack::chain("p", &[LayerKind::Gnn, LayerKind::Gnn], 2, 8, 2);
        let mut store = ParamStore::new();
        stack.init_params(&mut rng, &mut store);
        let x = Tensor::matrix(4, 2, vec![1.0; 8]).unwrap();
        let base = gnn_stack_apply(&stack, &store, &x, &g).unwrap();
        let probe = |node: usize| {
            let mut p = x.clone();
            p.data_mut()[node * 2] += 0.5;
            p.data_mut()[node * 2 + 1] -= 0.25;
            gnn_stack_apply(&stack, &store, &p, &g).unwrap()
        };
        assert_ne!(probe(1).row(3), base.row(3));
        assert_eq!(probe(0).row(3), base.row(3));
    }

    #[test]
    fn dense_layer_with_bias_broadcasts_explicitly() {
        let spec = LayerSpec {
            name: "fc".into(),
            kind: LayerKind::Dense { bias: true },
            d_in: 2,
            d_out: 1,
        };
        let mut store = ParamStore::new();
        store.insert("fc.w", Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        store.insert("fc.b", Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let x = tape.constant(Tensor::matrix(2, 2, vec![3.0, 1.0, 0.0, 2.0]).unwrap());
        let out = spec.apply(&leaves, x, &FrameGraph::edgeless(2)).unwrap();
        assert_eq!(out.value().data(), &[2.5, -1.5]);
    }

    #[test]
    fn replicated_graph_is_block_diagonal() {
        let g = GraphTopology::new(2, vec![edge(0, 1, 0.3)]).unwrap();
        let x = Tensor::matrix(4, 1, vec![1.0, 0.0, 5.0, 0.0]).unwrap();
        let mut store = ParamStore::new();
        store.insert("l.w1", Tensor::zeros(&[1, 1]));
        store.insert("l.w2", Tensor::identity(1));
        let spec = LayerSpec {
            name: "l".into(),
            kind: LayerKind::Gnn,
            d_in: 1,
            d_out: 1,
        };
        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let out = spec
            .apply(&leaves, tape.constant(x), &FrameGraph::replicated(&g, 2))
            .unwrap();
        let v = out.value();
        assert!((v.get(1, 0) - 0.3).abs() < 1e-15);
        assert!((v.get(3, 0) - 1.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let mut edges = Vec::new();
            for s in 0..n {
                for d in 0..n {
                    if s != d && rng.gen_bool(0.3) {
                        edges.push(edge(s, d, rng.gen_range(0.0..2.0)));
                    }
                }
            }
            let g = GraphTopology::new(n, edges).unwrap();
            let stack = Stack::chain("e", &[LayerKind::Gnn, LayerKind::Gnn, LayerKind::Dense { bias: true }], 3, 4, 2);
            let mut store = ParamStore::new();
            stack.init_params(&mut rng, &mut store);
            let x = random_tensor(&mut rng, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut px = Tensor::zeros(&[n, 3]);
            for (i, &p) in perm.iter().enumerate() {
                px.data_mut()[p * 3..p * 3 + 3].copy_from_slice(x.row(i));
            }
            let out = gnn_stack_apply(&stack, &store, &x, &g).unwrap();
            let pout = gnn_stack_apply(&stack, &store, &px, &g.permuted(&perm).unwrap()).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                for (a, b) in out.row(i).iter().zip(pout.row(p)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn single_layer_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GraphTopology::new(3, vec![edge(0, 1, 0.5), edge(2, 1, 1.5), edge(1, 2, 1.0)]).unwrap();
            let w1 = random_tensor(&mut rng, 2, 3);
            let w2 = random_tensor(&mut rng, 2, 3);
            let x = random_tensor(&mut rng, 3, 2);
            let y = random_tensor(&mut rng, 3, 2);
            let combo = Tensor::matrix(3, 2, x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
            let fx = gnn_layer_apply(&w1, &w2, &x, &g).unwrap();
            let fy = gnn_layer_apply(&w1, &w2, &y, &g).unwrap();
            let fc = gnn_layer_apply(&w1, &w2, &combo, &g).unwrap();
            for i in 0..fc.numel() {
                prop_assert!((fc.data()[i] - (a * fx.data()[i] + fy.data()[i])).abs() < 1e-12);
            }
        }
    }
}
