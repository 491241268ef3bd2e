use std::cell::RefCell;
use std::f64::consts::TAU;
use std::rc::Rc;

use super::tensor::{all_finite, gemm, gemm_new, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Primitive operation recorded on the tape. Indices refer to earlier nodes.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddN(Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { input: usize, start: usize },
    GatherRows { input: usize, index: Rc<[usize]> },
    GatherCols { input: usize, index: Rc<[usize]> },
    ScatterMeanRows {
        input: usize,
        index: Rc<[usize]>,
        group_sizes: Rc<[usize]>,
    },
    CombineRows { input: usize, map: Rc<RowCombination> },
    /// `trig` holds `exp(-a dt) cos(b dt)` and `exp(-a dt) sin(b dt)` per pair.
    DampedRotation {
        c: usize,
        rates: usize,
        delta_t: Rc<[f64]>,
        trig: Rc<[(f64, f64)]>,
    },
    WhereRows { mask: Rc<[bool]>, a: usize, b: usize },
    ScaleRows { input: usize, factors: Rc<[f64]> },
    Reshape(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Relu(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Neg(usize),
    Scale(usize, f64),
    Square(usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddN(..) => "add_n",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterMeanRows { .. } => "scatter_mean_rows",
            Op::CombineRows { .. } => "combine_rows",
            Op::DampedRotation { .. } => "damped_rotation",
            Op::WhereRows { .. } => "where_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every operation's inputs precede
/// it and a reverse sweep is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Sparse linear map between row spaces: output row `dst` is the sum of
/// `coeff * input[src]` over its terms `(dst, src, coeff)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowCombination {
    in_rows: usize,
    out_rows: usize,
    terms: Vec<(usize, usize, f64)>,
}

impl RowCombination {
    pub fn new(in_rows: usize, out_rows: usize, terms: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(d, s, _)) = terms.iter().find(|&&(d, s, c)| d >= out_rows || s >= in_rows || !c.is_finite()) {
            return Err(mismatch("row combination", &[&[in_rows, out_rows], &[s, d]]));
        }
        Ok(Self { in_rows, out_rows, terms })
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn terms(&self) -> &[(usize, usize, f64)] {
        &self.terms
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs_of(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Sum of several tensors of identical shape.
    pub fn add_n<'t>(&'t self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars.first().ok_or(AutodiffError::EmptyInput { op: "add_n" })?;
        let shape = first.shape();
        let mut out = Tensor::zeros(&shape);
        for v in vars {
            let t = v.value();
            if t.shape() != shape.as_slice() {
                return Err(mismatch("add_n", &[&shape, t.shape()]));
            }
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddN(vars.iter().map(|v| v.id).collect()))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows<'t>(&'t self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or(AutodiffError::EmptyInput { op: "concat_rows" })?;
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let cols = first.value().cols();
        if values.iter().any(|t| !t.is_matrix() || t.cols() != cols) {
            let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                shapes,
            });
        }
        let rows: usize = values.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in &values {
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(vars.iter().map(|v| v.id).collect()),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols<'t>(&'t self, vars: &[Var<'t>]) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or(AutodiffError::EmptyInput { op: "concat_cols" })?;
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let rows = first.value().rows();
        for t in &values {
            if !t.is_matrix() || t.rows() != rows {
                let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    shapes,
                });
            }
        }
        let cols: usize = values.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in &values {
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatCols(vars.iter().map(|v| v.id).collect()),
        )
    }

    /// Runs reverse-mode differentiation from a scalar output.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if !all_finite(&g) {
                    return Err(AutodiffError::NonFiniteGradient { op: "leaf" });
                }
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape().to_vec(), g).unwrap()),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; all zeros when the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads.get_mut(var.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&var.shape()),
        }
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::WhereRows { a, b, .. } => vec![*a, *b],
        Op::DampedRotation { c, rates, .. } => vec![*c, *rates],
        Op::AddN(v) | Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        Op::SliceCols { input, .. }
        | Op::GatherRows { input, .. }
        | Op::GatherCols { input, .. }
        | Op::ScatterMeanRows { input, .. }
        | Op::CombineRows { input, .. }
        | Op::ScaleRows { input, .. } => vec![*input],
        Op::Reshape(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Softplus(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
    }
}

/// Gradient buffer of `id`, created zeroed on first use; `None` when `id`
/// needs no gradient.
fn grad_buffer<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Accumulates `f(index, upstream)` into the gradient of `input`.
fn unary_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    input: usize,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !nodes[input].requires_grad {
        return;
    }
    match &mut grads[input] {
        Some(acc) => {
            for (i, (a, &gi)) in acc.iter_mut().zip(g).enumerate() {
                *a += f(i, gi);
            }
        }
        slot @ None => *slot = Some(g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()),
    }
}

/// Accumulates `g` scaled row-wise by `factor(row)` into `input`.
fn row_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    input: usize,
    g: &[f64],
    cols: usize,
    factor: impl Fn(usize) -> f64,
) {
    let Some(acc) = grad_buffer(grads, nodes, input) else { return };
    if cols == 0 {
        return;
    }
    for (r, (a, gr)) in acc.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).enumerate() {
        let f = factor(r);
        if f == 0.0 {
            continue;
        }
        for (x, y) in a.iter_mut().zip(gr) {
            *x += f * y;
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                match &mut grads[*a] {
                    Some(da) => gemm(m, n, k, g, false, bv.data(), true, da, 1.0),
                    slot @ None => *slot = Some(gemm_new(m, n, k, g, false, bv.data(), true)),
                }
            }
            if nodes[*b].requires_grad {
                match &mut grads[*b] {
                    Some(db) => gemm(k, m, n, av.data(), true, g, false, db, 1.0),
                    slot @ None => *slot = Some(gemm_new(k, m, n, av.data(), true, g, false)),
                }
            }
        }
        Op::Add(a, b) => {
            unary_grad(grads, nodes, *a, g, |_, gi| gi);
            unary_grad(grads, nodes, *b, g, |_, gi| gi);
        }
        Op::AddRow(a, b) => {
            unary_grad(grads, nodes, *a, g, |_, gi| gi);
            let cols = out.cols();
            if let (Some(db), true) = (grad_buffer(grads, nodes, *b), cols > 0) {
                for gr in g.chunks_exact(cols) {
                    for (x, y) in db.iter_mut().zip(gr) {
                        *x += y;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            unary_grad(grads, nodes, *a, g, |_, gi| gi);
            unary_grad(grads, nodes, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            unary_grad(grads, nodes, *a, g, |i, gi| gi * bv.data()[i]);
            unary_grad(grads, nodes, *b, g, |i, gi| gi * av.data()[i]);
        }
        Op::AddN(ids) => {
            for &i in ids {
                unary_grad(grads, nodes, i, g, |_, gi| gi);
            }
        }
        Op::ConcatCols(ids) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &i in ids {
                let c = nodes[i].value.cols();
                if let Some(d) = grad_buffer(grads, nodes, i) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + c];
                        for (x, y) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let n = nodes[i].value.numel();
                unary_grad(grads, nodes, i, &g[offset..offset + n], |_, gi| gi);
                offset += n;
            }
        }
        Op::SliceCols { input, start } => {
            let iv = &nodes[*input].value;
            let (rows, cols) = (iv.rows(), iv.cols());
            let width = out.cols();
            if let Some(d) = grad_buffer(grads, nodes, *input) {
                for r in 0..rows {
                    let dst = &mut d[r * cols + start..r * cols + start + width];
                    for (x, y) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *x += y;
                    }
                }
            }
        }
        Op::GatherRows { input, index } => {
            let iv = &nodes[*input].value;
            let cols = iv.cols();
            if let Some(d) = grad_buffer(grads, nodes, *input) {
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut d[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *x += y;
                    }
                }
            }
        }
        Op::GatherCols { input, index } => {
            let iv = &nodes[*input].value;
            let (rows, cols) = (iv.rows(), iv.cols());
            let width = index.len();
            if let Some(d) = grad_buffer(grads, nodes, *input) {
                for r in 0..rows {
                    for (c, &src) in index.iter().enumerate() {
                        d[r * cols + src] += g[r * width + c];
                    }
                }
            }
        }
        Op::ScatterMeanRows {
            input,
            index,
            group_sizes,
        } => {
            let iv = &nodes[*input].value;
            let cols = iv.cols();
            if let Some(d) = grad_buffer(grads, nodes, *input) {
                for (e, &dst) in index.iter().enumerate() {
                    let inv = 1.0 / group_sizes[dst] as f64;
                    let src = &g[dst * cols..(dst + 1) * cols];
                    for (x, y) in d[e * cols..(e + 1) * cols].iter_mut().zip(src) {
                        *x += y * inv;
                    }
                }
            }
        }
        Op::CombineRows { input, map } => {
            let cols = out.cols();
            if let Some(d) = grad_buffer(grads, nodes, *input) {
                for &(dst, src, coeff) in &map.terms {
                    let from = &g[dst * cols..(dst + 1) * cols];
                    for (x, y) in d[src * cols..(src + 1) * cols].iter_mut().zip(from) {
                        *x += coeff * y;
                    }
                }
            }
        }
        Op::DampedRotation {
            c,
            rates,
            delta_t,
            trig,
        } => {
            let d = out.cols();
            let half = d / 2;
            if let Some(dc) = grad_buffer(grads, nodes, *c) {
                for (r, (row, gr)) in dc.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                    for k in 0..half {
                        let (fc, fs) = trig[r * half + k];
                        let (gx, gy) = (gr[2 * k], gr[2 * k + 1]);
                        row[2 * k] += fc * gx + fs * gy;
                        row[2 * k + 1] += fc * gy - fs * gx;
                    }
                }
            }
            if let Some(dw) = grad_buffer(grads, nodes, *rates) {
                let o = out.data();
                for (r, row) in dw.chunks_exact_mut(d).enumerate() {
                    let dt = delta_t[r];
                    for k in 0..half {
                        let i = r * d + 2 * k;
                        let (gx, gy, ox, oy) = (g[i], g[i + 1], o[i], o[i + 1]);
                        row[k] -= dt * (gx * ox + gy * oy);
                        row[half + k] += dt * (gy * ox - gx * oy);
                    }
                }
            }
        }
        Op::WhereRows { mask, a, b } => {
            let cols = out.cols();
            for (target, keep) in [(*a, true), (*b, false)] {
                row_grad(grads, nodes, target, g, cols, |r| if mask[r] == keep { 1.0 } else { 0.0 });
            }
        }
        Op::ScaleRows { input, factors } => {
            row_grad(grads, nodes, *input, g, out.cols(), |r| factors[r]);
        }
        Op::Reshape(a) => unary_grad(grads, nodes, *a, g, |_, gi| gi),
        Op::Sigmoid(a) => unary_grad(grads, nodes, *a, g, |i, gi| {
            let s = out.data()[i];
            gi * s * (1.0 - s)
        }),
        Op::Tanh(a) => unary_grad(grads, nodes, *a, g, |i, gi| {
            let t = out.data()[i];
            gi * (1.0 - t * t)
        }),
        Op::Softplus(a) => {
            let x = Rc::clone(&nodes[*a].value);
            unary_grad(grads, nodes, *a, g, |i, gi| gi * sigmoid(x.data()[i]));
        }
        Op::Relu(a) => {
            let x = Rc::clone(&nodes[*a].value);
            unary_grad(grads, nodes, *a, g, |i, gi| {
                if x.data()[i] > 0.0 {
                    gi
                } else {
                    0.0
                }
            });
        }
        Op::Exp(a) => unary_grad(grads, nodes, *a, g, |i, gi| gi * out.data()[i]),
        Op::Sin(a) => {
            let x = Rc::clone(&nodes[*a].value);
            unary_grad(grads, nodes, *a, g, |i, gi| gi * reduced(x.data()[i]).cos());
        }
        Op::Cos(a) => {
            let x = Rc::clone(&nodes[*a].value);
            unary_grad(grads, nodes, *a, g, |i, gi| -gi * reduced(x.data()[i]).sin());
        }
        Op::Neg(a) => unary_grad(grads, nodes, *a, g, |_, gi| -gi),
        Op::Scale(a, s) => unary_grad(grads, nodes, *a, g, |_, gi| gi * s),
        Op::Square(a) => {
            let x = Rc::clone(&nodes[*a].value);
            unary_grad(grads, nodes, *a, g, |i, gi| 2.0 * gi * x.data()[i]);
        }
        Op::Sum(a) => {
            if let Some(d) = grad_buffer(grads, nodes, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = grad_buffer(grads, nodes, *a) {
                let share = g[0] / d.len() as f64;
                d.iter_mut().for_each(|x| *x += share);
            }
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Angle reduced into [0, 2π) before trigonometric evaluation.
fn reduced(x: f64) -> f64 {
    if x.abs() < TAU {
        x
    } else {
        x.rem_euclid(TAU)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.push(Tensor::new(v.shape().to_vec(), data)?, op)
    }

    fn zip(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(op.name(), &[a.shape(), b.shape()]));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(Tensor::new(a.shape().to_vec(), data)?, op)
    }

    /// Matrix product of a (m x k) and b (k x n).
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
            return Err(mismatch("matmul", &[a.shape(), b.shape()]));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let c = gemm_new(m, k, n, a.data(), false, b.data(), false);
        self.tape
            .push(Tensor::matrix(m, n, c)?, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    /// Adds the `1 x cols` row `row` to every row of `self`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row);
        let a = self.value();
        let b = row.value();
        if !a.is_matrix() || b.shape() != [1, a.cols()] {
            return Err(mismatch("add_row", &[a.shape(), b.shape()]));
        }
        let mut data = Vec::with_capacity(a.numel());
        for r in 0..a.rows() {
            data.extend(a.row(r).iter().zip(b.data()).map(|(x, y)| x + y));
        }
        self.tape
            .push(Tensor::new(a.shape().to_vec(), data)?, Op::AddRow(self.id, row.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.zip(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() || start > end || end > v.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                shapes: vec![v.shape().to_vec(), vec![start, end]],
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        self.tape.push(
            Tensor::matrix(rows, end - start, data)?,
            Op::SliceCols {
                input: self.id,
                start,
            },
        )
    }

    /// Splits the columns into `parts` equally wide chunks.
    pub fn split_cols(&self, parts: usize) -> Result<Vec<Var<'t>>> {
        let cols = self.cols();
        if parts == 0 || !cols.is_multiple_of(parts) {
            return Err(AutodiffError::ShapeMismatch {
                op: "split",
                shapes: vec![self.shape(), vec![parts]],
            });
        }
        let w = cols / parts;
        (0..parts).map(|p| self.slice_cols(p * w, (p + 1) * w)).collect()
    }

    /// Row `index[r]` of the input becomes row `r` of the output.
    pub fn gather_rows(&self, index: Rc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() || index.iter().any(|&i| i >= v.rows()) {
            return Err(mismatch("gather_rows", &[v.shape(), &[index.len()]]));
        }
        let mut data = Vec::with_capacity(index.len() * v.cols());
        for &i in index.iter() {
            data.extend_from_slice(v.row(i));
        }
        self.tape.push(
            Tensor::matrix(index.len(), v.cols(), data)?,
            Op::GatherRows {
                input: self.id,
                index,
            },
        )
    }

    /// Column `index[c]` of the input becomes column `c` of the output.
    pub fn gather_cols(&self, index: Rc<[usize]>) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() || index.iter().any(|&i| i >= v.cols()) {
            return Err(mismatch("gather_cols", &[v.shape(), &[index.len()]]));
        }
        let mut data = Vec::with_capacity(v.rows() * index.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            data.extend(index.iter().map(|&c| row[c]));
        }
        self.tape.push(
            Tensor::matrix(v.rows(), index.len(), data)?,
            Op::GatherCols {
                input: self.id,
                index,
            },
        )
    }

    /// Adds row `e` into output row `index[e]` and divides each output row
    /// by the caller-supplied `group_sizes[row]`. Rows with group size zero
    /// receive no contributions and stay zero.
    pub fn scatter_mean_rows(
        &self,
        index: Rc<[usize]>,
        group_sizes: Rc<[usize]>,
    ) -> Result<Var<'t>> {
        let v = self.value();
        let out_rows = group_sizes.len();
        if !v.is_matrix()
            || index.len() != v.rows()
            || index.iter().any(|&i| i >= out_rows || group_sizes[i] == 0)
        {
            return Err(mismatch(
                "scatter_mean_rows",
                &[v.shape(), &[index.len()], &[out_rows]],
            ));
        }
        let cols = v.cols();
        let mut data = vec![0.0; out_rows * cols];
        for (e, &dst) in index.iter().enumerate() {
            let inv = 1.0 / group_sizes[dst] as f64;
            for (o, x) in data[dst * cols..(dst + 1) * cols].iter_mut().zip(v.row(e)) {
                *o += x * inv;
            }
        }
        self.tape.push(
            Tensor::matrix(out_rows, cols, data)?,
            Op::ScatterMeanRows {
                input: self.id,
                index,
                group_sizes,
            },
        )
    }

    /// Applies a sparse row map; see [`RowCombination`].
    pub fn combine_rows(&self, map: Rc<RowCombination>) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() || v.rows() != map.in_rows {
            return Err(mismatch("combine_rows", &[v.shape(), &[map.in_rows, map.out_rows]]));
        }
        let cols = v.cols();
        let mut data = vec![0.0; map.out_rows * cols];
        for &(dst, src, coeff) in &map.terms {
            for (o, x) in data[dst * cols..(dst + 1) * cols].iter_mut().zip(v.row(src)) {
                *o += coeff * x;
            }
        }
        self.tape.push(
            Tensor::matrix(map.out_rows, cols, data)?,
            Op::CombineRows { input: self.id, map },
        )
    }

    /// Rotates each interleaved pair `(x, y)` of row `r` by the angle
    /// `b_k dt_r` and scales it by `exp(-a_k dt_r)`, where `rates` row `r`
    /// is `[a_1..a_m, b_1..b_m]` and `self` has `2m` columns.
    pub fn damped_rotation(&self, rates: &Var<'t>, delta_t: Rc<[f64]>) -> Result<Var<'t>> {
        self.same_tape(rates);
        let c = self.value();
        let w = rates.value();
        if !c.is_matrix() || c.shape() != w.shape() || !c.cols().is_multiple_of(2) || delta_t.len() != c.rows() {
            return Err(mismatch("damped_rotation", &[c.shape(), w.shape(), &[delta_t.len()]]));
        }
        let d = c.cols();
        let half = d / 2;
        let mut trig = Vec::with_capacity(c.rows() * half);
        let mut data = Vec::with_capacity(c.numel());
        for (r, &dt) in delta_t.iter().enumerate() {
            let (cr, wr) = (c.row(r), w.row(r));
            for k in 0..half {
                let decay = (-wr[k] * dt).exp();
                let (sin, cos) = reduced(wr[half + k] * dt).sin_cos();
                let (fc, fs) = (decay * cos, decay * sin);
                let (x, y) = (cr[2 * k], cr[2 * k + 1]);
                data.push(fc * x - fs * y);
                data.push(fs * x + fc * y);
                trig.push((fc, fs));
            }
        }
        self.tape.push(
            Tensor::new(c.shape().to_vec(), data)?,
            Op::DampedRotation {
                c: self.id,
                rates: rates.id,
                delta_t,
                trig: trig.into(),
            },
        )
    }

    /// Row `r` from `self` where `mask[r]`, otherwise from `other`.
    pub fn where_rows(&self, mask: Rc<[bool]>, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() || !a.is_matrix() || mask.len() != a.rows() {
            return Err(mismatch("where_rows", &[a.shape(), b.shape(), &[mask.len()]]));
        }
        let mut data = Vec::with_capacity(a.numel());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { a.row(r) } else { b.row(r) });
        }
        self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::WhereRows {
                mask,
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&self, factors: Rc<[f64]>) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_matrix() || factors.len() != v.rows() {
            return Err(mismatch("scale_rows", &[v.shape(), &[factors.len()]]));
        }
        let mut data = Vec::with_capacity(v.numel());
        for (r, &f) in factors.iter().enumerate() {
            data.extend(v.row(r).iter().map(|x| x * f));
        }
        self.tape.push(
            Tensor::new(v.shape().to_vec(), data)?,
            Op::ScaleRows {
                input: self.id,
                factors,
            },
        )
    }

    /// Row-major reinterpretation with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", &[v.shape(), shape]));
        }
        let t = (*v).clone().with_shape(shape.to_vec());
        self.tape.push(t, Op::Reshape(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.map(Op::Softplus(self.id), softplus)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn sin(&self) -> Result<Var<'t>> {
        self.map(Op::Sin(self.id), |x| reduced(x).sin())
    }

    pub fn cos(&self) -> Result<Var<'t>> {
        self.map(Op::Cos(self.id), |x| reduced(x).cos())
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.map(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.map(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(AutodiffError::EmptyInput { op: "mean" });
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// `1 - self`, built from primitives.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        let ones = self.tape.constant(Tensor::filled(&self.shape(), 1.0));
        ones.sub(self)
    }
}
