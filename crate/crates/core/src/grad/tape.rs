use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::{axpy, dot};
use crate::error::{param_err, shape_err, Result};
use crate::moe::{aux_from_stats, dispatch_fractions, importance, AuxForm};
use crate::numcore::{l2_normalize_slice, softmax_slice, topk_indices, Activation, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for the top-k mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskGrad {
    /// Upstream gradient passes unchanged on selected entries, zero elsewhere.
    #[default]
    StraightThrough,
    /// Jacobian of the renormalization on the selected set. Agrees with
    /// finite differences away from selection ties.
    Exact,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// `x · wᵀ`, `x: [n, i]`, `w: [o, i]`.
    Linear {
        x: NodeId,
        w: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    /// `x * s[index]`.
    ScaleByEntry {
        x: NodeId,
        s: NodeId,
        index: usize,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Softmax {
        x: NodeId,
        temperature: f64,
    },
    L2Normalize {
        x: NodeId,
        epsilon: f64,
    },
    TopKMask {
        x: NodeId,
        k: usize,
        grad: MaskGrad,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// Row `rows[i]` of the output is `gates[rows[i], col] * src[i]`.
    WeightedScatter {
        src: NodeId,
        gates: NodeId,
        rows: Vec<usize>,
        col: usize,
        n_rows: usize,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    AuxLoss {
        probs: NodeId,
        mask: NodeId,
        alpha: f64,
        form: AuxForm,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Linear { x, w } => vec![x, w],
            Op::AddBias { x, b } => vec![x, b],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::ScaleByEntry { x, s, .. } => vec![x, s],
            Op::Scale { x, .. }
            | Op::Act { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::TopKMask { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![x],
            Op::WeightedScatter { src, gates, .. } => vec![src, gates],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::AuxLoss { probs, mask, .. } => vec![probs, mask],
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    trainable: bool,
    /// Top-k selection (`rows * k` indices) for mask nodes, empty otherwise.
    selection: Vec<usize>,
}

/// Recording of a forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    trainable: Vec<NodeId>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, if any flowed there.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a leaf, shaped like `like`; zeros if the loss does
    /// not depend on it.
    pub fn wrt(&self, id: NodeId, like: &Tensor) -> Tensor {
        match self.get(id) {
            Some(g) if g.len() == like.len() => {
                Tensor::from_parts(like.shape().to_vec(), g.data().to_vec())
            }
            _ => Tensor::zeros(like.shape()),
        }
    }

    /// `(parameter, gradient)` for every trainable leaf that received one.
    pub fn parameters(&self) -> impl Iterator<Item = (NodeId, &Tensor)> + '_ {
        self.trainable
            .iter()
            .filter_map(move |&id| self.get(id).map(|g| (id, g)))
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.rank() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        Tensor::from_parts(vec![r, c], t.into_data())
    }
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, trainable: bool) -> NodeId {
        let value = match value {
            Cow::Borrowed(t) if t.rank() == 2 => Cow::Borrowed(t),
            other => Cow::Owned(as_matrix(other.into_owned())),
        };
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            trainable,
            selection: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable input. Rank-1 and rank-3 tensors are viewed as matrices.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    /// Trainable leaf borrowing the parameter tensor.
    pub fn parameter(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    pub fn parameter_owned(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(Cow::Owned(t), true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Selected indices (`rows * k`, descending per row) of a top-k mask node.
    pub fn selection(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].selection
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn parameters(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(NodeId)
            .collect()
    }

    /// Input ids of a node; always smaller than the node's own id.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Replaces a leaf's value; call [`Tape::recompute`] afterwards.
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(param_err!("node {} is not a leaf", id.0));
        }
        let t = as_matrix(t);
        if t.shape() != node.value.shape() {
            return Err(shape_err!(
                "leaf {} has shape {:?}, got {:?}",
                id.0,
                node.value.shape(),
                t.shape()
            ));
        }
        node.value = Cow::Owned(t);
        Ok(())
    }

    pub(crate) fn leaf_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        self.nodes[id.0].value.to_mut()
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, selection) = eval(&node.op, before);
            node.value = Cow::Owned(value);
            node.selection = selection;
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        let (value, selection) = eval(&op, &self.nodes);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            trainable: false,
            selection,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    /// `x · wᵀ` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (_, xi) = self.dims(x);
        let (_, wi) = self.dims(w);
        if xi != wi {
            return Err(shape_err!(
                "linear: input width {} vs weight width {}",
                xi,
                wi
            ));
        }
        Ok(self.push(Op::Linear { x, w }))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(x);
        if self.nodes[b.0].value.len() != c {
            return Err(shape_err!(
                "bias length {} vs width {}",
                self.nodes[b.0].value.len(),
                c
            ));
        }
        Ok(self.push(Op::AddBias { x, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.dims(a),
                self.dims(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add { a, b }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { x, factor })
    }

    pub fn scale_by_entry(&mut self, x: NodeId, s: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.nodes[s.0].value.len() {
            return Err(shape_err!("scale index {} out of range", index));
        }
        Ok(self.push(Op::ScaleByEntry { x, s, index }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        self.push(Op::Act { x, kind })
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(param_err!(
                "temperature must be positive, got {}",
                temperature
            ));
        }
        Ok(self.push(Op::Softmax { x, temperature }))
    }

    /// Row-wise `x / max(||x||, epsilon)`.
    pub fn l2_normalize(&mut self, x: NodeId, epsilon: f64) -> Result<NodeId> {
        if !(epsilon > 0.0) {
            return Err(param_err!("epsilon must be positive, got {}", epsilon));
        }
        Ok(self.push(Op::L2Normalize { x, epsilon }))
    }

    /// Keeps the `k` largest entries of each row and rescales them to sum to 1.
    pub fn topk_mask(&mut self, x: NodeId, k: usize, grad: MaskGrad) -> Result<NodeId> {
        let (_, c) = self.dims(x);
        if k == 0 || k > c {
            return Err(param_err!("k must be in 1..={}, got {}", c, k));
        }
        Ok(self.push(Op::TopKMask { x, k, grad }))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (r, _) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err!("gather row {} out of {}", bad, r));
        }
        Ok(self.push(Op::GatherRows { x, rows }))
    }

    /// Scatters `src` rows into an `[n_rows, cols]` zero matrix, scaling
    /// row `i` by `gates[rows[i], col]`.
    pub fn weighted_scatter(
        &mut self,
        src: NodeId,
        gates: NodeId,
        rows: Vec<usize>,
        col: usize,
    ) -> Result<NodeId> {
        let (m, _) = self.dims(src);
        let (n, e) = self.dims(gates);
        if rows.len() != m {
            return Err(shape_err!(
                "scatter: {} rows for {} source rows",
                rows.len(),
                m
            ));
        }
        if col >= e || rows.iter().any(|&r| r >= n) {
            return Err(shape_err!("scatter index out of range"));
        }
        Ok(self.push(Op::WeightedScatter {
            src,
            gates,
            rows,
            col,
            n_rows: n,
        }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean { x })
    }

    /// Mean softmax cross-entropy of `logits` rows against class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(shape_err!("{} targets for {} rows", targets.len(), r));
        }
        if r == 0 {
            return Err(shape_err!("cross entropy over zero rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err!("target {} out of {} classes", bad, c));
        }
        Ok(self.push(Op::CrossEntropy { logits, targets }))
    }

    /// Load-balancing loss over router probabilities `probs` and the
    /// dispatch recorded by top-k `mask`. The dispatch counts carry no gradient.
    pub fn aux_loss(
        &mut self,
        probs: NodeId,
        mask: NodeId,
        alpha: f64,
        form: AuxForm,
    ) -> Result<NodeId> {
        if !matches!(self.nodes[mask.0].op, Op::TopKMask { .. }) {
            return Err(param_err!("aux loss needs a top-k mask node"));
        }
        if self.dims(probs) != self.dims(mask) {
            return Err(shape_err!("aux loss: probs and mask shapes differ"));
        }
        Ok(self.push(Op::AuxLoss {
            probs,
            mask,
            alpha,
            form,
        }))
    }

    /// Reverse pass from a scalar `loss`, seeding `dloss/dloss = 1`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            trainable: self.parameters(),
        })
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |id: NodeId| -> &Tensor { &self.nodes[id.0].value };
        let acc = |grads: &mut [Option<Tensor>], id: NodeId| -> usize {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
            }
            id.0
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, o) = (dy.rows(), dy.cols());
                let gx = acc(grads, *x);
                {
                    let g = grads[gx].as_mut().unwrap();
                    for r in 0..n {
                        for c in 0..o {
                            let d = dy.at(r, c);
                            if d != 0.0 {
                                axpy(d, wv.row(c), g.row_mut(r));
                            }
                        }
                    }
                }
                let gw = acc(grads, *w);
                let g = grads[gw].as_mut().unwrap();
                for r in 0..n {
                    for c in 0..o {
                        let d = dy.at(r, c);
                        if d != 0.0 {
                            axpy(d, xv.row(r), g.row_mut(c));
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let gx = acc(grads, *x);
                add_into(grads[gx].as_mut().unwrap(), dy);
                let gb = acc(grads, *b);
                let g = grads[gb].as_mut().unwrap();
                for r in 0..dy.rows() {
                    for (gj, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                        *gj += d;
                    }
                }
            }
            Op::Add { a, b } => {
                let ga = acc(grads, *a);
                add_into(grads[ga].as_mut().unwrap(), dy);
                let gb = acc(grads, *b);
                add_into(grads[gb].as_mut().unwrap(), dy);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let ga = acc(grads, *a);
                for ((g, d), bj) in grads[ga]
                    .as_mut()
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .zip(dy.data())
                    .zip(bv.data())
                {
                    *g += d * bj;
                }
                let gb = acc(grads, *b);
                for ((g, d), aj) in grads[gb]
                    .as_mut()
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .zip(dy.data())
                    .zip(av.data())
                {
                    *g += d * aj;
                }
            }
            Op::Scale { x, factor } => {
                let gx = acc(grads, *x);
                for (g, d) in grads[gx]
                    .as_mut()
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .zip(dy.data())
                {
                    *g += factor * d;
                }
            }
            Op::ScaleByEntry { x, s, index } => {
                let (xv, sv) = (val(*x), val(*s));
                let factor = sv.data()[*index];
                let gx = acc(grads, *x);
                for (g, d) in grads[gx]
                    .as_mut()
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .zip(dy.data())
                {
                    *g += factor * d;
                }
                let ds = dot(dy.data(), xv.data());
                let gs = acc(grads, *s);
                grads[gs].as_mut().unwrap().data_mut()[*index] += ds;
            }
            Op::Act { x, kind } => {
                let xv = val(*x);
                let gx = acc(grads, *x);
                for ((g, d), xj) in grads[gx]
                    .as_mut()
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .zip(dy.data())
                    .zip(xv.data())
                {
                    *g += d * kind.derivative(*xj);
                }
            }
            Op::Softmax { x, temperature } => {
                let gx = acc(grads, *x);
                let g = grads[gx].as_mut().unwrap();
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let inner = dot(yr, dr);
                    for ((gj, yj), dj) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *gj += yj * (dj - inner) / temperature;
                    }
                }
            }
            Op::L2Normalize { x, epsilon } => {
                let xv = val(*x);
                let gx = acc(grads, *x);
                let g = grads[gx].as_mut().unwrap();
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let norm = libm::sqrt(dot(xv.row(r), xv.row(r)));
                    if norm > *epsilon {
                        let inner = dot(yr, dr);
                        for ((gj, yj), dj) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *gj += (dj - yj * inner) / norm;
                        }
                    } else {
                        axpy(1.0 / epsilon, dr, g.row_mut(r));
                    }
                }
            }
            Op::TopKMask { x, k, grad } => {
                let xv = val(*x);
                let gx = acc(grads, *x);
                let g = grads[gx].as_mut().unwrap();
                for r in 0..y.rows() {
                    let sel = &node.selection[r * k..(r + 1) * k];
                    let (dr, yr) = (dy.row(r), y.row(r));
                    let gr = g.row_mut(r);
                    match grad {
                        MaskGrad::StraightThrough => {
                            for &j in sel {
                                gr[j] += dr[j];
                            }
                        }
                        MaskGrad::Exact => {
                            let total: f64 = sel.iter().map(|&j| xv.at(r, j)).sum();
                            if total > 0.0 {
                                let inner: f64 = sel.iter().map(|&j| dr[j] * yr[j]).sum();
                                for &j in sel {
                                    gr[j] += (dr[j] - inner) / total;
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let gx = acc(grads, *x);
                let g = grads[gx].as_mut().unwrap();
                for (i, &r) in rows.iter().enumerate() {
                    axpy(1.0, dy.row(i), g.row_mut(r));
                }
            }
            Op::WeightedScatter {
                src,
                gates,
                rows,
                col,
                ..
            } => {
                let (sv, gv) = (val(*src), val(*gates));
                let gs = acc(grads, *src);
                {
                    let g = grads[gs].as_mut().unwrap();
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(gv.at(r, *col), dy.row(r), g.row_mut(i));
                    }
                }
                let gg = acc(grads, *gates);
                let g = grads[gg].as_mut().unwrap();
                for (i, &r) in rows.iter().enumerate() {
                    g.row_mut(r)[*col] += dot(sv.row(i), dy.row(r));
                }
            }
            Op::Sum { x } => {
                let d = dy.data()[0];
                let gx = acc(grads, *x);
                for g in grads[gx].as_mut().unwrap().data_mut() {
                    *g += d;
                }
            }
            Op::Mean { x } => {
                let n = val(*x).len() as f64;
                let d = dy.data()[0] / n;
                let gx = acc(grads, *x);
                for g in grads[gx].as_mut().unwrap().data_mut() {
                    *g += d;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = val(*logits);
                let n = lv.rows() as f64;
                let d = dy.data()[0] / n;
                let gl = acc(grads, *logits);
                let g = grads[gl].as_mut().unwrap();
                let mut p = vec![0.0; lv.cols()];
                for (r, &t) in targets.iter().enumerate() {
                    p.copy_from_slice(lv.row(r));
                    softmax_slice(&mut p, 1.0);
                    let gr = g.row_mut(r);
                    for (j, pj) in p.iter().enumerate() {
                        gr[j] += d * (pj - if j == t { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::AuxLoss {
                probs,
                mask,
                alpha,
                form,
            } => {
                let pv = val(*probs);
                let (n, e) = (pv.rows(), pv.cols());
                let f = dispatch_fractions(&self.nodes[mask.0].selection, n, e);
                let g_imp = importance(pv);
                let d = dy.data()[0];
                let gp = acc(grads, *probs);
                let g = grads[gp].as_mut().unwrap();
                let scale = alpha * e as f64 / n as f64;
                let coeff: Vec<f64> = (0..e)
                    .map(|j| match form {
                        AuxForm::Product => scale * f[j],
                        AuxForm::Squared => scale * 2.0 * g_imp[j] * f[j],
                    })
                    .collect();
                for r in 0..n {
                    for (gj, c) in g.row_mut(r).iter_mut().zip(&coeff) {
                        *gj += d * c;
                    }
                }
            }
        }
    }
}

fn add_into(g: &mut Tensor, dy: &Tensor) {
    for (gj, d) in g.data_mut().iter_mut().zip(dy.data()) {
        *gj += d;
    }
}

fn eval(op: &Op, nodes: &[Node<'_>]) -> (Tensor, Vec<usize>) {
    let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
    let unary = |x: NodeId, f: &dyn Fn(f64) -> f64| -> Tensor { val(x).map(f) };
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Linear { x, w } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, o) = (xv.rows(), wv.rows());
            let mut data = vec![0.0; n * o];
            // blocked so a tile of weight rows stays cached across token rows
            const TILE: usize = 32;
            for c0 in (0..o).step_by(TILE) {
                let c1 = (c0 + TILE).min(o);
                for r in 0..n {
                    let xr = xv.row(r);
                    for c in c0..c1 {
                        data[r * o + c] = dot(xr, wv.row(c));
                    }
                }
            }
            Tensor::from_parts(vec![n, o], data)
        }
        Op::AddBias { x, b } => {
            let (mut out, bv) = (val(*x).clone(), val(*b));
            for r in 0..out.rows() {
                for (v, bj) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *v += bj;
                }
            }
            out
        }
        Op::Add { a, b } => zip(val(*a), val(*b), |p, q| p + q),
        Op::Mul { a, b } => zip(val(*a), val(*b), |p, q| p * q),
        Op::Scale { x, factor } => unary(*x, &|v| v * factor),
        Op::ScaleByEntry { x, s, index } => {
            let factor = val(*s).data()[*index];
            unary(*x, &|v| v * factor)
        }
        Op::Act { x, kind } => unary(*x, &|v| kind.apply(v)),
        Op::Softmax { x, temperature } => {
            let mut out = val(*x).clone();
            for r in 0..out.rows() {
                softmax_slice(out.row_mut(r), *temperature);
            }
            out
        }
        Op::L2Normalize { x, epsilon } => {
            let mut out = val(*x).clone();
            for r in 0..out.rows() {
                l2_normalize_slice(out.row_mut(r), *epsilon);
            }
            out
        }
        Op::TopKMask { x, k, .. } => {
            let xv = val(*x);
            let mut out = Tensor::zeros(xv.shape());
            let mut selection = Vec::with_capacity(xv.rows() * k);
            for r in 0..xv.rows() {
                let sel = topk_indices(xv.row(r), *k);
                let total: f64 = sel.iter().map(|&j| xv.at(r, j)).sum();
                if total > 0.0 {
                    let orow = out.row_mut(r);
                    for &j in &sel {
                        orow[j] = xv.at(r, j) / total;
                    }
                }
                selection.extend_from_slice(&sel);
            }
            return (out, selection);
        }
        Op::GatherRows { x, rows } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                data.extend_from_slice(xv.row(r));
            }
            Tensor::from_parts(vec![rows.len(), c], data)
        }
        Op::WeightedScatter {
            src,
            gates,
            rows,
            col,
            n_rows,
        } => {
            let (sv, gv) = (val(*src), val(*gates));
            let mut out = Tensor::zeros(&[*n_rows, sv.cols()]);
            for (i, &r) in rows.iter().enumerate() {
                let w = gv.at(r, *col);
                for (o, s) in out.row_mut(r).iter_mut().zip(sv.row(i)) {
                    *o += w * s;
                }
            }
            out
        }
        Op::Sum { x } => Tensor::scalar(val(*x).data().iter().sum()),
        Op::Mean { x } => {
            let xv = val(*x);
            Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64)
        }
        Op::CrossEntropy { logits, targets } => {
            let lv = val(*logits);
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                total += lse - row[t];
            }
            Tensor::scalar(total / targets.len() as f64)
        }
        Op::AuxLoss {
            probs,
            mask,
            alpha,
            form,
        } => {
            let pv = val(*probs);
            let f = dispatch_fractions(&nodes[mask.0].selection, pv.rows(), pv.cols());
            let g = importance(pv);
            Tensor::scalar(aux_from_stats(&f, &g, *alpha, *form))
        }
    };
    (out, Vec::new())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| f(p, q))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Records a straight-through top-k mask of `probabilities` (one row per token).
pub fn straight_through_topk(
    tape: &mut Tape<'_>,
    probabilities: NodeId,
    k: usize,
) -> Result<NodeId> {
    tape.topk_mask(probabilities, k, MaskGrad::StraightThrough)
}
