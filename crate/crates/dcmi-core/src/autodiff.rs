//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! The graph is define-by-run: creating a node evaluates it immediately, so
//! construction *is* the forward pass. Node ids are handed out in creation
//! order, which makes a reverse id sweep a valid reverse-topological
//! traversal for backward.
//!
//! Trainable parameters live in a [`ParamStore`] outside the graph and are
//! leased into it with [`Graph::param`]; after [`Graph::backward`] their
//! accumulated gradients are read back out of [`Gradients`] by [`ParamId`].

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor shape {shape:?} implies {expected} values, got {actual}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("embedding index {index} out of range for table with {rows} rows")]
    BadEmbeddingIndex { index: usize, rows: usize },
    #[error("target index {index} out of range for {len} outputs")]
    BadTarget { index: usize, len: usize },
    #[error("{op} requires at least one input")]
    EmptyInput { op: &'static str },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

/// A dense n-dimensional array. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::BadShape {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AutodiffError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable tensor of a model. Ids are dense and stable for the
/// lifetime of the store, so optimizer state and gradient slots can be
/// aligned by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.names.push(name.into());
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        self.tensors[id.0].values()
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].values_mut()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        self.tensors[id.0].shape()
    }

    /// Copy of every parameter tensor, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot/store mismatch");
        self.tensors.clone_from_slice(snapshot);
    }
}

/// Rewrites the accumulated gradient of one designated parameter tensor
/// before the optimizer sees it. Must preserve length (and therefore shape).
///
/// Returns the number of coordinates where a numerical guard activated,
/// zero when none did.
pub trait GradientTransform {
    fn apply(&self, grad: &mut [f64]) -> u64;
}

/// Per-parameter gradients accumulated by one or more backward passes.
#[derive(Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    /// Total guard activations reported by registered transforms.
    pub clamp_events: u64,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the parameter never entered the graph.
    /// A parameter reachable only through `stop_gradient` yields `Some` slice
    /// of exact zeros.
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.index()).and_then(|s| s.as_deref())
    }

    fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        let slot = self.slots[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `matrix` is `[r, c]`, `vector` is `[c]`, output is `[r]`.
    MatVec {
        matrix: NodeId,
        vector: NodeId,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Concat(Vec<NodeId>),
    /// Elementwise `sum_i coeffs[i] * inputs[i]`; coefficients are constants.
    LinearCombination {
        inputs: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
    /// Mean of the table rows selected by `ids` (duplicates allowed).
    EmbedMean {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// `mask` entries are 0 or 1/keep so evaluation needs no rescale.
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    // Input id kept for the graph record even though backward never visits it.
    StopGradient(#[allow(dead_code)] NodeId),
    /// `x / max(||x||, eps)`; below eps the denominator is held constant.
    L2Normalize {
        input: NodeId,
    },
    /// Scalar `logsumexp(logits) - logits[target]`.
    SoftmaxCrossEntropy {
        logits: NodeId,
        target: usize,
    },
    /// Scalar binary cross-entropy of `sigmoid(logits)` against soft
    /// `targets`, summed or averaged over outputs. Computed in logit space
    /// so no `log(0)` can occur.
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
        mean: bool,
    },
}

struct Node {
    op: Op,
    values: Vec<f64>,
    shape: Vec<usize>,
    param: Option<ParamId>,
}

const L2_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `-[t*log(sigmoid(z)) + (1-t)*log(1-sigmoid(z))]`.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// One differentiable computation, rebuilt per mini-batch.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leases: HashMap<ParamId, NodeId>,
    transforms: Vec<(ParamId, Box<dyn GradientTransform>)>,
    pinned_stops: Option<std::collections::VecDeque<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` nodes take their forward values from
    /// `pins` (in creation order) instead of their inputs. Finite
    /// differences of a gated function freeze the stopped branches at
    /// reference values this way; see [`check_gradients`].
    pub fn new_with_pinned_stops(pins: Vec<Vec<f64>>) -> Self {
        Graph {
            pinned_stops: Some(pins.into()),
            ..Self::default()
        }
    }

    /// Forward values of every `stop_gradient` node in creation order.
    pub fn stop_values(&self) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient(_)))
            .map(|n| n.values.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id.0].shape.is_empty());
        self.nodes[id.0].values[0]
    }

    fn push(
        &mut self,
        op: Op,
        values: Vec<f64>,
        shape: Vec<usize>,
        param: Option<ParamId>,
        name: &'static str,
    ) -> Result<NodeId, AutodiffError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            values,
            shape,
            param,
        });
        Ok(id)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId, AutodiffError> {
        self.push(Op::Leaf, t.values().to_vec(), t.shape().to_vec(), None, "constant")
    }

    pub fn vector(&mut self, values: &[f64]) -> Result<NodeId, AutodiffError> {
        self.push(Op::Leaf, values.to_vec(), vec![values.len()], None, "vector")
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Leaf, vec![value], vec![], None, "scalar")
    }

    /// Lease a parameter into the graph. Repeated leases of the same id
    /// return the same node, so its gradient accumulates in one slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId, AutodiffError> {
        if let Some(&node) = self.leases.get(&id) {
            return Ok(node);
        }
        let t = store.tensor(id);
        let node = self.push(Op::Leaf, t.values().to_vec(), t.shape().to_vec(), Some(id), "param")?;
        self.leases.insert(id, node);
        Ok(node)
    }

    /// Register a transform applied to `id`'s total accumulated gradient at
    /// the end of every backward pass, before the optimizer sees it.
    pub fn register_transform(&mut self, id: ParamId, transform: Box<dyn GradientTransform>) {
        self.transforms.push((id, transform));
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>, AutodiffError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.binary_shapes("add", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), values, shape, None, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.binary_shapes("sub", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), values, shape, None, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.binary_shapes("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), values, shape, None, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), values, shape, None, "scale")
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId, AutodiffError> {
        let ms = self.nodes[matrix.0].shape.clone();
        let vs = self.nodes[vector.0].shape.clone();
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: ms,
                rhs: vs,
            });
        }
        let (rows, cols) = (ms[0], ms[1]);
        let m = &self.nodes[matrix.0].values;
        let x = &self.nodes[vector.0].values;
        let mut values = vec![0.0; rows];
        for i in 0..rows {
            let row = &m[i * cols..(i + 1) * cols];
            values[i] = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
        self.push(Op::MatVec { matrix, vector }, values, vec![rows], None, "matvec")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), values, shape, None, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[a.0].shape.clone();
        let values = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), values, shape, None, "tanh")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(Op::Sum(a), vec![total], vec![], None, "sum")
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_shapes("dot", a, b)?;
        let d: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), vec![d], vec![], None, "dot")
    }

    /// Flat concatenation of the inputs into one vector.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        let mut values = Vec::new();
        for &id in inputs {
            values.extend_from_slice(&self.nodes[id.0].values);
        }
        let n = values.len();
        self.push(Op::Concat(inputs.to_vec()), values, vec![n], None, "concat")
    }

    pub fn linear_combination(
        &mut self,
        inputs: &[NodeId],
        coeffs: &[f64],
    ) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::EmptyInput {
                op: "linear_combination",
            });
        }
        if inputs.len() != coeffs.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear_combination",
                lhs: vec![inputs.len()],
                rhs: vec![coeffs.len()],
            });
        }
        let shape = self.nodes[inputs[0].0].shape.clone();
        for &id in &inputs[1..] {
            if self.nodes[id.0].shape != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "linear_combination",
                    lhs: shape,
                    rhs: self.nodes[id.0].shape.clone(),
                });
            }
        }
        let n: usize = shape.iter().product();
        let mut values = vec![0.0; n];
        for (&id, &c) in inputs.iter().zip(coeffs) {
            for (v, x) in values.iter_mut().zip(&self.nodes[id.0].values) {
                *v += c * x;
            }
        }
        self.push(
            Op::LinearCombination {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            values,
            shape,
            None,
            "linear_combination",
        )
    }

    /// Mean of the embedding rows selected by `ids`.
    pub fn embed_mean(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed_mean",
                lhs: shape,
                rhs: vec![],
            });
        }
        if ids.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "embed_mean" });
        }
        let (rows, dim) = (shape[0], shape[1]);
        let mut values = vec![0.0; dim];
        for &ix in ids {
            if ix >= rows {
                return Err(AutodiffError::BadEmbeddingIndex { index: ix, rows });
            }
            let row = &self.nodes[table.0].values[ix * dim..(ix + 1) * dim];
            for (v, x) in values.iter_mut().zip(row) {
                *v += x;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for v in &mut values {
            *v *= inv;
        }
        self.push(
            Op::EmbedMean {
                table,
                ids: ids.to_vec(),
            },
            values,
            vec![dim],
            None,
            "embed_mean",
        )
    }

    /// Apply a pre-scaled dropout mask (entries 0 or 1/keep).
    pub fn dropout(&mut self, input: NodeId, mask: Vec<f64>) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[input.0].shape.clone();
        if mask.len() != self.nodes[input.0].values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dropout",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let values = self.nodes[input.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        self.push(Op::Dropout { input, mask }, values, shape, None, "dropout")
    }

    /// Forward identity whose backward contributes exactly zero upstream.
    /// Under pinned stops the forward value comes from the pin queue.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[a.0].shape.clone();
        let values = match self.pinned_stops.as_mut().and_then(|q| q.pop_front()) {
            Some(pin) => {
                if pin.len() != self.nodes[a.0].values.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "stop_gradient",
                        lhs: shape,
                        rhs: vec![pin.len()],
                    });
                }
                pin
            }
            None => self.nodes[a.0].values.clone(),
        };
        self.push(Op::StopGradient(a), values, shape, None, "stop_gradient")
    }

    pub fn l2_normalize(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.nodes[input.0].shape.clone();
        let x = &self.nodes[input.0].values;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(L2_EPS);
        let values = x.iter().map(|v| v / denom).collect();
        self.push(Op::L2Normalize { input }, values, shape, None, "l2_normalize")
    }

    /// Cross-entropy of `softmax(logits)` against a hard class index.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        target: usize,
    ) -> Result<NodeId, AutodiffError> {
        let z = &self.nodes[logits.0].values;
        if target >= z.len() {
            return Err(AutodiffError::BadTarget {
                index: target,
                len: z.len(),
            });
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        self.push(
            Op::SoftmaxCrossEntropy { logits, target },
            vec![loss],
            vec![],
            None,
            "softmax_cross_entropy",
        )
    }

    /// Binary cross-entropy of `sigmoid(logits)` against soft targets,
    /// reduced by sum (`mean = false`) or mean over outputs.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        mean: bool,
    ) -> Result<NodeId, AutodiffError> {
        let z = &self.nodes[logits.0].values;
        if z.len() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vec![z.len()],
                rhs: vec![targets.len()],
            });
        }
        if z.is_empty() {
            return Err(AutodiffError::EmptyInput {
                op: "bce_with_logits",
            });
        }
        let mut loss: f64 = z.iter().zip(targets).map(|(&z, &t)| bce_with_logit(z, t)).sum();
        if mean {
            loss /= z.len() as f64;
        }
        self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mean,
            },
            vec![loss],
            vec![],
            None,
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into one slot
    /// per leased parameter; registered transforms run on the accumulated
    /// slots before the result is returned. The graph itself is not
    /// mutated, so several losses can be differentiated independently.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.shape.is_empty() {
            return Err(AutodiffError::NonScalarLoss(loss_node.shape.clone()));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        adj[loss.0][0] = 1.0;

        // Creation order is topological, so the reverse sweep sees every
        // node after all of its consumers.
        for id in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adj[id]);
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (ga, gi) in adj[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in adj[b.0].iter_mut().zip(&g) {
                        *gb += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (ga, gi) in adj[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in adj[b.0].iter_mut().zip(&g) {
                        *gb -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    // a and b may alias (x*x); accumulate via indices.
                    for k in 0..g.len() {
                        let (av, bv) = (self.nodes[a.0].values[k], self.nodes[b.0].values[k]);
                        adj[a.0][k] += g[k] * bv;
                        adj[b.0][k] += g[k] * av;
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, gi) in adj[a.0].iter_mut().zip(&g) {
                        *ga += gi * c;
                    }
                }
                Op::MatVec { matrix, vector } => {
                    let cols = self.nodes[matrix.0].shape[1];
                    for i in 0..g.len() {
                        for j in 0..cols {
                            adj[matrix.0][i * cols + j] += g[i] * self.nodes[vector.0].values[j];
                        }
                    }
                    for j in 0..cols {
                        let mut acc = 0.0;
                        for i in 0..g.len() {
                            acc += g[i] * self.nodes[matrix.0].values[i * cols + j];
                        }
                        adj[vector.0][j] += acc;
                    }
                }
                Op::Sigmoid(a) => {
                    for (k, gi) in g.iter().enumerate() {
                        let y = node.values[k];
                        adj[a.0][k] += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for (k, gi) in g.iter().enumerate() {
                        let y = node.values[k];
                        adj[a.0][k] += gi * (1.0 - y * y);
                    }
                }
                Op::Sum(a) => {
                    for ga in adj[a.0].iter_mut() {
                        *ga += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    for k in 0..self.nodes[a.0].values.len() {
                        let (av, bv) = (self.nodes[a.0].values[k], self.nodes[b.0].values[k]);
                        adj[a.0][k] += g[0] * bv;
                        adj[b.0][k] += g[0] * av;
                    }
                }
                Op::Concat(inputs) => {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.nodes[inp.0].values.len();
                        for k in 0..len {
                            adj[inp.0][k] += g[offset + k];
                        }
                        offset += len;
                    }
                }
                Op::LinearCombination { inputs, coeffs } => {
                    for (&inp, &c) in inputs.iter().zip(coeffs) {
                        for (ga, gi) in adj[inp.0].iter_mut().zip(&g) {
                            *ga += c * gi;
                        }
                    }
                }
                Op::EmbedMean { table, ids } => {
                    let dim = self.nodes[table.0].shape[1];
                    let inv = 1.0 / ids.len() as f64;
                    for &ix in ids {
                        for k in 0..dim {
                            adj[table.0][ix * dim + k] += g[k] * inv;
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    for (k, gi) in g.iter().enumerate() {
                        adj[input.0][k] += gi * mask[k];
                    }
                }
                Op::StopGradient(_) => {}
                Op::L2Normalize { input } => {
                    let x = &self.nodes[input.0].values;
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm >= L2_EPS {
                        let y = &node.values;
                        let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                        for k in 0..g.len() {
                            adj[input.0][k] += (g[k] - gy * y[k]) / norm;
                        }
                    } else {
                        // Forward used the constant denominator L2_EPS.
                        for (k, gi) in g.iter().enumerate() {
                            adj[input.0][k] += gi / L2_EPS;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let z = &self.nodes[logits.0].values;
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    for k in 0..z.len() {
                        let p = (z[k] - m).exp() / denom;
                        let indicator = if k == *target { 1.0 } else { 0.0 };
                        adj[logits.0][k] += g[0] * (p - indicator);
                    }
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    mean,
                } => {
                    let z = &self.nodes[logits.0].values;
                    let scale = if *mean { 1.0 / z.len() as f64 } else { 1.0 };
                    for k in 0..z.len() {
                        adj[logits.0][k] += g[0] * (sigmoid(z[k]) - targets[k]) * scale;
                    }
                }
            }
            adj[id] = g;
        }

        let mut grads = Gradients::default();
        for (ix, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                grads.accumulate(pid, &adj[ix]);
            }
        }
        for (pid, transform) in &self.transforms {
            if let Some(slot) = grads.slots.get_mut(pid.index()).and_then(|s| s.as_mut()) {
                grads.clamp_events += transform.apply(slot);
            }
        }
        Ok(grads)
    }
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<WorstCoord>,
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: ParamId,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences over every coordinate of `params`.
///
/// The builder receives optional pinned stop values and must construct its
/// graph with [`Graph::new_with_pinned_stops`] when they are present. The
/// reference build runs unpinned; every finite-difference evaluation then
/// freezes the stop-gradient branches at the reference values, so the
/// numeric gradient is that of the gated function the analytic gradient
/// differentiates.
///
/// `build` must otherwise be a pure function of the store (fixed dropout
/// masks, no ambient randomness) and should not register gradient
/// transforms, since those intentionally change gradients away from the
/// true derivative. Relative error uses `max(|analytic|, |numeric|, 1e-8)`
/// as denominator.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut build: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&ParamStore, Option<Vec<Vec<f64>>>) -> Result<(Graph, NodeId), AutodiffError>,
{
    if epsilon <= 0.0 {
        return Err(AutodiffError::BadEpsilon(epsilon));
    }
    let (graph, loss) = build(store, None)?;
    let grads = graph.backward(loss)?;
    let pins = graph.stop_values();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        tolerance,
        passed: true,
        worst: None,
    };
    for &pid in params {
        for k in 0..store.values(pid).len() {
            let orig = store.values(pid)[k];
            store.values_mut(pid)[k] = orig + epsilon;
            let (gp, lp) = build(store, Some(pins.clone()))?;
            let f_plus = gp.scalar_value(lp);
            store.values_mut(pid)[k] = orig - epsilon;
            let (gm, lm) = build(store, Some(pins.clone()))?;
            let f_minus = gm.scalar_value(lm);
            store.values_mut(pid)[k] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let analytic = grads.get(pid).map_or(0.0, |g| g[k]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    param: pid,
                    coord: k,
                    analytic,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(values.to_vec()));
        (store, id)
    }

    #[test]
    fn add_is_elementwise() {
        let mut g = Graph::new();
        let a = g.vector(&[1.0, 2.0]).unwrap();
        let b = g.vector(&[3.0, 4.0]).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.vector(&[0.0]).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y), &[0.5]);
    }

    #[test]
    fn matvec_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g
            .constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let x = g.vector(&[3.5, -2.0]).unwrap();
        let y = g.matvec(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn square_gradient_is_power_rule() {
        let (mut store, x) = store_with(&[3.0]);
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
        store.values_mut(x)[0] = 3.0; // untouched by backward
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let (store, x) = store_with(&[0.0]);
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let s = g.sigmoid(xn).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_zero_backward() {
        let (store, w) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let stopped = g.stop_gradient(wn).unwrap();
        assert_eq!(g.value(stopped), &[1.0, 2.0]);
        let loss = g.sum(stopped).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gated_product_differentiates_live_branch_only() {
        // loss = stop_gradient(w) * w has d/dw = value of stop_gradient(w).
        let (store, w) = store_with(&[3.0]);
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let gate = g.stop_gradient(wn).unwrap();
        let prod = g.mul(gate, wn).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.vector(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let a = g.vector(&[1e308]).unwrap();
        let b = g.vector(&[1e308]).unwrap();
        assert!(matches!(
            g.add(a, b),
            Err(AutodiffError::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.vector(&[1.0, 2.0]).unwrap();
        let b = g.vector(&[1.0]).unwrap();
        assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    }

    fn graph_for(pins: Option<Vec<Vec<f64>>>) -> Graph {
        match pins {
            Some(p) => Graph::new_with_pinned_stops(p),
            None => Graph::new(),
        }
    }

    #[test]
    fn check_gradients_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (mut store, x) = store_with(&values);
        let report = check_gradients(
            &mut store,
            &[x],
            |store, pins| {
                let mut g = graph_for(pins);
                let xn = g.param(store, x)?;
                let sq = g.mul(xn, xn)?;
                let loss = g.sum(sq)?;
                Ok((g, loss))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn check_gradients_matches_the_gated_function_through_stops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut store, x) = store_with(&values);
        // loss = sum(stop(x) * x) + sum(sigmoid(x)). With the stop pinned
        // at reference values, the numeric gradient is that of the gated
        // function and matches the analytic one.
        let report = check_gradients(
            &mut store,
            &[x],
            |store, pins| {
                let mut g = graph_for(pins);
                let xn = g.param(store, x)?;
                let gate = g.stop_gradient(xn)?;
                let gated = g.mul(gate, xn)?;
                let s1 = g.sum(gated)?;
                let sg = g.sigmoid(xn)?;
                let s2 = g.sum(sg)?;
                let lc = g.linear_combination(&[s1, s2], &[1.0, 1.0])?;
                Ok((g, lc))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
        // And backward matches the hand derivative of the gated product.
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let gate = g.stop_gradient(xn).unwrap();
        let gated = g.mul(gate, xn).unwrap();
        let loss = g.sum(gated).unwrap();
        let grads = g.backward(loss).unwrap();
        for (gv, xv) in grads.get(x).unwrap().iter().zip(store.values(x)) {
            assert_eq!(gv, xv);
        }
    }

    #[test]
    fn check_gradients_constant_loss_is_zero_everywhere() {
        let (mut store, x) = store_with(&[1.0, -2.0]);
        let report = check_gradients(
            &mut store,
            &[x],
            |store, pins| {
                let mut g = graph_for(pins);
                let _ = g.param(store, x)?;
                let c = g.scalar(4.25)?;
                Ok((g, c))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn backward_is_linear_over_loss_sum() {
        let (store, x) = store_with(&[0.3, -1.2, 0.7]);
        let mut g = Graph::new();
        let xn = g.param(&store, x).unwrap();
        let sq = g.mul(xn, xn).unwrap();
        let l1 = g.sum(sq).unwrap();
        let sg = g.sigmoid(xn).unwrap();
        let l2 = g.sum(sg).unwrap();
        let joint = g.linear_combination(&[l1, l2], &[1.0, 1.0]).unwrap();

        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        let gj = g.backward(joint).unwrap();
        for k in 0..3 {
            let sum = g1.get(x).unwrap()[k] + g2.get(x).unwrap()[k];
            let joint_g = gj.get(x).unwrap()[k];
            assert!((sum - joint_g).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_param_lease_shares_one_node() {
        let (store, x) = store_with(&[2.0]);
        let mut g = Graph::new();
        let a = g.param(&store, x).unwrap();
        let b = g.param(&store, x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // One randomized graph touching every differentiable op.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let table = store.add(
            "table",
            Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let w = store.add(
            "w",
            Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let v = store.add(
            "v",
            Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        let mask = vec![2.0, 0.0, 2.0];
        let build = |store: &ParamStore,
                     pins: Option<Vec<Vec<f64>>>|
         -> Result<(Graph, NodeId), AutodiffError> {
            let mut g = graph_for(pins);
            let t = g.param(store, table)?;
            let wn = g.param(store, w)?;
            let vn = g.param(store, v)?;
            let pooled = g.embed_mean(t, &[0, 2, 2, 3])?;
            let dropped = g.dropout(pooled, mask.clone())?;
            let scaled = g.scale(dropped, 0.7)?;
            let act = g.tanh(scaled)?;
            let summed = g.add(act, vn)?;
            let diff = g.sub(summed, vn)?;
            let prod = g.mul(diff, vn)?;
            let normed = g.l2_normalize(prod)?;
            let logits = g.matvec(wn, normed)?;
            let sig = g.sigmoid(logits)?;
            let d = g.dot(sig, sig)?;
            let ce = g.softmax_cross_entropy(logits, 1)?;
            let cat = g.concat(&[logits, logits])?;
            let bce = g.bce_with_logits(cat, &[0.2, 0.9, 0.4, 0.6], true)?;
            let total = g.linear_combination(&[d, ce, bce], &[1.0, 0.5, 2.0])?;
            Ok((g, total))
        };
        let report = check_gradients(&mut store, &[table, w, v], build, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?}",
            report.max_rel_err, report.worst
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.vector(&[0.1, 0.2, 0.3]).unwrap();
            let s = g.sigmoid(x).unwrap();
            let n = g.l2_normalize(s).unwrap();
            let l = g.sum(n).unwrap();
            g.scalar_value(l)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
