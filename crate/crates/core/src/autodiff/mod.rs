//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! A [`Graph`] is built define-by-run: every builder call appends a node whose
//! inputs already exist, so insertion order is a valid topological order.
//! Leaves are either [`Graph::input`] nodes (bound at [`Graph::forward`] time and
//! differentiated by [`Graph::backward`]) or [`Graph::constant`] nodes.
//!
//! [`Graph::stop_gradient`] is an identity in the forward pass and a wall in the
//! backward pass: nothing upstream of it receives adjoint through that edge.
//! Nodes whose every path to an input crosses a stop-gradient are never visited
//! during backward.
//!
//! Builder methods panic on shape errors or foreign node ids; those are
//! programming errors in the graph construction, not runtime conditions.

mod grad_check;
mod tensor;

use std::collections::{BTreeMap, HashMap};

pub use grad_check::{grad_check, max_relative_error};
pub use tensor::Tensor;
use tensor::dims2;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("binding for node {node} has shape {found:?}, declared {expected:?}")]
    ShapeMismatch { node: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("no binding for input node {0}")]
    MissingBinding(usize),
    #[error("backward requires a scalar output, node has shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward called before forward")]
    ForwardNotRun,
    #[error("node {0} does not belong to this graph")]
    InvalidNode(usize),
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let y = x.tanh();
                1.0 - y * y
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    /// Multiply by a fixed scalar.
    Scale(f64),
    /// Add a fixed scalar.
    Offset(f64),
    MatMul,
    /// `x · W + b` with `b` broadcast over rows.
    Affine,
    Activation(Activation),
    Sum,
    Mean,
    /// Sum along columns, `(r, c) -> (r, 1)`.
    RowSum,
    /// Mean along columns, `(r, c) -> (r, 1)`.
    RowMean,
    Abs,
    Square,
    Sqrt,
    /// Concatenation along columns.
    Concat,
    /// Column range `[start, end)`.
    Slice { start: usize, end: usize },
    StopGradient,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    requires_grad: bool,
    constant: Option<Tensor>,
    value: Option<Tensor>,
    adjoint: Option<Tensor>,
}

impl Node {
    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_ref()
    }

    pub fn adjoint(&self) -> Option<&Tensor> {
        self.adjoint.as_ref()
    }

    /// Whether backward can reach an input from this node.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

pub type Bindings = HashMap<NodeId, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a == b {
        return a.to_vec();
    }
    if a.is_empty() {
        return b.to_vec();
    }
    if b.is_empty() {
        return a.to_vec();
    }
    assert!(
        a.len() == b.len(),
        "cannot broadcast shapes {:?} and {:?}",
        a,
        b
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "cannot broadcast shapes {:?} and {:?}",
                a,
                b
            );
            x.max(y)
        })
        .collect()
}

/// Maps an output position `(i, j)` to the flat index of a broadcast operand.
#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    let ii = if rows == 1 { 0 } else { i };
    let jj = if cols == 1 { 0 } else { j };
    ii * cols + jj
}

fn binary_forward(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape.to_vec(), data);
    }
    let (r, c) = dims2(shape);
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(a.data()[bidx(ar, ac, i, j)], b.data()[bidx(br, bc, i, j)]));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Accumulates `src` (output-shaped) into `dst`, summing over broadcast axes.
fn accumulate_broadcast(dst: &mut Tensor, src: &[f64], out_shape: &[usize]) {
    let (r, c) = dims2(out_shape);
    let (dr, dc) = dst.dims2();
    let d = dst.data_mut();
    if dr == r && dc == c {
        for (x, &g) in d.iter_mut().zip(src) {
            *x += g;
        }
        return;
    }
    for i in 0..r {
        for j in 0..c {
            d[bidx(dr, dc, i, j)] += src[i * c + j];
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::InvalidNode(id.0))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.get(id).shape
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn mark_output(&mut self, id: NodeId) {
        self.get(id);
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
    }

    /// Ids of all input nodes in creation order.
    pub fn inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == OpKind::Input)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Forward value of a node, if forward has run.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.adjoint.as_ref())
    }

    fn get(&self, id: NodeId) -> &Node {
        self.nodes
            .get(id.0)
            .unwrap_or_else(|| panic!("node {} does not belong to this graph", id.0))
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let requires_grad = match op {
            OpKind::Input => true,
            OpKind::Constant | OpKind::StopGradient => false,
            _ => inputs.iter().any(|&i| self.get(i).requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            requires_grad,
            constant: None,
            value: None,
            adjoint: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        assert!(shape.len() <= 2, "inputs are at most rank 2");
        self.push(OpKind::Input, vec![], shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(OpKind::Constant, vec![], value.shape().to_vec());
        self.nodes[id.0].constant = Some(value);
        id
    }

    fn binary(&mut self, op: OpKind, a: NodeId, b: NodeId) -> NodeId {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        self.push(op, vec![a, b], shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(OpKind::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Scale(factor), vec![a], shape)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Offset(shift), vec![a], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {:?} x {:?}",
            sa,
            sb
        );
        let shape = vec![sa[0], sb[1]];
        self.push(OpKind::MatMul, vec![a, b], shape)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        assert!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[0] && sb == [sw[1]],
            "affine shapes {:?} x {:?} + {:?}",
            sx,
            sw,
            sb
        );
        let shape = vec![sx[0], sw[1]];
        self.push(OpKind::Affine, vec![x, w, b], shape)
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Activation(kind), vec![a], shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Silu)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.get(a);
        self.push(OpKind::Sum, vec![a], vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.get(a);
        self.push(OpKind::Mean, vec![a], vec![])
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "row_sum on shape {:?}", s);
        let shape = vec![s[0], 1];
        self.push(OpKind::RowSum, vec![a], shape)
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "row_mean on shape {:?}", s);
        let shape = vec![s[0], 1];
        self.push(OpKind::RowMean, vec![a], shape)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Abs, vec![a], shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Square, vec![a], shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Sqrt, vec![a], shape)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 2 && s[0] == rows, "concat operand shape {:?}", s);
            cols += s[1];
        }
        self.push(OpKind::Concat, parts.to_vec(), vec![rows, cols])
    }

    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let s = self.shape(a);
        assert!(s.len() == 2 && start < end && end <= s[1], "slice [{start}, {end}) of {:?}", s);
        let shape = vec![s[0], end - start];
        self.push(OpKind::Slice { start, end }, vec![a], shape)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(OpKind::StopGradient, vec![a], shape)
    }

    /// Evaluates every node and returns the values of the marked outputs.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<Vec<Tensor>, GraphError> {
        self.forward_impl(bindings, None)
    }

    /// Forward pass in which stop-gradient nodes listed in `frozen` emit the
    /// given values instead of their input. Used to evaluate a loss with the
    /// detached branches pinned, which is the function backward differentiates.
    pub fn forward_frozen(
        &mut self,
        bindings: &Bindings,
        frozen: &HashMap<NodeId, Tensor>,
    ) -> Result<Vec<Tensor>, GraphError> {
        self.forward_impl(bindings, Some(frozen))
    }

    /// Current values of all stop-gradient nodes.
    pub fn stop_gradient_values(&self) -> HashMap<NodeId, Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == OpKind::StopGradient)
            .filter_map(|(i, n)| n.value.clone().map(|v| (NodeId(i), v)))
            .collect()
    }

    fn forward_impl(
        &mut self,
        bindings: &Bindings,
        frozen: Option<&HashMap<NodeId, Tensor>>,
    ) -> Result<Vec<Tensor>, GraphError> {
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, bindings, frozen)?;
            debug_assert_eq!(value.shape(), self.nodes[i].shape.as_slice());
            let node = &mut self.nodes[i];
            node.value = Some(value);
            node.adjoint = None;
        }
        Ok(self
            .outputs
            .iter()
            .map(|o| self.nodes[o.0].value.clone().expect("evaluated"))
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("inputs evaluated first")
    }

    fn eval_node(
        &self,
        i: usize,
        bindings: &Bindings,
        frozen: Option<&HashMap<NodeId, Tensor>>,
    ) -> Result<Tensor, GraphError> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let ins = &node.inputs;
        let out = match &node.op {
            OpKind::Input => {
                let bound = bindings.get(&NodeId(i)).ok_or(GraphError::MissingBinding(i))?;
                if bound.shape() != shape.as_slice() {
                    return Err(GraphError::ShapeMismatch {
                        node: i,
                        expected: shape,
                        found: bound.shape().to_vec(),
                    });
                }
                bound.clone()
            }
            OpKind::Constant => node.constant.clone().expect("constant payload"),
            OpKind::Add => binary_forward(self.val(ins[0]), self.val(ins[1]), &shape, |a, b| a + b),
            OpKind::Sub => binary_forward(self.val(ins[0]), self.val(ins[1]), &shape, |a, b| a - b),
            OpKind::Mul => binary_forward(self.val(ins[0]), self.val(ins[1]), &shape, |a, b| a * b),
            OpKind::Div => binary_forward(self.val(ins[0]), self.val(ins[1]), &shape, |a, b| a / b),
            OpKind::Scale(f) => map(self.val(ins[0]), |x| x * f),
            OpKind::Offset(s) => map(self.val(ins[0]), |x| x + s),
            OpKind::MatMul => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                let (m, k) = a.dims2();
                let n = b.dims2().1;
                let mut out = vec![0.0; m * n];
                matmul(a.data(), b.data(), m, k, n, &mut out);
                Tensor::new(shape, out)
            }
            OpKind::Affine => {
                let (x, w, b) = (self.val(ins[0]), self.val(ins[1]), self.val(ins[2]));
                let (m, k) = x.dims2();
                let n = w.dims2().1;
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(b.data());
                }
                matmul(x.data(), w.data(), m, k, n, &mut out);
                Tensor::new(shape, out)
            }
            OpKind::Activation(kind) => map(self.val(ins[0]), |x| kind.apply(x)),
            OpKind::Sum => Tensor::scalar(self.val(ins[0]).data().iter().sum()),
            OpKind::Mean => {
                let a = self.val(ins[0]);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            OpKind::RowSum | OpKind::RowMean => {
                let a = self.val(ins[0]);
                let (r, c) = a.dims2();
                let div = if node.op == OpKind::RowMean { c as f64 } else { 1.0 };
                let data = a
                    .data()
                    .chunks(c.max(1))
                    .take(r)
                    .map(|row| row.iter().sum::<f64>() / div)
                    .collect();
                Tensor::new(shape, data)
            }
            OpKind::Abs => map(self.val(ins[0]), f64::abs),
            OpKind::Square => map(self.val(ins[0]), |x| x * x),
            OpKind::Sqrt => map(self.val(ins[0]), f64::sqrt),
            OpKind::Concat => {
                let (r, c) = dims2(&shape);
                let mut data = Vec::with_capacity(r * c);
                for row in 0..r {
                    for &p in ins {
                        let t = self.val(p);
                        let pc = t.dims2().1;
                        data.extend_from_slice(&t.data()[row * pc..(row + 1) * pc]);
                    }
                }
                Tensor::new(shape, data)
            }
            OpKind::Slice { start, end } => {
                let a = self.val(ins[0]);
                let (r, c) = a.dims2();
                let mut data = Vec::with_capacity(r * (end - start));
                for row in 0..r {
                    data.extend_from_slice(&a.data()[row * c + start..row * c + end]);
                }
                Tensor::new(shape, data)
            }
            OpKind::StopGradient => match frozen.and_then(|f| f.get(&NodeId(i))) {
                Some(pinned) => pinned.clone(),
                None => self.val(ins[0]).clone(),
            },
        };
        Ok(out)
    }

    /// Reverse pass from a scalar `output`, seeded with 1.
    pub fn backward(&mut self, output: NodeId) -> Result<BTreeMap<NodeId, Tensor>, GraphError> {
        self.backward_with_seed(output, 1.0)
    }

    /// Reverse pass seeded with `seed`. Returns the adjoint of every input
    /// node; inputs the output does not depend on get zeros.
    pub fn backward_with_seed(
        &mut self,
        output: NodeId,
        seed: f64,
    ) -> Result<BTreeMap<NodeId, Tensor>, GraphError> {
        let out = self.nodes.get(output.0).ok_or(GraphError::InvalidNode(output.0))?;
        if out.value.is_none() {
            return Err(GraphError::ForwardNotRun);
        }
        if out.shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarOutput(out.shape.clone()));
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::filled(&out.shape, seed));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads = BTreeMap::new();
        for (i, slot) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            let a = slot.unwrap_or_else(|| Tensor::zeros(&node.shape));
            if node.op == OpKind::Input {
                grads.insert(NodeId(i), a.clone());
            }
            node.adjoint = Some(a);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let gd = g.data();
        let shape = &node.shape;

        let send = |adj: &mut [Option<Tensor>], to: NodeId, contrib: &[f64], contrib_shape: &[usize]| {
            if !self.nodes[to.0].requires_grad {
                return;
            }
            let slot = adj[to.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[to.0].shape));
            accumulate_broadcast(slot, contrib, contrib_shape);
        };

        match &node.op {
            OpKind::Input | OpKind::Constant | OpKind::StopGradient => {}
            OpKind::Add => {
                send(adj, ins[0], gd, shape);
                send(adj, ins[1], gd, shape);
            }
            OpKind::Sub => {
                send(adj, ins[0], gd, shape);
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                send(adj, ins[1], &neg, shape);
            }
            OpKind::Mul | OpKind::Div => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                let (r, c) = dims2(shape);
                let (ar, ac) = a.dims2();
                let (br, bc) = b.dims2();
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for row in 0..r {
                    for col in 0..c {
                        let k = row * c + col;
                        let av = a.data()[bidx(ar, ac, row, col)];
                        let bv = b.data()[bidx(br, bc, row, col)];
                        if node.op == OpKind::Mul {
                            ga[k] = gd[k] * bv;
                            gb[k] = gd[k] * av;
                        } else {
                            ga[k] = gd[k] / bv;
                            gb[k] = -gd[k] * av / (bv * bv);
                        }
                    }
                }
                send(adj, ins[0], &ga, shape);
                send(adj, ins[1], &gb, shape);
            }
            OpKind::Scale(f) => {
                let v: Vec<f64> = gd.iter().map(|x| x * f).collect();
                send(adj, ins[0], &v, shape);
            }
            OpKind::Offset(_) => send(adj, ins[0], gd, shape),
            OpKind::MatMul | OpKind::Affine => {
                let (x, w) = (self.val(ins[0]), self.val(ins[1]));
                let (m, k) = x.dims2();
                let n = w.dims2().1;
                if self.nodes[ins[0].0].requires_grad {
                    // dX = dY · Wᵀ
                    let mut gx = vec![0.0; m * k];
                    for row in 0..m {
                        let grow = &gd[row * n..(row + 1) * n];
                        for p in 0..k {
                            let wrow = &w.data()[p * n..(p + 1) * n];
                            gx[row * k + p] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    send(adj, ins[0], &gx, &[m, k]);
                }
                if self.nodes[ins[1].0].requires_grad {
                    // dW = Xᵀ · dY
                    let mut gw = vec![0.0; k * n];
                    for row in 0..m {
                        let grow = &gd[row * n..(row + 1) * n];
                        for p in 0..k {
                            let xv = x.data()[row * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gw[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    send(adj, ins[1], &gw, &[k, n]);
                }
                if node.op == OpKind::Affine && self.nodes[ins[2].0].requires_grad {
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    send(adj, ins[2], &gb, &[n]);
                }
            }
            OpKind::Activation(kind) => {
                let a = self.val(ins[0]);
                let v: Vec<f64> = a.data().iter().zip(gd).map(|(&x, &g)| g * kind.derivative(x)).collect();
                send(adj, ins[0], &v, shape);
            }
            OpKind::Sum | OpKind::Mean => {
                let a_shape = self.nodes[ins[0].0].shape.clone();
                let n: usize = a_shape.iter().product();
                let scale = if node.op == OpKind::Mean { 1.0 / n as f64 } else { 1.0 };
                let v = vec![gd[0] * scale; n];
                send(adj, ins[0], &v, &a_shape);
            }
            OpKind::RowSum | OpKind::RowMean => {
                let a_shape = self.nodes[ins[0].0].shape.clone();
                let (r, c) = dims2(&a_shape);
                let scale = if node.op == OpKind::RowMean { 1.0 / c as f64 } else { 1.0 };
                let mut v = Vec::with_capacity(r * c);
                for row in 0..r {
                    v.extend(std::iter::repeat_n(gd[row] * scale, c));
                }
                send(adj, ins[0], &v, &a_shape);
            }
            OpKind::Abs => {
                let a = self.val(ins[0]);
                let v: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                send(adj, ins[0], &v, shape);
            }
            OpKind::Square => {
                let a = self.val(ins[0]);
                let v: Vec<f64> = a.data().iter().zip(gd).map(|(&x, &g)| 2.0 * x * g).collect();
                send(adj, ins[0], &v, shape);
            }
            OpKind::Sqrt => {
                let y = self.val(NodeId(i));
                let v: Vec<f64> = y.data().iter().zip(gd).map(|(&s, &g)| 0.5 * g / s).collect();
                send(adj, ins[0], &v, shape);
            }
            OpKind::Concat => {
                let (r, c) = dims2(shape);
                let mut offset = 0;
                for &p in ins {
                    let pc = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut v = Vec::with_capacity(r * pc);
                        for row in 0..r {
                            v.extend_from_slice(&gd[row * c + offset..row * c + offset + pc]);
                        }
                        send(adj, p, &v, &[r, pc]);
                    }
                    offset += pc;
                }
            }
            OpKind::Slice { start, end } => {
                let a_shape = self.nodes[ins[0].0].shape.clone();
                let (r, c) = dims2(&a_shape);
                let w = end - start;
                let mut v = vec![0.0; r * c];
                for row in 0..r {
                    v[row * c + start..row * c + end].copy_from_slice(&gd[row * w..(row + 1) * w]);
                }
                send(adj, ins[0], &v, &a_shape);
            }
        }
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(NodeId, Tensor)]) -> Bindings {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn forward_add() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let y = g.input(&[2]);
        let z = g.add(x, y);
        g.mark_output(z);
        let out = g
            .forward(&bind(&[(x, Tensor::vector(vec![1.0, 2.0])), (y, Tensor::vector(vec![3.0, 4.0]))]))
            .unwrap();
        assert_eq!(out[0].data(), &[4.0, 6.0]);
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let sq = g.square(x);
        let s = g.sum(sq);
        g.mark_output(s);
        let out = g.forward(&bind(&[(x, Tensor::vector(vec![3.0, 4.0]))])).unwrap();
        assert_eq!(out[0].item(), 25.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&x].data(), &[6.0, 8.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(&[4]);
        let m = g.mean(x);
        g.forward(&bind(&[(x, Tensor::vector(vec![1.0, -2.0, 5.0, 0.5]))])).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads[&x].data(), &[0.25; 4]);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut g = Graph::new();
        let x = g.input(&[3]);
        let s = g.stop_gradient(x);
        g.mark_output(s);
        let out = g.forward(&bind(&[(x, Tensor::vector(vec![1.0, 2.0, 3.0]))])).unwrap();
        assert_eq!(out[0].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn stop_gradient_detaches_one_factor() {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        let s = g.stop_gradient(x);
        let p = g.mul(s, x);
        let l = g.sum(p);
        g.forward(&bind(&[(x, Tensor::vector(vec![2.0]))])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&x].data(), &[2.0]);
    }

    #[test]
    fn fully_detached_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.input(&[3]);
        let s = g.stop_gradient(x);
        let l = g.sum(s);
        g.forward(&bind(&[(x, Tensor::vector(vec![1.0, -4.0, 9.0]))])).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&x].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unreached_input_gets_zero_adjoint() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let y = g.input(&[1, 3]);
        let l = g.sum(x);
        g.forward(&bind(&[(x, Tensor::vector(vec![1.0, 2.0])), (y, Tensor::matrix(1, 3, vec![0.0; 3]))]))
            .unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&y].data(), &[0.0; 3]);
        assert_eq!(g.adjoint(y).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn forward_errors() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let _ = g.sum(x);
        assert_eq!(g.forward(&Bindings::new()), Err(GraphError::MissingBinding(0)));
        assert!(matches!(
            g.forward(&bind(&[(x, Tensor::vector(vec![1.0; 3]))])),
            Err(GraphError::ShapeMismatch { node: 0, .. })
        ));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(&[2]);
        let l = g.sum(x);
        assert_eq!(g.backward(l), Err(GraphError::ForwardNotRun));
        g.forward(&bind(&[(x, Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert_eq!(g.backward(x), Err(GraphError::NonScalarOutput(vec![2])));
        assert_eq!(g.backward(NodeId(99)), Err(GraphError::InvalidNode(99)));
    }

    #[test]
    fn seed_scales_adjoints_linearly() {
        let mut g = Graph::new();
        let x = g.input(&[3]);
        let t = g.tanh(x);
        let sq = g.square(t);
        let l = g.mean(sq);
        g.forward(&bind(&[(x, Tensor::vector(vec![0.3, -1.2, 2.0]))])).unwrap();
        let one = g.backward(l).unwrap()[&x].clone();
        let two = g.backward_with_seed(l, 2.0).unwrap()[&x].clone();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut g = Graph::new();
        let m = g.input(&[2, 3]);
        let col = g.input(&[2, 1]);
        let p = g.mul(m, col);
        let l = g.sum(p);
        g.forward(&bind(&[
            (m, Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            (col, Tensor::matrix(2, 1, vec![10.0, 100.0])),
        ]))
        .unwrap();
        assert_eq!(g.value(p).unwrap().data(), &[10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&col].data(), &[6.0, 15.0]);
        assert_eq!(grads[&m].data(), &[10.0, 10.0, 10.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn concat_and_slice_route_adjoints() {
        let mut g = Graph::new();
        let a = g.input(&[2, 1]);
        let b = g.input(&[2, 2]);
        let c = g.concat(&[a, b]);
        let s = g.slice(c, 1, 3);
        let sq = g.square(s);
        let l = g.sum(sq);
        g.forward(&bind(&[
            (a, Tensor::matrix(2, 1, vec![1.0, 2.0])),
            (b, Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0])),
        ]))
        .unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&a].data(), &[0.0, 0.0]);
        assert_eq!(grads[&b].data(), &[6.0, 8.0, 10.0, 12.0]);
    }
}
