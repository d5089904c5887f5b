//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape order is a topological order and a single
//! reverse sweep visits each node once.
//!
//! ```
//! use geolatent::autodiff::Tape;
//! use geolatent::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let p = tape.var(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = p.mul(p).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor, TensorError, TensorResult};

pub type NodeId = usize;

/// Index of a parameter inside a [`crate::param::ParamStore`].
pub type ParamId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// rhs is either same-shape, a trailing-shape suffix (leading batch), or a scalar.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize },
    Softmax { input: NodeId, axis: usize },
    LogSoftmax { input: NodeId, axis: usize },
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(NodeId),
    Abs(NodeId),
    Wrap(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    GatherRows { input: NodeId, index: Vec<usize> },
    Pick { input: NodeId, index: Vec<usize> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf, mostly useful in tests and gradient checks.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter to this tape without copying its data.
    pub fn param(&self, id: ParamId, value: Arc<Tensor>, trainable: bool) -> Var<'_> {
        self.push_arc(value, Op::Param(id), trainable)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> TensorResult<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat { inputs: ids, axis },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> TensorResult<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", root.value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut kept: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        let mut params: BTreeMap<ParamId, NodeId> = BTreeMap::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    kept.insert(id, g);
                    continue;
                }
                Op::Param(pid) => {
                    params.insert(*pid, id);
                    kept.insert(id, g);
                    continue;
                }
                _ => {}
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { kept, params })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm_nt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let n = gb.len();
                for chunk in g.chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (Arc::clone(&nodes[*a].value), Arc::clone(&nodes[*b].value));
            if let Some(ga) = acc(grads, nodes, *a) {
                if bv.len() == 1 {
                    let s = bv.data()[0];
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                } else {
                    for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += y * bb;
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                if gb.len() == 1 {
                    gb[0] += g.iter().zip(av.data()).map(|(y, a)| y * a).sum::<f64>();
                } else {
                    for ((x, y), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += y * aa;
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) | Op::Wrap(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let block = nodes[inp].value.shape()[*axis] * inner;
                if let Some(gi) = acc(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        gi[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += block;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            if let Some(gi) = acc(grads, nodes, *input) {
                let full = in_shape[*axis] * inner;
                let block = len * inner;
                for o in 0..outer {
                    let dst = &mut gi[o * full + start * inner..o * full + start * inner + block];
                    dst.iter_mut()
                        .zip(&g[o * block..(o + 1) * block])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = out.axis_extents("softmax", *axis).expect("validated");
            let y = out.data();
            if let Some(gi) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + c;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gi[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { input, axis } => {
            let (outer, n, inner) = out.axis_extents("log_softmax", *axis).expect("validated");
            let y = out.data();
            if let Some(gi) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + c;
                        let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gi[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.last_dim();
            let rows = out.rows();
            let gamma = Arc::clone(&nodes[*gain].value);
            if let Some(gg) = acc(grads, nodes, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gi) = acc(grads, nodes, *input) {
                let dn = d as f64;
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let dxhat: Vec<f64> = g[row.clone()]
                        .iter()
                        .zip(gamma.data())
                        .map(|(a, b)| a * b)
                        .collect();
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / dn;
                    let mean_dx: f64 = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / dn;
                    for j in 0..d {
                        gi[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let x = Arc::clone(&nodes[*a].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gx, &xv), &gy) in ga.iter_mut().zip(x.data()).zip(g) {
                    let u = SQRT_2_OVER_PI * (xv + GELU_CUBIC * xv * xv * xv);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xv * xv);
                    *gx += gy * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                }
            }
        }
        Op::Abs(a) => {
            let x = Arc::clone(&nodes[*a].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((gx, &xv), &gy) in ga.iter_mut().zip(x.data()).zip(g) {
                    // sign(0) = 0
                    *gx += gy * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::GatherRows { input, index } => {
            let c = out.last_dim();
            if let Some(gi) = acc(grads, nodes, *input) {
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        gi[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::Pick { input, index } => {
            let c = nodes[*input].value.last_dim();
            if let Some(gi) = acc(grads, nodes, *input) {
                for (r, &col) in index.iter().enumerate() {
                    gi[r * c + col] += g[r];
                }
            }
        }
    }
}

/// Gradients retained for leaves and parameters after [`Tape::backward`].
pub struct Gradients {
    kept: BTreeMap<NodeId, Vec<f64>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient of a differentiable leaf or parameter node.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.kept.get(&v.id)?;
        Tensor::new(v.shape(), g.clone()).ok()
    }

    /// Gradient for a bound parameter, or `None` if it was unreachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|n| self.kept.get(n))
            .map(Vec::as_slice)
    }

    /// Ids in ascending order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn unary(input: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(input.shape().to_vec(), input.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn needs_with(&self, other: &Var<'_>) -> bool {
        self.tape.needs(&[self.id, other.id])
    }

    fn needs_self(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    pub fn matmul(self, rhs: Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        let needs = self.needs_with(&rhs);
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, rhs.id), needs))
    }

    /// Elementwise sum. `rhs` may also be a trailing-shape suffix of `self`
    /// (broadcast over leading rows) or a single-element tensor.
    pub fn add(self, rhs: Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let suffix = b.rank() <= a.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape();
        if !(suffix || b.len() == 1) {
            return Err(TensorError::Shape {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let n = b.len();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % n])
            .collect();
        let needs = self.needs_with(&rhs);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Add(self.id, rhs.id),
            needs,
        ))
    }

    pub fn sub(self, rhs: Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TensorError::Shape {
                op: "sub",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let needs = self.needs_with(&rhs);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Sub(self.id, rhs.id),
            needs,
        ))
    }

    /// Elementwise product; `rhs` may be a single-element tensor.
    pub fn mul(self, rhs: Var<'t>) -> TensorResult<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
        } else if b.len() == 1 {
            let s = b.data()[0];
            a.data().iter().map(|x| x * s).collect()
        } else {
            return Err(TensorError::Shape {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let needs = self.needs_with(&rhs);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Mul(self.id, rhs.id),
            needs,
        ))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = unary(&self.value(), |x| x * s);
        self.tape.push(v, Op::Scale(self.id, s), self.needs_self())
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = unary(&self.value(), |x| x + s);
        self.tape.push(v, Op::AddScalar(self.id), self.needs_self())
    }

    pub fn transpose(self) -> TensorResult<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", a.shape()),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id), self.needs_self()))
    }

    pub fn reshape(self, shape: &[usize]) -> TensorResult<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), self.needs_self()))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = a.axis_extents("slice", axis)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Contract {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis length {n}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.needs_self(),
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(self, axis: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = a.axis_extents("softmax", axis)?;
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + c;
                let m = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] /= total;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), y)?,
            Op::Softmax { input: self.id, axis },
            self.needs_self(),
        ))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (outer, n, inner) = a.axis_extents("log_softmax", axis)?;
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + c;
                let m = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (x[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), y)?,
            Op::LogSoftmax { input: self.id, axis },
            self.needs_self(),
        ))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> TensorResult<Var<'t>> {
        let a = self.value();
        let d = a.last_dim();
        let (g, b) = (gain.value(), bias.value());
        if g.len() != d || b.len() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: a.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = a.rows();
        let mut xhat = vec![0.0; a.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; a.len()];
        for r in 0..rows {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), y)?,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let v = unary(&self.value(), |x| {
            0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
        });
        self.tape.push(v, Op::Gelu(self.id), self.needs_self())
    }

    pub fn abs(self) -> Var<'t> {
        let v = unary(&self.value(), f64::abs);
        self.tape.push(v, Op::Abs(self.id), self.needs_self())
    }

    /// Wraps values into `[-period/2, period/2)`; derivative 1 away from the wrap set.
    pub fn wrap(self, period: f64) -> Var<'t> {
        let half = period / 2.0;
        let v = unary(&self.value(), |x| (x + half).rem_euclid(period) - half);
        self.tape.push(v, Op::Wrap(self.id), self.needs_self())
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.needs_self())
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.needs_self())
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(self, index: &[usize]) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, c) = (a.rows(), a.last_dim());
        if a.rank() != 2 || index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("invalid row index for shape {:?}", a.shape()),
            });
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(a.row(i));
        }
        Ok(self.tape.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
            self.needs_self(),
        ))
    }

    /// Picks one column per row: `out[r] = self[r, index[r]]`.
    pub fn pick(self, index: &[usize]) -> TensorResult<Var<'t>> {
        let a = self.value();
        let (rows, c) = (a.rows(), a.last_dim());
        if a.rank() != 2 || index.len() != rows || index.iter().any(|&i| i >= c) {
            return Err(TensorError::Contract {
                op: "pick",
                msg: format!("invalid column index for shape {:?}", a.shape()),
            });
        }
        let data = index.iter().enumerate().map(|(r, &j)| a.data()[r * c + j]).collect();
        Ok(self.tape.push(
            Tensor::new(vec![rows], data)?,
            Op::Pick {
                input: self.id,
                index: index.to_vec(),
            },
            self.needs_self(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::ones(&[2, 2]));
        let loss = a.matmul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        for v in x.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        assert_eq!(big.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let l3 = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = l3.softmax(0).unwrap().value();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::ones(&[3]));
        let bias = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        assert_eq!(c.layer_norm(gain, bias, 1e-5).unwrap().value().data(), &[0.0; 3]);
        let gain2 = tape.constant(Tensor::ones(&[2]));
        let bias2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = x.layer_norm(gain2, bias2, 1e-5).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let p = tape.var(Tensor::ones(&[3]));
        assert!(tape.backward(p.scale(2.0)).is_err());
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.slice(1, 0, 2).unwrap().value().data(), a.value().data());
        assert_eq!(c.slice(1, 2, 3).unwrap().value().data(), b.value().data());
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn broadcast_add_accumulates_bias_grad() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().row(2), &[1.0, 2.0, 3.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0; 3]);
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn wrap_maps_into_half_open_range() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4], &[-90.0, 90.0, 180.0, 271.0]));
        assert_eq!(x.wrap(180.0).value().data(), &[-90.0, -90.0, 0.0, -89.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let p = tape.var(Tensor::ones(&[2]));
        let g = tape.backward(c.mul(p).unwrap().sum()).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(p).is_some());
    }
}
