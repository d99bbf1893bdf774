//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per use: every builder method appends an
//! operation record, validates operand shapes immediately, and returns the
//! new [`NodeId`]. Records are therefore always in topological order.
//! [`Graph::forward`] evaluates every node and checks finiteness;
//! [`Graph::backward`] walks the records in reverse exactly once and
//! accumulates gradients for the trainable parameters whose names pass a
//! filter (the alternation between backbone and estimator updates is built
//! on that filter). [`gradcheck`] verifies analytic gradients against
//! central finite differences at 64-bit precision.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{lanes, numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    fn idx(self) -> usize {
        self.0
    }
}

/// Named tensors fed to [`Graph::forward`].
pub type Inputs<F> = IndexMap<String, Tensor<F>>;

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Input(String),
    Param(String),
    Constant(Tensor<F>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-broadcast add: [r, c] + [c]. The only broadcasting in the engine.
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    AddScalar(NodeId, F),
    MulScalar(NodeId, F),
    Clamp(NodeId, F, F),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    /// out[i] = a[i, idx[i]] for a rank-2 operand.
    PickPerRow(NodeId, Vec<usize>),
    /// out[j, :] = a[idx[j], :]; duplicate indices allowed.
    GatherRows(NodeId, Vec<usize>),
    /// out[i, idx[i]] = vals[i], zero elsewhere; vals is rank-1.
    OneHotRows(NodeId, Vec<usize>, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Concat(NodeId, NodeId, usize),
    Reshape(NodeId),
    /// Insert a new axis of length k at `axis`, replicating values.
    Expand(NodeId, usize, usize),
    /// Keep [start, end) along `axis`.
    Slice(NodeId, usize, usize, usize),
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::PickPerRow(..) => "pick_per_row",
            Op::GatherRows(..) => "gather_rows",
            Op::OneHotRows(..) => "one_hot_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Expand(..) => "expand",
            Op::Slice(..) => "slice",
        }
    }
}

struct ParamSlot<F: Real> {
    node: NodeId,
    value: Tensor<F>,
}

pub struct Graph<F: Real> {
    ops: Vec<Op<F>>,
    shapes: Vec<Vec<usize>>,
    inputs: IndexMap<String, NodeId>,
    params: IndexMap<String, ParamSlot<F>>,
}

/// All node values from one forward pass.
#[derive(Debug)]
pub struct Execution<F: Real> {
    values: Vec<Tensor<F>>,
}

impl<F: Real> Execution<F> {
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.idx()]
    }
}

/// Per-parameter gradients; filtered-out parameters hold exact zeros.
pub struct Gradients<F: Real> {
    map: IndexMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn max_abs(&self, name: &str) -> Option<F> {
        self.map.get(name).map(|t| {
            t.data()
                .iter()
                .fold(F::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
        })
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            inputs: IndexMap::new(),
            params: IndexMap::new(),
        }
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.shapes.push(shape);
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.idx()]
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param(name.to_string()), shape);
        self.params.insert(name.to_string(), ParamSlot { node: id, value });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ── parameter access ────────────────────────────────────────────────

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).map(|s| &s.value)
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).map(|s| s.node)
    }

    /// Node of an already-declared parameter.
    pub fn require_param(&self, name: &str) -> Result<NodeId> {
        self.param_node(name)
            .ok_or_else(|| Error::Invalid(format!("graph missing parameter `{name}`")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    // ── binary elementwise ──────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape(a, b, "div")?;
        Ok(self.push(Op::Div(a, b), s))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose: rank-2 required, got {sa:?}")));
        }
        let shape = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    pub fn bias_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("bias_add: {sa:?} + {sb:?}")));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::BiasAdd(a, b), shape))
    }

    // ── unary elementwise ───────────────────────────────────────────────

    fn unary(&mut self, op: Op<F>, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let _ = a;
        self.push(op, shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        self.unary(Op::AddScalar(a, c), a)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        self.unary(Op::MulScalar(a, c), a)
    }

    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        debug_assert!(lo < hi);
        self.unary(Op::Clamp(a, lo, hi), a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul(a, a)
    }

    // ── softmax family ──────────────────────────────────────────────────

    fn check_axis(&self, a: NodeId, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape(format!(
                "{what}: axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis(a, axis, "softmax")?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Softmax(a, axis), shape))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis(a, axis, "log_softmax")?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::LogSoftmax(a, axis), shape))
    }

    // ── indexing ────────────────────────────────────────────────────────

    pub fn pick_per_row(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 || idx.len() != sa[0] {
            return Err(Error::Shape(format!(
                "pick_per_row: {sa:?} with {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= sa[1]) {
            return Err(Error::Invalid(format!(
                "pick_per_row: index {bad} out of range for {} columns",
                sa[1]
            )));
        }
        let shape = vec![sa[0]];
        Ok(self.push(Op::PickPerRow(a, idx), shape))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("gather_rows: rank-2 required, got {sa:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= sa[0]) {
            return Err(Error::Invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                sa[0]
            )));
        }
        let shape = vec![idx.len(), sa[1]];
        Ok(self.push(Op::GatherRows(a, idx), shape))
    }

    pub fn one_hot_rows(&mut self, vals: NodeId, idx: Vec<usize>, width: usize) -> Result<NodeId> {
        let sv = self.shape(vals);
        if sv.len() != 1 || idx.len() != sv[0] {
            return Err(Error::Shape(format!(
                "one_hot_rows: rank-1 values {sv:?} with {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= width) {
            return Err(Error::Invalid(format!(
                "one_hot_rows: index {bad} out of range for width {width}"
            )));
        }
        let shape = vec![sv[0], width];
        Ok(self.push(Op::OneHotRows(vals, idx, width), shape))
    }

    // ── reductions and shape ops ────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(a, axis, "sum")?;
        Ok(self.push(Op::Sum(a, axis), shape))
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduced_shape(a, axis, "mean")?;
        Ok(self.push(Op::Mean(a, axis), shape))
    }

    fn reduced_shape(&self, a: NodeId, axis: Option<usize>, what: &str) -> Result<Vec<usize>> {
        match axis {
            None => Ok(vec![]),
            Some(ax) => {
                self.check_axis(a, ax, what)?;
                let mut s = self.shape(a).to_vec();
                s.remove(ax);
                Ok(s)
            }
        }
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Shape(format!("concat axis {axis}: {sa:?} vs {sb:?}")));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return Err(Error::Shape(format!("concat axis {axis}: {sa:?} vs {sb:?}")));
            }
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        Ok(self.push(Op::Concat(a, b, axis), shape))
    }

    /// Balanced concat of many nodes along `axis`; keeps copy cost
    /// O(n log n) rows instead of the O(n^2) of a left fold.
    pub fn concat_many(&mut self, nodes: &[NodeId], axis: usize) -> Result<NodeId> {
        match nodes.len() {
            0 => Err(Error::Invalid("concat_many: empty node list".into())),
            1 => Ok(nodes[0]),
            n => {
                let (lo, hi) = nodes.split_at(n / 2);
                let a = self.concat_many(lo, axis)?;
                let b = self.concat_many(hi, axis)?;
                self.concat(a, b, axis)
            }
        }
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(self.shape(a)) != numel(shape) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn expand(&mut self, a: NodeId, axis: usize, k: usize) -> Result<NodeId> {
        let sa = self.shape(a);
        if axis > sa.len() || k == 0 {
            return Err(Error::Shape(format!("expand axis {axis} x{k} on {sa:?}")));
        }
        let mut shape = sa.to_vec();
        shape.insert(axis, k);
        Ok(self.push(Op::Expand(a, axis, k), shape))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_axis(a, axis, "slice")?;
        let sa = self.shape(a);
        if start >= end || end > sa[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {end}) on axis {axis} of {sa:?}"
            )));
        }
        let mut shape = sa.to_vec();
        shape[axis] = end - start;
        Ok(self.push(Op::Slice(a, axis, start, end), shape))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// L2-normalize each row of a rank-2 node. A 1e-24 floor under the
    /// squared norm keeps the gradient finite if a row is exactly zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("normalize_rows: {sa:?}")));
        }
        let sq = self.square(a)?;
        let ss = self.sum(sq, Some(1))?;
        let floored = self.clamp(ss, F::from_f64(1e-24), F::infinity());
        let norm = self.sqrt(floored);
        let norm2 = self.expand(norm, 1, sa[1])?;
        self.div(a, norm2)
    }

    /// Row-wise cosine similarity of two rank-2 nodes: out[i] =
    /// cos(a[i,:], b[i,:]).
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "cosine_rows")?;
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let prod = self.mul(na, nb)?;
        self.sum(prod, Some(1))
    }

    // ── execution ───────────────────────────────────────────────────────

    pub fn forward(&self, inputs: &Inputs<F>) -> Result<Execution<F>> {
        let mut values: Vec<Tensor<F>> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let out = self.eval_node(i, op, &values, inputs)?;
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    node: i,
                });
            }
            values.push(out);
        }
        Ok(Execution { values })
    }

    fn eval_node(
        &self,
        i: usize,
        op: &Op<F>,
        values: &[Tensor<F>],
        inputs: &Inputs<F>,
    ) -> Result<Tensor<F>> {
        let v = |id: NodeId| &values[id.idx()];
        Ok(match op {
            Op::Input(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::Invalid(format!("missing input `{name}`")))?;
                if t.shape() != self.shapes[i] {
                    return Err(Error::Shape(format!(
                        "input `{name}` declared {:?}, got {:?}",
                        self.shapes[i],
                        t.shape()
                    )));
                }
                t.clone()
            }
            Op::Param(name) => self.params[name.as_str()].value.clone(),
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) => zip(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip(v(*a), v(*b), |x, y| x * y),
            Op::Div(a, b) => zip(v(*a), v(*b), |x, y| x / y),
            Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
            Op::Transpose(a) => {
                let t = v(*a);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[j * r + i] = t.data()[i * c + j];
                    }
                }
                out
            }
            Op::BiasAdd(a, b) => {
                let (t, bias) = (v(*a), v(*b));
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = t.clone();
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[i * c + j] = out.data()[i * c + j] + bias.data()[j];
                    }
                }
                out
            }
            Op::Relu(a) => v(*a).map(|x| if x > F::zero() { x } else { F::zero() }),
            Op::Tanh(a) => v(*a).map(|x| x.tanh()),
            Op::Exp(a) => v(*a).map(|x| x.exp()),
            Op::Log(a) => v(*a).map(|x| x.ln()),
            Op::Sqrt(a) => v(*a).map(|x| x.sqrt()),
            Op::AddScalar(a, c) => v(*a).map(|x| x + *c),
            Op::MulScalar(a, c) => v(*a).map(|x| x * *c),
            Op::Clamp(a, lo, hi) => v(*a).map(|x| {
                if x < *lo {
                    *lo
                } else if x > *hi {
                    *hi
                } else {
                    x
                }
            }),
            Op::Softmax(a, axis) => softmax_forward(v(*a), *axis, false),
            Op::LogSoftmax(a, axis) => softmax_forward(v(*a), *axis, true),
            Op::PickPerRow(a, idx) => {
                let t = v(*a);
                let c = t.shape()[1];
                let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
                Tensor::from_vec(data)
            }
            Op::GatherRows(a, idx) => {
                let t = v(*a);
                let c = t.shape()[1];
                let mut out = Tensor::zeros(&[idx.len(), c]);
                for (i, &j) in idx.iter().enumerate() {
                    out.data_mut()[i * c..(i + 1) * c].copy_from_slice(t.row(j));
                }
                out
            }
            Op::OneHotRows(vals, idx, width) => {
                let t = v(*vals);
                let mut out = Tensor::zeros(&[idx.len(), *width]);
                for (i, &j) in idx.iter().enumerate() {
                    out.data_mut()[i * width + j] = t.data()[i];
                }
                out
            }
            Op::Sum(a, axis) => reduce_forward(v(*a), *axis, false),
            Op::Mean(a, axis) => reduce_forward(v(*a), *axis, true),
            Op::Concat(a, b, axis) => {
                let (ta, tb) = (v(*a), v(*b));
                let (la, lb) = (ta.shape()[*axis], tb.shape()[*axis]);
                let (outer, _, inner) = lanes(ta.shape(), *axis);
                let mut out = Tensor::zeros(&self.shapes[i]);
                let chunk_a = la * inner;
                let chunk_b = lb * inner;
                for o in 0..outer {
                    let dst = o * (chunk_a + chunk_b);
                    out.data_mut()[dst..dst + chunk_a]
                        .copy_from_slice(&ta.data()[o * chunk_a..(o + 1) * chunk_a]);
                    out.data_mut()[dst + chunk_a..dst + chunk_a + chunk_b]
                        .copy_from_slice(&tb.data()[o * chunk_b..(o + 1) * chunk_b]);
                }
                out
            }
            Op::Reshape(a) => Tensor::new(self.shapes[i].clone(), v(*a).data().to_vec())?,
            Op::Expand(a, axis, k) => {
                let t = v(*a);
                let outer: usize = t.shape()[..*axis].iter().product();
                let inner: usize = t.shape()[*axis..].iter().product();
                let mut out = Tensor::zeros(&self.shapes[i]);
                for o in 0..outer {
                    for j in 0..*k {
                        let dst = (o * k + j) * inner;
                        out.data_mut()[dst..dst + inner]
                            .copy_from_slice(&t.data()[o * inner..(o + 1) * inner]);
                    }
                }
                out
            }
            Op::Slice(a, axis, start, end) => {
                let t = v(*a);
                let (outer, len, inner) = lanes(t.shape(), *axis);
                let out_len = end - start;
                let mut out = Tensor::zeros(&self.shapes[i]);
                for o in 0..outer {
                    let src = (o * len + start) * inner;
                    let dst = o * out_len * inner;
                    out.data_mut()[dst..dst + out_len * inner]
                        .copy_from_slice(&t.data()[src..src + out_len * inner]);
                }
                out
            }
        })
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every parameter whose name
    /// passes `keep`. Parameters failing the filter receive exact zeros;
    /// gradients are not tracked for input or constant leaves.
    pub fn backward(
        &self,
        exec: &Execution<F>,
        loss: NodeId,
        keep: &dyn Fn(&str) -> bool,
    ) -> Result<Gradients<F>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.ops.len()];
        grads[loss.idx()] = Some(Tensor::full(self.shape(loss), F::one()));

        for i in (0..self.ops.len()).rev() {
            let g = match &grads[i] {
                None => continue,
                Some(t) => t.clone(),
            };
            self.backprop_node(i, &g, exec, &mut grads, keep);
        }

        let mut map = IndexMap::new();
        for (name, slot) in &self.params {
            let t = match grads[slot.node.idx()].take() {
                Some(t) => t,
                None => Tensor::zeros(slot.value.shape()),
            };
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    op: "backward",
                    node: slot.node.idx(),
                });
            }
            map.insert(name.clone(), t);
        }
        Ok(Gradients { map })
    }

    fn wants_grad(&self, id: NodeId, keep: &dyn Fn(&str) -> bool) -> bool {
        match &self.ops[id.idx()] {
            Op::Input(_) | Op::Constant(_) => false,
            Op::Param(name) => keep(name),
            _ => true,
        }
    }

    fn acc<'g>(
        &self,
        grads: &'g mut [Option<Tensor<F>>],
        id: NodeId,
    ) -> &'g mut Tensor<F> {
        let slot = &mut grads[id.idx()];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.shapes[id.idx()]));
        }
        slot.as_mut().unwrap()
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<F>,
        exec: &Execution<F>,
        grads: &mut [Option<Tensor<F>>],
        keep: &dyn Fn(&str) -> bool,
    ) {
        let val = |id: NodeId| exec.value(id);
        let op = self.ops[i].clone();
        match op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi);
                }
                if self.wants_grad(b, keep) {
                    acc_zip(self.acc(grads, b), g, |db, gi, _| db + gi);
                }
            }
            Op::Sub(a, b) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi);
                }
                if self.wants_grad(b, keep) {
                    acc_zip(self.acc(grads, b), g, |db, gi, _| db - gi);
                }
            }
            Op::Mul(a, b) => {
                if self.wants_grad(a, keep) {
                    let vb = val(b).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &vb, |da, gi, x| da + gi * x);
                }
                if self.wants_grad(b, keep) {
                    let va = val(a).data().to_vec();
                    acc_zip2(self.acc(grads, b), g, &va, |db, gi, x| db + gi * x);
                }
            }
            Op::Div(a, b) => {
                if self.wants_grad(a, keep) {
                    let vb = val(b).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &vb, |da, gi, x| da + gi / x);
                }
                if self.wants_grad(b, keep) {
                    let vb = val(b).data();
                    let out = exec.value(NodeId(i)).data();
                    let scaled: Vec<F> = out
                        .iter()
                        .zip(vb)
                        .map(|(&o, &x)| o / x)
                        .collect();
                    acc_zip2(self.acc(grads, b), g, &scaled, |db, gi, s| db - gi * s);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shapes[a.idx()][0], self.shapes[a.idx()][1]);
                let n = self.shapes[b.idx()][1];
                if self.wants_grad(a, keep) {
                    let vb = val(b).data().to_vec();
                    let da = self.acc(grads, a);
                    // dA += G * B^T : (m x n) x (n x k)
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g.data(),
                        n as isize,
                        1,
                        &vb,
                        1,
                        n as isize,
                        F::one(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if self.wants_grad(b, keep) {
                    let va = val(a).data().to_vec();
                    let db = self.acc(grads, b);
                    // dB += A^T * G : (k x m) x (m x n)
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        &va,
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        F::one(),
                        db.data_mut(),
                        n as isize,
                        1,
                    );
                }
            }
            Op::Transpose(a) => {
                if self.wants_grad(a, keep) {
                    let (c, r) = (self.shapes[i][0], self.shapes[i][1]);
                    let da = self.acc(grads, a);
                    for p in 0..c {
                        for q in 0..r {
                            let cur = da.data()[q * c + p];
                            da.data_mut()[q * c + p] = cur + g.data()[p * r + q];
                        }
                    }
                }
            }
            Op::BiasAdd(a, b) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi);
                }
                if self.wants_grad(b, keep) {
                    let (r, c) = (self.shapes[a.idx()][0], self.shapes[a.idx()][1]);
                    let db = self.acc(grads, b);
                    for p in 0..r {
                        for q in 0..c {
                            let cur = db.data()[q];
                            db.data_mut()[q] = cur + g.data()[p * c + q];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants_grad(a, keep) {
                    let va = val(a).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &va, |da, gi, x| {
                        if x > F::zero() {
                            da + gi
                        } else {
                            da
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if self.wants_grad(a, keep) {
                    let out = exec.value(NodeId(i)).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &out, |da, gi, y| {
                        da + gi * (F::one() - y * y)
                    });
                }
            }
            Op::Exp(a) => {
                if self.wants_grad(a, keep) {
                    let out = exec.value(NodeId(i)).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &out, |da, gi, y| da + gi * y);
                }
            }
            Op::Log(a) => {
                if self.wants_grad(a, keep) {
                    let va = val(a).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &va, |da, gi, x| da + gi / x);
                }
            }
            Op::Sqrt(a) => {
                if self.wants_grad(a, keep) {
                    let out = exec.value(NodeId(i)).data().to_vec();
                    let two = F::from_f64(2.0);
                    acc_zip2(self.acc(grads, a), g, &out, |da, gi, y| da + gi / (two * y));
                }
            }
            Op::AddScalar(a, _) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi);
                }
            }
            Op::MulScalar(a, c) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi * c);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.wants_grad(a, keep) {
                    let va = val(a).data().to_vec();
                    acc_zip2(self.acc(grads, a), g, &va, |da, gi, x| {
                        if x > lo && x < hi {
                            da + gi
                        } else {
                            da
                        }
                    });
                }
            }
            Op::Softmax(a, axis) => {
                if self.wants_grad(a, keep) {
                    let y = exec.value(NodeId(i));
                    let (outer, len, inner) = lanes(y.shape(), axis);
                    let da = self.acc(grads, a);
                    for o in 0..outer {
                        for r in 0..inner {
                            let mut dot = F::zero();
                            for j in 0..len {
                                let p = (o * len + j) * inner + r;
                                dot = dot + g.data()[p] * y.data()[p];
                            }
                            for j in 0..len {
                                let p = (o * len + j) * inner + r;
                                let cur = da.data()[p];
                                da.data_mut()[p] =
                                    cur + y.data()[p] * (g.data()[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                if self.wants_grad(a, keep) {
                    let y = exec.value(NodeId(i));
                    let (outer, len, inner) = lanes(y.shape(), axis);
                    let da = self.acc(grads, a);
                    for o in 0..outer {
                        for r in 0..inner {
                            let mut gsum = F::zero();
                            for j in 0..len {
                                gsum = gsum + g.data()[(o * len + j) * inner + r];
                            }
                            for j in 0..len {
                                let p = (o * len + j) * inner + r;
                                let cur = da.data()[p];
                                da.data_mut()[p] =
                                    cur + g.data()[p] - y.data()[p].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::PickPerRow(a, idx) => {
                if self.wants_grad(a, keep) {
                    let c = self.shapes[a.idx()][1];
                    let da = self.acc(grads, a);
                    for (r, &j) in idx.iter().enumerate() {
                        let cur = da.data()[r * c + j];
                        da.data_mut()[r * c + j] = cur + g.data()[r];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.wants_grad(a, keep) {
                    let c = self.shapes[a.idx()][1];
                    let da = self.acc(grads, a);
                    for (r, &j) in idx.iter().enumerate() {
                        for q in 0..c {
                            let cur = da.data()[j * c + q];
                            da.data_mut()[j * c + q] = cur + g.data()[r * c + q];
                        }
                    }
                }
            }
            Op::OneHotRows(vals, idx, width) => {
                if self.wants_grad(vals, keep) {
                    let dv = self.acc(grads, vals);
                    for (r, &j) in idx.iter().enumerate() {
                        let cur = dv.data()[r];
                        dv.data_mut()[r] = cur + g.data()[r * width + j];
                    }
                }
            }
            Op::Sum(a, axis) => {
                if self.wants_grad(a, keep) {
                    self.reduce_backward(grads, a, axis, g, None);
                }
            }
            Op::Mean(a, axis) => {
                if self.wants_grad(a, keep) {
                    let scale = match axis {
                        None => F::from_f64(1.0 / numel(&self.shapes[a.idx()]) as f64),
                        Some(ax) => F::from_f64(1.0 / self.shapes[a.idx()][ax] as f64),
                    };
                    self.reduce_backward(grads, a, axis, g, Some(scale));
                }
            }
            Op::Concat(a, b, axis) => {
                let la = self.shapes[a.idx()][axis];
                let lb = self.shapes[b.idx()][axis];
                let (outer, _, inner) = lanes(&self.shapes[a.idx()], axis);
                if self.wants_grad(a, keep) {
                    let da = self.acc(grads, a);
                    for o in 0..outer {
                        for j in 0..la * inner {
                            let cur = da.data()[o * la * inner + j];
                            da.data_mut()[o * la * inner + j] =
                                cur + g.data()[o * (la + lb) * inner + j];
                        }
                    }
                }
                if self.wants_grad(b, keep) {
                    let db = self.acc(grads, b);
                    for o in 0..outer {
                        for j in 0..lb * inner {
                            let cur = db.data()[o * lb * inner + j];
                            db.data_mut()[o * lb * inner + j] =
                                cur + g.data()[(o * (la + lb) + la) * inner + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants_grad(a, keep) {
                    acc_zip(self.acc(grads, a), g, |da, gi, _| da + gi);
                }
            }
            Op::Expand(a, axis, k) => {
                if self.wants_grad(a, keep) {
                    let outer: usize = self.shapes[a.idx()][..axis].iter().product();
                    let inner: usize = self.shapes[a.idx()][axis..].iter().product();
                    let da = self.acc(grads, a);
                    for o in 0..outer {
                        for j in 0..k {
                            for r in 0..inner {
                                let cur = da.data()[o * inner + r];
                                da.data_mut()[o * inner + r] =
                                    cur + g.data()[(o * k + j) * inner + r];
                            }
                        }
                    }
                }
            }
            Op::Slice(a, axis, start, end) => {
                if self.wants_grad(a, keep) {
                    let (outer, len, inner) = lanes(&self.shapes[a.idx()], axis);
                    let out_len = end - start;
                    let da = self.acc(grads, a);
                    for o in 0..outer {
                        for j in 0..out_len * inner {
                            let p = (o * len + start) * inner + j;
                            let cur = da.data()[p];
                            da.data_mut()[p] = cur + g.data()[o * out_len * inner + j];
                        }
                    }
                }
            }
        }
    }

    fn reduce_backward(
        &self,
        grads: &mut [Option<Tensor<F>>],
        a: NodeId,
        axis: Option<usize>,
        g: &Tensor<F>,
        scale: Option<F>,
    ) {
        let s = scale.unwrap_or_else(F::one);
        match axis {
            None => {
                let gi = g.data()[0] * s;
                let da = self.acc(grads, a);
                for v in da.data_mut() {
                    *v = *v + gi;
                }
            }
            Some(ax) => {
                let (outer, len, inner) = lanes(&self.shapes[a.idx()], ax);
                let da = self.acc(grads, a);
                for o in 0..outer {
                    for j in 0..len {
                        for r in 0..inner {
                            let p = (o * len + j) * inner + r;
                            let cur = da.data()[p];
                            da.data_mut()[p] = cur + g.data()[o * inner + r] * s;
                        }
                    }
                }
            }
        }
    }
}

fn zip<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes validated at build")
}

fn acc_zip<F: Real>(dst: &mut Tensor<F>, g: &Tensor<F>, f: impl Fn(F, F, ()) -> F) {
    for (d, &gi) in dst.data_mut().iter_mut().zip(g.data()) {
        *d = f(*d, gi, ());
    }
}

fn acc_zip2<F: Real>(dst: &mut Tensor<F>, g: &Tensor<F>, other: &[F], f: impl Fn(F, F, F) -> F) {
    for ((d, &gi), &x) in dst.data_mut().iter_mut().zip(g.data()).zip(other) {
        *d = f(*d, gi, x);
    }
}

/// Max-subtracted softmax / log-softmax along one axis.
fn softmax_forward<F: Real>(t: &Tensor<F>, axis: usize, log: bool) -> Tensor<F> {
    let (outer, len, inner) = lanes(t.shape(), axis);
    let mut out = Tensor::zeros(t.shape());
    for o in 0..outer {
        for r in 0..inner {
            let at = |j: usize| (o * len + j) * inner + r;
            let mut mx = t.data()[at(0)];
            for j in 1..len {
                if t.data()[at(j)] > mx {
                    mx = t.data()[at(j)];
                }
            }
            let mut denom = F::zero();
            for j in 0..len {
                denom = denom + (t.data()[at(j)] - mx).exp();
            }
            if log {
                let lse = denom.ln() + mx;
                for j in 0..len {
                    out.data_mut()[at(j)] = t.data()[at(j)] - lse;
                }
            } else {
                for j in 0..len {
                    out.data_mut()[at(j)] = (t.data()[at(j)] - mx).exp() / denom;
                }
            }
        }
    }
    out
}

fn reduce_forward<F: Real>(t: &Tensor<F>, axis: Option<usize>, mean: bool) -> Tensor<F> {
    match axis {
        None => {
            let mut s = F::zero();
            for &v in t.data() {
                s = s + v;
            }
            if mean {
                s = s * F::from_f64(1.0 / t.numel() as f64);
            }
            Tensor::scalar(s)
        }
        Some(ax) => {
            let (outer, len, inner) = lanes(t.shape(), ax);
            let mut shape = t.shape().to_vec();
            shape.remove(ax);
            let mut out = Tensor::zeros(&shape);
            for o in 0..outer {
                for j in 0..len {
                    for r in 0..inner {
                        let cur = out.data()[o * inner + r];
                        out.data_mut()[o * inner + r] = cur + t.data()[(o * len + j) * inner + r];
                    }
                }
            }
            if mean {
                let s = F::from_f64(1.0 / len as f64);
                for v in out.data_mut() {
                    *v = *v * s;
                }
            }
            out
        }
    }
}

// ── finite-difference verification ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compare the analytic gradient of `loss` against central finite
/// differences over every parameter coordinate. Relative error uses a
/// denominator floored at 1e-3 so near-zero gradients are compared
/// absolutely. 64-bit graphs only; `eps` must lie in [1e-7, 1e-3].
pub fn gradcheck(
    graph: &mut Graph<f64>,
    inputs: &Inputs<f64>,
    loss: NodeId,
    eps: f64,
) -> Result<GradcheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!(
            "gradcheck eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let exec = graph.forward(inputs)?;
    let analytic = graph.backward(&exec, loss, &|_| true)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    let names = graph.param_names();
    for name in &names {
        let base = graph.param_value(name).expect("listed param").clone();
        let grad = analytic.get(name).expect("gradient per param");
        for c in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[c] += eps;
            graph.set_param(name, plus)?;
            let lp = graph.forward(inputs)?.value(loss).item();

            let mut minus = base.clone();
            minus.data_mut()[c] -= eps;
            graph.set_param(name, minus)?;
            let lm = graph.forward(inputs)?.value(loss).item();

            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_coord = c;
            }
            report.coords_checked += 1;
        }
        graph.set_param(name, base)?;
    }
    Ok(report)
}
