//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built per forward pass. Operations on [`Var`]s append a
//! node to the tape only when at least one input depends on a parameter,
//! so constant sub-expressions cost nothing at backward time. A graph made
//! with [`Graph::no_grad`] records nothing and intermediate values are freed
//! as soon as their `Var`s go out of scope.
//!
//! ```
//! use fluid_core::autograd::{Graph, Params};
//! use fluid_core::tensor::Tensor;
//!
//! let mut params = Params::new();
//! let p = params.add("p", Tensor::new(&[1], vec![3.0]).unwrap());
//! let g = Graph::new();
//! let x = g.param(&params, p);
//! let loss = x.square().sum();
//! let grads = g.backward(&loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
//! ```

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::tensor::{matmul_plan, split_axis, MatmulPlan, Tensor};

/// Handle to a trainable tensor inside [`Params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter storage.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.get(id).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Gradients of a scalar root with respect to each reachable parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when unreachable.
    pub fn get_or_zeros(&self, params: &Params, id: ParamId) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.by_param.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }
}

#[derive(Clone)]
struct In {
    node: Option<usize>,
    value: Rc<Tensor>,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Relu,
    Abs,
    Square,
}

enum Op {
    Param(ParamId),
    MatMul(In, In, MatmulPlan),
    Add(In, In),
    Sub(In, In),
    Mul(In, In),
    AddRow(In, In),
    MulRow(In, In),
    Scale(In, f64),
    AddScalar(In),
    Unary(In, Unary),
    Sum(In),
    SumAxis(In, usize),
    Reshape(In),
    Permute(In, Vec<usize>),
    Concat(Vec<In>, usize),
    Narrow(In, usize, usize),
    Gather(In, Rc<[usize]>),
    Softmax(In),
    LogSoftmax(In),
    LayerNorm(In, Rc<[f64]>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Sentinel row index for [`Var::gather_rows`] producing a zero row.
pub const PAD_ROW: usize = usize::MAX;

/// The recording tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    /// A graph that never records; all results are constants.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            graph: self,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for a parameter. Repeated calls for the same id share one node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&self, params: &Params, id: ParamId) -> Var<'_> {
        let value = params.values[id.0].clone();
        if !self.recording {
            return Var {
                graph: self,
                node: None,
                value,
            };
        }
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            let value = self.nodes.borrow()[node].value.clone();
            return Var {
                graph: self,
                node: Some(node),
                value,
            };
        }
        let node = self.push(value.clone(), Op::Param(id));
        self.param_nodes.borrow_mut().insert(id, node);
        Var {
            graph: self,
            node: Some(node),
            value,
        }
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        nodes.len() - 1
    }

    fn record(&self, value: Tensor, inputs: &[&Var<'_>], op: impl FnOnce() -> Op) -> Var<'_> {
        let value = Rc::new(value);
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| self.push(value.clone(), op()));
        Var { graph: self, node, value }
    }

    /// Reverse sweep from a scalar root. Every recorded node's rule runs at
    /// most once, in reverse tape order.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let mut out = Gradients::default();
        let Some(root_id) = root.node else {
            return Ok(out);
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root_id).map(|_| None).collect();
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Param(pid) = node.op {
                out.by_param.insert(pid, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&node.op, &node.value, &g, &mut grads);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], input: &In, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = input.node {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; input.value.numel()]);
        f(slot);
    }
}

/// Adds `g` into a buffer that is either full-size or a broadcast scalar.
fn add_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    if dst.len() == g.len() {
        for (d, x) in dst.iter_mut().zip(g) {
            *d += sign * x;
        }
    } else {
        dst[0] += sign * g.iter().sum::<f64>();
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Param(_) => {}
        Op::MatMul(a, b, plan) => {
            accumulate(grads, a, |ga| plan.grad_a(g, b.value.data(), ga));
            accumulate(grads, b, |gb| plan.grad_b(g, a.value.data(), gb));
        }
        Op::Add(a, b) => {
            accumulate(grads, a, |ga| add_broadcast(ga, g, 1.0));
            accumulate(grads, b, |gb| add_broadcast(gb, g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, |ga| add_broadcast(ga, g, 1.0));
            accumulate(grads, b, |gb| add_broadcast(gb, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (a.value.data(), b.value.data());
            let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
            let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
            accumulate(grads, a, |ga| {
                let prod: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * bt(i)).collect();
                add_broadcast(ga, &prod, 1.0);
            });
            accumulate(grads, b, |gb| {
                let prod: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * at(i)).collect();
                add_broadcast(gb, &prod, 1.0);
            });
        }
        Op::AddRow(a, row) => {
            accumulate(grads, a, |ga| add_broadcast(ga, g, 1.0));
            let c = row.value.numel();
            accumulate(grads, row, |gr| {
                for chunk in g.chunks(c) {
                    for (d, x) in gr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
            });
        }
        Op::MulRow(a, row) => {
            let c = row.value.numel();
            let rv = row.value.data();
            accumulate(grads, a, |ga| {
                for (i, (d, x)) in ga.iter_mut().zip(g).enumerate() {
                    *d += x * rv[i % c];
                }
            });
            let av = a.value.data();
            accumulate(grads, row, |gr| {
                for (i, (x, y)) in g.iter().zip(av).enumerate() {
                    gr[i % c] += x * y;
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, a, |ga| add_broadcast(ga, g, *c)),
        Op::AddScalar(a) => accumulate(grads, a, |ga| add_broadcast(ga, g, 1.0)),
        Op::Unary(a, kind) => {
            let x = a.value.data();
            let y = out.data();
            accumulate(grads, a, |ga| {
                for i in 0..ga.len() {
                    let d = match kind {
                        Unary::Neg => -1.0,
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Exp => y[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                        Unary::Square => 2.0 * x[i],
                    };
                    ga[i] += g[i] * d;
                }
            });
        }
        Op::Sum(a) => accumulate(grads, a, |ga| {
            for d in ga.iter_mut() {
                *d += g[0];
            }
        }),
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = split_axis(a.value.shape(), *axis, "sum_axis").expect("validated at forward");
            accumulate(grads, a, |ga| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, a, |ga| add_broadcast(ga, g, 1.0)),
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(grads, a, |ga| {
                let back = permute_data(g, out.shape(), &inverse);
                add_broadcast(ga, &back, 1.0);
            });
        }
        Op::Concat(inputs, axis) => {
            let total = out.shape()[*axis];
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let mut start = 0;
            for input in inputs {
                let len = input.value.shape()[*axis];
                accumulate(grads, input, |gi| {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                        for (d, x) in gi[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                });
                start += len;
            }
        }
        Op::Narrow(a, axis, start) => {
            let (outer, total, inner) = split_axis(a.value.shape(), *axis, "narrow").expect("validated at forward");
            let len = out.shape()[*axis];
            accumulate(grads, a, |ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * total + start) * inner..(o * total + start + len) * inner];
                    for (d, x) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += x;
                    }
                }
            });
        }
        Op::Gather(a, idx) => {
            let c = *a.value.shape().last().unwrap_or(&1);
            accumulate(grads, a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    if src == PAD_ROW {
                        continue;
                    }
                    for (d, x) in ga[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += x;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let c = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            accumulate(grads, a, |ga| {
                for ((grow, yrow), dst) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let c = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            accumulate(grads, a, |ga| {
                for ((grow, yrow), dst) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..c {
                        dst[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm(a, inv_std) => {
            let c = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            accumulate(grads, a, |ga| {
                for (r, ((grow, yrow), dst)) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)).enumerate() {
                    let mean_g = grow.iter().sum::<f64>() / c as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dst[j] += inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
            });
        }
    }
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
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// A value in a [`Graph`]; cheap to clone.
#[derive(Clone)]
pub struct Var<'g> {
    graph: &'g Graph,
    node: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    fn as_in(&self) -> In {
        In {
            node: self.node,
            value: self.value.clone(),
        }
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        Var {
            graph: self.graph,
            node: None,
            value: self.value.clone(),
        }
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let plan = matmul_plan(self.shape(), other.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(self.value.data(), other.value.data(), &mut out);
        let value = Tensor::from_parts(plan.out_shape.clone(), out);
        Ok(self
            .graph
            .record(value, &[self, other], || Op::MatMul(self.as_in(), other.as_in(), plan)))
    }

    fn binary(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (&*self.value, &*other.value);
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        } else if b.is_scalar_like() {
            let y = b.data()[0];
            Ok(Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x, y)).collect()))
        } else if a.is_scalar_like() {
            let x = a.data()[0];
            Ok(Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|y| f(x, *y)).collect()))
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum; shapes must match or one side must hold one element.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.graph.record(v, &[self, other], || Op::Add(self.as_in(), other.as_in())))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.graph.record(v, &[self, other], || Op::Sub(self.as_in(), other.as_in())))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.graph.record(v, &[self, other], || Op::Mul(self.as_in(), other.as_in())))
    }

    fn check_row(&self, row: &Var<'g>, op: &'static str) -> Result<usize> {
        let c = *self.shape().last().unwrap_or(&1);
        if row.value.numel() != c || self.value.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        Ok(c)
    }

    /// Adds a vector along the last axis (bias add).
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let c = self.check_row(row, "add_row")?;
        let r = row.value.data();
        let data = self.value.data().iter().enumerate().map(|(i, x)| x + r[i % c]).collect();
        let v = Tensor::from_parts(self.shape().to_vec(), data);
        Ok(self.graph.record(v, &[self, row], || Op::AddRow(self.as_in(), row.as_in())))
    }

    /// Multiplies by a vector along the last axis (gain).
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let c = self.check_row(row, "mul_row")?;
        let r = row.value.data();
        let data = self.value.data().iter().enumerate().map(|(i, x)| x * r[i % c]).collect();
        let v = Tensor::from_parts(self.shape().to_vec(), data);
        Ok(self.graph.record(v, &[self, row], || Op::MulRow(self.as_in(), row.as_in())))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let v = self.value.map(|x| x * c);
        self.graph.record(v, &[self], || Op::Scale(self.as_in(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let v = self.value.map(|x| x + c);
        self.graph.record(v, &[self], || Op::AddScalar(self.as_in()))
    }

    fn unary(&self, kind: Unary) -> Var<'g> {
        let f = |x: f64| match kind {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        };
        let v = self.value.map(f);
        self.graph.record(v, &[self], || Op::Unary(self.as_in(), kind))
    }

    pub fn neg(&self) -> Var<'g> {
        self.unary(Unary::Neg)
    }
    pub fn tanh(&self) -> Var<'g> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }
    pub fn softplus(&self) -> Var<'g> {
        self.unary(Unary::Softplus)
    }
    pub fn exp(&self) -> Var<'g> {
        self.unary(Unary::Exp)
    }
    pub fn relu(&self) -> Var<'g> {
        self.unary(Unary::Relu)
    }
    pub fn abs(&self) -> Var<'g> {
        self.unary(Unary::Abs)
    }
    pub fn square(&self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value.data().iter().sum());
        self.graph.record(v, &[self], || Op::Sum(self.as_in()))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let (outer, len, inner) = split_axis(self.shape(), axis, "sum_axis")?;
        let x = self.value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::from_parts(shape, out);
        Ok(self.graph.record(v, &[self], || Op::SumAxis(self.as_in(), axis)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value.reshape(shape)?;
        Ok(self.graph.record(v, &[self], || Op::Reshape(self.as_in())))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let rank = self.value.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(format!("permutation {perm:?} invalid for rank {rank}")));
        }
        let data = permute_data(self.value.data(), self.shape(), perm);
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        let v = Tensor::from_parts(shape, data);
        Ok(self.graph.record(v, &[self], || Op::Permute(self.as_in(), perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let rank = self.value.rank();
        if rank < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let (outer, total, inner) = split_axis(self.shape(), axis, "narrow")?;
        if start + len > total {
            return Err(invalid(format!(
                "narrow [{start}, {}) exceeds axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let x = self.value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::from_parts(shape, out);
        Ok(self.graph.record(v, &[self], || Op::Narrow(self.as_in(), axis, start)))
    }

    /// Treats `self` as rows of its last axis and picks rows by index;
    /// [`PAD_ROW`] yields a zero row. Output shape `[indices.len(), C]`.
    pub fn gather_rows(&self, indices: Rc<[usize]>) -> Result<Var<'g>> {
        let c = *self.shape().last().ok_or_else(|| invalid("gather_rows on a scalar"))?;
        let rows = if c == 0 { 0 } else { self.value.numel() / c };
        let x = self.value.data();
        let mut out = vec![0.0; indices.len() * c];
        for (r, &src) in indices.iter().enumerate() {
            if src == PAD_ROW {
                continue;
            }
            if src >= rows {
                return Err(invalid(format!("gather index {src} out of range for {rows} rows")));
            }
            out[r * c..(r + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
        let v = Tensor::from_parts(vec![indices.len(), c], out);
        Ok(self.graph.record(v, &[self], || Op::Gather(self.as_in(), indices)))
    }

    /// Softmax along the last axis. Entries whose mask is `false` get exactly
    /// zero weight; a fully masked row is all zeros.
    pub fn softmax(&self, mask: Option<Rc<[bool]>>) -> Result<Var<'g>> {
        let c = *self.shape().last().ok_or_else(|| invalid("softmax on a scalar"))?;
        if let Some(m) = &mask {
            if m.len() != self.value.numel() {
                return Err(Error::ShapeMismatch {
                    op: "softmax mask",
                    lhs: self.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let x = self.value.data();
        let mut out = vec![0.0; x.len()];
        for (r, (row, dst)) in x.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let valid = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
            let max = (0..c).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..c {
                if valid(j) {
                    dst[j] = (row[j] - max).exp();
                    sum += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= sum;
            }
        }
        let v = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(self.graph.record(v, &[self], || Op::Softmax(self.as_in())))
    }

    pub fn log_softmax(&self) -> Result<Var<'g>> {
        let c = *self.shape().last().ok_or_else(|| invalid("log_softmax on a scalar"))?;
        let x = self.value.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(self.graph.record(v, &[self], || Op::LogSoftmax(self.as_in())))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'g>> {
        let c = *self.shape().last().ok_or_else(|| invalid("layer_norm on a scalar"))?;
        let x = self.value.data();
        let mut out = Vec::with_capacity(x.len());
        let mut inv = Vec::with_capacity(x.len() / c.max(1));
        for row in x.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            inv.push(inv_std);
            out.extend(row.iter().map(|v| (v - mean) * inv_std));
        }
        let v = Tensor::from_parts(self.shape().to_vec(), out);
        let inv: Rc<[f64]> = inv.into();
        Ok(self.graph.record(v, &[self], || Op::LayerNorm(self.as_in(), inv)))
    }
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
    let graph = first.graph;
    let rank = first.value.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { op: "concat", axis, rank });
    }
    for p in parts {
        let ok = p.value.rank() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            out.extend_from_slice(&p.value.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let v = Tensor::from_parts(shape, out);
    let refs: Vec<&Var<'g>> = parts.iter().collect();
    Ok(graph.record(v, &refs, || Op::Concat(parts.iter().map(Var::as_in).collect(), axis)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    /// Max relative error of an op's gradient against central differences,
    /// reduced to a scalar through a fixed random projection.
    fn op_error<F>(shapes: &[&[usize]], seed: u64, f: F) -> f64
    where
        F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
        let probe_shape = {
            let g = Graph::no_grad();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            f(&vars).unwrap().shape().to_vec()
        };
        let probe = rand_t(&probe_shape, &mut rng);
        let report = check_gradients(&inputs, 1e-5, |vars| {
            let g = vars[0].graph();
            let p = g.constant(probe.clone());
            Ok(f(vars)?.mul(&p)?.sum())
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn quadratic_and_constant_roots() {
        let mut params = Params::new();
        let p = params.add("p", Tensor::new(&[1], vec![3.0]).unwrap());
        let q = params.add("q", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let g = Graph::new();
        let root = g.param(&params, p).square().sum();
        let grads = g.backward(&root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);

        let g = Graph::new();
        let c = g.scalar(4.0);
        let grads = g.backward(&c).unwrap();
        assert!(grads.is_empty());
        assert_eq!(grads.get_or_zeros(&params, q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let v = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(&v), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shared_param_accumulates_once_per_node() {
        let mut params = Params::new();
        let p = params.add("p", Tensor::new(&[1], vec![2.0]).unwrap());
        let g = Graph::new();
        let a = g.param(&params, p);
        let b = g.param(&params, p);
        let root = a.mul(&b).unwrap().sum(); // p^2
        assert_eq!(g.backward(&root).unwrap().get(p).unwrap().data(), &[4.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let mut params = Params::new();
        let p = params.add("p", Tensor::ones(&[3]));
        let g = Graph::no_grad();
        let y = g.param(&params, p).tanh().sum();
        assert!(!y.requires_grad());
        assert!(g.is_empty());
    }

    #[test]
    fn elementwise_closed_forms() {
        let g = Graph::no_grad();
        let z = g.scalar(0.0);
        assert!((z.softplus().value().item() - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(z.tanh().value().item(), 0.0);
        assert_eq!(z.sigmoid().value().item(), 0.5);
        for x in [-3.0, 0.0, 3.0] {
            let v = g.scalar(x);
            let d = v.softplus().sub(&v.neg().softplus()).unwrap();
            assert!((d.value().item() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let g = Graph::no_grad();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let mask: Rc<[bool]> = vec![true, true, false, false, false, false].into();
        let y = x.softmax(Some(mask)).unwrap();
        let d = y.value().data();
        assert_eq!(d[2], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let tol = 1e-4;
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", op_error(&[&[3, 4], &[4, 2]], 1, |v| v[0].matmul(&v[1]))),
            ("matmul_bcast", op_error(&[&[2, 1, 3, 4], &[3, 4, 2]], 2, |v| v[0].matmul(&v[1]))),
            ("add", op_error(&[&[2, 3], &[2, 3]], 3, |v| v[0].add(&v[1]))),
            ("add_scalar_bcast", op_error(&[&[2, 3], &[1]], 4, |v| v[0].add(&v[1]))),
            ("sub", op_error(&[&[4], &[4]], 5, |v| v[0].sub(&v[1]))),
            ("mul", op_error(&[&[2, 3], &[2, 3]], 6, |v| v[0].mul(&v[1]))),
            ("mul_scalar_bcast", op_error(&[&[1], &[5]], 7, |v| v[0].mul(&v[1]))),
            ("add_row", op_error(&[&[3, 4], &[4]], 8, |v| v[0].add_row(&v[1]))),
            ("mul_row", op_error(&[&[3, 4], &[4]], 9, |v| v[0].mul_row(&v[1]))),
            ("scale", op_error(&[&[3]], 10, |v| Ok(v[0].scale(-1.7)))),
            ("neg", op_error(&[&[3]], 11, |v| Ok(v[0].neg()))),
            ("tanh", op_error(&[&[6]], 12, |v| Ok(v[0].tanh()))),
            ("sigmoid", op_error(&[&[6]], 13, |v| Ok(v[0].sigmoid()))),
            ("softplus", op_error(&[&[6]], 14, |v| Ok(v[0].softplus()))),
            ("exp", op_error(&[&[6]], 15, |v| Ok(v[0].exp()))),
            ("relu", op_error(&[&[6]], 16, |v| Ok(v[0].relu()))),
            ("abs", op_error(&[&[6]], 17, |v| Ok(v[0].abs()))),
            ("square", op_error(&[&[6]], 18, |v| Ok(v[0].square()))),
            ("mean", op_error(&[&[2, 3]], 19, |v| Ok(v[0].mean()))),
            ("sum_axis", op_error(&[&[2, 3, 4]], 20, |v| v[0].sum_axis(1))),
            ("permute", op_error(&[&[2, 3, 4]], 21, |v| v[0].permute(&[2, 0, 1]))),
            ("narrow", op_error(&[&[2, 5, 3]], 22, |v| v[0].narrow(1, 1, 3))),
            (
                "concat",
                op_error(&[&[2, 2, 3], &[2, 1, 3]], 23, |v| concat(&[v[0].clone(), v[1].clone()], 1)),
            ),
            (
                "gather",
                op_error(&[&[4, 3]], 24, |v| v[0].gather_rows(vec![2, PAD_ROW, 0, 2].into())),
            ),
            ("softmax", op_error(&[&[3, 4]], 25, |v| v[0].softmax(None))),
            (
                "softmax_masked",
                op_error(&[&[2, 3]], 26, |v| {
                    v[0].softmax(Some(vec![true, false, true, true, true, false].into()))
                }),
            ),
            ("log_softmax", op_error(&[&[3, 4]], 27, |v| v[0].log_softmax())),
            ("layer_norm", op_error(&[&[3, 5]], 28, |v| v[0].layer_norm(1e-5))),
            ("reshape", op_error(&[&[2, 6]], 29, |v| v[0].reshape(&[3, 4]))),
        ];
        for (name, err) in &cases {
            assert!(*err < tol, "{name}: max relative error {err:e}");
        }
    }
}
