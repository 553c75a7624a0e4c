//! Define-by-run computation tape.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Nodes
//! are stored in creation order, which is a valid topological order, so
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use super::array::{broadcast_shape, broadcast_strides, for_each_broadcast, unbroadcast, NdArray};
use super::AutogradError;

type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Matmul(Var, Var),
    Conv1d { signal: Var, kernels: Var, bias: Var },
    Concat(Vec<Var>, usize),
    Broadcast(Var),
}

/// One recorded operation and its forward value.
#[derive(Clone, Debug)]
pub struct ComputationNode {
    pub op: OpKind,
    pub value: NdArray,
    pub name: Option<String>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<ComputationNode>,
    bindings: HashMap<String, NdArray>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose named inputs are looked up in `bindings`.
    pub fn with_bindings(bindings: HashMap<String, NdArray>) -> Self {
        Self {
            nodes: Vec::new(),
            bindings,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &ComputationNode {
        &self.nodes[v.0]
    }

    /// The tape in recording order.
    pub fn nodes(&self) -> &[ComputationNode] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: OpKind, value: NdArray, requires_grad: bool) -> Var {
        self.nodes.push(ComputationNode {
            op,
            value,
            name: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, op: OpKind, inputs: &[Var], value: NdArray) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(OpKind::Leaf, value, true)
    }

    /// A named differentiable leaf; gradients are reported under `name`.
    pub fn named_leaf(&mut self, name: &str, value: NdArray) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].name = Some(name.to_owned());
        v
    }

    /// A leaf excluded from gradient propagation.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(OpKind::Leaf, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(NdArray::scalar(value))
    }

    /// Looks up the binding for `name` and checks it has `shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let value = self
            .bindings
            .get(name)
            .ok_or_else(|| AutogradError::MissingBinding(name.to_owned()))?;
        if value.shape() != shape {
            return Err(AutogradError::LeafShape {
                name: name.to_owned(),
                expected: shape.to_vec(),
                found: value.shape().to_vec(),
            });
        }
        let value = value.clone();
        Ok(self.named_leaf(name, value))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            NdArray::new(va.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| AutogradError::Shape {
                op: name,
                detail: format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
            })?;
            let sa = broadcast_strides(va.shape(), &out);
            let sb = broadcast_strides(vb.shape(), &out);
            let mut res = NdArray::zeros(&out);
            let (da, db) = (va.data(), vb.data());
            let dst = res.data_mut();
            for_each_broadcast(&out, &sa, &sb, |o, i, j| dst[o] = f(da[i], db[j]));
            res
        };
        self.push_op(name, op, &[a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, OpKind::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, OpKind::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, OpKind::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, OpKind::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: OpKind, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push_op(name, op, &[x], value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, OpKind::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, OpKind::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, OpKind::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, OpKind::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, OpKind::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, OpKind::Softplus(x), softplus)
    }

    /// Sum of all elements, as a `[1]` array.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = NdArray::scalar(self.value(x).sum());
        self.push_op("sum", OpKind::Sum(x), &[x], value)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = reduce_axis(self.value(x), axis, "sum_axis")?;
        self.push_op("sum_axis", OpKind::SumAxis(x, axis), &[x], value)
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| AutogradError::Shape {
            op: "mean_axis",
            detail: format!("axis {axis} out of range for {:?}", self.shape(x)),
        })?;
        if len == 0 {
            return Err(AutogradError::Contract("mean over an empty axis".into()));
        }
        let mut value = reduce_axis(self.value(x), axis, "mean_axis")?;
        let inv = 1.0 / len as f64;
        value.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.push_op("mean_axis", OpKind::MeanAxis(x, axis), &[x], value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::Shape {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = NdArray::zeros(&[m, n]);
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), out.data_mut(), 0.0);
        self.push_op("matmul", OpKind::Matmul(a, b), &[a, b], out)
    }

    /// Same-padded, stride-1 cross-correlation.
    ///
    /// `signal` is `[c_in, length]`, `kernels` is `[c_out, c_in, k]` with odd
    /// `k`, `bias` is `[c_out]`; the result is `[c_out, length]`.
    pub fn conv1d(&mut self, signal: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (vs, vk, vb) = (self.value(signal), self.value(kernels), self.value(bias));
        let (ss, sk) = (vs.shape(), vk.shape());
        if ss.len() != 2 || sk.len() != 3 {
            return Err(AutogradError::Shape {
                op: "conv1d",
                detail: format!("signal {ss:?}, kernels {sk:?}"),
            });
        }
        let (c_in, len) = (ss[0], ss[1]);
        let (c_out, k) = (sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(AutogradError::Contract(format!("conv1d kernel size {k} must be odd")));
        }
        if sk[1] != c_in {
            return Err(AutogradError::Contract(format!(
                "conv1d expects {} input channels, signal has {c_in}",
                sk[1]
            )));
        }
        if vb.len() != c_out {
            return Err(AutogradError::Contract(format!(
                "conv1d bias has {} entries for {c_out} output channels",
                vb.len()
            )));
        }
        let cols = im2col(vs.data(), c_in, len, k);
        let mut out = NdArray::zeros(&[c_out, len]);
        {
            let dst = out.data_mut();
            for (o, &b) in vb.data().iter().enumerate() {
                dst[o * len..(o + 1) * len].fill(b);
            }
        }
        gemm(
            c_out,
            c_in * k,
            len,
            vk.data(),
            (c_in * k, 1),
            &cols,
            (len, 1),
            out.data_mut(),
            1.0,
        );
        self.push_op(
            "conv1d",
            OpKind::Conv1d { signal, kernels, bias },
            &[signal, kernels, bias],
            out,
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| AutogradError::Contract("concat of zero arrays".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(AutogradError::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(AutogradError::Shape {
                    op: "concat",
                    detail: format!("{s:?} does not match {first:?} off axis {axis}"),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = NdArray::new(shape, data)?;
        self.push_op("concat", OpKind::Concat(parts.to_vec(), axis), parts, value)
    }

    /// Expands `x` to `shape` under broadcasting rules, e.g. a `[c, 1]`
    /// column repeated along a length axis to `[c, len]`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if broadcast_shape(vx.shape(), shape).as_deref() != Some(shape) {
            return Err(AutogradError::Shape {
                op: "broadcast",
                detail: format!("cannot broadcast {:?} to {shape:?}", vx.shape()),
            });
        }
        let strides = broadcast_strides(vx.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut out = NdArray::zeros(shape);
        let src = vx.data();
        let dst = out.data_mut();
        for_each_broadcast(shape, &strides, &zero, |o, i, _| dst[o] = src[i]);
        self.push_op("broadcast", OpKind::Broadcast(x), &[x], out)
    }

    // Composites built from the primitives above.

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.mul(x, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.add(x, c)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(AutogradError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; root.0 + 1];
        grads[root.0] = Some(NdArray::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &ComputationNode, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let mut send = |v: Var, contribution: NdArray| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot => *slot = Some(contribution),
            }
        };
        let y = &node.value;
        match &node.op {
            OpKind::Leaf => {}
            OpKind::Add(a, b) => {
                send(*a, unbroadcast(g, self.shape(*a)));
                send(*b, unbroadcast(g, self.shape(*b)));
            }
            OpKind::Sub(a, b) => {
                send(*a, unbroadcast(g, self.shape(*a)));
                send(*b, unbroadcast(&g.map(|v| -v), self.shape(*b)));
            }
            OpKind::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    send(*a, unbroadcast(&zip_broadcast(g, vb, |gi, bi| gi * bi), va.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, unbroadcast(&zip_broadcast(g, va, |gi, ai| gi * ai), vb.shape()));
                }
            }
            OpKind::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    send(*a, unbroadcast(&zip_broadcast(g, vb, |gi, bi| gi / bi), va.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -y/b
                    let gy = zip_same(g, y, |gi, yi| -gi * yi);
                    send(*b, unbroadcast(&zip_broadcast(&gy, vb, |t, bi| t / bi), vb.shape()));
                }
            }
            OpKind::Neg(x) => send(*x, g.map(|v| -v)),
            OpKind::Exp(x) => send(*x, zip_same(g, y, |gi, yi| gi * yi)),
            OpKind::Log(x) => send(*x, zip_same(g, self.value(*x), |gi, xi| gi / xi)),
            OpKind::Tanh(x) => send(*x, zip_same(g, y, |gi, yi| gi * (1.0 - yi * yi))),
            OpKind::Relu(x) => send(
                *x,
                zip_same(g, self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            ),
            OpKind::Softplus(x) => send(*x, zip_same(g, self.value(*x), |gi, xi| gi * sigmoid(xi))),
            OpKind::Sum(x) => send(*x, NdArray::full(self.shape(*x), g.item())),
            OpKind::SumAxis(x, _) => send(*x, expand_to(g, self.shape(*x))),
            OpKind::MeanAxis(x, axis) => {
                let inv = 1.0 / self.shape(*x)[*axis] as f64;
                send(*x, expand_to(&g.map(|v| v * inv), self.shape(*x)));
            }
            OpKind::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = NdArray::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), da.data_mut(), 0.0);
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = NdArray::zeros(&[k, n]);
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), db.data_mut(), 0.0);
                    send(*b, db);
                }
            }
            OpKind::Conv1d { signal, kernels, bias } => {
                let (vs, vk) = (self.value(*signal), self.value(*kernels));
                let (c_in, len) = (vs.shape()[0], vs.shape()[1]);
                let (c_out, k) = (vk.shape()[0], vk.shape()[2]);
                if self.nodes[kernels.0].requires_grad {
                    let cols = im2col(vs.data(), c_in, len, k);
                    let mut dk = NdArray::zeros(&[c_out, c_in, k]);
                    gemm(
                        c_out,
                        len,
                        c_in * k,
                        g.data(),
                        (len, 1),
                        &cols,
                        (1, len),
                        dk.data_mut(),
                        0.0,
                    );
                    send(*kernels, dk);
                }
                if self.nodes[bias.0].requires_grad {
                    let db = (0..c_out)
                        .map(|o| g.data()[o * len..(o + 1) * len].iter().sum())
                        .collect();
                    send(*bias, NdArray::new(self.shape(*bias).to_vec(), db).expect("bias shape"));
                }
                if self.nodes[signal.0].requires_grad {
                    let mut dcols = vec![0.0; c_in * k * len];
                    gemm(
                        c_in * k,
                        c_out,
                        len,
                        vk.data(),
                        (1, c_in * k),
                        g.data(),
                        (len, 1),
                        &mut dcols,
                        0.0,
                    );
                    send(*signal, col2im(&dcols, c_in, len, k));
                }
            }
            OpKind::Concat(parts, axis) => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let width = ps[*axis];
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + width * inner]);
                        }
                        send(p, NdArray::new(ps, data).expect("concat part shape"));
                    }
                    offset += width;
                }
            }
            OpKind::Broadcast(x) => send(*x, unbroadcast(g, self.shape(*x))),
        }
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like it when it did not reach the root.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> NdArray {
        self.get(v).cloned().unwrap_or_else(|| NdArray::zeros(graph.shape(v)))
    }

    /// Gradients of every named leaf.
    pub fn leaf_gradients(&self, graph: &Graph) -> BTreeMap<String, NdArray> {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = n.name.as_ref()?;
                n.requires_grad
                    .then(|| (name.clone(), self.get_or_zeros(graph, Var(i))))
            })
            .collect()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_same(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::new(a.shape().to_vec(), data).expect("same shape")
}

/// `f(g, other)` where `g` has the output shape and `other` broadcasts to it.
fn zip_broadcast(g: &NdArray, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    if g.shape() == other.shape() {
        return zip_same(g, other, f);
    }
    let so = broadcast_strides(other.shape(), g.shape());
    let sg = broadcast_strides(g.shape(), g.shape());
    let mut out = NdArray::zeros(g.shape());
    let (gd, od) = (g.data(), other.data());
    let dst = out.data_mut();
    for_each_broadcast(g.shape(), &sg, &so, |o, i, j| dst[o] = f(gd[i], od[j]));
    out
}

/// Repeats a keep-dim reduction result back to `shape`.
fn expand_to(g: &NdArray, shape: &[usize]) -> NdArray {
    let strides = broadcast_strides(g.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut out = NdArray::zeros(shape);
    let src = g.data();
    let dst = out.data_mut();
    for_each_broadcast(shape, &strides, &zero, |o, i, _| dst[o] = src[i]);
    out
}

fn reduce_axis(x: &NdArray, axis: usize, op: &'static str) -> Result<NdArray> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(AutogradError::Shape {
            op,
            detail: format!("axis {axis} out of range for {shape:?}"),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    let mut out = NdArray::zeros(&out_shape);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for l in 0..len {
            let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in dst[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *d += s;
            }
        }
    }
    Ok(out)
}

/// `c = a · b + beta · c` with explicit (row, col) strides for `a` and `b`;
/// `c` is contiguous row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: slice lengths cover every index reachable through the given
    // dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[c_in, len]` signal into `[c_in * k, len]` zero-padded patches.
fn im2col(signal: &[f64], c_in: usize, len: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = vec![0.0; c_in * k * len];
    for c in 0..c_in {
        let src = &signal[c * len..(c + 1) * len];
        for t in 0..k {
            let row = &mut cols[(c * k + t) * len..(c * k + t + 1) * len];
            // output j reads input j + t - pad
            let lo = pad.saturating_sub(t);
            let hi = (len + pad).saturating_sub(t).min(len);
            for j in lo..hi {
                row[j] = src[j + t - pad];
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c_in: usize, len: usize, k: usize) -> NdArray {
    let pad = k / 2;
    let mut out = NdArray::zeros(&[c_in, len]);
    let dst = out.data_mut();
    for c in 0..c_in {
        for t in 0..k {
            let row = &cols[(c * k + t) * len..(c * k + t + 1) * len];
            let lo = pad.saturating_sub(t);
            let hi = (len + pad).saturating_sub(t).min(len);
            for j in lo..hi {
                dst[c * len + j + t - pad] += row[j];
            }
        }
    }
    out
}
