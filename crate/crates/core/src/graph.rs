//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to it, computing forward values eagerly. [`Graph::backward`] replays the
//! tape in reverse and returns per-parameter [`Gradients`]; the store itself is
//! never mutated while a graph is alive, so several graphs (one per thread)
//! can share a store.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

/// Named trainable tensors with accumulated gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>) -> Result<ParamId> {
        if self.by_name(name).is_some() {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(R::ZERO);
        }
    }

    /// `grad += g` for every parameter that received a gradient.
    pub fn accumulate(&mut self, grads: &Gradients<R>) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<R>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidConfig("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy_values_from",
                    left: dst.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor<R>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// In-order sum with another set of gradients.
    pub fn merge(&mut self, other: Gradients<R>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: R) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

/// The kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op<R> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, R),
    Relu(NodeId),
    Sigmoid(NodeId),
    AddBias(NodeId, NodeId),
    MulChannels(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    MseMean(NodeId, NodeId),
    Conv2d(NodeId, NodeId, ConvGeometry),
    Upsample2x(NodeId),
    GatherRows(NodeId, Vec<usize>),
    BceWithLogits(NodeId, Tensor<R>),
    NormalizeColumns(NodeId, R),
}

enum Value<R> {
    Owned(Tensor<R>),
    Param(ParamId),
}

struct Node<R> {
    op: Op<R>,
    value: Value<R>,
    requires_grad: bool,
}

pub struct Graph<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    track: bool,
}

impl<'p, R: Real> Graph<'p, R> {
    /// A graph that differentiates with respect to `params`.
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            track: true,
        }
    }

    /// Evaluation mode: parameters behave as constants and no node ever
    /// requires a gradient.
    pub fn inference(params: &'p ParamStore<R>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<R>, value: Tensor<R>, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Result<NodeId> {
        self.push(Op::Constant, value, &[], "constant")
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Value::Param(id),
            requires_grad: self.track,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape already validated")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![R::ZERO; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        self.push(Op::Transpose(a), Tensor::new(&[n, m], out)?, &[a], "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), out, &[a], "reshape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let s = R::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out, &[a], "scale")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| if x > R::ZERO { x } else { R::ZERO });
        self.push(Op::Relu(a), out, &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(Op::Sigmoid(a), out, &[a], "sigmoid")
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::InvalidConfig(alloc::format!(
                "{kind:?} takes {arity} operands, got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Scale(s) => self.scale(operands[0], s),
        }
    }

    fn channel_dims(&self, op: &'static str, x: NodeId, b: NodeId) -> Result<usize> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(c)
    }

    /// Adds a length-`C` vector to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let c = self.channel_dims("add_bias", x, b)?;
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Op::AddBias(x, b), out, &[x, b], "add_bias")
    }

    /// Multiplies every trailing-axis row of `x` by a length-`C` vector.
    pub fn mul_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let c = self.channel_dims("mul_channels", x, s)?;
        let mut out = self.value(x).clone();
        let scale = self.value(s).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &sv) in row.iter_mut().zip(scale) {
                *o *= sv;
            }
        }
        self.push(Op::MulChannels(x, s), out, &[x, s], "mul_channels")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let out = kernels::softmax_rows(self.value(a).data(), n);
        self.push(Op::SoftmaxRows(a), Tensor::new(&[m, n], out)?, &[a], "softmax_rows")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a], "sum")
    }

    /// `(1/len) * sum((a - b)^2)`
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse_mean", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total: R = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let n = R::from_f64(ta.len() as f64);
        self.push(Op::MseMean(a, b), Tensor::scalar(total / n), &[a, b], "mse_mean")
    }

    /// "Same"-padded cross-correlation of an `(H, W, Cin)` map with a
    /// `(Kh, Kw, Cin, Cout)` kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (h, wd, cin) = self.value(x).dims3("conv2d")?;
        let wshape = self.shape(w);
        let [kh, kw, wcin, cout] = *wshape else {
            return Err(Error::RankError {
                op: "conv2d",
                expected: 4,
                got: wshape.len(),
            });
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape(x).to_vec(),
                right: wshape.to_vec(),
            });
        }
        if !matches!(stride, 1 | 2) || !matches!(kh, 1 | 3) || kh != kw {
            return Err(Error::InvalidConfig(alloc::format!(
                "conv2d supports 1x1/3x3 kernels with stride 1 or 2, got {kh}x{kw}/{stride}"
            )));
        }
        let geo = ConvGeometry::new(h, wd, cin, kh, kw, cout, stride);
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geo);
        let t = Tensor::new(&[geo.ho, geo.wo, cout], out)?;
        self.push(Op::Conv2d(x, w, geo), t, &[x, w], "conv2d")
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(x).dims3("upsample_nearest2x")?;
        let out = kernels::upsample2x(self.value(x).data(), h, w, c);
        self.push(Op::Upsample2x(x), Tensor::new(&[2 * h, 2 * w, c], out)?, &[x], "upsample_nearest2x")
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.value(table).dims2("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownTokenId(id as u16));
            }
            out.extend_from_slice(&self.value(table).data()[id * d..][..d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        self.push(Op::GatherRows(table, ids.to_vec()), t, &[table], "gather_rows")
    }

    /// Mean binary cross-entropy between logits and a constant 0/1 target.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor<R>) -> Result<NodeId> {
        if self.shape(logits) != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let x = self.value(logits);
        let total: R = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&xv, &yv)| kernels::bce_with_logits(xv, yv))
            .sum();
        let n = R::from_f64(x.len() as f64);
        self.push(
            Op::BceWithLogits(logits, target.clone()),
            Tensor::scalar(total / n),
            &[logits],
            "bce_with_logits",
        )
    }

    /// Scales every column of an `M x N` matrix to unit L2 norm
    /// (`x / sqrt(sum x^2 + eps)`).
    pub fn normalize_columns(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2("normalize_columns")?;
        let eps = R::from_f64(eps);
        let norms = column_norms(self.value(a).data(), m, n, eps);
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &nv) in row.iter_mut().zip(&norms) {
                *o = *o / nv;
            }
        }
        self.push(Op::NormalizeColumns(a, eps), out, &[a], "normalize_columns")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<R>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut out = Gradients::empty(self.params.len());
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(shape, R::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(&node.op, NodeId(idx), dy, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(&self, op: &Op<R>, id: NodeId, dy: Tensor<R>, grads: &mut [Option<Tensor<R>>], out: &mut Gradients<R>) -> Result<()> {
        let needs = |n: NodeId| self.nodes[n.0].requires_grad;
        let mut send = |n: NodeId, g: Tensor<R>| {
            if !self.nodes[n.0].requires_grad {
                return;
            }
            match &mut grads[n.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let like = |n: NodeId, data: Vec<R>| Tensor::new(self.shape(n), data).expect("gradient shape");

        match op {
            Op::Constant => {}
            Op::Param(p) => out.accumulate(*p, dy),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape()[1];
                if needs(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let mut da = vec![R::ZERO; m * k];
                    kernels::gemm_nn(dy.data(), &bt, &mut da, m, n, k);
                    send(*a, like(*a, da));
                }
                if needs(*b) {
                    let mut db = vec![R::ZERO; k * n];
                    kernels::gemm_tn(self.value(*a).data(), dy.data(), &mut db, m, k, n);
                    send(*b, like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2("transpose")?;
                send(*a, like(*a, kernels::transpose(dy.data(), n, m)));
            }
            Op::Reshape(a) => send(*a, like(*a, dy.into_data())),
            Op::Add(a, b) => {
                if needs(*b) {
                    send(*b, dy.clone());
                }
                send(*a, dy);
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    send(*b, dy.map(|v| -v));
                }
                send(*a, dy);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let g = zip(dy.data(), self.value(*b).data(), |d, y| d * y);
                    send(*a, like(*a, g));
                }
                if needs(*b) {
                    let g = zip(dy.data(), self.value(*a).data(), |d, x| d * x);
                    send(*b, like(*b, g));
                }
            }
            Op::Scale(a, s) => send(*a, dy.map(|v| v * *s)),
            Op::Relu(a) => {
                let g = zip(dy.data(), self.value(id).data(), |d, y| if y > R::ZERO { d } else { R::ZERO });
                send(*a, like(*a, g));
            }
            Op::Sigmoid(a) => {
                let g = zip(dy.data(), self.value(id).data(), |d, y| d * y * (R::ONE - y));
                send(*a, like(*a, g));
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    let c = self.shape(*b)[0];
                    let mut db = vec![R::ZERO; c];
                    for row in dy.data().chunks_exact(c) {
                        for (acc, &d) in db.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    send(*b, like(*b, db));
                }
                send(*x, dy);
            }
            Op::MulChannels(x, s) => {
                let c = self.shape(*s)[0];
                if needs(*s) {
                    let mut ds = vec![R::ZERO; c];
                    for (row, xrow) in dy.data().chunks_exact(c).zip(self.value(*x).data().chunks_exact(c)) {
                        for ((acc, &d), &xv) in ds.iter_mut().zip(row).zip(xrow) {
                            *acc += d * xv;
                        }
                    }
                    send(*s, like(*s, ds));
                }
                if needs(*x) {
                    let scale = self.value(*s).data();
                    let mut dx = dy.into_data();
                    for row in dx.chunks_exact_mut(c) {
                        for (d, &sv) in row.iter_mut().zip(scale) {
                            *d *= sv;
                        }
                    }
                    send(*x, like(*x, dx));
                }
            }
            Op::SoftmaxRows(a) => {
                let n = self.shape(*a)[1];
                let y = self.value(id).data();
                let mut dx = vec![R::ZERO; y.len()];
                for ((yr, dr), xr) in y.chunks_exact(n).zip(dy.data().chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    let dot: R = yr.iter().zip(dr).map(|(&yv, &dv)| yv * dv).sum();
                    for ((o, &yv), &dv) in xr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                send(*a, like(*a, dx));
            }
            Op::Sum(a) => {
                let d = dy.item();
                send(*a, Tensor::full(self.shape(*a), d));
            }
            Op::MseMean(a, b) => {
                let n = self.value(*a).len() as f64;
                let k = dy.item() * R::from_f64(2.0 / n);
                let ga = zip(self.value(*a).data(), self.value(*b).data(), |x, y| k * (x - y));
                if needs(*b) {
                    send(*b, like(*b, ga.iter().map(|&v| -v).collect()));
                }
                send(*a, like(*a, ga));
            }
            Op::Conv2d(x, w, geo) => {
                let (dx, dw) = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dy.data(), geo, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    send(*x, like(*x, dx));
                }
                if let Some(dw) = dw {
                    send(*w, like(*w, dw));
                }
            }
            Op::Upsample2x(x) => {
                let (h, w, c) = self.value(*x).dims3("upsample_nearest2x")?;
                send(*x, like(*x, kernels::upsample2x_backward(dy.data(), h, w, c)));
            }
            Op::GatherRows(table, ids) => {
                let d = self.shape(*table)[1];
                let mut dt = vec![R::ZERO; self.value(*table).len()];
                for (row, &id) in dy.data().chunks_exact(d).zip(ids) {
                    for (acc, &g) in dt[id * d..][..d].iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                send(*table, like(*table, dt));
            }
            Op::BceWithLogits(logits, target) => {
                let x = self.value(*logits);
                let k = dy.item() / R::from_f64(x.len() as f64);
                let g = zip(x.data(), target.data(), |xv, yv| k * (kernels::sigmoid(xv) - yv));
                send(*logits, like(*logits, g));
            }
            Op::NormalizeColumns(a, eps) => {
                let (m, n) = self.value(*a).dims2("normalize_columns")?;
                let norms = column_norms(self.value(*a).data(), m, n, *eps);
                let y = self.value(id).data();
                let mut dots = vec![R::ZERO; n];
                for (yr, dr) in y.chunks_exact(n).zip(dy.data().chunks_exact(n)) {
                    for ((acc, &yv), &dv) in dots.iter_mut().zip(yr).zip(dr) {
                        *acc += yv * dv;
                    }
                }
                let mut dx = vec![R::ZERO; m * n];
                for ((xr, yr), dr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(dy.data().chunks_exact(n)) {
                    for j in 0..n {
                        xr[j] = (dr[j] - yr[j] * dots[j]) / norms[j];
                    }
                }
                send(*a, like(*a, dx));
            }
        }
        Ok(())
    }
}

fn zip<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn column_norms<R: Real>(a: &[R], m: usize, n: usize, eps: R) -> Vec<R> {
    let mut sq = vec![eps; n];
    for row in a.chunks_exact(n).take(m) {
        for (acc, &v) in sq.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    sq.into_iter().map(R::sqrt).collect()
}
