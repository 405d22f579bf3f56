//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards visits them in reverse
//! topological order. Parameters are bound from a [`ParamStore`] by name and
//! their gradients collected after [`Graph::backward`].

use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, LayerNormSaved, MapRoi};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Gelu,
        Activation::Tanh,
        Activation::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => kernels::gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => kernels::sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

/// Normalisation domain of a softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxDomain {
    /// Independently over each row of a matrix.
    Rows,
    /// Jointly over every entry of the tensor.
    All,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    ScaleShift(NodeId, T),
    Act(NodeId, Activation),
    Softmax {
        x: NodeId,
        row_len: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: LayerNormSaved<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRows(NodeId),
    Reshape(NodeId),
    BceSoft {
        logits: NodeId,
        targets: Vec<T>,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geo: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x {
        x: NodeId,
    },
    RoiAlign {
        feat: NodeId,
        rois: Vec<MapRoi<T>>,
        out_h: usize,
        out_w: usize,
        sampling: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, NodeId>,
    frozen: Vec<String>,
    rng: Option<ChaCha8Rng>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            frozen: Vec::new(),
            rng: None,
            backward_done: false,
        }
    }

    /// Training-mode graph with dropout masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    /// Parameters whose name starts with any of `prefixes` are bound without
    /// gradient tracking.
    pub fn with_frozen<S: AsRef<str>>(mut self, prefixes: &[S]) -> Self {
        self.frozen = prefixes.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// First element of a node, typically a scalar loss.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input, no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated binds return the same node so the
    /// gradient of a shared parameter accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let id = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Makes later `param(_, name)` calls return `id` instead of reading the
    /// store.
    pub fn bind_param(&mut self, name: &str, id: NodeId) {
        self.params.insert(name.to_string(), id);
    }

    /// Gradients of every bound trainable parameter, after `backward`.
    pub fn param_grads(&self) -> Vec<(&str, &[T])> {
        self.params
            .iter()
            .filter_map(|(name, &id)| self.grad(id).map(|g| (name.as_str(), g)))
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> NodeId {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: NodeId,
        v: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(v).numel() != n {
            return Err(Error::shape(name, self.shape(a), self.shape(v)));
        }
        let vv = self.value(v).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = f(data[i * n + j], vv[j]);
            }
        }
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, v]);
        Ok(self.push(t, op, rg))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.row_broadcast("add_row", a, bias, |x, b| x + b, Op::AddRow(a, bias))
    }

    /// Multiplies every row of an m×n matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_broadcast("mul_row", a, v, |x, b| x * b, Op::MulRow(a, v))
    }

    /// `scale·x + shift`.
    pub fn scale_shift(&mut self, a: NodeId, scale: T, shift: T) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::ScaleShift(a, scale), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        self.scale_shift(a, s, T::zero())
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kind.apply(x)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Act(a, kind), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    /// Softmax with optional validity mask (same length as the tensor).
    /// Masked entries behave as −∞ logits and receive exactly zero.
    pub fn softmax(
        &mut self,
        x: NodeId,
        domain: SoftmaxDomain,
        valid: Option<&[bool]>,
    ) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(mask) = valid {
            if mask.len() != v.numel() {
                return Err(Error::shape("softmax mask", v.shape(), &[mask.len()]));
            }
        }
        let row_len = match domain {
            SoftmaxDomain::All => v.numel(),
            SoftmaxDomain::Rows => v.dims2()?.1,
        };
        let mut out = Vec::with_capacity(v.numel());
        for (r, chunk) in v.data().chunks(row_len).enumerate() {
            let m = valid.map(|mk| &mk[r * row_len..(r + 1) * row_len]);
            let y = kernels::softmax_masked(chunk, m).ok_or_else(|| {
                Error::InvalidInput("softmax over an empty (fully masked) domain".into())
            })?;
            out.extend(y);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, row_len }, rg))
    }

    /// Row-wise layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (rows, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        check_layer_norm_args(d, eps)?;
        let (out, saved) = kernels::layer_norm(
            self.value(x).data(),
            rows,
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    /// Inverted dropout with a seeded mask; identity in evaluation mode.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0,1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let m = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of nothing".into()))?;
        let n = self.value(first).dims2()?.1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row lookup, `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::InvalidInput("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidInput(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Column sums of an m×n matrix, as a 1×n matrix.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::SumRows(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and soft targets.
    pub fn bce_soft_loss(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let v = self.value(logits);
        if targets.len() != v.numel() {
            return Err(Error::shape("bce_soft_loss", v.shape(), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|&&t| !(t >= T::zero() && t <= T::one())) {
            return Err(Error::InvalidInput(format!("soft target {t} outside [0,1]")));
        }
        let n = T::of(v.numel() as f64);
        let loss = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceSoft {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean categorical cross-entropy of row-wise softmax against labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, c) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[labels[i]];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        loss /= T::of(m as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// 2-D convolution of a C×H×W map with an O×C×k×k kernel and bias O.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (in_c, in_h, in_w) = self.value(x).dims3()?;
        let (out_c, wc, kh, kw) = match self.shape(w) {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            s => return Err(Error::shape("conv2d weight", self.shape(x), s)),
        };
        if wc != in_c || kh != kw || self.value(b).numel() != out_c || stride == 0 {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return Err(Error::shape("conv2d (kernel larger than input)", self.shape(x), self.shape(w)));
        }
        let geo = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geo,
        );
        let t = Tensor::from_parts(vec![out_c, geo.out_h(), geo.out_w()], out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geo, cols }, rg))
    }

    /// Nearest-neighbour 2× upsample of a C×H×W map, cropped to out_h×out_w.
    pub fn upsample2x(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h.div_ceil(2) != h || out_w.div_ceil(2) != w {
            return Err(Error::shape("upsample2x", self.shape(x), &[c, out_h, out_w]));
        }
        let out = kernels::upsample2x(self.value(x).data(), c, h, w, out_h, out_w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_h, out_w], out),
            Op::Upsample2x { x },
            rg,
        ))
    }

    /// RoIAlign of several regions (map coordinates) over one C×H×W map.
    /// Output is R×(C·out_h·out_w).
    pub fn roi_align(
        &mut self,
        feat: NodeId,
        rois: &[MapRoi<T>],
        out_h: usize,
        out_w: usize,
        sampling: usize,
    ) -> Result<NodeId> {
        let (c, h, w) = self.value(feat).dims3()?;
        if rois.is_empty() || out_h == 0 || out_w == 0 || sampling == 0 {
            return Err(Error::InvalidInput(
                "roi_align needs at least one region, a positive output size and sampling ratio"
                    .into(),
            ));
        }
        let per = c * out_h * out_w;
        let mut out = vec![T::zero(); rois.len() * per];
        for (r, roi) in rois.iter().enumerate() {
            kernels::roi_align_forward(
                self.value(feat).data(),
                c,
                h,
                w,
                roi,
                out_h,
                out_w,
                sampling,
                &mut out[r * per..(r + 1) * per],
            );
        }
        let rg = self.rg(&[feat]);
        Ok(self.push(
            Tensor::from_parts(vec![rois.len(), per], out),
            Op::RoiAlign {
                feat,
                rois: rois.to_vec(),
                out_h,
                out_w,
                sampling,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. May be called once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |id: NodeId| nodes[id.0].value.data();
        let mut upd = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if nodes[id.0].requires_grad {
                let slot = grads[id.0]
                    .get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                upd(*a, &mut |da| kernels::matmul_bt_acc(g, val(*b), da, m, n, k));
                upd(*b, &mut |db| kernels::matmul_at_acc(val(*a), g, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().0;
                upd(*a, &mut |da| kernels::matmul_acc(g, val(*b), da, m, n, k));
                upd(*b, &mut |db| kernels::matmul_at_acc(g, val(*a), db, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2().unwrap();
                upd(*a, &mut |da| add_into(da, &kernels::transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                upd(*a, &mut |da| add_into(da, g));
                upd(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                upd(*a, &mut |da| add_into(da, g));
                upd(*b, &mut |db| {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                upd(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * y;
                    }
                });
                upd(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, v) => {
                let n = nodes[v.0].value.numel();
                upd(*a, &mut |da| add_into(da, g));
                upd(*v, &mut |dv| {
                    for row in g.chunks(n) {
                        add_into(dv, row);
                    }
                });
            }
            Op::MulRow(a, v) => {
                let n = nodes[v.0].value.numel();
                let vv = val(*v);
                upd(*a, &mut |da| {
                    for (i, (d, &x)) in da.iter_mut().zip(g).enumerate() {
                        *d += x * vv[i % n];
                    }
                });
                upd(*v, &mut |dv| {
                    for (i, (&x, &av)) in g.iter().zip(val(*a)).enumerate() {
                        dv[i % n] += x * av;
                    }
                });
            }
            Op::ScaleShift(a, s) => {
                upd(*a, &mut |da| {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += *s * x;
                    }
                });
            }
            Op::Act(a, kind) => {
                let y = node.value.data();
                upd(*a, &mut |da| {
                    for ((d, &x), (&gi, &yi)) in da.iter_mut().zip(val(*a)).zip(g.iter().zip(y)) {
                        *d += gi * kind.derivative(x, yi);
                    }
                });
            }
            Op::Softmax { x, row_len } => {
                let y = node.value.data();
                upd(*x, &mut |dx| {
                    for ((yc, gc), dc) in y
                        .chunks(*row_len)
                        .zip(g.chunks(*row_len))
                        .zip(dx.chunks_mut(*row_len))
                    {
                        kernels::softmax_backward(yc, gc, dc);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (rows, d) = nodes[x.0].value.dims2().unwrap();
                let gm = val(*gamma);
                upd(*x, &mut |dx| {
                    kernels::layer_norm_backward(g, saved, gm, rows, d, Some(dx), None, None)
                });
                upd(*gamma, &mut |dg| {
                    kernels::layer_norm_backward(g, saved, gm, rows, d, None, Some(dg), None)
                });
                upd(*beta, &mut |db| {
                    kernels::layer_norm_backward(g, saved, gm, rows, d, None, None, Some(db))
                });
            }
            Op::Dropout { x, mask } => {
                upd(*x, &mut |dx| {
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                let len = node.value.dims2().unwrap().1;
                upd(*x, &mut |dx| {
                    for r in 0..m {
                        add_into(
                            &mut dx[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.dims2().unwrap().1;
                    upd(p, &mut |dp| {
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    upd(p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.dims2().unwrap().1;
                upd(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SumAll(x) => {
                upd(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll(x) => {
                upd(*x, &mut |dx| {
                    let s = g[0] / T::of(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::SumRows(x) => {
                upd(*x, &mut |dx| {
                    for row in dx.chunks_mut(g.len()) {
                        add_into(row, g);
                    }
                });
            }
            Op::Reshape(x) => upd(*x, &mut |dx| add_into(dx, g)),
            Op::BceSoft { logits, targets } => {
                let n = T::of(targets.len() as f64);
                upd(*logits, &mut |dx| {
                    for ((d, &x), &t) in dx.iter_mut().zip(val(*logits)).zip(targets) {
                        *d += g[0] * (kernels::sigmoid(x) - t) / n;
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let s = g[0] / T::of(labels.len() as f64);
                upd(*logits, &mut |dx| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == l { T::one() } else { T::zero() };
                            dx[i * c + j] += s * (probs[i * c + j] - ind);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let hw = geo.out_h() * geo.out_w();
                let kk = geo.in_c * geo.kernel * geo.kernel;
                upd(*b, &mut |db| {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                    }
                });
                upd(*w, &mut |dw| kernels::matmul_bt_acc(g, cols, dw, geo.out_c, hw, kk));
                upd(*x, &mut |dx| {
                    let mut dcols = vec![T::zero(); kk * hw];
                    kernels::matmul_at_acc(val(*w), g, &mut dcols, geo.out_c, kk, hw);
                    kernels::col2im_acc(&dcols, geo, dx);
                });
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = nodes[x.0].value.dims3().unwrap();
                let (_, oh, ow) = node.value.dims3().unwrap();
                upd(*x, &mut |dx| kernels::upsample2x_backward(g, c, h, w, oh, ow, dx));
            }
            Op::RoiAlign {
                feat,
                rois,
                out_h,
                out_w,
                sampling,
            } => {
                let (c, h, w) = nodes[feat.0].value.dims3().unwrap();
                let per = c * out_h * out_w;
                upd(*feat, &mut |df| {
                    for (r, roi) in rois.iter().enumerate() {
                        kernels::roi_align_backward(
                            &g[r * per..(r + 1) * per],
                            c,
                            h,
                            w,
                            roi,
                            *out_h,
                            *out_w,
                            *sampling,
                            df,
                        );
                    }
                });
            }
        }
    }
}

pub(crate) fn check_layer_norm_args<T: Real>(d: usize, eps: T) -> Result<()> {
    if eps < T::zero() || !eps.is_finite() {
        return Err(Error::Config(format!("layer_norm eps must be ≥ 0, got {eps}")));
    }
    if d == 1 && eps == T::zero() {
        return Err(Error::InvalidInput(
            "layer_norm over a single feature with eps 0 has zero variance".into(),
        ));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
