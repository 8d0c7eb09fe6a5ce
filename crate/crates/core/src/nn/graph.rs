//! Dynamically recorded operation tape with reverse-mode gradients.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward rule. [`Graph::backward`] walks the tape once in reverse.
//! Nodes that do not depend on a parameter or a tracked input are never
//! visited by the backward pass.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeometry, LayerNormCache};
use crate::nn::param::{ParamId, ParamStore};
use crate::nn::tensor::{inner_size, outer_size, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    AvgPool3d(Var),
    AvgPool2d(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<F>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, F),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    RepeatBatch(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

pub struct Graph<'s, F: Scalar> {
    nodes: Vec<Node<F>>,
    store: Option<&'s ParamStore<F>>,
}

/// One costed node from [`Graph::flop_ledger`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopEntry {
    pub op: &'static str,
    /// Output extents of the node.
    pub shape: Vec<usize>,
    pub flops: u64,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<'s, F: Scalar> Graph<'s, F> {
    /// A graph with no parameter store; only [`Graph::input`] leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
        }
    }

    pub fn with_params(store: &'s ParamStore<F>) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A constant leaf; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Input, false, "constant")
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(value, Op::Input, true, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Config("graph was built without a parameter store".into()))?;
        let value = store.value(id).clone();
        self.push(value, Op::Param(id), true, "param")
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
    }

    /// Gradients of every parameter leaf, detached from the graph (one entry
    /// per leaf; a parameter used twice appears twice).
    pub fn param_gradients(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.param_leaves()
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), self.value(b), &geom)?;
        let t = self.tracked(&[x, w, b]);
        self.push(y, Op::Conv3d { x, w, b, geom }, t, "conv3d")
    }

    pub fn avg_pool3d_global(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool3d_global(self.value(x))?;
        let t = self.tracked(&[x]);
        self.push(y, Op::AvgPool3d(x), t, "avg_pool3d_global")
    }

    pub fn avg_pool2d_spatial(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2d_spatial(self.value(x))?;
        let t = self.tracked(&[x]);
        self.push(y, Op::AvgPool2d(x), t, "avg_pool2d_spatial")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let t = self.tracked(&[x, w, b]);
        self.push(y, Op::Linear { x, w, b }, t, "linear")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let t = self.tracked(&[x, gamma, beta]);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            t,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::gelu_scalar);
        let t = self.tracked(&[x]);
        self.push(y, Op::Gelu(x), t, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(F::zero()));
        let t = self.tracked(&[x]);
        self.push(y, Op::Relu(x), t, "relu")
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().expect("rank >= 1");
        let mut out = vec![F::zero(); xv.len()];
        kernels::softmax_rows(xv.data(), k, &mut out);
        let y = Tensor::new(xv.shape().to_vec(), out)?;
        let t = self.tracked(&[x]);
        self.push(y, Op::Softmax(x), t, "softmax")
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (y, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), heads)?;
        let t = self.tracked(&[q, k, v]);
        self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            t,
            "attention",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        let t = self.tracked(&[a, b]);
        self.push(y, Op::Add(a, b), t, "add")
    }

    /// `x + y` where `y` has leading extent 1 and is repeated over the batch.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if yv.shape()[0] != 1 || yv.shape()[1..] != xv.shape()[1..] {
            return Err(Error::shape(
                "add_broadcast",
                format!("cannot broadcast {:?} onto {:?}", yv.shape(), xv.shape()),
            ));
        }
        let n = yv.len();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(yv.data()) {
                *a += b;
            }
        }
        let t = self.tracked(&[x, y]);
        self.push(out, Op::AddBroadcast(x, y), t, "add_broadcast")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = F::from_f64(s);
        let y = self.value(x).map(|v| v * s);
        let t = self.tracked(&[x]);
        self.push(y, Op::Scale(x, s), t, "scale")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(
                parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?
                    .0,
            )
            .expect("valid var")
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer = outer_size(&first, axis);
        let inner = inner_size(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let span = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::new(shape, data)?;
        let t = self.tracked(parts);
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
            "concat",
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} invalid on axis {axis} of {xs:?}",
                    start + len
                ),
            ));
        }
        let outer = outer_size(&xs, axis);
        let inner = inner_size(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let y = Tensor::new(shape, data)?;
        let t = self.tracked(&[x]);
        self.push(y, Op::Narrow { x, axis, start }, t, "narrow")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(&[x]);
        self.push(y, Op::Reshape(x), t, "reshape")
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape()[0] != 1 || n == 0 {
            return Err(Error::shape(
                "repeat_batch",
                format!("expected leading extent 1, got {:?}", xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(xv.len() * n);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = n;
        let y = Tensor::new(shape, data)?;
        let t = self.tracked(&[x]);
        self.push(y, Op::RepeatBatch(x), t, "repeat_batch")
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs.len() < 2 {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} invalid for {xs:?}"),
            ));
        }
        let outer = outer_size(&xs, axis);
        let inner = inner_size(&xs, axis);
        let n = xs[axis];
        let inv = F::one() / F::from_f64(n as f64);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xs;
        shape.remove(axis);
        let y = Tensor::new(shape, data)?;
        let t = self.tracked(&[x]);
        self.push(y, Op::MeanAxis { x, axis }, t, "mean_axis")
    }

    /// Mean cross-entropy of `[b, k]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        let t = self.tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            t,
            "cross_entropy",
        )
    }

    /// Multiply-add cost of every conv, linear and attention node recorded
    /// so far, in tape order. Each multiply-add counts as two FLOPs.
    pub fn flop_ledger(&self) -> Vec<FlopEntry> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let entry = match &n.op {
                Op::Conv3d { w, .. } => {
                    // [b, c_out, t', h', w'] output, [c_out, c_in, kt, kh, kw] kernel
                    let per_output: usize = self.shape(*w)[1..].iter().product();
                    Some(("conv3d", 2 * n.value.len() * per_output))
                }
                Op::Linear { w, .. } => Some(("linear", 2 * n.value.len() * self.shape(*w)[1])),
                Op::Attention { q, k, .. } => {
                    let (qs, ks) = (self.shape(*q), self.shape(*k));
                    // QK^T and PV: 2 * b * heads * nq * nk * d_k each, heads * d_k = d
                    Some(("attention", 2 * 2 * qs[0] * qs[1] * ks[1] * qs[2]))
                }
                _ => None,
            };
            if let Some((op, flops)) = entry {
                out.push(FlopEntry {
                    op,
                    shape: n.value.shape().to_vec(),
                    flops: flops as u64,
                });
            }
        }
        out
    }

    /// Fingerprint of every ReLU's active set. Finite-difference probes that
    /// change it straddle a kink.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                for &v in self.nodes[x.0].value.data() {
                    (v > F::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_seeded(loss, Tensor::full(self.shape(loss), F::one()))
    }

    /// Reverse pass from `output` with an explicit upstream gradient, i.e. the
    /// gradient of `sum(output * seed)`.
    pub fn backward_seeded(&self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} does not match output {:?}",
                    seed.shape(),
                    self.shape(output)
                ),
            ));
        }
        let loss = output;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(dy);
                continue;
            }
            let mut acc = |v: Var, g: Tensor<F>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!("leaves handled above"),
                Op::Conv3d { x, w, b, geom } => {
                    let need_x = self.nodes[x.0].tracked;
                    let (dx, dw, db) = kernels::conv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        geom,
                        &dy,
                        need_x,
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::AvgPool3d(x) => {
                    acc(*x, kernels::avg_pool3d_global_backward(&dy, self.shape(*x)));
                }
                Op::AvgPool2d(x) => {
                    acc(
                        *x,
                        kernels::avg_pool2d_spatial_backward(&dy, self.shape(*x)),
                    );
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        &dy,
                    )?;
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(cache, self.value(*gamma), &dy);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut g = dy;
                    for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= kernels::gelu_grad_scalar(v);
                    }
                    acc(*x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut g = dy;
                    for (gv, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                        if v <= F::zero() {
                            *gv = F::zero();
                        }
                    }
                    acc(*x, g);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let k = *p.shape().last().expect("rank >= 1");
                    let mut out = vec![F::zero(); p.len()];
                    kernels::softmax_rows_backward(p.data(), dy.data(), k, &mut out);
                    acc(*x, Tensor::new(p.shape().to_vec(), out)?);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        probs,
                        &dy,
                    )?;
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy);
                }
                Op::AddBroadcast(x, y) => {
                    let ys = self.shape(*y).to_vec();
                    let n: usize = ys.iter().product();
                    let mut gy = vec![F::zero(); n];
                    for chunk in dy.data().chunks(n) {
                        for (a, &b) in gy.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    acc(*y, Tensor::new(ys, gy)?);
                    acc(*x, dy);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(*x, dy.map(|v| v * s));
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer = outer_size(shape, *axis);
                    let inner = inner_size(shape, *axis);
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let span = ps[*axis] * inner;
                        let mut g = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let base = o * total + offset;
                            g.extend_from_slice(&dy.data()[base..base + span]);
                        }
                        offset += span;
                        acc(p, Tensor::new(ps, g)?);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x).to_vec();
                    let outer = outer_size(&xs, *axis);
                    let inner = inner_size(&xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut g = vec![F::zero(); xs.iter().product()];
                    for o in 0..outer {
                        let dst = (o * xs[*axis] + start) * inner;
                        let src = o * len * inner;
                        g[dst..dst + len * inner]
                            .copy_from_slice(&dy.data()[src..src + len * inner]);
                    }
                    acc(*x, Tensor::new(xs, g)?);
                }
                Op::Reshape(x) => {
                    let xs = self.shape(*x).to_vec();
                    acc(*x, dy.reshape(&xs)?);
                }
                Op::RepeatBatch(x) => {
                    let xs = self.shape(*x).to_vec();
                    let n: usize = xs.iter().product();
                    let mut g = vec![F::zero(); n];
                    for chunk in dy.data().chunks(n) {
                        for (a, &b) in g.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    acc(*x, Tensor::new(xs, g)?);
                }
                Op::MeanAxis { x, axis } => {
                    let xs = self.shape(*x).to_vec();
                    let outer = outer_size(&xs, *axis);
                    let inner = inner_size(&xs, *axis);
                    let n = xs[*axis];
                    let inv = F::one() / F::from_f64(n as f64);
                    let mut g = Vec::with_capacity(xs.iter().product());
                    for o in 0..outer {
                        let row = &dy.data()[o * inner..(o + 1) * inner];
                        for _ in 0..n {
                            g.extend(row.iter().map(|&v| v * inv));
                        }
                    }
                    acc(*x, Tensor::new(xs, g)?);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let g = kernels::cross_entropy_backward(probs, labels, dy.data()[0]);
                    acc(*logits, Tensor::new(self.shape(*logits).to_vec(), g)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}
