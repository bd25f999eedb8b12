//! Reverse-mode gradient tape over a closed kernel set.
//!
//! Values are computed eagerly when an op is recorded. Layers with fused
//! kernels (attention, the selective scan, the losses) plug in through
//! [`CustomOp`], supplying their own backward rule.

use std::collections::BTreeMap;

use super::ops::{self, gemm};
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an op whose forward value was computed by the caller.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    /// Entries may be `None` for inputs that do not need one.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Silu(usize),
    Softplus(usize),
    Exp(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    Dot {
        x: usize,
        weights: Tensor<T>,
    },
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of registered parameters, keyed by parameter id. Every id
/// registered on the tape has an entry; untouched ones are exact zeros.
#[derive(Debug, Clone)]
pub struct Grads<T: Element = f32> {
    by_param: BTreeMap<usize, Tensor<T>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: usize) -> Option<Tensor<T>> {
        self.by_param.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `other` into `self`, e.g. to merge gradients from independent tapes.
    pub fn merge(&mut self, other: Grads<T>) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => accumulate(acc, &g),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }

    /// Global L2 norm across all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn accumulate<T: Element>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
}

/// Records a computation for one backward pass. Confined to one worker.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, usize)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf. `id` keys the gradient in [`Grads`].
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Param(id), true);
        self.params.push((id, v.0));
        v
    }

    fn finish(&mut self, name: &str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        Ok(self.push(value, op, rg))
    }

    /// `x [..., K] @ w [K, P]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w))?;
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(out, Op::MatMul(x.0, w.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// Adds a `[C]` bias to every row of `x [..., C]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.numel() != c {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} vs input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(bias.0);
        self.finish("add_row", value, Op::AddRow(x.0, bias.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.finish("mul", value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x.0);
        self.finish("scale", value, Op::Scale(x.0, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = ops::silu(self.value(x))?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Silu(x.0), rg))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = ops::softplus(self.value(x))?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Softplus(x.0), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = ops::exp(self.value(x))?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Exp(x.0), rg))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let value = ops::rmsnorm(xv, gv, eps)?;
        let d = xv.last_dim();
        let inv = xv
            .data()
            .chunks(d)
            .map(|r| T::one() / (ops::dot(r, r) / T::from_usize(d) + eps).sqrt())
            .collect();
        let rg = self.rg(x.0) || self.rg(gain.0);
        Ok(self.push(
            value,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv,
            },
            rg,
        ))
    }

    /// Row lookup: `table [V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Invalid(format!(
                    "token id {id} out of range for vocab {vocab}"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new([ids.len(), d], out)?;
        let rg = self.rg(table.0);
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `sum(x * weights)` for a constant `weights`.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err(
                "dot_const",
                format!("{:?} vs {:?}", xv.shape(), weights.shape()),
            ));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x.0);
        self.finish("dot_const", Tensor::scalar(s), Op::Dot { x: x.0, weights }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x.0);
        self.finish("sum", Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// Records a fused op whose forward `value` the caller computed.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let name = op.name();
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.finish(
            name,
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
            rg,
        )
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut by_param: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        for &(id, idx) in &self.params {
            by_param
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.nodes[idx].value.shape().to_vec()));
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g)?;
            for (j, gj) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => accumulate(acc, &gj),
                    slot @ None => *slot = Some(gj),
                }
            }
            if let Op::Param(id) = node.op {
                accumulate(by_param.get_mut(&id).expect("registered"), &g);
            }
        }
        for (name, g) in &by_param {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {name}")));
            }
        }
        Ok(Grads { by_param })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, wv.data(), true, &mut dx, false);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(k, m, n, xv.data(), true, g.data(), false, &mut dw, false);
                    out.push((*w, Tensor::new([k, n], dw)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(x, b) => {
                out.push((*x, g.clone()));
                if self.rg(*b) {
                    let c = g.last_dim();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*a, Tensor::new(av.shape().to_vec(), d)?));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*b, Tensor::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::Silu(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| {
                        let s = ops::sigmoid_scalar(xi);
                        gi * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| gi * ops::sigmoid_scalar(xi))
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Exp(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &yi)| gi * yi)
                    .collect();
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d)?));
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (val(*x), val(*gain));
                let d = xv.last_dim();
                let dn = T::from_usize(d);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dg = vec![T::zero(); d];
                for (r, ((xr, gr), dxr)) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let s = inv[r];
                    let mut proj = T::zero();
                    for c in 0..d {
                        proj = proj + gr[c] * gv.data()[c] * xr[c];
                        dg[c] = dg[c] + gr[c] * xr[c] * s;
                    }
                    let k = s * s * s * proj / dn;
                    for c in 0..d {
                        dxr[c] = s * gr[c] * gv.data()[c] - xr[c] * k;
                    }
                }
                if self.rg(*x) {
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.rg(*gain) {
                    out.push((*gain, Tensor::new(gv.shape().to_vec(), dg)?));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o = *o + v;
                    }
                }
                out.push((*table, Tensor::new(tv.shape().to_vec(), dt)?));
            }
            Op::Dot { x, weights } => {
                let s = g.item();
                out.push((*x, weights.map(|w| w * s)));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                out.push((*x, Tensor::full(xv.shape().to_vec(), g.item())));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&i| self.rg(i)).collect();
                let gs = op.backward(&ins, &node.value, g, &needs)?;
                if gs.len() != inputs.len() {
                    return Err(shape_err(
                        "custom backward",
                        format!("{} returned {} grads for {} inputs", op.name(), gs.len(), inputs.len()),
                    ));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(i).shape() {
                            return Err(shape_err(
                                "custom backward",
                                format!(
                                    "{} grad {:?} vs input {:?}",
                                    op.name(),
                                    gi.shape(),
                                    val(i).shape()
                                ),
                            ));
                        }
                        out.push((i, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}
