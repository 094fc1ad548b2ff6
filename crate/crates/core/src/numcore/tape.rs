//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly and records enough state to replay its
//! vector-Jacobian product. Row-wise ops treat a tensor of shape
//! `[.., n]` as a `[rows, n]` matrix.

use std::collections::BTreeMap;

use super::tensor::{gemm, ParamStore, Real, Strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` if it does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("recorded shape"))
    }
}

/// Parameters bound onto a tape as gradient-requiring leaves.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect per-parameter gradients into a store shaped like `params`.
    /// Parameters the loss does not depend on receive zeros.
    pub fn gradients<T: Real>(
        &self,
        params: &ParamStore<T>,
        grads: &Gradients<T>,
    ) -> Result<ParamStore<T>> {
        let mut out = params.zeros_like();
        for (name, slot) in out.iter_mut() {
            if let Some(g) = grads.wrt(self.get(name)?) {
                *slot = g;
            }
        }
        Ok(out)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Post-softmax attention probabilities `[heads, L, L]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let l = self.nodes[v.0].value.rows();
                Some(Tensor::new(vec![*heads, l, l], probs.clone()).expect("recorded shape"))
            }
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that takes a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn bind(&mut self, params: &ParamStore<T>) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Bind parameters as constants, for passes that need no gradients.
    pub fn bind_constants(&mut self, params: &ParamStore<T>) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// `y = x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (rows, inp, out) = (self.value(x).rows(), ws[0], ws[1]);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out {
                return Err(shape_err("linear bias", &ws, bv.shape()));
            }
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            Strides::rows(inp),
            self.value(w).data(),
            Strides::rows(out),
            T::one(),
            &mut y,
            Strides::rows(out),
        );
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| *x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Layer normalisation over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Parameter("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let rows = xv.rows();
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (*v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| g[i % d] * *h + b[i % d])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| gelu_parts(*v).0).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention over `[L, D]` inputs.
    ///
    /// `key_mask[j] == true` removes key `j` for every query.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let qs = self.value(q).shape().to_vec();
        if qs.len() != 2 || self.value(k).shape() != qs || self.value(v).shape() != qs {
            return Err(shape_err("attention", &qs, self.value(k).shape()));
        }
        let (l, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if key_mask.len() != l {
            return Err(Error::Dimension(format!(
                "attention mask length {} for sequence length {l}",
                key_mask.len()
            )));
        }
        if key_mask.iter().all(|m| *m) {
            return Err(Error::Numeric(
                "every key is masked; attention rows are undefined".into(),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm(
                l,
                dh,
                l,
                scale,
                &qd[h * dh..],
                Strides::rows(d),
                &kd[h * dh..],
                Strides::transposed(d),
                T::zero(),
                p,
                Strides::rows(l),
            );
            for row in p.chunks_mut(l) {
                let max = row
                    .iter()
                    .zip(key_mask)
                    .filter(|(_, m)| !**m)
                    .fold(T::neg_infinity(), |m, (s, _)| m.max(*s));
                let mut total = T::zero();
                for (s, m) in row.iter_mut().zip(key_mask) {
                    *s = if *m { T::zero() } else { (*s - max).exp() };
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / total;
                }
            }
            gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                Strides::rows(l),
                &vd[h * dh..],
                Strides::rows(d),
                T::zero(),
                &mut out[h * dh..],
                Strides::rows(d),
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let t = Tensor::new(qs, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Stack `[r_i, n]` tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != n {
                return Err(shape_err("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let t = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a `[rows, n]` view.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(Error::Index(format!(
                "row slice {start}..{end} of {} rows",
                xv.rows()
            )));
        }
        let n = xv.cols();
        let t = Tensor::new(vec![end - start, n], xv.data()[start * n..end * n].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// `out[i] = table[index[i]]` for a `[R, n]` table.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, n) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= r {
                return Err(Error::Index(format!("gather row {i} of {r}")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![index.len(), n], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut probs = vec![T::zero(); rows * c];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index(format!("target {t} out of range for {c} classes")));
            }
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let p = &mut probs[r * c..(r + 1) * c];
            let mut z = T::zero();
            for (o, v) in p.iter_mut().zip(row) {
                *o = (*v - max).exp();
                z += *o;
            }
            for o in p.iter_mut() {
                *o = *o / z;
            }
            loss += z.ln() + max - row[t];
        }
        loss = loss / T::lit(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / T::lit(xv.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, out) = (node.value.rows(), node.value.cols());
                let inp = self.value(*w).shape()[0];
                let wd = self.value(*w).data();
                let xd = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    gemm(
                        rows,
                        out,
                        inp,
                        T::one(),
                        g,
                        Strides::rows(out),
                        wd,
                        Strides::transposed(out),
                        T::one(),
                        gx,
                        Strides::rows(inp),
                    );
                }
                if let Some(gw) = self.accumulate(grads, *w) {
                    gemm(
                        inp,
                        rows,
                        out,
                        T::one(),
                        xd,
                        Strides::transposed(inp),
                        g,
                        Strides::rows(out),
                        T::one(),
                        gw,
                        Strides::rows(out),
                    );
                }
                if let Some(b) = b {
                    if let Some(gb) = self.accumulate(grads, *b) {
                        for row in g.chunks(out) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += *v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.accumulate(grads, *v) {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += *x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += *x * *y;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += *x * *y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += *x * *c;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gd = self.value(*gamma).data();
                if let Some(gg) = self.accumulate(grads, *gamma) {
                    for (i, (dy, h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += *dy * *h;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *beta) {
                    for (i, dy) in g.iter().enumerate() {
                        gb[i % d] += *dy;
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let dn = T::lit(d as f64);
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let (dy, h) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = dy[j] * gd[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let f = inv_std[r] / dn;
                        for (j, o) in gx[span].iter_mut().enumerate() {
                            let dh = dy[j] * gd[j];
                            *o += f * (dn * dh - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for ((o, dy), v) in gx.iter_mut().zip(g).zip(xd) {
                        *o += *dy * gelu_parts(*v).1;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, g, grads, (*q, *k, *v), *heads, probs),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.accumulate(grads, *p) {
                        for (o, x) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += *x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (o, v) in gx[start * n..].iter_mut().zip(g) {
                        *o += *v;
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let n = node.value.cols();
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in gt[i * n..(i + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n])
                        {
                            *o += *v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / T::lit(targets.len() as f64);
                if let Some(gl) = self.accumulate(grads, *logits) {
                    for (i, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if targets[i / c] == i % c {
                            T::one()
                        } else {
                            T::zero()
                        };
                        *o += scale * (*p - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.accumulate(grads, *x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    for o in gx.iter_mut() {
                        *o += s;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[T],
    ) {
        let (l, d) = (node.value.rows(), node.value.cols());
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut ds = vec![T::zero(); l * l];
        let mut gq = vec![T::zero(); l * d];
        let mut gk = vec![T::zero(); l * d];
        let mut gv = vec![T::zero(); l * d];
        for h in 0..heads {
            let p = &probs[h * l * l..(h + 1) * l * l];
            // dV_h = P^T dO_h
            gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                Strides::transposed(l),
                &g[h * dh..],
                Strides::rows(d),
                T::zero(),
                &mut gv[h * dh..],
                Strides::rows(d),
            );
            // dP = dO_h V_h^T
            gemm(
                l,
                dh,
                l,
                T::one(),
                &g[h * dh..],
                Strides::rows(d),
                &vd[h * dh..],
                Strides::transposed(d),
                T::zero(),
                &mut ds,
                Strides::rows(l),
            );
            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum::<T>();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = *pv * (*dv - dot);
                }
            }
            gemm(
                l,
                l,
                dh,
                scale,
                &ds,
                Strides::rows(l),
                &kd[h * dh..],
                Strides::rows(d),
                T::zero(),
                &mut gq[h * dh..],
                Strides::rows(d),
            );
            gemm(
                l,
                l,
                dh,
                scale,
                &ds,
                Strides::transposed(l),
                &qd[h * dh..],
                Strides::rows(d),
                T::zero(),
                &mut gk[h * dh..],
                Strides::rows(d),
            );
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.accumulate(grads, var) {
                for (o, x) in acc.iter_mut().zip(&local) {
                    *o += *x;
                }
            }
        }
    }
}
