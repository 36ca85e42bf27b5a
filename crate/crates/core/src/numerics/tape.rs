//! Reverse-mode differentiation over a linear tape. Forward builders append
//! nodes; `backward` walks the tape once in reverse and accumulates adjoints.
//! Node order is the only traversal order, so gradients are reproducible
//! bit-for-bit for a given build sequence.

use std::sync::Arc;

use super::element::Element;
use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeId(usize);

#[derive(Clone, Debug)]
enum Op<E: Element> {
    Leaf,
    MatMul { a: TapeId, b: TapeId },
    Add { a: TapeId, b: TapeId },
    Mul { a: TapeId, b: TapeId },
    ScaleConst { x: TapeId, c: E },
    MulScalar { x: TapeId, s: TapeId },
    AddScalar { x: TapeId, s: TapeId },
    AddRowBias { x: TapeId, b: TapeId },
    Gather { x: TapeId, src: Arc<Vec<usize>> },
    ConcatCols { parts: Vec<TapeId> },
    Reshape { x: TapeId },
    Softmax { x: TapeId, axis: usize },
    LayerNorm { x: TapeId, gamma: TapeId, beta: TapeId, eps: f64 },
    Gelu { x: TapeId },
    Sigmoid { x: TapeId },
    MeanAll { x: TapeId },
    BceWithLogits { logits: TapeId, target: Arc<Vec<E>> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TapeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Adjoint of a node from the most recent `backward` call. `None` when the
    /// node did not require gradients or no backward pass has run.
    pub fn grad(&self, id: TapeId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> TapeId {
        self.nodes.push(Node { value, requires_grad, op });
        TapeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TapeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> TapeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TapeId, c: f64) -> TapeId {
        let c = E::from_f64(c);
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * c);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::ScaleConst { x, c })
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: TapeId, s: TapeId) -> Result<TapeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scale has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] * sv);
        let rg = self.any_requires(&[x, s]);
        Ok(self.push(out, rg, Op::MulScalar { x, s }))
    }

    /// Adds the single value held in `s` to every element of `x`.
    pub fn add_scalar(&mut self, x: TapeId, s: TapeId) -> Result<TapeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("add_scalar", format!("shift has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| self.value(x).data()[i] + sv);
        let rg = self.any_requires(&[x, s]);
        Ok(self.push(out, rg, Op::AddScalar { x, s }))
    }

    /// Broadcast-adds a length-C vector across the rows of an (N, C) tensor.
    pub fn add_row_bias(&mut self, x: TapeId, b: TapeId) -> Result<TapeId> {
        let (_, c) = self.value(x).dims2()?;
        if self.value(b).numel() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!("x {:?}, bias {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bd = self.value(b).data().to_vec();
        let out = Tensor::from_fn(self.shape(x).to_vec(), |i| {
            self.value(x).data()[i] + bd[i % c]
        });
        let rg = self.any_requires(&[x, b]);
        Ok(self.push(out, rg, Op::AddRowBias { x, b }))
    }

    /// out.data[i] = x.data[src[i]]. Backward scatter-adds, so indices may
    /// repeat; every data-movement step (transpose, slicing, patch regrouping)
    /// reduces to one of these.
    pub fn gather(&mut self, x: TapeId, src: Vec<usize>, out_shape: Vec<usize>) -> Result<TapeId> {
        let n: usize = out_shape.iter().product();
        if n != src.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {:?}", src.len(), out_shape),
            ));
        }
        let limit = self.value(x).numel();
        if let Some(bad) = src.iter().find(|&&i| i >= limit) {
            return Err(Error::shape("gather", format!("index {bad} out of {limit}")));
        }
        let data = src.iter().map(|&i| self.value(x).data()[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::Gather { x, src: Arc::new(src) }))
    }

    pub fn transpose(&mut self, x: TapeId) -> Result<TapeId> {
        let (r, c) = self.value(x).dims2()?;
        let mut src = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                src.push(i * c + j);
            }
        }
        self.gather(x, src, vec![c, r])
    }

    pub fn slice_cols(&mut self, x: TapeId, start: usize, len: usize) -> Result<TapeId> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let mut src = Vec::with_capacity(r * len);
        for i in 0..r {
            for j in start..start + len {
                src.push(i * c + j);
            }
        }
        self.gather(x, src, vec![r, len])
    }

    pub fn concat_cols(&mut self, parts: &[TapeId]) -> Result<TapeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_requires(parts);
        Ok(self.push(out, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: TapeId, shape: Vec<usize>) -> Result<TapeId> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    pub fn softmax(&mut self, x: TapeId, axis: usize) -> Result<TapeId> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    pub fn layer_norm(&mut self, x: TapeId, gamma: TapeId, beta: TapeId, eps: f64) -> Result<TapeId> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: TapeId) -> TapeId {
        let out = ops::gelu(self.value(x));
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: TapeId) -> TapeId {
        let out = ops::sigmoid(self.value(x));
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Sigmoid { x })
    }

    /// Mean of all elements, emitted with shape [1, 1] so it can feed
    /// column-wise concatenation.
    pub fn mean_all(&mut self, x: TapeId) -> Result<TapeId> {
        if self.value(x).numel() == 0 {
            return Err(Error::shape("mean_all", "empty input"));
        }
        let m = ops::mean_all(self.value(x));
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(vec![1, 1], vec![m])?, rg, Op::MeanAll { x }))
    }

    pub fn bce_with_logits(&mut self, logits: TapeId, target: &Tensor<E>) -> Result<TapeId> {
        let loss = ops::bce_with_logits(self.value(logits), target)?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![loss])?,
            rg,
            Op::BceWithLogits { logits, target: Arc::new(target.data().to_vec()) },
        ))
    }

    /// x @ w + b in one call; the staple of every projection in the model.
    pub fn affine(&mut self, x: TapeId, w: TapeId, b: TapeId) -> Result<TapeId> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    fn accumulate(&mut self, id: TapeId, contrib: &[E]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi = *gi + c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse pass from a scalar node. Gradients from any earlier pass are
    /// discarded first.
    pub fn backward(&mut self, loss: TapeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Argument("backward from a node with no gradient path".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = self.value(a).dims2()?;
                    let (_, n) = self.value(b).dims2()?;
                    let bt = ops::transpose_raw(self.value(b).data(), k, n);
                    let da = ops::matmul_raw(&g, &bt, m, n, k);
                    self.accumulate(a, &da);
                    let at = ops::transpose_raw(self.value(a).data(), m, k);
                    let db = ops::matmul_raw(&at, &g, k, m, n);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Mul { a, b } => {
                    let da: Vec<E> =
                        g.iter().zip(self.value(b).data()).map(|(&gi, &bv)| gi * bv).collect();
                    self.accumulate(a, &da);
                    let db: Vec<E> =
                        g.iter().zip(self.value(a).data()).map(|(&gi, &av)| gi * av).collect();
                    self.accumulate(b, &db);
                }
                Op::ScaleConst { x, c } => {
                    let dx: Vec<E> = g.iter().map(|&gi| gi * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(s).data()[0];
                    let dx: Vec<E> = g.iter().map(|&gi| gi * sv).collect();
                    self.accumulate(x, &dx);
                    let ds: E =
                        g.iter().zip(self.value(x).data()).map(|(&gi, &xv)| gi * xv).sum();
                    self.accumulate(s, &[ds]);
                }
                Op::AddScalar { x, s } => {
                    self.accumulate(x, &g);
                    let ds: E = g.iter().copied().sum();
                    self.accumulate(s, &[ds]);
                }
                Op::AddRowBias { x, b } => {
                    self.accumulate(x, &g);
                    let c = self.value(b).numel();
                    let mut db = vec![E::zero(); c];
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % c] = db[idx % c] + gi;
                    }
                    self.accumulate(b, &db);
                }
                Op::Gather { x, src } => {
                    let mut dx = vec![E::zero(); self.value(x).numel()];
                    for (out_i, &src_i) in src.iter().enumerate() {
                        dx[src_i] = dx[src_i] + g[out_i];
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { parts } => {
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| self.value(p).shape()[1]).collect();
                    let total: usize = widths.iter().sum();
                    let rows = self.value(parts[0]).shape()[0];
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = vec![E::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::Reshape { x } => {
                    self.accumulate(x, &g);
                }
                Op::Softmax { x, axis } => {
                    let shape = self.shape(x).to_vec();
                    let outer: usize = shape[..axis].iter().product();
                    let d = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let s = self.nodes[i].value.data();
                    let mut dx = vec![E::zero(); s.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + ii;
                            let mut dot = E::zero();
                            for j in 0..d {
                                dot = dot + g[idx(j)] * s[idx(j)];
                            }
                            for j in 0..d {
                                dx[idx(j)] = s[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let c = *self.shape(x).last().unwrap();
                    let outer = self.value(x).numel() / c;
                    let eps_e = E::from_f64(eps);
                    let inv_c = E::from_f64(1.0 / c as f64);
                    let xv = self.value(x).data();
                    let gv = self.value(gamma).data();
                    let mut dx = vec![E::zero(); xv.len()];
                    let mut dgamma = vec![E::zero(); c];
                    let mut dbeta = vec![E::zero(); c];
                    for o in 0..outer {
                        let row = &xv[o * c..(o + 1) * c];
                        let mean = row.iter().copied().sum::<E>() * inv_c;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_c;
                        let rstd = (var + eps_e).sqrt().recip();
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let go = g[o * c + j];
                            dgamma[j] = dgamma[j] + go * xhat;
                            dbeta[j] = dbeta[j] + go;
                            let dxhat = go * gv[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = g[o * c + j] * gv[j];
                            dx[o * c + j] = rstd
                                * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Gelu { x } => {
                    let dx: Vec<E> = g
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gi, &xv)| gi * ops::gelu_grad_scalar(xv))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[i].value.data();
                    let dx: Vec<E> =
                        g.iter().zip(y).map(|(&gi, &yv)| gi * yv * (E::one() - yv)).collect();
                    self.accumulate(x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = self.value(x).numel();
                    let gi = g[0] * E::from_f64(1.0 / n as f64);
                    let dx = vec![gi; n];
                    self.accumulate(x, &dx);
                }
                Op::BceWithLogits { logits, target } => {
                    let n = self.value(logits).numel();
                    let scale = g[0] * E::from_f64(1.0 / n as f64);
                    let dx: Vec<E> = self
                        .value(logits)
                        .data()
                        .iter()
                        .zip(target.iter())
                        .map(|(&z, &y)| scale * (ops::sigmoid_scalar(z) - y))
                        .collect();
                    self.accumulate(logits, &dx);
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}
