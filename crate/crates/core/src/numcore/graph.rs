//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that (transitively) depends on a trainable leaf. A graph
//! is built for one forward pass and then dropped.

use rand::Rng;

use super::tensor::{gemm, strides, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Embedding { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    AffineNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<f64>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    training: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An evaluation-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), training: false, dropout_seed: 0, dropout_calls: 0 }
    }

    /// A training-mode graph; dropout masks derive from `dropout_seed` and a
    /// per-call counter.
    pub fn training(dropout_seed: u64) -> Self {
        Self { training: true, dropout_seed, ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        // leaves may hold anything; an op must not create non-finite values from finite inputs
        debug_assert!(
            value.all_finite() || parents(&op).is_empty() || !self.parents_finite(&op),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn parents_finite(&self, op: &Op) -> bool {
        parents(op).iter().all(|p| self.nodes[p.0].value.all_finite())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
        Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Batched product of 3-D tensors, `[B, m, k] x [B, k, n] -> [B, m, n]`.
    /// `ta`/`tb` treat the corresponding operand's last two axes as transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Self::shape_err("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Self::shape_err("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], out), Op::BatchMatMul { a, b, ta, tb }, ng))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a bias vector along the trailing axis: `x[..., j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d || tb.ndim() != 1 {
            return Err(Self::shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx.data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c)).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::Shape(format!("softmax axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = lanes(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permuted(axes)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, ng))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, full, inner) = lanes(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = lanes(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Rows of a `[vocab, d]` table: output `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 || indices.is_empty() {
            return Err(Error::Shape(format!("embedding table {:?}", t.shape())));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(Error::Shape(format!("embedding index {i} outside vocabulary {vocab}")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], data),
            Op::Embedding { table, indices: indices.to_vec() },
            ng,
        ))
    }

    /// Normalises over the trailing axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Self::shape_err("layer_norm", t.shape(), self.value(gamma).shape()));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.chunks(d).flat_map(|row| row.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| v * g + b)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Batch normalisation of a `[batch, features]` input.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running estimates; in evaluation mode the given
    /// running statistics are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::Shape(format!("batch_norm expects [batch, features], got {:?}", t.shape())));
        }
        let (n, f) = (t.shape()[0], t.shape()[1]);
        if self.value(gamma).numel() != f
            || self.value(beta).numel() != f
            || running_mean.len() != f
            || running_var.len() != f
        {
            return Err(Self::shape_err("batch_norm", t.shape(), self.value(gamma).shape()));
        }
        let ng = self.ng(&[x, gamma, beta]);
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        if !self.training {
            let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let data = t
                .data()
                .chunks(f)
                .flat_map(|row| (0..f).map(|j| (row[j] - running_mean[j]) * rstd[j] * g[j] + b[j]).collect::<Vec<_>>())
                .collect();
            let out = Tensor::from_parts(t.shape().to_vec(), data);
            let op = Op::AffineNorm { x, gamma, beta, mean: running_mean.to_vec(), rstd };
            return Ok((self.push(out, op, ng), None));
        }
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in t.data().chunks(f) {
            for j in 0..f {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in t.data().chunks(f) {
            for j in 0..f {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(t.numel());
        for row in t.data().chunks(f) {
            for j in 0..f {
                xhat.push((row[j] - mean[j]) * rstd[j]);
            }
        }
        let data = xhat.chunks(f).flat_map(|row| (0..f).map(|j| row[j] * g[j] + b[j]).collect::<Vec<_>>()).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd }, ng);
        Ok((v, Some(BatchStats { mean, var })))
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        let mut rng = seed::rng(seed::derive_indexed(self.dropout_seed, "dropout", call));
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Mean over samples of `weight_i * H(q_i, softmax(logits_i))` where the
    /// target `q_i` puts `1 - smoothing + smoothing / C` on the label and
    /// `smoothing / C` elsewhere. `class_weights` (if given) sets `weight_i`
    /// from the sample's label.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f64]>,
        smoothing: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} with {} labels",
                t.shape(),
                labels.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::Shape(format!("{} class weights for {c} classes", w.len())));
            }
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut targets = Vec::with_capacity(n * c);
        let mut weights = Vec::with_capacity(n);
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(c).enumerate() {
            let y = labels[i];
            if y >= c {
                return Err(Error::Shape(format!("label {y} for {c} classes")));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            let w = class_weights.map_or(1.0, |w| w[y]);
            weights.push(w);
            let mut h = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let q = smoothing / c as f64 + if j == y { 1.0 - smoothing } else { 0.0 };
                targets.push(q);
                probs.push((z - lse).exp());
                if q > 0.0 {
                    h -= q * (z - lse);
                }
            }
            loss += w * h;
        }
        let out = Tensor::scalar(loss / n as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, targets, weights, probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}; use backward_with",
                self.shape(output)
            )));
        }
        let seed = Tensor::ones(self.shape(output));
        self.backward_with(output, seed)
    }

    /// Back-propagates an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, upstream: Tensor) -> Result<()> {
        if upstream.shape() != self.shape(output) {
            return Err(Self::shape_err("backward_with", upstream.shape(), self.shape(output)));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Tensor) -> Tensor) {
        if self.nodes[v.0].needs_grad {
            let g = f(&self.nodes[v.0].value);
            self.accumulate(v, g);
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let gd = g.data();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(gd, self.value(b).data(), &mut da, m, n, k, false, true);
                    self.accumulate(a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(self.value(a).data(), gd, &mut db, k, m, n, true, false);
                    self.accumulate(b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let batch = sa[0];
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(b).data();
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut da[t * m * k..(t + 1) * m * k];
                        match (ta, tb) {
                            (false, false) => gemm(gs, bs, out, m, n, k, false, true),
                            (false, true) => gemm(gs, bs, out, m, n, k, false, false),
                            (true, false) => gemm(bs, gs, out, k, n, m, false, true),
                            (true, true) => gemm(bs, gs, out, k, n, m, true, true),
                        }
                    }
                    self.accumulate(a, Tensor::from_parts(sa.clone(), da));
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(a).data();
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        match (ta, tb) {
                            (false, false) => gemm(as_, gs, out, k, m, n, true, false),
                            (true, false) => gemm(as_, gs, out, k, m, n, false, false),
                            (false, true) => gemm(gs, as_, out, n, m, k, true, false),
                            (true, true) => gemm(gs, as_, out, n, m, k, true, true),
                        }
                    }
                    self.accumulate(b, Tensor::from_parts(sb, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.value(b).clone();
                let av = self.value(a).clone();
                self.accumulate(a, Tensor::from_parts(g.shape().to_vec(), gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect()));
                self.accumulate(b, Tensor::from_parts(g.shape().to_vec(), gd.iter().zip(av.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, g.map(|v| v * c));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, g.clone());
                let d = g.last_dim();
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(*bias, Tensor::from_parts(vec![d], db));
            }
            Op::Relu(x) => {
                self.accumulate_with(*x, |xv| {
                    Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(gd).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect())
                });
            }
            Op::Gelu(x) => {
                self.accumulate_with(*x, |xv| {
                    Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(gd).map(|(v, g)| gelu(*v).1 * g).collect())
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), y.iter().zip(gd).map(|(s, g)| s * (1.0 - s) * g).collect()));
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = lanes(g.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * len * inner + c;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            dx[at] = y[at] * (gd[at] - dot);
                        }
                    }
                }
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(*x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = g.permuted(&inverse).expect("valid inverse permutation");
                self.accumulate(*x, back);
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, full, inner) = lanes(&shape, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*x, Tensor::from_parts(shape, dx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = lanes(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let len = shape[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(*p, Tensor::from_parts(shape, dp));
                    }
                    offset += len;
                }
            }
            Op::Embedding { table, indices } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (r, &idx) in indices.iter().enumerate() {
                    for (o, v) in dt[idx * d..(idx + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(*table, Tensor::from_parts(shape, dt));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                for (r, (grow, xrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                        let dxh = grow[j] * gam[j];
                        s1 += dxh;
                        s2 += dxh * xrow[j];
                    }
                    let rs = rstd[r];
                    for j in 0..d {
                        let dxh = grow[j] * gam[j];
                        dx[r * d + j] = rs / d as f64 * (d as f64 * dxh - s1 - xrow[j] * s2);
                    }
                }
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                self.accumulate(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma));
                self.accumulate(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta));
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let f = g.last_dim();
                let n = gd.len() / f;
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (grow, xrow) in gd.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for r in 0..n {
                    for j in 0..f {
                        let at = r * f + j;
                        dx[at] = gam[j] * rstd[j] / n as f64
                            * (n as f64 * gd[at] - dbeta[j] - xhat[at] * dgamma[j]);
                    }
                }
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                self.accumulate(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma));
                self.accumulate(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta));
            }
            Op::AffineNorm { x, gamma, beta, mean, rstd } => {
                let f = g.last_dim();
                let gam = self.value(*gamma).data().to_vec();
                let xv = self.value(*x).data().to_vec();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; gd.len()];
                for (at, gv) in gd.iter().enumerate() {
                    let j = at % f;
                    dgamma[j] += gv * (xv[at] - mean[j]) * rstd[j];
                    dbeta[j] += gv;
                    dx[at] = gv * gam[j] * rstd[j];
                }
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                self.accumulate(*gamma, Tensor::from_parts(self.shape(*gamma).to_vec(), dgamma));
                self.accumulate(*beta, Tensor::from_parts(self.shape(*beta).to_vec(), dbeta));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, Tensor::from_parts(g.shape().to_vec(), gd.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let upstream = gd[0];
                let shape = self.shape(*logits).to_vec();
                let (n, c) = (shape[0], shape[1]);
                let mut dl = vec![0.0; n * c];
                for r in 0..n {
                    let w = weights[r] * upstream / n as f64;
                    for j in 0..c {
                        dl[r * c + j] = w * (probs[r * c + j] - targets[r * c + j]);
                    }
                }
                self.accumulate(*logits, Tensor::from_parts(shape, dl));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(*x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n: usize = shape.iter().product();
                self.accumulate(*x, Tensor::full(&shape, gd[0] / n as f64));
            }
        }
        self.nodes[i].op = op;
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
        Op::BatchMatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _) | Op::Relu(a) | Op::Gelu(a) | Op::Sigmoid(a) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
        Op::Softmax { x, .. } | Op::Permute { x, .. } | Op::Slice { x, .. } | Op::Dropout { x, .. } => vec![*x],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Embedding { table, .. } => vec![*table],
        Op::LayerNorm { x, gamma, beta, .. }
        | Op::BatchNorm { x, gamma, beta, .. }
        | Op::AffineNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// `(outer, len, inner)` extents around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let st = strides(shape);
    let inner = st[axis];
    let outer = shape[..axis].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
