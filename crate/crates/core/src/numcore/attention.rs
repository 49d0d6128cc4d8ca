//! Scaled dot-product attention in its feature-wise and intersample forms.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `softmax(q kᵀ / sqrt(d)) v` for `[batch, len, d]` inputs.
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, dropout: f64) -> Result<Var> {
    let d = *g.shape(q).last().expect("3-D query");
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let weights = g.dropout(weights, dropout)?;
    g.bmm(weights, v, false, false)
}

/// Multi-head attention without projections: the width of `q`, `k`, `v`
/// (`[b, len, d]`) is split into `heads` slices that attend independently
/// and are concatenated back in head order.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk[..2] != sv[..2] || sq[2] != sk[2] {
        return Err(Error::Shape(format!("attention of {sq:?}, {sk:?}, {sv:?}")));
    }
    let (d, dv) = (sq[2], sv[2]);
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model width {d}")));
    }
    let mut split = |t: Var, shape: &[usize]| -> Result<Var> {
        let (b, len, w) = (shape[0], shape[1], shape[2]);
        let t = g.reshape(t, &[b, len, heads, w / heads])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, len, w / heads])
    };
    let (qh, kh, vh) = (split(q, &sq)?, split(k, &sk)?, split(v, &sv)?);
    let y = scaled_dot_product(g, qh, kh, vh, 0.0)?;
    let y = g.reshape(y, &[sq[0], heads, sq[1], dv / heads])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[sq[0], sq[1], dv])
}

fn check_chunks(b: usize, chunk: usize) -> Result<()> {
    if chunk == 0 || b % chunk != 0 {
        return Err(Error::Shape(format!(
            "batch of b={b} rows is not divisible into chunks of N={chunk}"
        )));
    }
    Ok(())
}

/// Chunked intersample attention without projections.
///
/// Rows `[iN, (i+1)N)` of the `[b, n, d]` input are flattened to `(N, n·d)`
/// and attend to each other only; the result is reshaped back to `[b, n, d]`.
pub fn chunked_intersample_attention(g: &mut Graph, x: Var, chunk: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("intersample attention expects [b, n, d], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    check_chunks(b, chunk)?;
    let flat = g.reshape(x, &[b / chunk, chunk, n * d])?;
    let y = scaled_dot_product(g, flat, flat, flat, 0.0)?;
    g.reshape(y, &shape)
}

/// Attention weights used by [`chunked_intersample_attention`]: one `N×N`
/// matrix per chunk, shape `[b / N, N, N]`.
pub fn chunked_attention_weights(x: &Tensor, chunk: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::Shape(format!("intersample attention expects [b, n, d], got {:?}", x.shape())));
    }
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_chunks(b, chunk)?;
    let mut g = Graph::new();
    let flat = g.constant(x.reshaped(&[b / chunk, chunk, n * d])?);
    let scores = g.bmm(flat, flat, false, true)?;
    let scores = g.scale(scores, 1.0 / ((n * d) as f64).sqrt());
    let w = g.softmax(scores, 2)?;
    Ok(g.value(w).clone())
}

/// Projection weights of one multi-head attention block (`[d, d]` each,
/// plus an output bias).
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

struct Heads {
    q: Var,
    k: Var,
    v: Var,
}

/// Projects `[b, n, d]` into per-head `[b, n, H, dh]` tensors.
fn project(g: &mut Graph, x: Var, w: &AttentionVars, heads: usize) -> Result<(Heads, [usize; 3])> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention expects [b, n, d], got {shape:?}")));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model width {d}")));
    }
    let flat = g.reshape(x, &[b * n, d])?;
    let mut proj = |w: Var| -> Result<Var> {
        let y = g.matmul(flat, w)?;
        g.reshape(y, &[b, n, heads, d / heads])
    };
    let (q, k, v) = (proj(w.wq)?, proj(w.wk)?, proj(w.wv)?);
    Ok((Heads { q, k, v }, [b, n, d]))
}

fn output(g: &mut Graph, merged: Var, w: &AttentionVars, shape: [usize; 3]) -> Result<Var> {
    let [b, n, d] = shape;
    let flat = g.reshape(merged, &[b * n, d])?;
    let y = g.matmul(flat, w.wo)?;
    let y = g.add_bias(y, w.bo)?;
    g.reshape(y, &[b, n, d])
}

/// Multi-head self-attention across the `n` tokens of each row.
pub fn feature_attention(g: &mut Graph, x: Var, w: &AttentionVars, heads: usize, dropout: f64) -> Result<Var> {
    let (h, shape) = project(g, x, w, heads)?;
    let [b, n, d] = shape;
    let dh = d / heads;
    let mut split = |t: Var| -> Result<Var> {
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, n, dh])
    };
    let (q, k, v) = (split(h.q)?, split(h.k)?, split(h.v)?);
    let y = scaled_dot_product(g, q, k, v, dropout)?;
    let y = g.reshape(y, &[b, heads, n, dh])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    output(g, y, w, shape)
}

/// Multi-head chunked intersample attention: within each head, rows of the
/// same chunk of `chunk` rows attend to each other over their flattened
/// `n·dh` token representation.
pub fn intersample_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    chunk: usize,
    dropout: f64,
) -> Result<Var> {
    let (h, shape) = project(g, x, w, heads)?;
    let [b, n, d] = shape;
    check_chunks(b, chunk)?;
    let dh = d / heads;
    let mut split = |t: Var| -> Result<Var> {
        let t = g.permute(t, &[2, 0, 1, 3])?;
        g.reshape(t, &[heads * b / chunk, chunk, n * dh])
    };
    let (q, k, v) = (split(h.q)?, split(h.k)?, split(h.v)?);
    let y = scaled_dot_product(g, q, k, v, dropout)?;
    let y = g.reshape(y, &[heads, b, n, dh])?;
    let y = g.permute(y, &[1, 2, 0, 3])?;
    output(g, y, w, shape)
}
