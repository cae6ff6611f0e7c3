//! Graph building blocks: linear maps, attention, transformer layers.

use super::params::{Binder, ParamSet};
use crate::tensor::{Graph, Tensor, TensorError, Var};

type R<T> = Result<T, TensorError>;

/// Adds `<prefix>.w` (`[fan_in, fan_out]`) and a zero bias `<prefix>.b`.
pub(crate) fn add_linear(p: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, init: &mut impl FnMut(&[usize], usize, usize) -> Tensor) {
    p.insert(format!("{prefix}.w"), init(&[fan_in, fan_out], fan_in, fan_out));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn add_norm(p: &mut ParamSet, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.g"), Tensor::filled(&[d], 1.0));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub(crate) fn add_attention(p: &mut ParamSet, prefix: &str, d: usize, init: &mut impl FnMut(&[usize], usize, usize) -> Tensor) {
    for m in ["q", "k", "v", "o"] {
        add_linear(p, &format!("{prefix}.{m}"), d, d, init);
    }
}

pub(crate) fn add_ffn(p: &mut ParamSet, prefix: &str, d: usize, f: usize, init: &mut impl FnMut(&[usize], usize, usize) -> Tensor) {
    add_linear(p, &format!("{prefix}.ff1"), d, f, init);
    add_linear(p, &format!("{prefix}.ff2"), f, d, init);
}

pub(crate) fn add_encoder_layer(p: &mut ParamSet, prefix: &str, d: usize, f: usize, init: &mut impl FnMut(&[usize], usize, usize) -> Tensor) {
    add_norm(p, &format!("{prefix}.ln1"), d);
    add_attention(p, &format!("{prefix}.attn"), d, init);
    add_norm(p, &format!("{prefix}.ln2"), d);
    add_ffn(p, prefix, d, f, init);
}

pub(crate) fn add_decoder_layer(p: &mut ParamSet, prefix: &str, d: usize, f: usize, init: &mut impl FnMut(&[usize], usize, usize) -> Tensor) {
    add_norm(p, &format!("{prefix}.ln1"), d);
    add_attention(p, &format!("{prefix}.self"), d, init);
    add_norm(p, &format!("{prefix}.ln2"), d);
    add_attention(p, &format!("{prefix}.cross"), d, init);
    add_norm(p, &format!("{prefix}.ln3"), d);
    add_ffn(p, prefix, d, f, init);
}

/// Applies a linear map to the last axis of a tensor of any rank.
pub(crate) fn linear(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> R<Var> {
    let w = b.get(g, &format!("{prefix}.w"));
    let bias = b.get(g, &format!("{prefix}.b"));
    let shape = g.shape(x).to_vec();
    let din = *shape.last().expect("rank ≥ 1");
    let rows = shape.iter().product::<usize>() / din;
    let flat = g.reshape(x, &[rows, din])?;
    let y = g.matmul(flat, w)?;
    let y = g.add(y, bias)?;
    let mut out = shape;
    *out.last_mut().unwrap() = g.shape(w)[1];
    g.reshape(y, &out)
}

pub(crate) fn norm(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> R<Var> {
    let axis = g.shape(x).len() - 1;
    let y = g.layer_norm(x, axis)?;
    let gamma = b.get(g, &format!("{prefix}.g"));
    let beta = b.get(g, &format!("{prefix}.b"));
    let y = g.mul(y, gamma)?;
    g.add(y, beta)
}

/// Multi-head attention: `q_in [B,Nq,d]` attends over `kv_in [B,Nk,d]`.
pub(crate) fn attention(g: &mut Graph, b: &mut Binder, prefix: &str, heads: usize, q_in: Var, kv_in: Var) -> R<Var> {
    let (bsz, nq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let nk = g.shape(kv_in)[1];
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, n: usize| -> R<Var> {
        let x = g.reshape(x, &[bsz, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[bsz * heads, n, dh])
    };
    let q = linear(g, b, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, b, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, b, &format!("{prefix}.v"), kv_in)?;
    let (q, k, v) = (split(g, q, nq)?, split(g, k, nk)?, split(g, v, nk)?);
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.reshape(ctx, &[bsz, heads, nq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[bsz, nq, d])?;
    linear(g, b, &format!("{prefix}.o"), ctx)
}

fn ffn(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> R<Var> {
    let h = linear(g, b, &format!("{prefix}.ff1"), x)?;
    let h = g.relu(h)?;
    linear(g, b, &format!("{prefix}.ff2"), h)
}

/// Pre-norm encoder layer.
pub(crate) fn encoder_layer(g: &mut Graph, b: &mut Binder, prefix: &str, heads: usize, x: Var) -> R<Var> {
    let h = norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, b, &format!("{prefix}.attn"), heads, h, h)?;
    let x = g.add(x, a)?;
    let h = norm(g, b, &format!("{prefix}.ln2"), x)?;
    let f = ffn(g, b, prefix, h)?;
    g.add(x, f)
}

/// Pre-norm decoder layer with self-attention then cross-attention.
pub(crate) fn decoder_layer(g: &mut Graph, b: &mut Binder, prefix: &str, heads: usize, x: Var, memory: Var) -> R<Var> {
    let h = norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, b, &format!("{prefix}.self"), heads, h, h)?;
    let x = g.add(x, a)?;
    let h = norm(g, b, &format!("{prefix}.ln2"), x)?;
    let a = attention(g, b, &format!("{prefix}.cross"), heads, h, memory)?;
    let x = g.add(x, a)?;
    let h = norm(g, b, &format!("{prefix}.ln3"), x)?;
    let f = ffn(g, b, prefix, h)?;
    g.add(x, f)
}

/// Fixed sinusoidal position table `[n, d]`.
pub fn sinusoidal_table(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("consistent table")
}
