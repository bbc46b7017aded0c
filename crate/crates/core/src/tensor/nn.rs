//! Composite layers built from tape ops.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Projection weights of a single-head cross-attention block.
/// `q: [d, C]`, `k, v: [d, Dc]`, `out: [C, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub out: Var,
}

/// `softmax(Q Kᵀ / √d) V` projected back to the query width.
/// `x: [N, L, C]` queries, `ctx: [N, M, Dc]` condition tokens.
pub fn cross_attention<T: Real>(g: &mut Graph<T>, x: Var, ctx: Var, w: &AttentionVars) -> Result<Var> {
    let d = g.shape(w.q)[0];
    if d == 0 {
        return Err(Error::Shape("attention width must be positive".into()));
    }
    let q = g.linear(x, w.q, None)?;
    let k = g.linear(ctx, w.k, None)?;
    let v = g.linear(ctx, w.v, None)?;
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let attn = g.softmax(scores)?;
    let o = g.matmul(attn, v)?;
    g.linear(o, w.out, None)
}
