//! Cross-modal fusion: text-queries-image multi-head attention producing the
//! unified embedding x, and the learnable semantic alignment score s.
//!
//! Block layout: per head Q = H_t Wq, K = H_i Wk, V = H_i Wv; softmax over
//! patches; heads concatenated and projected; residual add to H_t followed by
//! layer norm; FFN with residual and a second layer norm; masked mean pool.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, P};

pub struct FusionParams {
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
    blocks: Vec<FusionBlock>,
}

struct FusionBlock {
    wq: Vec<P>,
    wk: Vec<P>,
    wv: Vec<P>,
    wo: P,
    bo: P,
    ln1_g: P,
    ln1_b: P,
    w1: P,
    b1: P,
    w2: P,
    b2: P,
    ln2_g: P,
    ln2_b: P,
}

impl FusionParams {
    pub fn new(b: &mut ParamBuilder, prefix: &str, d: usize, heads: usize, depth: usize) -> Result<Self> {
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "fusion width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let mut blocks = Vec::with_capacity(depth);
        for l in 0..depth {
            let p = format!("{prefix}.b{l}");
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..heads {
                wq.push(b.dense(&format!("{p}.wq{h}"), d, dh));
                wk.push(b.dense(&format!("{p}.wk{h}"), d, dh));
                wv.push(b.dense(&format!("{p}.wv{h}"), d, dh));
            }
            blocks.push(FusionBlock {
                wq,
                wk,
                wv,
                wo: b.dense(&format!("{p}.wo"), d, d),
                bo: b.zeros(&format!("{p}.bo"), 1, d),
                ln1_g: b.ones(&format!("{p}.ln1_g"), 1, d),
                ln1_b: b.zeros(&format!("{p}.ln1_b"), 1, d),
                w1: b.dense(&format!("{p}.ffn_w1"), d, 4 * d),
                b1: b.zeros(&format!("{p}.ffn_b1"), 1, 4 * d),
                w2: b.dense(&format!("{p}.ffn_w2"), 4 * d, d),
                b2: b.zeros(&format!("{p}.ffn_b2"), 1, d),
                ln2_g: b.ones(&format!("{p}.ln2_g"), 1, d),
                ln2_b: b.zeros(&format!("{p}.ln2_b"), 1, d),
            });
        }
        Ok(FusionParams {
            d,
            heads,
            depth,
            blocks,
        })
    }
}

/// Fused embedding x (1 x d) from token matrix H_t (queries) and patch matrix
/// H_i (keys/values); mean pooling skips masked token rows.
pub fn cross_modal_attention(
    g: &mut Graph,
    leaves: &[NodeId],
    params: &FusionParams,
    h_t: NodeId,
    h_i: NodeId,
    mask: &[bool],
) -> NodeId {
    let dh = params.d / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = h_t;
    for blk in &params.blocks {
        let mut heads = Vec::with_capacity(params.heads);
        for h in 0..params.heads {
            let q = g.matmul(x, leaves[blk.wq[h].0]);
            let k = g.matmul(h_i, leaves[blk.wk[h].0]);
            let v = g.matmul(h_i, leaves[blk.wv[h].0]);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            heads.push(g.matmul(a, v));
        }
        let cat = g.concat_cols(&heads);
        let o = g.matmul(cat, leaves[blk.wo.0]);
        let o = g.add_row(o, leaves[blk.bo.0]);
        let y = g.add(x, o);
        let y = g.layer_norm(y, leaves[blk.ln1_g.0], leaves[blk.ln1_b.0]);
        let f = g.matmul(y, leaves[blk.w1.0]);
        let f = g.add_row(f, leaves[blk.b1.0]);
        let f = g.gelu(f);
        let f = g.matmul(f, leaves[blk.w2.0]);
        let f = g.add_row(f, leaves[blk.b2.0]);
        let z = g.add(y, f);
        x = g.layer_norm(z, leaves[blk.ln2_g.0], leaves[blk.ln2_b.0]);
    }
    g.masked_mean_rows(x, mask)
}

pub struct SasParams {
    pub d_s: usize,
    t_w1: P,
    t_b1: P,
    t_w2: P,
    t_b2: P,
    i_w1: P,
    i_b1: P,
    i_w2: P,
    i_b2: P,
    ln_t_g: P,
    ln_t_b: P,
    ln_i_g: P,
    ln_i_b: P,
    h_w1: P,
    h_b1: P,
    h_w2: P,
    h_b2: P,
}

impl SasParams {
    pub fn new(b: &mut ParamBuilder, prefix: &str, d: usize, d_s: usize) -> Self {
        SasParams {
            d_s,
            t_w1: b.dense(&format!("{prefix}.text_w1"), d, d_s),
            t_b1: b.zeros(&format!("{prefix}.text_b1"), 1, d_s),
            t_w2: b.dense(&format!("{prefix}.text_w2"), d_s, d_s),
            t_b2: b.zeros(&format!("{prefix}.text_b2"), 1, d_s),
            i_w1: b.dense(&format!("{prefix}.image_w1"), d, d_s),
            i_b1: b.zeros(&format!("{prefix}.image_b1"), 1, d_s),
            i_w2: b.dense(&format!("{prefix}.image_w2"), d_s, d_s),
            i_b2: b.zeros(&format!("{prefix}.image_b2"), 1, d_s),
            ln_t_g: b.ones(&format!("{prefix}.ln_text_g"), 1, d_s),
            ln_t_b: b.zeros(&format!("{prefix}.ln_text_b"), 1, d_s),
            ln_i_g: b.ones(&format!("{prefix}.ln_image_g"), 1, d_s),
            ln_i_b: b.zeros(&format!("{prefix}.ln_image_b"), 1, d_s),
            h_w1: b.dense(&format!("{prefix}.head_w1"), 2 * d_s, d_s),
            h_b1: b.zeros(&format!("{prefix}.head_b1"), 1, d_s),
            h_w2: b.dense(&format!("{prefix}.head_w2"), d_s, 1),
            h_b2: b.zeros(&format!("{prefix}.head_b2"), 1, 1),
        }
    }
}

/// Scalar alignment score s in [-1, 1]: two GELU branch MLPs into the shared
/// space, per-branch layer norm, concat, head MLP, tanh.
pub fn semantic_alignment_score(
    g: &mut Graph,
    leaves: &[NodeId],
    p: &SasParams,
    h_t: NodeId,
    h_i: NodeId,
) -> NodeId {
    let branch = |g: &mut Graph, x: NodeId, w1: P, b1: P, w2: P, b2: P, lg: P, lb: P| {
        let z = g.matmul(x, leaves[w1.0]);
        let z = g.add_row(z, leaves[b1.0]);
        let z = g.gelu(z);
        let z = g.matmul(z, leaves[w2.0]);
        let z = g.add_row(z, leaves[b2.0]);
        g.layer_norm(z, leaves[lg.0], leaves[lb.0])
    };
    let t = branch(g, h_t, p.t_w1, p.t_b1, p.t_w2, p.t_b2, p.ln_t_g, p.ln_t_b);
    let i = branch(g, h_i, p.i_w1, p.i_b1, p.i_w2, p.i_b2, p.ln_i_g, p.ln_i_b);
    let cat = g.concat_cols(&[t, i]);
    let h = g.matmul(cat, leaves[p.h_w1.0]);
    let h = g.add_row(h, leaves[p.h_b1.0]);
    let h = g.gelu(h);
    let out = g.matmul(h, leaves[p.h_w2.0]);
    let out = g.add_row(out, leaves[p.h_b2.0]);
    g.tanh(out)
}
