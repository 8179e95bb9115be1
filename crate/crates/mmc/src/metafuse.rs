//! Meta-fusion head: concatenates primary logits, validation logits, the
//! alignment scalar, and the routing/agreement diagnostics into one feature
//! vector per task, then maps it through a three-layer MLP. A final
//! uniform logit shift injects the alignment scalar without changing the
//! predicted distribution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, P};
use crate::tensor::Tensor;

/// Weight on the uniform alignment shift added to the fused logits.
pub const SAS_SHIFT_WEIGHT: f64 = 0.1;
pub const META_DROPOUT: f64 = 0.1;

/// Number of scalar diagnostics appended after the two logit blocks.
pub const NUM_META_SCALARS: usize = 5;

/// Meta-feature length for a task with `c` classes: two logit blocks plus
/// the five scalars (alignment, routing entropy, agreement, dominance,
/// complementarity).
pub fn meta_feature_len(c: usize) -> usize {
    2 * c + NUM_META_SCALARS
}

/// Plain concatenation oracle used by tests and the serialization path.
pub fn build_meta_features(
    primary_logits: &[f64],
    validation_logits: &[f64],
    sas: f64,
    routing_entropy: f64,
    alignment_avg: f64,
    dominance: f64,
    complementarity_avg: f64,
) -> Result<Vec<f64>> {
    if primary_logits.len() != validation_logits.len() {
        return Err(Error::Shape(format!(
            "meta features need matching logit blocks, got {} vs {}",
            primary_logits.len(),
            validation_logits.len()
        )));
    }
    let mut f = Vec::with_capacity(meta_feature_len(primary_logits.len()));
    f.extend_from_slice(primary_logits);
    f.extend_from_slice(validation_logits);
    f.push(sas);
    f.push(routing_entropy);
    f.push(alignment_avg);
    f.push(dominance);
    f.push(complementarity_avg);
    Ok(f)
}

/// Graph version: every argument after the logit blocks is a 1 x 1 node.
#[allow(clippy::too_many_arguments)]
pub fn meta_features_node(
    g: &mut Graph,
    primary_logits: NodeId,
    validation_logits: NodeId,
    sas: NodeId,
    routing_entropy: NodeId,
    alignment_avg: NodeId,
    dominance: NodeId,
    complementarity_avg: NodeId,
) -> NodeId {
    g.concat_cols(&[
        primary_logits,
        validation_logits,
        sas,
        routing_entropy,
        alignment_avg,
        dominance,
        complementarity_avg,
    ])
}

struct Mlp3 {
    w1: P,
    b1: P,
    w2: P,
    b2: P,
    w3: P,
    b3: P,
}

impl Mlp3 {
    fn new(b: &mut ParamBuilder, prefix: &str, m: usize, h1: usize, h2: usize, c: usize) -> Self {
        Mlp3 {
            w1: b.dense(&format!("{prefix}.w1"), m, h1),
            b1: b.zeros(&format!("{prefix}.b1"), 1, h1),
            w2: b.dense(&format!("{prefix}.w2"), h1, h2),
            b2: b.zeros(&format!("{prefix}.b2"), 1, h2),
            w3: b.dense(&format!("{prefix}.w3"), h2, c),
            b3: b.zeros(&format!("{prefix}.b3"), 1, c),
        }
    }
}

pub struct MetaFusionParams {
    pub hidden: (usize, usize),
    pub dropout: f64,
    aspect: Mlp3,
    severity: Mlp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Aspect,
    Severity,
}

impl MetaFusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        c_a: usize,
        c_s: usize,
        h1: usize,
        h2: usize,
    ) -> Self {
        MetaFusionParams {
            hidden: (h1, h2),
            dropout: META_DROPOUT,
            aspect: Mlp3::new(b, &format!("{prefix}.aspect"), meta_feature_len(c_a), h1, h2, c_a),
            severity: Mlp3::new(
                b,
                &format!("{prefix}.severity"),
                meta_feature_len(c_s),
                h1,
                h2,
                c_s,
            ),
        }
    }
}

/// Inverted dropout mask: entries are 0 with probability p, else 1/(1-p).
pub fn dropout_mask(cols: usize, p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 - p;
    Tensor::row_vec(
        (0..cols)
            .map(|_| if rng.gen_range(0.0..1.0) < p { 0.0 } else { 1.0 / keep })
            .collect(),
    )
}

/// Three-layer ReLU MLP over the meta features. `masks` carries the two
/// pre-drawn inverted-dropout masks in train mode, `None` for eval.
pub fn meta_fuse(
    g: &mut Graph,
    leaves: &[NodeId],
    mp: &MetaFusionParams,
    task: Task,
    features: NodeId,
    masks: Option<(&Tensor, &Tensor)>,
) -> NodeId {
    let mlp = match task {
        Task::Aspect => &mp.aspect,
        Task::Severity => &mp.severity,
    };
    let mut h = g.matmul(features, leaves[mlp.w1.0]);
    h = g.add_row(h, leaves[mlp.b1.0]);
    h = g.relu(h);
    if let Some((m1, _)) = masks {
        h = g.mul_const(h, m1.clone());
    }
    let mut z = g.matmul(h, leaves[mlp.w2.0]);
    z = g.add_row(z, leaves[mlp.b2.0]);
    z = g.relu(z);
    if let Some((_, m2)) = masks {
        z = g.mul_const(z, m2.clone());
    }
    let out = g.matmul(z, leaves[mlp.w3.0]);
    g.add_row(out, leaves[mlp.b3.0])
}

/// Final logits: fused logits plus a uniform shift of `weight * s`. Because
/// the shift is constant across classes, softmax probabilities (and argmax)
/// are unchanged; the scalar only participates in the computation graph.
pub fn adjust_with_sas(g: &mut Graph, logits: NodeId, sas: NodeId, weight: f64) -> NodeId {
    let cols = g.value(logits).cols;
    let ones = g.constant(Tensor::row_vec(vec![1.0; cols]));
    let shift = g.scale_by(ones, sas);
    let shift = g.scale(shift, weight);
    g.add(logits, shift)
}

/// Argmax with lowest-index tie-break.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::substream;
    use crate::tensor::softmax;

    #[test]
    fn feature_lengths_match_contract() {
        assert_eq!(meta_feature_len(6), 17);
        assert_eq!(meta_feature_len(4), 13);
    }

    #[test]
    fn golden_feature_order() {
        let f = build_meta_features(
            &[1.0, 2.0, 3.0, 4.0],
            &[5.0, 6.0, 7.0, 8.0],
            0.25,
            1.1,
            0.9,
            -0.4,
            1.3,
        )
        .unwrap();
        assert_eq!(
            f,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.25, 1.1, 0.9, -0.4, 1.3]
        );
        assert!(build_meta_features(&[1.0], &[1.0, 2.0], 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn graph_features_match_plain() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::row_vec(vec![1.0, -2.0, 0.5]));
        let lv = g.constant(Tensor::row_vec(vec![0.1, 0.2, 0.3]));
        let s = g.constant(Tensor::scalar(0.7));
        let h = g.constant(Tensor::scalar(1.2));
        let r = g.constant(Tensor::scalar(0.4));
        let d = g.constant(Tensor::scalar(-0.1));
        let u = g.constant(Tensor::scalar(0.9));
        let f = meta_features_node(&mut g, lp, lv, s, h, r, d, u);
        let plain =
            build_meta_features(&[1.0, -2.0, 0.5], &[0.1, 0.2, 0.3], 0.7, 1.2, 0.4, -0.1, 0.9)
                .unwrap();
        assert_eq!(g.value(f).data, plain);
    }

    fn build() -> (ParamStore, MetaFusionParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "init");
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mp = MetaFusionParams::new(&mut b, "meta", 6, 4, 16, 8);
        (store, mp)
    }

    #[test]
    fn eval_forward_shapes() {
        let (store, mp) = build();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
        let fa = g.constant(Tensor::row_vec((0..17).map(|i| 0.1 * i as f64).collect()));
        let la = meta_fuse(&mut g, &leaves, &mp, Task::Aspect, fa, None);
        assert_eq!(g.value(la).cols, 6);
        let fs = g.constant(Tensor::row_vec((0..13).map(|i| -0.05 * i as f64).collect()));
        let ls = meta_fuse(&mut g, &leaves, &mp, Task::Severity, fs, None);
        assert_eq!(g.value(ls).cols, 4);
    }

    #[test]
    fn sas_shift_never_changes_probabilities() {
        let (store, mp) = build();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
        let f = g.constant(Tensor::row_vec((0..17).map(|i| (i as f64).sin()).collect()));
        let logits = meta_fuse(&mut g, &leaves, &mp, Task::Aspect, f, None);
        let s = g.constant(Tensor::scalar(-0.83));
        let shifted = adjust_with_sas(&mut g, logits, s, SAS_SHIFT_WEIGHT);
        let p_before = softmax(&g.value(logits).data);
        let p_after = softmax(&g.value(shifted).data);
        for (a, b) in p_before.iter().zip(&p_after) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(predict(&g.value(logits).data), predict(&g.value(shifted).data));
        // but the raw logits really did move
        let delta = g.value(shifted).data[0] - g.value(logits).data[0];
        assert!((delta - SAS_SHIFT_WEIGHT * -0.83).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_is_inverted_and_eval_is_identity() {
        let mut rng = substream(9, "dropout");
        let m = dropout_mask(1000, 0.1, &mut rng);
        let keep = 1.0 / 0.9;
        let mut zeros = 0;
        for &v in &m.data {
            assert!(v == 0.0 || (v - keep).abs() < 1e-12);
            if v == 0.0 {
                zeros += 1;
            }
        }
        // roughly 10% dropped
        assert!(zeros > 50 && zeros < 200, "dropped {zeros} of 1000");

        let (store, mp) = build();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
        let f = g.constant(Tensor::row_vec((0..17).map(|i| 0.2 * i as f64 - 1.0).collect()));
        let eval = meta_fuse(&mut g, &leaves, &mp, Task::Aspect, f, None);
        let ones1 = Tensor::row_vec(vec![1.0; 16]);
        let ones2 = Tensor::row_vec(vec![1.0; 8]);
        let trained = meta_fuse(&mut g, &leaves, &mp, Task::Aspect, f, Some((&ones1, &ones2)));
        assert_eq!(g.value(eval).data, g.value(trained).data);
    }

    #[test]
    fn gradients_through_meta_fusion() {
        let (store, mp) = build();
        let f0 = Tensor::row_vec((0..17).map(|i| 0.15 * i as f64 - 1.2).collect());
        let err = crate::graph::finite_diff_check(
            |g, ins| {
                let leaves: Vec<NodeId> =
                    store.values().iter().map(|t| g.constant(t.clone())).collect();
                let logits = meta_fuse(g, &leaves, &mp, Task::Aspect, ins[0], None);
                let s = g.constant(Tensor::scalar(0.3));
                let out = adjust_with_sas(g, logits, s, SAS_SHIFT_WEIGHT);
                g.sum_all(out)
            },
            &[f0],
            1e-5,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(predict(&[-1.0, -5.0]), 0);
    }
}
