//! Second-stage validation experts: a soft-gated two-expert mixture over the
//! fused representation, plus the agreement diagnostics (alignment,
//! dominance, complementarity) consumed downstream.

use crate::error::{Error, Result};
use crate::experts::StubBlock;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, P};
use crate::tensor::{softmax, Tensor};

pub const NUM_VALIDATION_EXPERTS: usize = 2;

struct TaskHead {
    w1: P,
    b1: P,
    w2: P,
    b2: P,
}

impl TaskHead {
    fn new(b: &mut ParamBuilder, prefix: &str, d_t: usize, hidden: usize, c: usize) -> Self {
        TaskHead {
            w1: b.dense(&format!("{prefix}.w1"), d_t, hidden),
            b1: b.zeros(&format!("{prefix}.b1"), 1, hidden),
            w2: b.dense(&format!("{prefix}.w2"), hidden, c),
            b2: b.zeros(&format!("{prefix}.b2"), 1, c),
        }
    }

    /// Returns (hidden activations, logits); the hidden layer doubles as the
    /// task feature vector for alignment scoring.
    fn forward(&self, g: &mut Graph, leaves: &[NodeId], h: NodeId) -> (NodeId, NodeId) {
        let z = g.matmul(h, leaves[self.w1.0]);
        let z = g.add_row(z, leaves[self.b1.0]);
        let z = g.relu(z);
        let l = g.matmul(z, leaves[self.w2.0]);
        let l = g.add_row(l, leaves[self.b2.0]);
        (z, l)
    }
}

struct ValExpert {
    w_in: P,
    b_in: P,
    blocks: Vec<StubBlock>,
    head_aspect: TaskHead,
    head_severity: TaskHead,
}

pub struct ValidationParams {
    pub l_v: usize,
    pub d: usize,
    pub d_t: usize,
    pub w_g: P,
    pub b_g: P,
    experts: Vec<ValExpert>,
}

impl ValidationParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        d: usize,
        d_t: usize,
        c_a: usize,
        c_s: usize,
        stub_blocks: usize,
    ) -> Self {
        let hidden = (d_t / 2).max(1);
        let mut experts = Vec::with_capacity(NUM_VALIDATION_EXPERTS);
        for v in 0..NUM_VALIDATION_EXPERTS {
            let p = format!("{prefix}.v{v}");
            let blocks = (0..stub_blocks)
                .map(|l| StubBlock::new(b, &format!("{p}.s{l}"), d_t))
                .collect();
            experts.push(ValExpert {
                w_in: b.dense(&format!("{p}.w_in"), d, d_t),
                b_in: b.zeros(&format!("{p}.b_in"), 1, d_t),
                blocks,
                head_aspect: TaskHead::new(b, &format!("{p}.head_a"), d_t, hidden, c_a),
                head_severity: TaskHead::new(b, &format!("{p}.head_s"), d_t, hidden, c_s),
            });
        }
        ValidationParams {
            l_v: NUM_VALIDATION_EXPERTS,
            d,
            d_t,
            w_g: b.gaussian(&format!("{prefix}.w_g"), d, NUM_VALIDATION_EXPERTS, 0.1),
            b_g: b.zeros(&format!("{prefix}.b_g"), 1, NUM_VALIDATION_EXPERTS),
            experts,
        }
    }
}

/// Graph nodes produced by one validation pass over a single fused sample.
pub struct ValidationNodes {
    /// Soft gate over the validation experts, 1 x L_v.
    pub gate: NodeId,
    /// Gate-mixed aspect logits, 1 x C_a.
    pub aspect_logits: NodeId,
    /// Gate-mixed severity logits, 1 x C_s.
    pub severity_logits: NodeId,
    /// Per-expert (aspect hidden, severity hidden) feature nodes.
    pub task_features: Vec<(NodeId, NodeId)>,
    /// Per-expert (aspect, severity) logit nodes before mixing.
    pub expert_logits: Vec<(NodeId, NodeId)>,
}

/// Extract gate component `idx` of a 1 x K node as a 1 x 1 scalar node.
pub fn select_component(g: &mut Graph, v: NodeId, k: usize, idx: usize) -> NodeId {
    let mut mask = Tensor::zeros(1, k);
    mask.data[idx] = 1.0;
    let picked = g.mul_const(v, mask);
    g.sum_all(picked)
}

pub fn validation_forward_node(
    g: &mut Graph,
    leaves: &[NodeId],
    vp: &ValidationParams,
    x: NodeId,
) -> ValidationNodes {
    let gl = g.matmul(x, leaves[vp.w_g.0]);
    let gl = g.add_row(gl, leaves[vp.b_g.0]);
    let gate = g.softmax(gl);

    let mut task_features = Vec::with_capacity(vp.l_v);
    let mut expert_logits = Vec::with_capacity(vp.l_v);
    let mut mixed_a: Option<NodeId> = None;
    let mut mixed_s: Option<NodeId> = None;
    for (v, e) in vp.experts.iter().enumerate() {
        let mut h = g.matmul(x, leaves[e.w_in.0]);
        h = g.add_row(h, leaves[e.b_in.0]);
        for blk in &e.blocks {
            h = blk.forward(g, leaves, h);
        }
        let (fa, la) = e.head_aspect.forward(g, leaves, h);
        let (fs, ls) = e.head_severity.forward(g, leaves, h);
        task_features.push((fa, fs));
        expert_logits.push((la, ls));

        let qv = select_component(g, gate, vp.l_v, v);
        let wa = g.scale_by(la, qv);
        let ws = g.scale_by(ls, qv);
        mixed_a = Some(match mixed_a {
            Some(acc) => g.add(acc, wa),
            None => wa,
        });
        mixed_s = Some(match mixed_s {
            Some(acc) => g.add(acc, ws),
            None => ws,
        });
    }
    ValidationNodes {
        gate,
        aspect_logits: mixed_a.unwrap(),
        severity_logits: mixed_s.unwrap(),
        task_features,
        expert_logits,
    }
}

/// Cosine similarity between two equal-length vectors. Errors when either
/// vector has zero norm.
pub fn alignment_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "alignment over mismatched lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("alignment of a zero-norm vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Pearson correlation of two equally shaped tensors flattened to vectors.
/// Errors when either side has zero variance.
pub fn dominance_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("dominance over mismatched shapes".into()));
    }
    let n = a.data.len() as f64;
    if a.data.is_empty() {
        return Err(Error::Undefined("dominance over empty tensors".into()));
    }
    let ma: f64 = a.data.iter().sum::<f64>() / n;
    let mb: f64 = b.data.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.data.iter().map(|&x| x - ma).collect();
    let cb: Vec<f64> = b.data.iter().map(|&x| x - mb).collect();
    let va: f64 = ca.iter().map(|x| x * x).sum();
    let vb: f64 = cb.iter().map(|x| x * x).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined(
            "dominance of a zero-variance logit set".into(),
        ));
    }
    let cov: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Natural-log entropy of softmax(logits): the complementarity signal.
pub fn complementarity_score(logits: &[f64]) -> f64 {
    let p = softmax(logits);
    let mut h = 0.0;
    for &q in &p {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    h
}

/// Graph cosine between two row vectors, epsilon-guarded for zero norms.
pub fn cosine_node(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let ab = g.mul(a, b);
    let dot = g.sum_all(ab);
    let aa = g.mul(a, a);
    let na2 = g.sum_all(aa);
    let bb = g.mul(b, b);
    let nb2 = g.sum_all(bb);
    let n2 = g.mul(na2, nb2);
    let n = g.sqrt(n2);
    let n = g.add_const(n, Tensor::scalar(1e-12));
    g.div(dot, n)
}

/// Graph Pearson of two equally shaped nodes, flattened; epsilon-guarded.
pub fn pearson_node(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let (rows, cols) = {
        let t = g.value(a);
        (t.rows, t.cols)
    };
    let ones = g.constant(Tensor::from_vec(rows, cols, vec![1.0; rows * cols]));
    let ma = g.mean_all(a);
    let mb = g.mean_all(b);
    let ma_full = g.scale_by(ones, ma);
    let mb_full = g.scale_by(ones, mb);
    let ca = g.sub(a, ma_full);
    let cb = g.sub(b, mb_full);
    cosine_node(g, ca, cb)
}

/// Graph entropy of softmax over a single row of logits.
pub fn entropy_node(g: &mut Graph, logits: NodeId) -> NodeId {
    let p = g.softmax(logits);
    let lp = g.log_softmax(logits);
    let plp = g.mul(p, lp);
    let s = g.sum_all(plp);
    g.scale(s, -1.0)
}

/// Per-sample alignment node: mean over tasks of the cosine between the two
/// validation experts' logits.
pub fn sample_alignment_node(g: &mut Graph, nodes: &ValidationNodes) -> NodeId {
    let (a0, s0) = nodes.expert_logits[0];
    let (a1, s1) = nodes.expert_logits[1];
    let ca = cosine_node(g, a0, a1);
    let cs = cosine_node(g, s0, s1);
    let sum = g.add(ca, cs);
    g.scale(sum, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn build(d: usize, d_t: usize) -> (ParamStore, ValidationParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(11, "init");
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let vp = ValidationParams::new(&mut b, "val", d, d_t, 6, 4, 1);
        (store, vp)
    }

    fn const_leaves(g: &mut Graph, store: &ParamStore) -> Vec<NodeId> {
        store.values().iter().map(|t| g.constant(t.clone())).collect()
    }

    fn run(store: &ParamStore, vp: &ValidationParams, x: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let leaves = const_leaves(&mut g, store);
        let xn = g.constant(x.clone());
        let out = validation_forward_node(&mut g, &leaves, vp, xn);
        (
            g.value(out.gate).data.clone(),
            g.value(out.aspect_logits).data.clone(),
            g.value(out.severity_logits).data.clone(),
        )
    }

    #[test]
    fn output_shapes() {
        let (store, vp) = build(8, 12);
        let x = Tensor::row_vec((0..8).map(|i| 0.1 * i as f64 - 0.4).collect());
        let (q, la, ls) = run(&store, &vp, &x);
        assert_eq!(q.len(), 2);
        assert_eq!(la.len(), 6);
        assert_eq!(ls.len(), 4);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_experts_make_gate_irrelevant() {
        let (mut store, vp) = build(6, 10);
        // copy every v0 tensor into the matching v1 slot
        let pairs: Vec<(usize, usize)> = {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            names
                .iter()
                .enumerate()
                .filter(|(_, n)| n.contains(".v0."))
                .map(|(i, n)| {
                    let twin = n.replace(".v0.", ".v1.");
                    let j = names.iter().position(|m| *m == twin).unwrap();
                    (i, j)
                })
                .collect()
        };
        for (src, dst) in pairs {
            let t = store.get(P(src)).clone();
            *store.get_mut(P(dst)) = t;
        }
        let x = Tensor::row_vec(vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.9]);
        let (_, la, ls) = run(&store, &vp, &x);

        // single-expert reference
        let mut g = Graph::new();
        let leaves = const_leaves(&mut g, &store);
        let xn = g.constant(x.clone());
        let out = validation_forward_node(&mut g, &leaves, &vp, xn);
        let (e_la, e_ls) = out.expert_logits[0];
        let ref_la = g.value(e_la).data.clone();
        let ref_ls = g.value(e_ls).data.clone();
        for (a, b) in la.iter().zip(&ref_la) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in ls.iter().zip(&ref_ls) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gate_weights_average_the_experts() {
        let (mut store, vp) = build(6, 10);
        for v in store.get_mut(vp.w_g).data.iter_mut() {
            *v = 0.0;
        }
        let x = Tensor::row_vec(vec![1.0, 0.0, -1.0, 0.5, 0.2, -0.7]);
        let mut g = Graph::new();
        let leaves = const_leaves(&mut g, &store);
        let xn = g.constant(x.clone());
        let out = validation_forward_node(&mut g, &leaves, &vp, xn);
        let q = g.value(out.gate).data.clone();
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
        let (l0, _) = out.expert_logits[0];
        let (l1, _) = out.expert_logits[1];
        let mean: Vec<f64> = g
            .value(l0)
            .data
            .iter()
            .zip(&g.value(l1).data)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        for (a, b) in g.value(out.aspect_logits).data.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_examples() {
        assert!((alignment_score(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((alignment_score(&[1.0, 0.0], &[-3.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(alignment_score(&[1.0, 0.0], &[0.0, 5.0]).unwrap().abs() < 1e-12);
        assert!(alignment_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(alignment_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn dominance_examples() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.map(|x| 2.0 * x + 1.0);
        assert!((dominance_score(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = a.map(|x| -x);
        assert!((dominance_score(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        let flat = Tensor::from_vec(2, 3, vec![2.0; 6]);
        assert!(matches!(dominance_score(&a, &flat), Err(Error::Undefined(_))));
    }

    #[test]
    fn complementarity_examples() {
        let ln6 = 6.0f64.ln();
        assert!((complementarity_score(&[0.0; 6]) - ln6).abs() < 1e-9);
        assert!(complementarity_score(&[50.0, 0.0, 0.0, 0.0]) < 1e-9);
        let base = complementarity_score(&[1.0, 2.0, 3.0]);
        let shifted = complementarity_score(&[101.0, 102.0, 103.0]);
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn graph_metrics_match_plain_oracles() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vec(vec![0.3, -1.2, 0.8, 2.0]));
        let b = g.constant(Tensor::row_vec(vec![-0.5, 0.7, 1.5, -0.25]));
        let c = cosine_node(&mut g, a, b);
        let plain = alignment_score(&[0.3, -1.2, 0.8, 2.0], &[-0.5, 0.7, 1.5, -0.25]).unwrap();
        assert!((g.value(c).item() - plain).abs() < 1e-9);

        let ta = Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let tb = Tensor::from_vec(2, 2, vec![0.2, 1.0, -0.8, 2.5]);
        let na = g.constant(ta.clone());
        let nb = g.constant(tb.clone());
        let pn = pearson_node(&mut g, na, nb);
        assert!((g.value(pn).item() - dominance_score(&ta, &tb).unwrap()).abs() < 1e-9);

        let logits = vec![0.4, -1.0, 2.2];
        let ln = g.constant(Tensor::row_vec(logits.clone()));
        let en = entropy_node(&mut g, ln);
        assert!((g.value(en).item() - complementarity_score(&logits)).abs() < 1e-9);
    }

    #[test]
    fn gradients_flow_through_forward_and_metrics() {
        let (store, vp) = build(5, 6);
        let x0 = Tensor::row_vec(vec![0.4, -0.9, 1.3, 0.1, -0.5]);
        let inputs = vec![x0];
        let f = |g: &mut Graph, ins: &[NodeId]| {
            let leaves = const_leaves(g, &store);
            let out = validation_forward_node(g, &leaves, &vp, ins[0]);
            let r = sample_alignment_node(g, &out);
            let ea = entropy_node(g, out.aspect_logits);
            let la = g.sum_all(out.aspect_logits);
            let ls = g.sum_all(out.severity_logits);
            let t = g.add(r, ea);
            let t = g.add(t, la);
            g.add(t, ls)
        };
        let err = crate::graph::finite_diff_check(f, &inputs, 1e-5);
        assert!(err < 1e-4, "max rel err {err}");
    }

    proptest! {
        #[test]
        fn mixture_stays_in_expert_hull(xs in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let (store, vp) = build(6, 8);
            let x = Tensor::row_vec(xs);
            let mut g = Graph::new();
            let leaves = const_leaves(&mut g, &store);
            let xn = g.constant(x);
            let out = validation_forward_node(&mut g, &leaves, &vp, xn);
            let mixed = g.value(out.aspect_logits).data.clone();
            let (l0, _) = out.expert_logits[0];
            let (l1, _) = out.expert_logits[1];
            let a = g.value(l0).data.clone();
            let b = g.value(l1).data.clone();
            for i in 0..mixed.len() {
                let lo = a[i].min(b[i]) - 1e-9;
                let hi = a[i].max(b[i]) + 1e-9;
                prop_assert!(mixed[i] >= lo && mixed[i] <= hi);
            }
        }

        #[test]
        fn dominance_is_affine_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 8), scale in 0.1f64..4.0, shift in -2.0f64..2.0) {
            let a = Tensor::from_vec(2, 4, vals);
            prop_assume!(dominance_score(&a, &a).is_ok());
            let b = a.map(|x| scale * x + shift);
            prop_assert!((dominance_score(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        }
    }
}
