//! Primary expert bank: noisy gating router with load-balance accounting,
//! per-expert scale/shift transforms over a residual reasoning stub, task
//! heads, and the temperature/top-k/top-p sampling decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamStore, P};
use crate::tensor::{softmax, Tensor};

/// Four-step reasoning prompt prepended verbatim to every decoded trace.
pub const COT_PROMPT_TEMPLATE: &str = "Analyze this multimodal input about a customer complaint from text and image. \n\nUse Chain of Thought reasoning:\n\nStep 1: Identify the key features in the input.\n\nStep 2: Consider what aspect the complaint is about (Software, Hardware, Packaging, Price, Service, or Quality).\n\nStep 3: Determine the severity level (No Explicit Reproach, Disapproval, Blame, or Accusation).\n\nStep 4: Make a classification decision based on your reasoning.\n\nReasoning:";

pub const ROUTER_NOISE_STD: f64 = 0.05;
pub const MAX_TRACE_TOKENS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct RouterParams {
    pub k: usize,
    pub sigma: f64,
    pub w_r: P,
    pub b_r: P,
}

impl RouterParams {
    pub fn new(b: &mut ParamBuilder, prefix: &str, d: usize, k: usize) -> Self {
        RouterParams {
            k,
            sigma: ROUTER_NOISE_STD,
            // small init keeps early gates near-uniform so exploration noise
            // and the balance penalty can spread load before gates sharpen
            w_r: b.gaussian(&format!("{prefix}.w_r"), d, k, 0.001),
            b_r: b.zeros(&format!("{prefix}.b_r"), 1, k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub gates: Vec<f64>,
    pub selected: usize,
    pub one_hot: Vec<f64>,
    pub entropy: f64,
}

fn argmax_lowest_tie(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Natural-log entropy of a gate vector on the simplex, 0 log 0 = 0.
pub fn routing_entropy(g: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in g {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Data(format!("gate component {p} outside [0,1]")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Sum over experts of the squared deviation of batch-mean gates from 1/K.
pub fn load_balance_loss(batch_gates: &[Vec<f64>]) -> Result<f64> {
    if batch_gates.is_empty() {
        return Err(Error::Data("load_balance_loss on empty batch".into()));
    }
    let k = batch_gates[0].len();
    let b = batch_gates.len() as f64;
    let mut loss = 0.0;
    for j in 0..k {
        let mean: f64 = batch_gates.iter().map(|g| g[j]).sum::<f64>() / b;
        let dev = 1.0 / k as f64 - mean;
        loss += dev * dev;
    }
    Ok(loss)
}

/// Gaussian router noise for one sample, drawn from the caller's stream.
pub fn router_noise(k: usize, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let n = Normal::new(0.0, sigma).unwrap();
    Tensor::row_vec((0..k).map(|_| n.sample(rng)).collect())
}

/// Routing inside a graph: returns (gates, log-gates, entropy) nodes plus the
/// plain decision. `noise` is pre-drawn in train mode, `None` for clean eval.
pub fn route_node(
    g: &mut Graph,
    leaves: &[NodeId],
    rp: &RouterParams,
    x: NodeId,
    noise: Option<&Tensor>,
) -> (NodeId, NodeId, RoutingDecision) {
    let mut logits = g.matmul(x, leaves[rp.w_r.0]);
    logits = g.add_row(logits, leaves[rp.b_r.0]);
    if let Some(n) = noise {
        logits = g.add_const(logits, n.clone());
    }
    let gates = g.softmax(logits);
    let log_gates = g.log_softmax(logits);
    let p = g.mul(gates, log_gates);
    let s = g.sum_all(p);
    let entropy = g.scale(s, -1.0);

    let gv = g.value(gates).data.clone();
    let selected = argmax_lowest_tie(&gv);
    let mut one_hot = vec![0.0; rp.k];
    one_hot[selected] = 1.0;
    let h = routing_entropy(&gv).expect("softmax output is on the simplex");
    (
        gates,
        entropy,
        RoutingDecision {
            gates: gv,
            selected,
            one_hot,
            entropy: h,
        },
    )
}

/// Plain routing decision without a graph (diagnostics, tests).
pub fn route(
    store: &ParamStore,
    rp: &RouterParams,
    x: &[f64],
    mode: Mode,
    rng: &mut impl Rng,
) -> RoutingDecision {
    let w = store.get(rp.w_r);
    let b = store.get(rp.b_r);
    let mut logits = vec![0.0; rp.k];
    for j in 0..rp.k {
        logits[j] = b.data[j];
        for (i, &xi) in x.iter().enumerate() {
            logits[j] += xi * w.at(i, j);
        }
    }
    if mode == Mode::Train {
        let noise = router_noise(rp.k, rp.sigma, rng);
        for (l, n) in logits.iter_mut().zip(&noise.data) {
            *l += n;
        }
    }
    let gates = softmax(&logits);
    let selected = argmax_lowest_tie(&gates);
    let mut one_hot = vec![0.0; rp.k];
    one_hot[selected] = 1.0;
    let entropy = routing_entropy(&gates).expect("softmax is on the simplex");
    RoutingDecision {
        gates,
        selected,
        one_hot,
        entropy,
    }
}

pub(crate) struct StubBlock {
    ln_a_g: P,
    ln_a_b: P,
    w_a: P,
    b_a: P,
    ln_f_g: P,
    ln_f_b: P,
    w_f1: P,
    b_f1: P,
    w_f2: P,
    b_f2: P,
}

impl StubBlock {
    pub(crate) fn param_ids(&self) -> Vec<P> {
        vec![
            self.ln_a_g, self.ln_a_b, self.w_a, self.b_a, self.ln_f_g, self.ln_f_b, self.w_f1,
            self.b_f1, self.w_f2, self.b_f2,
        ]
    }

    pub(crate) fn new(b: &mut ParamBuilder, prefix: &str, d_t: usize) -> Self {
        StubBlock {
            ln_a_g: b.ones(&format!("{prefix}.ln_a_g"), 1, d_t),
            ln_a_b: b.zeros(&format!("{prefix}.ln_a_b"), 1, d_t),
            w_a: b.dense(&format!("{prefix}.w_a"), d_t, d_t),
            b_a: b.zeros(&format!("{prefix}.b_a"), 1, d_t),
            ln_f_g: b.ones(&format!("{prefix}.ln_f_g"), 1, d_t),
            ln_f_b: b.zeros(&format!("{prefix}.ln_f_b"), 1, d_t),
            w_f1: b.dense(&format!("{prefix}.w_f1"), d_t, 2 * d_t),
            b_f1: b.zeros(&format!("{prefix}.b_f1"), 1, 2 * d_t),
            w_f2: b.dense(&format!("{prefix}.w_f2"), 2 * d_t, d_t),
            b_f2: b.zeros(&format!("{prefix}.b_f2"), 1, d_t),
        }
    }

    /// Pre-norm residual step: linear mix block then GELU feed-forward block.
    pub(crate) fn forward(&self, g: &mut Graph, leaves: &[NodeId], h: NodeId) -> NodeId {
        let u = g.layer_norm(h, leaves[self.ln_a_g.0], leaves[self.ln_a_b.0]);
        let a = g.matmul(u, leaves[self.w_a.0]);
        let a = g.add_row(a, leaves[self.b_a.0]);
        let h = g.add(h, a);
        let v = g.layer_norm(h, leaves[self.ln_f_g.0], leaves[self.ln_f_b.0]);
        let f = g.matmul(v, leaves[self.w_f1.0]);
        let f = g.add_row(f, leaves[self.b_f1.0]);
        let f = g.gelu(f);
        let f = g.matmul(f, leaves[self.w_f2.0]);
        let f = g.add_row(f, leaves[self.b_f2.0]);
        g.add(h, f)
    }
}

pub struct ExpertParams {
    pub alpha: P,
    pub beta: P,
    pub w_in: P,
    pub b_in: P,
    blocks: Vec<StubBlock>,
    pub tok_head: P,
    pub w_out_aspect: P,
    pub b_out_aspect: P,
    pub w_out_severity: P,
    pub b_out_severity: P,
}

impl ExpertParams {
    /// All parameter slots of one expert, in a fixed order shared across
    /// experts of the same shape.
    pub fn param_ids(&self) -> Vec<P> {
        let mut ids = vec![self.alpha, self.beta, self.w_in, self.b_in];
        for blk in &self.blocks {
            ids.extend(blk.param_ids());
        }
        ids.extend([
            self.tok_head,
            self.w_out_aspect,
            self.b_out_aspect,
            self.w_out_severity,
            self.b_out_severity,
        ]);
        ids
    }
}

pub struct ExpertBankParams {
    pub k: usize,
    pub d: usize,
    pub d_t: usize,
    pub trace_vocab: usize,
    pub experts: Vec<ExpertParams>,
}

impl ExpertBankParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        prefix: &str,
        k: usize,
        d: usize,
        d_t: usize,
        c_a: usize,
        c_s: usize,
        trace_vocab: usize,
        stub_blocks: usize,
    ) -> Self {
        let mut experts = Vec::with_capacity(k);
        for e in 0..k {
            let p = format!("{prefix}.e{e}");
            let mut blocks = Vec::with_capacity(stub_blocks);
            for l in 0..stub_blocks {
                blocks.push(StubBlock::new(b, &format!("{p}.s{l}"), d_t));
            }
            experts.push(ExpertParams {
                alpha: b.ones(&format!("{p}.alpha"), 1, d),
                beta: b.zeros(&format!("{p}.beta"), 1, d),
                w_in: b.dense(&format!("{p}.w_in"), d, d_t),
                b_in: b.zeros(&format!("{p}.b_in"), 1, d_t),
                blocks,
                tok_head: b.dense(&format!("{p}.tok_head"), d_t, trace_vocab),
                w_out_aspect: b.dense(&format!("{p}.w_out_aspect"), d_t, c_a),
                b_out_aspect: b.zeros(&format!("{p}.b_out_aspect"), 1, c_a),
                w_out_severity: b.dense(&format!("{p}.w_out_severity"), d_t, c_s),
                b_out_severity: b.zeros(&format!("{p}.b_out_severity"), 1, c_s),
            });
        }
        // all experts start from the same weights (upcycling-style init);
        // they differentiate through routing, which keeps early routing
        // gradients symmetric and prolongs balanced exploration
        for e in 1..k {
            let src = experts[0].param_ids();
            let dst = experts[e].param_ids();
            for (s, d) in src.into_iter().zip(dst) {
                b.copy_values(s, d);
            }
        }
        ExpertBankParams {
            k,
            d,
            d_t,
            trace_vocab,
            experts,
        }
    }
}

/// Graph forward of expert `k`: scale/shift, input projection, residual stub,
/// both task heads. Returns (aspect logits, severity logits, h_final).
pub fn expert_forward_node(
    g: &mut Graph,
    leaves: &[NodeId],
    bank: &ExpertBankParams,
    k: usize,
    x: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let e = &bank.experts[k];
    let scaled = g.mul(x, leaves[e.alpha.0]);
    let xp = g.add(scaled, leaves[e.beta.0]);
    let xpp = g.matmul(xp, leaves[e.w_in.0]);
    let mut h = g.add_row(xpp, leaves[e.b_in.0]);
    for blk in &e.blocks {
        h = blk.forward(g, leaves, h);
    }
    let la = g.matmul(h, leaves[e.w_out_aspect.0]);
    let la = g.add_row(la, leaves[e.b_out_aspect.0]);
    let ls = g.matmul(h, leaves[e.w_out_severity.0]);
    let ls = g.add_row(ls, leaves[e.b_out_severity.0]);
    (la, ls, h)
}

#[derive(Debug, Clone)]
pub struct ExpertOutput {
    pub aspect_logits: Vec<f64>,
    pub severity_logits: Vec<f64>,
    /// Decoder-exercise token ids; never consumed by the logits path.
    pub trace: Vec<usize>,
}

/// Standalone expert forward, including the reasoning-trace exercise.
pub fn expert_forward(
    store: &ParamStore,
    bank: &ExpertBankParams,
    k: usize,
    x: &Tensor,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<ExpertOutput> {
    if k >= bank.k {
        return Err(Error::Config(format!("expert index {k} out of range")));
    }
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
    let xn = g.constant(x.clone());
    let (la, ls, h) = expert_forward_node(&mut g, &leaves, bank, k, xn);
    let tok_logits = g.matmul(h, leaves[bank.experts[k].tok_head.0]);

    let mut trace = Vec::with_capacity(MAX_TRACE_TOKENS);
    let logits = g.value(tok_logits).data.clone();
    for _ in 0..MAX_TRACE_TOKENS {
        trace.push(sample_token(&logits, sampler, rng)?);
    }
    Ok(ExpertOutput {
        aspect_logits: g.value(la).data.clone(),
        severity_logits: g.value(ls).data.clone(),
        trace,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.5,
            top_k: 30,
            top_p: 0.9,
        }
    }
}

/// Exact post-filter distribution: temperature scaling, top-k, then the
/// smallest descending-probability prefix reaching top_p (boundary token
/// included), renormalized. Zero entries are filtered out.
pub fn filtered_distribution(logits: &[f64], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    if cfg.temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if cfg.top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if !(0.0 < cfg.top_p && cfg.top_p <= 1.0) {
        return Err(Error::Config("top_p must be in (0, 1]".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));

    let k = cfg.top_k.min(probs.len());
    let kept = &order[..k];
    let kept_mass: f64 = kept.iter().map(|&i| probs[i]).sum();

    let mut out = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for &i in kept {
        // renormalize over the top-k set before the nucleus cut
        let p = probs[i] / kept_mass;
        out[i] = p;
        cum += p;
        if cum >= cfg.top_p - 1e-12 {
            break;
        }
    }
    let z: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= z;
    }
    Ok(out)
}

/// Draw one token id from the filtered, renormalized distribution.
pub fn sample_token(logits: &[f64], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<usize> {
    let dist = filtered_distribution(logits, cfg)?;
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // numeric tail: fall back to the highest-probability id
    Ok(argmax_lowest_tie(&dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    const LN4: f64 = 1.3862943611198906;

    fn build_router(d: usize, k: usize) -> (ParamStore, RouterParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "init");
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let rp = RouterParams::new(&mut b, "router", d, k);
        (store, rp)
    }

    #[test]
    fn zero_router_is_uniform() {
        let (mut store, rp) = build_router(4, 4);
        for v in store.get_mut(rp.w_r).data.iter_mut() {
            *v = 0.0;
        }
        let mut rng = substream(0, "noise");
        let dec = route(&store, &rp, &[1.0, -2.0, 0.5, 3.0], Mode::Eval, &mut rng);
        for &g in &dec.gates {
            assert!((g - 0.25).abs() < 1e-12);
        }
        assert_eq!(dec.selected, 0);
        assert!((dec.entropy - LN4).abs() < 1e-6);
    }

    #[test]
    fn dominant_bias_wins() {
        let (mut store, rp) = build_router(4, 4);
        for v in store.get_mut(rp.w_r).data.iter_mut() {
            *v = 0.0;
        }
        store.get_mut(rp.b_r).data[0] = 10.0;
        let mut rng = substream(0, "noise");
        let dec = route(&store, &rp, &[0.0; 4], Mode::Eval, &mut rng);
        assert_eq!(dec.selected, 0);
        assert!(dec.gates[0] > 0.999);
    }

    #[test]
    fn train_mode_noise_is_seed_deterministic() {
        let (store, rp) = build_router(4, 4);
        let x = [0.3, -0.7, 1.1, 0.2];
        let a = route(&store, &rp, &x, Mode::Train, &mut substream(42, "noise"));
        let b = route(&store, &rp, &x, Mode::Train, &mut substream(42, "noise"));
        let c = route(&store, &rp, &x, Mode::Train, &mut substream(43, "noise"));
        assert_eq!(a.gates, b.gates);
        assert_ne!(a.gates, c.gates);
    }

    #[test]
    fn entropy_examples() {
        assert!((routing_entropy(&[0.25; 4]).unwrap() - LN4).abs() < 1e-6);
        assert_eq!(routing_entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((routing_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.6931471805599453).abs() < 1e-9);
        assert!(routing_entropy(&[1.2, -0.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn load_balance_examples() {
        assert_eq!(load_balance_loss(&[vec![0.25; 4]]).unwrap(), 0.0);
        assert!((load_balance_loss(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap() - 0.75).abs() < 1e-12);
        assert!((load_balance_loss(&[vec![0.5, 0.5, 0.0, 0.0]]).unwrap() - 0.25).abs() < 1e-12);
        assert!(load_balance_loss(&[]).is_err());
    }

    fn build_bank() -> (ParamStore, ExpertBankParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(5, "init");
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let bank = ExpertBankParams::new(&mut b, "experts", 4, 8, 12, 6, 4, 16, 2);
        (store, bank)
    }

    #[test]
    fn expert_output_shapes_and_identity_transform() {
        let (store, bank) = build_bank();
        let x = Tensor::row_vec((0..8).map(|i| i as f64 * 0.1 - 0.3).collect());
        let mut rng = substream(0, "sampler");
        let out = expert_forward(&store, &bank, 1, &x, &SamplerConfig::default(), &mut rng).unwrap();
        assert_eq!(out.aspect_logits.len(), 6);
        assert_eq!(out.severity_logits.len(), 4);
        assert_eq!(out.trace.len(), MAX_TRACE_TOKENS);
        assert!(out.trace.iter().all(|&t| t < 16));
        assert!(expert_forward(&store, &bank, 9, &x, &SamplerConfig::default(), &mut rng).is_err());

        // alpha = 1, beta = 0 at init: x' == x
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
        let xn = g.constant(x.clone());
        let e = &bank.experts[1];
        let scaled = g.mul(xn, leaves[e.alpha.0]);
        let xp = g.add(scaled, leaves[e.beta.0]);
        assert_eq!(g.value(xp).data, x.data);
    }

    #[test]
    fn zero_stub_is_identity_on_projection() {
        let (mut store, bank) = build_bank();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            if name.contains(".s0.") || name.contains(".s1.") {
                let zero_it = name.contains(".w_") || name.contains(".b_");
                if zero_it {
                    for v in store.get_mut(P(i)).data.iter_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
        let x = Tensor::row_vec((0..8).map(|i| 0.2 * i as f64).collect());
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.values().iter().map(|t| g.constant(t.clone())).collect();
        let xn = g.constant(x.clone());
        let (_, _, h) = expert_forward_node(&mut g, &leaves, &bank, 0, xn);
        // expected: x'' = (x * alpha + beta) W_in + b_in with alpha=1, beta=0
        let e = &bank.experts[0];
        let expect = x.matmul(store.get(e.w_in));
        let got = g.value(h);
        for (a, b) in got.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_examples() {
        // symmetric logits, no filtering
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_k: 2,
            top_p: 1.0,
        };
        let d = filtered_distribution(&[0.0, 0.0], &cfg).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);

        // top_k = 1 is deterministic for any tau/p
        let cfg = SamplerConfig {
            temperature: 0.5,
            top_k: 1,
            top_p: 0.9,
        };
        let d = filtered_distribution(&[0.1, 2.0, -1.0], &cfg).unwrap();
        assert_eq!(d, vec![0.0, 1.0, 0.0]);
        let mut rng = substream(7, "sampler");
        for _ in 0..20 {
            assert_eq!(sample_token(&[0.1, 2.0, -1.0], &cfg, &mut rng).unwrap(), 1);
        }

        // probs (0.6, 0.3, 0.1) with top_p = 0.8 keeps {0, 1} renormalized
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_k: 3,
            top_p: 0.8,
        };
        let logits: Vec<f64> = [0.6f64, 0.3, 0.1].iter().map(|p| p.ln()).collect();
        let d = filtered_distribution(&logits, &cfg).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn sampler_rejects_bad_config() {
        let bad = SamplerConfig {
            temperature: 0.0,
            top_k: 30,
            top_p: 0.9,
        };
        assert!(filtered_distribution(&[0.0, 1.0], &bad).is_err());
        let bad = SamplerConfig {
            temperature: 1.0,
            top_k: 0,
            top_p: 0.9,
        };
        assert!(filtered_distribution(&[0.0, 1.0], &bad).is_err());
        let bad = SamplerConfig {
            temperature: 1.0,
            top_k: 2,
            top_p: 0.0,
        };
        assert!(filtered_distribution(&[0.0, 1.0], &bad).is_err());
    }

    proptest! {
        #[test]
        fn gates_stay_on_simplex(xs in proptest::collection::vec(-5.0f64..5.0, 4), seed in 0u64..100) {
            let (store, rp) = build_router(4, 4);
            for mode in [Mode::Eval, Mode::Train] {
                let dec = route(&store, &rp, &xs, mode, &mut substream(seed, "noise"));
                let s: f64 = dec.gates.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(dec.entropy >= 0.0 && dec.entropy <= LN4 + 1e-9);
                prop_assert_eq!(dec.selected, argmax_lowest_tie(&dec.gates));
            }
        }

        #[test]
        fn router_logit_shift_invariance(xs in proptest::collection::vec(-2.0f64..2.0, 4), c in -3.0f64..3.0) {
            let (mut store, rp) = build_router(4, 4);
            let base = route(&store, &rp, &xs, Mode::Eval, &mut substream(0, "n"));
            for v in store.get_mut(rp.b_r).data.iter_mut() {
                *v += c;
            }
            let shifted = route(&store, &rp, &xs, Mode::Eval, &mut substream(0, "n"));
            for (a, b) in base.gates.iter().zip(&shifted.gates) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert_eq!(base.selected, shifted.selected);
            prop_assert!((base.entropy - shifted.entropy).abs() < 1e-9);
        }

        #[test]
        fn sampler_distribution_sums_to_one(logits in proptest::collection::vec(-4.0f64..4.0, 5)) {
            let cfg = SamplerConfig::default();
            let d = filtered_distribution(&logits, &cfg).unwrap();
            let s: f64 = d.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|&p| p >= 0.0));
        }
    }
}
