//! End-to-end model assembly: dual encoders, cross-modal fusion, alignment
//! scoring, the routed expert bank, validation mixture, and meta-fusion.
//! One graph is built per batch; training and evaluation share the same
//! forward, differing only in injected noise and dropout masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Image, NUM_ASPECTS, NUM_SEVERITIES};
use crate::encode::{
    encode_image, encode_text, patchify, EncoderConfig, ScalePreset, TokenSequence, Tokenizer,
    TransformerParams,
};
use crate::error::{Error, Result};
use crate::experts::{
    expert_forward_node, route_node, router_noise, ExpertBankParams, RouterParams,
    RoutingDecision,
};
use crate::fuse::{cross_modal_attention, semantic_alignment_score, FusionParams, SasParams};
use crate::graph::{Graph, NodeId};
use crate::metafuse::{
    adjust_with_sas, dropout_mask, meta_features_node, meta_fuse, MetaFusionParams, Task,
    SAS_SHIFT_WEIGHT,
};
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::{streams, substream};
use crate::tensor::Tensor;
use crate::validate::{
    entropy_node, pearson_node, sample_alignment_node, validation_forward_node, ValidationParams,
};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Expert working width.
    pub d_t: usize,
    /// Alignment-branch width.
    pub d_s: usize,
    pub num_experts: usize,
    pub fusion_depth: usize,
    pub stub_blocks: usize,
    pub meta_hidden: (usize, usize),
    pub trace_vocab: usize,
    pub num_aspects: usize,
    pub num_severities: usize,
    /// Number of experts mixed into the primary logits (1 = hard routing).
    pub top_k_route: usize,
    pub sas_weight: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            d_t: 128,
            d_s: 32,
            num_experts: 4,
            fusion_depth: 1,
            stub_blocks: 2,
            meta_hidden: (64, 32),
            trace_vocab: 64,
            num_aspects: NUM_ASPECTS,
            num_severities: NUM_SEVERITIES,
            top_k_route: 1,
            sas_weight: SAS_SHIFT_WEIGHT,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper(),
            d_t: 4096,
            d_s: 512,
            num_experts: 4,
            fusion_depth: 2,
            stub_blocks: 2,
            meta_hidden: (768, 384),
            trace_vocab: 1024,
            num_aspects: NUM_ASPECTS,
            num_severities: NUM_SEVERITIES,
            top_k_route: 1,
            sas_weight: SAS_SHIFT_WEIGHT,
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Desk => Self::desk(),
            ScalePreset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        if self.top_k_route == 0 || self.top_k_route > self.num_experts {
            return Err(Error::Config(format!(
                "top_k_route {} out of range 1..={}",
                self.top_k_route, self.num_experts
            )));
        }
        if self.d_t == 0 || self.d_s == 0 || self.meta_hidden.0 == 0 || self.meta_hidden.1 == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct ModelParams {
    pub cfg: ModelConfig,
    pub text_enc: TransformerParams,
    pub image_enc: TransformerParams,
    pub fusion: FusionParams,
    pub sas: SasParams,
    pub router: RouterParams,
    pub bank: ExpertBankParams,
    pub validation: ValidationParams,
    pub meta: MetaFusionParams,
}

impl ModelParams {
    /// Registers every tensor into `store` in a fixed order; the same config
    /// and seed always produce byte-identical initial parameters.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, streams::INIT);
        let mut b = ParamBuilder::new(store, &mut rng);
        let d = cfg.encoder.d;
        let text_enc = TransformerParams::text(&mut b, "text", &cfg.encoder);
        let image_enc = TransformerParams::image(&mut b, "image", &cfg.encoder);
        let fusion = FusionParams::new(&mut b, "fuse", d, cfg.encoder.heads, cfg.fusion_depth)?;
        let sas = SasParams::new(&mut b, "sas", d, cfg.d_s);
        let router = RouterParams::new(&mut b, "router", d, cfg.num_experts);
        let bank = ExpertBankParams::new(
            &mut b,
            "experts",
            cfg.num_experts,
            d,
            cfg.d_t,
            cfg.num_aspects,
            cfg.num_severities,
            cfg.trace_vocab,
            cfg.stub_blocks,
        );
        let validation = ValidationParams::new(
            &mut b,
            "val",
            d,
            cfg.d_t,
            cfg.num_aspects,
            cfg.num_severities,
            cfg.stub_blocks,
        );
        let meta = MetaFusionParams::new(
            &mut b,
            "meta",
            cfg.num_aspects,
            cfg.num_severities,
            cfg.meta_hidden.0,
            cfg.meta_hidden.1,
        );
        Ok(ModelParams {
            cfg: cfg.clone(),
            text_enc,
            image_enc,
            fusion,
            sas,
            router,
            bank,
            validation,
            meta,
        })
    }
}

/// One tokenized, patchified training instance with soft label targets.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub tokens: TokenSequence,
    pub patches: Tensor,
    pub aspect_target: Vec<f64>,
    pub severity_target: Vec<f64>,
    pub has_image: bool,
}

/// Tokenize text and patchify the image (a zero image stands in for
/// text-only samples) into a forward-ready instance.
pub fn prepare_sample(
    tokenizer: &Tokenizer,
    cfg: &ModelConfig,
    text: &str,
    image: Option<&Image>,
    aspect: usize,
    severity: usize,
) -> Result<PreparedSample> {
    if aspect >= cfg.num_aspects || severity >= cfg.num_severities {
        return Err(Error::Data(format!(
            "label pair ({aspect}, {severity}) out of range"
        )));
    }
    let mut aspect_target = vec![0.0; cfg.num_aspects];
    aspect_target[aspect] = 1.0;
    let mut severity_target = vec![0.0; cfg.num_severities];
    severity_target[severity] = 1.0;
    prepare_from_parts(tokenizer, cfg, text, image, aspect_target, severity_target)
}

/// Variant taking pre-built (possibly mixed) soft targets; used after
/// augmentation.
pub fn prepare_from_parts(
    tokenizer: &Tokenizer,
    cfg: &ModelConfig,
    text: &str,
    image: Option<&Image>,
    aspect_target: Vec<f64>,
    severity_target: Vec<f64>,
) -> Result<PreparedSample> {
    let fallback = Image::zeros(cfg.encoder.image_side);
    let (img, has_image) = match image {
        Some(im) => (im, true),
        None => (&fallback, false),
    };
    if img.side != cfg.encoder.image_side {
        return Err(Error::Shape(format!(
            "image side {} does not match configured {}",
            img.side, cfg.encoder.image_side
        )));
    }
    Ok(PreparedSample {
        tokens: tokenizer.tokenize(text),
        patches: patchify(img, cfg.encoder.patch)?,
        aspect_target,
        severity_target,
        has_image,
    })
}

/// Per-sample graph handles produced by the forward pass.
pub struct SampleNodes {
    pub final_aspect: NodeId,
    pub final_severity: NodeId,
    pub primary_aspect: NodeId,
    pub primary_severity: NodeId,
    pub val_aspect: NodeId,
    pub val_severity: NodeId,
    pub sas: NodeId,
    pub routing_entropy: NodeId,
    pub routing: RoutingDecision,
}

/// Batch-level graph handles and the plain-number diagnostics snapshot.
pub struct BatchForward {
    pub samples: Vec<SampleNodes>,
    pub load_balance: NodeId,
    pub r_avg: NodeId,
    pub dominance_aspect: NodeId,
    pub dominance_severity: NodeId,
    pub u_avg: NodeId,
    pub report: ValidationReport,
}

/// Scalar diagnostics recorded once per batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub routing_entropy: f64,
    pub load_balance: f64,
    pub gate_means: Vec<f64>,
    pub alignment: f64,
    pub dominance_aspect: f64,
    pub dominance_severity: f64,
    pub complementarity: f64,
    pub sas_mean: f64,
}

/// Pre-drawn stochastic inputs for one training batch. `None` means a clean
/// evaluation pass.
pub struct TrainNoise {
    pub router: Vec<Tensor>,
    pub meta_masks: Vec<MetaMasks>,
}

pub struct MetaMasks {
    pub aspect: (Tensor, Tensor),
    pub severity: (Tensor, Tensor),
}

/// Draw all router noise and dropout masks for a batch up front, so the
/// forward itself is a pure function of its inputs.
pub fn draw_train_noise(
    cfg: &ModelConfig,
    batch: usize,
    dropout: f64,
    router_rng: &mut impl Rng,
    dropout_rng: &mut impl Rng,
) -> TrainNoise {
    let router = (0..batch)
        .map(|_| router_noise(cfg.num_experts, crate::experts::ROUTER_NOISE_STD, router_rng))
        .collect();
    let (h1, h2) = cfg.meta_hidden;
    let meta_masks = (0..batch)
        .map(|_| MetaMasks {
            aspect: (
                dropout_mask(h1, dropout, dropout_rng),
                dropout_mask(h2, dropout, dropout_rng),
            ),
            severity: (
                dropout_mask(h1, dropout, dropout_rng),
                dropout_mask(h2, dropout, dropout_rng),
            ),
        })
        .collect();
    TrainNoise {
        router,
        meta_masks,
    }
}

fn mean_of_scalars(g: &mut Graph, xs: &[NodeId]) -> NodeId {
    let row = g.concat_cols(xs);
    g.mean_all(row)
}

pub fn forward_batch(
    g: &mut Graph,
    leaves: &[NodeId],
    mp: &ModelParams,
    batch: &[PreparedSample],
    noise: Option<&TrainNoise>,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Data("forward over an empty batch".into()));
    }
    if let Some(n) = noise {
        if n.router.len() != batch.len() || n.meta_masks.len() != batch.len() {
            return Err(Error::Shape("noise batch size mismatch".into()));
        }
    }
    let cfg = &mp.cfg;

    struct Stage1 {
        primary_aspect: NodeId,
        primary_severity: NodeId,
        val: crate::validate::ValidationNodes,
        sas: NodeId,
        gates: NodeId,
        entropy: NodeId,
        routing: RoutingDecision,
        r_sample: NodeId,
        u_sample: NodeId,
    }

    let mut stage1 = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let enc_t = encode_text(g, leaves, &mp.text_enc, &s.tokens);
        let enc_i = encode_image(g, leaves, &mp.image_enc, &s.patches);
        let x = cross_modal_attention(g, leaves, &mp.fusion, enc_t.hidden, enc_i.hidden, &s.tokens.mask);
        let sas = semantic_alignment_score(g, leaves, &mp.sas, enc_t.cls, enc_i.cls);

        let sample_noise = noise.map(|n| &n.router[i]);
        let (gates, entropy, routing) = route_node(g, leaves, &mp.router, x, sample_noise);

        // every expert runs; only the routed subset feeds the primary logits
        let mut expert_outs = Vec::with_capacity(cfg.num_experts);
        for k in 0..cfg.num_experts {
            let (la, ls, _) = expert_forward_node(g, leaves, &mp.bank, k, x);
            expert_outs.push((la, ls));
        }
        let mut order: Vec<usize> = (0..cfg.num_experts).collect();
        order.sort_by(|&a, &b| {
            routing.gates[b]
                .partial_cmp(&routing.gates[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut primary_aspect: Option<NodeId> = None;
        let mut primary_severity: Option<NodeId> = None;
        for &k in order.iter().take(cfg.top_k_route) {
            let gk = crate::validate::select_component(g, gates, cfg.num_experts, k);
            let (la, ls) = expert_outs[k];
            let wa = g.scale_by(la, gk);
            let ws = g.scale_by(ls, gk);
            primary_aspect = Some(match primary_aspect {
                Some(acc) => g.add(acc, wa),
                None => wa,
            });
            primary_severity = Some(match primary_severity {
                Some(acc) => g.add(acc, ws),
                None => ws,
            });
        }
        let primary_aspect = primary_aspect.unwrap();
        let primary_severity = primary_severity.unwrap();

        let val = validation_forward_node(g, leaves, &mp.validation, x);
        let r_sample = sample_alignment_node(g, &val);
        // complementarity is read off the aspect head only
        let u_sample = entropy_node(g, val.aspect_logits);

        stage1.push(Stage1 {
            primary_aspect,
            primary_severity,
            val,
            sas,
            gates,
            entropy,
            routing,
            r_sample,
            u_sample,
        });
    }

    // batch-level diagnostics
    let gate_rows: Vec<NodeId> = stage1.iter().map(|s| s.gates).collect();
    let gate_mat = g.concat_rows(&gate_rows);
    let keep = vec![true; batch.len()];
    let gate_mean = g.masked_mean_rows(gate_mat, &keep);
    let uniform = Tensor::row_vec(vec![-1.0 / cfg.num_experts as f64; cfg.num_experts]);
    let dev = g.add_const(gate_mean, uniform);
    let dev2 = g.mul(dev, dev);
    let load_balance = g.sum_all(dev2);

    let r_nodes: Vec<NodeId> = stage1.iter().map(|s| s.r_sample).collect();
    let r_avg = mean_of_scalars(g, &r_nodes);
    let u_nodes: Vec<NodeId> = stage1.iter().map(|s| s.u_sample).collect();
    let u_avg = mean_of_scalars(g, &u_nodes);

    let pa_rows: Vec<NodeId> = stage1.iter().map(|s| s.primary_aspect).collect();
    let va_rows: Vec<NodeId> = stage1.iter().map(|s| s.val.aspect_logits).collect();
    let ps_rows: Vec<NodeId> = stage1.iter().map(|s| s.primary_severity).collect();
    let vs_rows: Vec<NodeId> = stage1.iter().map(|s| s.val.severity_logits).collect();
    let pa_mat = g.concat_rows(&pa_rows);
    let va_mat = g.concat_rows(&va_rows);
    let ps_mat = g.concat_rows(&ps_rows);
    let vs_mat = g.concat_rows(&vs_rows);
    let dominance_aspect = pearson_node(g, pa_mat, va_mat);
    let dominance_severity = pearson_node(g, ps_mat, vs_mat);

    // meta fusion per sample, with batch scalars broadcast into the features
    let mut samples = Vec::with_capacity(batch.len());
    for (i, s1) in stage1.into_iter().enumerate() {
        let fa = meta_features_node(
            g,
            s1.primary_aspect,
            s1.val.aspect_logits,
            s1.sas,
            s1.entropy,
            r_avg,
            dominance_aspect,
            u_avg,
        );
        let fs = meta_features_node(
            g,
            s1.primary_severity,
            s1.val.severity_logits,
            s1.sas,
            s1.entropy,
            r_avg,
            dominance_severity,
            u_avg,
        );
        let masks = noise.map(|n| &n.meta_masks[i]);
        let la = meta_fuse(
            g,
            leaves,
            &mp.meta,
            Task::Aspect,
            fa,
            masks.map(|m| (&m.aspect.0, &m.aspect.1)),
        );
        let ls = meta_fuse(
            g,
            leaves,
            &mp.meta,
            Task::Severity,
            fs,
            masks.map(|m| (&m.severity.0, &m.severity.1)),
        );
        let final_aspect = adjust_with_sas(g, la, s1.sas, cfg.sas_weight);
        let final_severity = adjust_with_sas(g, ls, s1.sas, cfg.sas_weight);
        samples.push(SampleNodes {
            final_aspect,
            final_severity,
            primary_aspect: s1.primary_aspect,
            primary_severity: s1.primary_severity,
            val_aspect: s1.val.aspect_logits,
            val_severity: s1.val.severity_logits,
            sas: s1.sas,
            routing_entropy: s1.entropy,
            routing: s1.routing,
        });
    }

    let report = ValidationReport {
        routing_entropy: samples.iter().map(|s| s.routing.entropy).sum::<f64>()
            / batch.len() as f64,
        load_balance: g.value(load_balance).item(),
        gate_means: g.value(gate_mean).data.clone(),
        alignment: g.value(r_avg).item(),
        dominance_aspect: g.value(dominance_aspect).item(),
        dominance_severity: g.value(dominance_severity).item(),
        complementarity: g.value(u_avg).item(),
        sas_mean: samples.iter().map(|s| g.value(s.sas).item()).sum::<f64>() / batch.len() as f64,
    };

    Ok(BatchForward {
        samples,
        load_balance,
        r_avg,
        dominance_aspect,
        dominance_severity,
        u_avg,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::const_leaves;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.encoder = EncoderConfig {
            d: 16,
            layers: 1,
            heads: 2,
            max_tokens: 8,
            vocab: 40,
            patch: 8,
            image_side: 16,
        };
        cfg.d_t = 12;
        cfg.d_s = 8;
        cfg.num_experts = 3;
        cfg.stub_blocks = 1;
        cfg.meta_hidden = (10, 6);
        cfg.trace_vocab = 16;
        cfg
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, ModelParams) {
        let mut store = ParamStore::new();
        let mp = ModelParams::new(&mut store, cfg, seed).unwrap();
        (store, mp)
    }

    fn toy_batch(cfg: &ModelConfig, n: usize) -> Vec<PreparedSample> {
        let tok = Tokenizer::new(&cfg.encoder);
        (0..n)
            .map(|i| {
                let mut img = Image::zeros(cfg.encoder.image_side);
                for v in img.data.iter_mut().skip(i) {
                    *v = 0.3;
                }
                let image = if i % 3 == 2 { None } else { Some(&img) };
                let text = format!("the {} arrived broken tok{i}", crate::datagen::ASPECT_KEYWORDS[i % 6]);
                prepare_sample(&tok, cfg, &text, image, i % 6, i % 4).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let mut bad = ModelConfig::desk();
        bad.top_k_route = 9;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk();
        bad.num_experts = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_simplex_gates() {
        let cfg = tiny_config();
        let (store, mp) = build(&cfg, 7);
        let batch = toy_batch(&cfg, 3);
        let mut g = Graph::new();
        let leaves = const_leaves(&mut g, &store);
        let out = forward_batch(&mut g, &leaves, &mp, &batch, None).unwrap();
        assert_eq!(out.samples.len(), 3);
        for s in &out.samples {
            assert_eq!(g.value(s.final_aspect).cols, 6);
            assert_eq!(g.value(s.final_severity).cols, 4);
            let sum: f64 = s.routing.gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let sas = g.value(s.sas).item();
            assert!((-1.0..=1.0).contains(&sas));
        }
        assert!(out.report.load_balance >= 0.0);
        assert!(out.report.dominance_aspect.abs() <= 1.0 + 1e-9);
        assert!(forward_batch(&mut g, &leaves, &mp, &[], None).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_noise_matters() {
        let cfg = tiny_config();
        let (store, mp) = build(&cfg, 7);
        let batch = toy_batch(&cfg, 2);
        let run_eval = || {
            let mut g = Graph::new();
            let leaves = const_leaves(&mut g, &store);
            let out = forward_batch(&mut g, &leaves, &mp, &batch, None).unwrap();
            g.value(out.samples[0].final_aspect).data.clone()
        };
        assert_eq!(run_eval(), run_eval());

        let run_train = |seed: u64| {
            let mut g = Graph::new();
            let leaves = const_leaves(&mut g, &store);
            let mut r = substream(seed, streams::ROUTER_NOISE);
            let mut d = substream(seed, streams::DROPOUT);
            let noise = draw_train_noise(&cfg, batch.len(), crate::metafuse::META_DROPOUT, &mut r, &mut d);
            let out = forward_batch(&mut g, &leaves, &mp, &batch, Some(&noise)).unwrap();
            g.value(out.samples[0].final_aspect).data.clone()
        };
        assert_eq!(run_train(1), run_train(1));
        assert_ne!(run_train(1), run_train(2));
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = tiny_config();
        let (s1, _) = build(&cfg, 11);
        let (s2, _) = build(&cfg, 11);
        let (s3, _) = build(&cfg, 12);
        for (a, b) in s1.values().iter().zip(s2.values()) {
            assert_eq!(a.data, b.data);
        }
        assert!(s1.values().iter().zip(s3.values()).any(|(a, b)| a.data != b.data));
    }

    #[test]
    fn text_only_sample_runs() {
        let cfg = tiny_config();
        let (store, mp) = build(&cfg, 3);
        let tok = Tokenizer::new(&cfg.encoder);
        let s = prepare_sample(&tok, &cfg, "software keeps crashing", None, 0, 1).unwrap();
        assert!(!s.has_image);
        let mut g = Graph::new();
        let leaves = const_leaves(&mut g, &store);
        let out = forward_batch(&mut g, &leaves, &mp, &[s], None).unwrap();
        assert!(g.value(out.samples[0].final_aspect).all_finite());
    }

    #[test]
    fn prepare_rejects_bad_inputs() {
        let cfg = tiny_config();
        let tok = Tokenizer::new(&cfg.encoder);
        assert!(prepare_sample(&tok, &cfg, "x", None, 6, 0).is_err());
        assert!(prepare_sample(&tok, &cfg, "x", None, 0, 4).is_err());
        let wrong = Image::zeros(8);
        assert!(prepare_sample(&tok, &cfg, "x", Some(&wrong), 0, 0).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let (store, mp) = build(&cfg, 5);
        let batch = toy_batch(&cfg, 2);
        let inputs: Vec<Tensor> = store.values().to_vec();
        let f = |g: &mut Graph, ins: &[NodeId]| {
            let out = forward_batch(g, ins, &mp, &batch, None).unwrap();
            let mut total = out.load_balance;
            for s in &out.samples {
                let a = g.sum_all(s.final_aspect);
                let b = g.sum_all(s.final_severity);
                total = g.add(total, a);
                total = g.add(total, b);
            }
            total = g.add(total, out.r_avg);
            total = g.add(total, out.dominance_aspect);
            g.add(total, out.u_avg)
        };
        let mut rng = substream(99, "probe");
        let err = crate::graph::finite_diff_check_probes(f, &inputs, 1e-5, 60, &mut rng);
        assert!(err < 1e-4, "max rel err {err}");
    }
}
