//! Loss terms, image augmentation, the warm-restart learning-rate schedule,
//! the AdamW optimizer, and the training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datagen::Image;
use crate::encode::param_leaves;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{
    draw_train_noise, forward_batch, BatchForward, ModelParams, PreparedSample, ValidationReport,
};
use crate::params::ParamStore;
use crate::rng::{streams, substream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    PerPairCe,
    MultiLabelBce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Label-smoothing mass spread over all classes.
    pub epsilon_ls: f64,
    /// Alignment-score margin.
    pub margin: f64,
    pub tau_align: f64,
    pub tau_dom: f64,
    pub tau_comp: f64,
    pub lambda_lb: f64,
    pub lambda_val: f64,
    pub lambda_sas: f64,
    pub lambda_align: f64,
    pub lambda_dom: f64,
    pub lambda_comp: f64,
    pub loss_mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon_ls: 0.15,
            margin: 0.3,
            tau_align: 0.3,
            tau_dom: 0.5,
            tau_comp: 1.5,
            lambda_lb: 0.05,
            lambda_val: 1.0,
            lambda_sas: 0.1,
            lambda_align: 0.1,
            lambda_dom: 0.1,
            lambda_comp: 0.1,
            loss_mode: LossMode::PerPairCe,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub aspect: f64,
    pub severity: f64,
    pub lb: f64,
    pub val: f64,
    pub sas: f64,
    pub alignment: f64,
    pub dominance: f64,
    pub complementarity: f64,
    pub total: f64,
}

/// Smoothed target row: (1-eps) * soft_target + eps / C on every class.
pub fn smoothed_target(target: &[f64], eps: f64) -> Vec<f64> {
    let c = target.len() as f64;
    target.iter().map(|&t| (1.0 - eps) * t + eps / c).collect()
}

/// Plain label-smoothed cross-entropy against a one-hot gold class.
pub fn label_smoothed_ce(logits: &[f64], gold: usize, eps: f64) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::Data(format!(
            "gold class {gold} out of range for {} logits",
            logits.len()
        )));
    }
    let mut one_hot = vec![0.0; logits.len()];
    one_hot[gold] = 1.0;
    Ok(soft_ce(logits, &smoothed_target(&one_hot, eps)))
}

/// Cross-entropy of logits against an arbitrary probability target.
pub fn soft_ce(logits: &[f64], target: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    -target
        .iter()
        .zip(logits)
        .map(|(&t, &l)| t * (l - lse))
        .sum::<f64>()
}

/// Graph cross-entropy against a smoothed soft target (constant).
pub fn soft_ce_node(g: &mut Graph, logits: NodeId, target: &[f64], eps: f64) -> NodeId {
    let q = Tensor::row_vec(smoothed_target(target, eps));
    let lsm = g.log_softmax(logits);
    let picked = g.mul_const(lsm, q);
    let s = g.sum_all(picked);
    g.scale(s, -1.0)
}

/// Graph binary cross-entropy with logits against a multi-hot target:
/// sum_c softplus(l_c) - t_c * l_c.
pub fn bce_node(g: &mut Graph, logits: NodeId, target: &[f64]) -> NodeId {
    let sp = g.softplus(logits);
    let sp_sum = g.sum_all(sp);
    let tl = g.mul_const(logits, Tensor::row_vec(target.to_vec()));
    let tl_sum = g.sum_all(tl);
    g.sub(sp_sum, tl_sum)
}

/// Batch-mean alignment-margin hinge: (1/B) sum_b max(0, margin - s_b).
pub fn sas_margin_loss(s: &[f64], margin: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Data("sas_margin_loss over empty batch".into()));
    }
    Ok(s.iter().map(|&v| (margin - v).max(0.0)).sum::<f64>() / s.len() as f64)
}

/// Hinge node max(0, x - tau).
pub fn hinge_above_node(g: &mut Graph, x: NodeId, tau: f64) -> NodeId {
    let shifted = g.add_const(x, Tensor::scalar(-tau));
    g.relu(shifted)
}

/// Hinge node max(0, tau - x).
pub fn hinge_below_node(g: &mut Graph, x: NodeId, tau: f64) -> NodeId {
    let neg = g.scale(x, -1.0);
    let shifted = g.add_const(neg, Tensor::scalar(tau));
    g.relu(shifted)
}

/// The three agreement regularizers: alignment is penalized above its
/// threshold (pushing the validation experts apart); dominance and
/// complementarity are penalized below theirs.
pub fn metric_regularizers(
    r_avg: f64,
    dominance_aspect: f64,
    u_avg: f64,
    cfg: &LossConfig,
) -> (f64, f64, f64) {
    (
        (r_avg - cfg.tau_align).max(0.0),
        (cfg.tau_dom - dominance_aspect).max(0.0),
        (cfg.tau_comp - u_avg).max(0.0),
    )
}

/// Raw loss parts in breakdown order, before weighting.
pub type LossParts = [f64; 8];

/// Assemble the weighted total from unweighted parts. Rejects non-finite
/// parts by component name.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<LossBreakdown> {
    const NAMES: [&str; 8] = [
        "aspect",
        "severity",
        "lb",
        "val",
        "sas",
        "alignment",
        "dominance",
        "complementarity",
    ];
    for (name, &p) in NAMES.iter().zip(parts) {
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {p}")));
        }
    }
    let [aspect, severity, lb, val, sas, alignment, dominance, complementarity] = *parts;
    let total = aspect
        + severity
        + cfg.lambda_lb * lb
        + cfg.lambda_val * val
        + cfg.lambda_sas * sas
        + cfg.lambda_align * alignment
        + cfg.lambda_dom * dominance
        + cfg.lambda_comp * complementarity;
    Ok(LossBreakdown {
        aspect,
        severity,
        lb,
        val,
        sas,
        alignment,
        dominance,
        complementarity,
        total,
    })
}

/// Build the full training loss over one forward batch. Returns the scalar
/// node plus the plain breakdown snapshot.
pub fn batch_loss_node(
    g: &mut Graph,
    fwd: &BatchForward,
    batch: &[PreparedSample],
    cfg: &LossConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let b = batch.len() as f64;
    let mut aspect_terms = Vec::with_capacity(batch.len());
    let mut severity_terms = Vec::with_capacity(batch.len());
    let mut val_terms = Vec::with_capacity(batch.len());
    let mut sas_terms = Vec::with_capacity(batch.len());
    for (s, nodes) in batch.iter().zip(&fwd.samples) {
        match cfg.loss_mode {
            LossMode::PerPairCe => {
                aspect_terms.push(soft_ce_node(g, nodes.final_aspect, &s.aspect_target, cfg.epsilon_ls));
                severity_terms.push(soft_ce_node(
                    g,
                    nodes.final_severity,
                    &s.severity_target,
                    cfg.epsilon_ls,
                ));
            }
            LossMode::MultiLabelBce => {
                aspect_terms.push(bce_node(g, nodes.final_aspect, &s.aspect_target));
                severity_terms.push(bce_node(g, nodes.final_severity, &s.severity_target));
            }
        }
        let va = soft_ce_node(g, nodes.val_aspect, &s.aspect_target, cfg.epsilon_ls);
        let vs = soft_ce_node(g, nodes.val_severity, &s.severity_target, cfg.epsilon_ls);
        val_terms.push(g.add(va, vs));
        sas_terms.push(hinge_below_node(g, nodes.sas, cfg.margin));
    }

    let mean = |g: &mut Graph, terms: &[NodeId]| {
        let row = g.concat_cols(terms);
        g.mean_all(row)
    };
    let l_aspect = mean(g, &aspect_terms);
    let l_severity = mean(g, &severity_terms);
    let l_val = mean(g, &val_terms);
    let l_sas = mean(g, &sas_terms);
    let l_align = hinge_above_node(g, fwd.r_avg, cfg.tau_align);
    let l_dom = hinge_below_node(g, fwd.dominance_aspect, cfg.tau_dom);
    let l_comp = hinge_below_node(g, fwd.u_avg, cfg.tau_comp);

    let parts: LossParts = [
        g.value(l_aspect).item(),
        g.value(l_severity).item(),
        g.value(fwd.load_balance).item(),
        g.value(l_val).item(),
        g.value(l_sas).item(),
        g.value(l_align).item(),
        g.value(l_dom).item(),
        g.value(l_comp).item(),
    ];
    let breakdown = total_loss(&parts, cfg)?;

    let mut total = g.add(l_aspect, l_severity);
    for (node, w) in [
        (fwd.load_balance, cfg.lambda_lb),
        (l_val, cfg.lambda_val),
        (l_sas, cfg.lambda_sas),
        (l_align, cfg.lambda_align),
        (l_dom, cfg.lambda_dom),
        (l_comp, cfg.lambda_comp),
    ] {
        let scaled = g.scale(node, w);
        total = g.add(total, scaled);
    }
    debug_assert!((g.value(total).item() - breakdown.total).abs() < 1e-9 * (1.0 + b));
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mixup_alpha: f64,
    pub cutmix_prob: f64,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub aspect_ratio: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            mixup_alpha: 0.2,
            cutmix_prob: 0.5,
            erase_prob: 0.3,
            erase_area: (0.02, 0.4),
            aspect_ratio: (0.3, 3.3),
        }
    }
}

fn mix_targets(a: &mut [f64], b: &[f64], lam: f64) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = lam * *x + (1.0 - lam) * y;
    }
}

/// Pick a rectangle of roughly `area_frac` of the image with the given
/// aspect ratio, clamped inside; returns (y, x, h, w).
fn sample_rect(
    side: usize,
    area_frac: f64,
    ratio: f64,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = area_frac * (side * side) as f64;
    let h = ((area / ratio).sqrt().round() as usize).clamp(1, side);
    let w = ((area * ratio).sqrt().round() as usize).clamp(1, side);
    let y = rng.gen_range(0..=side - h);
    let x = rng.gen_range(0..=side - w);
    (y, x, h, w)
}

/// In-place MixUp / CutMix / random-erase over images and soft label
/// targets. Text is untouched; labels follow the image mixes.
pub fn augment(
    images: &mut [Image],
    aspect_targets: &mut [Vec<f64>],
    severity_targets: &mut [Vec<f64>],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) {
    let n = images.len();
    if n == 0 || !cfg.enabled {
        return;
    }
    let originals: Vec<Image> = images.to_vec();
    let orig_aspect: Vec<Vec<f64>> = aspect_targets.to_vec();
    let orig_severity: Vec<Vec<f64>> = severity_targets.to_vec();
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).expect("valid beta");
    for i in 0..n {
        let j = rng.gen_range(0..n);
        // MixUp; text cannot be mixed, so keep the original sample dominant
        // (Beta(a, a) is symmetric, making this a choice of operand order).
        let lam: f64 = beta.sample(rng);
        let lam = lam.max(1.0 - lam);
        for (x, &y) in images[i].data.iter_mut().zip(&originals[j].data) {
            *x = lam * *x + (1.0 - lam) * y;
        }
        mix_targets(&mut aspect_targets[i], &orig_aspect[j], lam);
        mix_targets(&mut severity_targets[i], &orig_severity[j], lam);
        // CutMix
        if rng.gen_range(0.0..1.0) < cfg.cutmix_prob {
            let k = rng.gen_range(0..n);
            // cut area drawn from the same partial-occlusion range as random
            // erasing, so the original label always stays dominant
            let frac = rng.gen_range(cfg.erase_area.0..cfg.erase_area.1);
            let ratio = rng.gen_range(cfg.aspect_ratio.0..cfg.aspect_ratio.1);
            let side = images[i].side;
            let (y0, x0, h, w) = sample_rect(side, frac, ratio, rng);
            for c in 0..3 {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let v = originals[k].at(c, y, x);
                        *images[i].at_mut(c, y, x) = v;
                    }
                }
            }
            let pasted = (h * w) as f64 / (side * side) as f64;
            mix_targets(&mut aspect_targets[i], &orig_aspect[k], 1.0 - pasted);
            mix_targets(&mut severity_targets[i], &orig_severity[k], 1.0 - pasted);
        }
        // random erase: labels unchanged
        if rng.gen_range(0.0..1.0) < cfg.erase_prob {
            let frac = rng.gen_range(cfg.erase_area.0..cfg.erase_area.1);
            let ratio = rng.gen_range(cfg.aspect_ratio.0..cfg.aspect_ratio.1);
            let side = images[i].side;
            let (y0, x0, h, w) = sample_rect(side, frac, ratio, rng);
            for c in 0..3 {
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        *images[i].at_mut(c, y, x) = rng.gen_range(0.0..1.0);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// schedule and optimizer

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub warmup: usize,
    /// Steps in the first cosine cycle.
    pub t0: usize,
    pub t_mult: f64,
}

/// Linear warmup to eta_max, then cosine annealing with period-doubling
/// warm restarts; a restart boundary sits at eta_max (T_cur = 0).
pub fn lr_schedule(step: usize, cfg: &SchedConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.eta_max * step as f64 / cfg.warmup as f64;
    }
    let mut t = (step - cfg.warmup) as f64;
    let mut t_i = cfg.t0 as f64;
    while t >= t_i {
        t -= t_i;
        t_i *= cfg.t_mult;
    }
    cfg.eta_min + (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * t / t_i).cos()) / 2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

pub struct AdamW {
    cfg: OptimConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let m = store
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// Clip the concatenated gradient to the configured global L2 norm,
    /// then apply one decoupled-weight-decay Adam step.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &mut [Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        let mut norm2 = 0.0;
        for gr in grads.iter().flatten() {
            if !gr.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            norm2 += gr.data.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = norm2.sqrt();
        let scale = if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, gr) in grads.iter().enumerate() {
            let Some(gr) = gr else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.get_mut(crate::params::P(i));
            for k in 0..gr.data.len() {
                let gk = gr.data[k] * scale;
                m.data[k] = self.cfg.beta1 * m.data[k] + (1.0 - self.cfg.beta1) * gk;
                v.data[k] = self.cfg.beta2 * v.data[k] + (1.0 - self.cfg.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                theta.data[k] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * theta.data[k]);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub warmup: usize,
    /// First cosine period in steps; None = steps in 10 epochs.
    pub t0: Option<usize>,
    pub t_mult: f64,
    pub eta_min: f64,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Main-text hyperparameters.
    pub fn main_text() -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs: 20,
            batch_size: 16,
            patience: 5,
            dropout: 0.5,
            seed: 42,
            warmup: 500,
            t0: None,
            t_mult: 2.0,
            eta_min: 1e-6,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }

    /// Appendix hyperparameters; the desk-scale default.
    pub fn appendix() -> Self {
        TrainConfig {
            lr: 5e-4,
            epochs: 50,
            patience: 15,
            dropout: 0.1,
            ..Self::main_text()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::appendix()
    }
}

/// One row of the history file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub report: ValidationReport,
    pub step_lrs: Vec<f64>,
    pub train_acc_aspect: f64,
    pub train_acc_severity: f64,
    pub val_acc_aspect: f64,
    pub val_acc_severity: f64,
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Hard-routing selection counts per expert accumulated over the whole
    /// training run (every step of every epoch).
    pub expert_selections: Vec<usize>,
}

/// A training instance that still owns its raw image, so augmentation can
/// run before patchification each epoch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub text: String,
    pub image: Option<Image>,
    pub aspect: usize,
    pub severity: usize,
}

fn accuracy_counts(
    g: &Graph,
    fwd: &BatchForward,
    batch: &[(usize, usize)],
) -> (usize, usize) {
    let mut a_ok = 0;
    let mut s_ok = 0;
    for (nodes, &(gold_a, gold_s)) in fwd.samples.iter().zip(batch) {
        if crate::metafuse::predict(&g.value(nodes.final_aspect).data) == gold_a {
            a_ok += 1;
        }
        if crate::metafuse::predict(&g.value(nodes.final_severity).data) == gold_s {
            s_ok += 1;
        }
    }
    (a_ok, s_ok)
}

/// Forward a whole split in eval mode and return (loss breakdown, accuracy
/// per task, per-sample hard expert selections).
pub fn evaluate_split(
    store: &ParamStore,
    mp: &ModelParams,
    samples: &[TrainSample],
    tokenizer: &crate::encode::Tokenizer,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64, f64, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluate over an empty split".into()));
    }
    let mut parts_acc = [0.0; 8];
    let mut batches = 0usize;
    let mut a_ok = 0usize;
    let mut s_ok = 0usize;
    let mut selections = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size) {
        let prepared: Vec<PreparedSample> = chunk
            .iter()
            .map(|s| {
                crate::model::prepare_sample(
                    tokenizer,
                    &mp.cfg,
                    &s.text,
                    s.image.as_ref(),
                    s.aspect,
                    s.severity,
                )
            })
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let leaves = crate::encode::const_leaves(&mut g, store);
        let fwd = forward_batch(&mut g, &leaves, mp, &prepared, None)?;
        let (_, breakdown) = batch_loss_node(&mut g, &fwd, &prepared, &cfg.loss)?;
        for (acc, part) in parts_acc.iter_mut().zip([
            breakdown.aspect,
            breakdown.severity,
            breakdown.lb,
            breakdown.val,
            breakdown.sas,
            breakdown.alignment,
            breakdown.dominance,
            breakdown.complementarity,
        ]) {
            *acc += part;
        }
        batches += 1;
        let golds: Vec<(usize, usize)> = chunk.iter().map(|s| (s.aspect, s.severity)).collect();
        let (a, s) = accuracy_counts(&g, &fwd, &golds);
        a_ok += a;
        s_ok += s;
        selections.extend(fwd.samples.iter().map(|n| n.routing.selected));
    }
    for p in parts_acc.iter_mut() {
        *p /= batches as f64;
    }
    let breakdown = total_loss(&parts_acc, &cfg.loss)?;
    let n = samples.len() as f64;
    Ok((breakdown, a_ok as f64 / n, s_ok as f64 / n, selections))
}

/// Full training loop: augmented batches, AdamW with global-norm clipping,
/// the warm-restart schedule, per-epoch validation, early stopping on
/// validation loss, best parameters restored into `store` on return.
pub fn train(
    store: &mut ParamStore,
    mp: &ModelParams,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train/val splits must be non-empty".into()));
    }
    let tokenizer = crate::encode::Tokenizer::new(&mp.cfg.encoder);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let sched = SchedConfig {
        eta_max: cfg.lr,
        eta_min: cfg.eta_min,
        warmup: cfg.warmup,
        t0: cfg.t0.unwrap_or(10 * steps_per_epoch),
        t_mult: cfg.t_mult,
    };
    let mut router_rng = substream(cfg.seed, streams::ROUTER_NOISE);
    let mut dropout_rng = substream(cfg.seed, streams::DROPOUT);
    let mut augment_rng = substream(cfg.seed, streams::AUGMENT);
    let mut shuffle_rng = substream(cfg.seed, streams::SHUFFLE);

    let mut opt = AdamW::new(store, cfg.optim.clone());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Tensor> = store.values().to_vec();
    let mut bad_epochs = 0usize;
    let mut step = 0usize;
    let mut run_selections = vec![0usize; mp.cfg.num_experts];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut step_lrs = Vec::with_capacity(steps_per_epoch);
        let mut epoch_selections = vec![0usize; mp.cfg.num_experts];

        for chunk in order.chunks(cfg.batch_size) {
            // augment raw images and soft targets, then prepare
            let mut images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    train_set[i]
                        .image
                        .clone()
                        .unwrap_or_else(|| Image::zeros(mp.cfg.encoder.image_side))
                })
                .collect();
            let mut a_targets: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| {
                    let mut t = vec![0.0; mp.cfg.num_aspects];
                    t[train_set[i].aspect] = 1.0;
                    t
                })
                .collect();
            let mut s_targets: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| {
                    let mut t = vec![0.0; mp.cfg.num_severities];
                    t[train_set[i].severity] = 1.0;
                    t
                })
                .collect();
            augment(
                &mut images,
                &mut a_targets,
                &mut s_targets,
                &cfg.augment,
                &mut augment_rng,
            );
            let prepared: Vec<PreparedSample> = chunk
                .iter()
                .enumerate()
                .map(|(pos, &i)| {
                    crate::model::prepare_from_parts(
                        &tokenizer,
                        &mp.cfg,
                        &train_set[i].text,
                        Some(&images[pos]),
                        a_targets[pos].clone(),
                        s_targets[pos].clone(),
                    )
                })
                .collect::<Result<_>>()?;

            let mut g = Graph::new();
            let leaves = param_leaves(&mut g, store);
            let noise = draw_train_noise(
                &mp.cfg,
                prepared.len(),
                cfg.dropout,
                &mut router_rng,
                &mut dropout_rng,
            );
            let fwd = forward_batch(&mut g, &leaves, mp, &prepared, Some(&noise))?;
            for nodes in &fwd.samples {
                epoch_selections[nodes.routing.selected] += 1;
            }
            let (loss, breakdown) = batch_loss_node(&mut g, &fwd, &prepared, &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "total loss at epoch {epoch} step {step}"
                )));
            }
            let node_grads = g.backward(loss);
            let mut grads: Vec<Option<Tensor>> = leaves
                .iter()
                .map(|&l| node_grads[l.0].clone())
                .collect();
            let lr = lr_schedule(step, &sched);
            step_lrs.push(lr);
            opt.apply(store, &mut grads, lr)?;
            store.check_finite()?;
            step += 1;
        }
        for (total, n) in run_selections.iter_mut().zip(&epoch_selections) {
            *total += n;
        }

        let (train_loss, tr_a, tr_s, _) =
            evaluate_split(store, mp, train_set, &tokenizer, cfg)?;
        let (val_loss, va_a, va_s, _) = evaluate_split(store, mp, val_set, &tokenizer, cfg)?;
        // diagnostics snapshot from a clean pass over the first train batch
        let report = {
            let prepared: Vec<PreparedSample> = train_set
                .iter()
                .take(cfg.batch_size)
                .map(|s| {
                    crate::model::prepare_sample(
                        &tokenizer,
                        &mp.cfg,
                        &s.text,
                        s.image.as_ref(),
                        s.aspect,
                        s.severity,
                    )
                })
                .collect::<Result<_>>()?;
            let mut g = Graph::new();
            let leaves = crate::encode::const_leaves(&mut g, store);
            forward_batch(&mut g, &leaves, mp, &prepared, None)?.report
        };
        let val_total = val_loss.total;
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
            report,
            step_lrs,
            train_acc_aspect: tr_a,
            train_acc_severity: tr_s,
            val_acc_aspect: va_a,
            val_acc_severity: va_s,
        });

        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            best_params = store.values().to_vec();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    for (slot, best) in store.values_mut().iter_mut().zip(best_params) {
        *slot = best;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        expert_selections: run_selections,
    })
}

// ---------------------------------------------------------------------------
// gradient-check registry

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const GRAD_CHECK_OPS: [&str; 6] =
    ["quadratic", "sas", "fusion", "expert", "validation", "metafuse"];

/// Finite-difference check of a named subsystem on random probes.
pub fn grad_check(op: &str, probes: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradcheck");
    let mut store = ParamStore::new();
    let mut init_rng = substream(seed, streams::INIT);
    let mut builder = crate::params::ParamBuilder::new(&mut store, &mut init_rng);
    let rand_row = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        Tensor::row_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let err = match op {
        "quadratic" => {
            let x = rand_row(&mut rng, 6);
            crate::graph::finite_diff_check(
                |g, ins| {
                    let sq = g.mul(ins[0], ins[0]);
                    g.sum_all(sq)
                },
                &[x],
                1e-5,
            )
        }
        "sas" => {
            let p = crate::fuse::SasParams::new(&mut builder, "sas", 8, 6);
            let a = rand_row(&mut rng, 8);
            let b = rand_row(&mut rng, 8);
            crate::graph::finite_diff_check_probes(
                |g, ins| {
                    let leaves = crate::encode::const_leaves(g, &store);
                    crate::fuse::semantic_alignment_score(g, &leaves, &p, ins[0], ins[1])
                },
                &[a, b],
                1e-5,
                probes,
                &mut rng,
            )
        }
        "fusion" => {
            let p = crate::fuse::FusionParams::new(&mut builder, "fuse", 8, 2, 1)?;
            let ht = Tensor::from_vec(3, 8, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let hi = Tensor::from_vec(2, 8, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            crate::graph::finite_diff_check_probes(
                |g, ins| {
                    let leaves = crate::encode::const_leaves(g, &store);
                    let x = crate::fuse::cross_modal_attention(
                        g,
                        &leaves,
                        &p,
                        ins[0],
                        ins[1],
                        &[true, true, false],
                    );
                    g.sum_all(x)
                },
                &[ht, hi],
                1e-5,
                probes,
                &mut rng,
            )
        }
        "expert" => {
            let p = crate::experts::ExpertBankParams::new(&mut builder, "bank", 2, 6, 8, 4, 3, 10, 1);
            let x = rand_row(&mut rng, 6);
            crate::graph::finite_diff_check_probes(
                |g, ins| {
                    let leaves = crate::encode::const_leaves(g, &store);
                    let (la, ls, _h) = crate::experts::expert_forward_node(g, &leaves, &p, 0, ins[0]);
                    let a = g.sum_all(la);
                    let b = g.sum_all(ls);
                    g.add(a, b)
                },
                &[x],
                1e-5,
                probes,
                &mut rng,
            )
        }
        "validation" => {
            let p = crate::validate::ValidationParams::new(&mut builder, "val", 6, 8, 6, 4, 1);
            let x = rand_row(&mut rng, 6);
            crate::graph::finite_diff_check_probes(
                |g, ins| {
                    let leaves = crate::encode::const_leaves(g, &store);
                    let out = crate::validate::validation_forward_node(g, &leaves, &p, ins[0]);
                    let a = g.sum_all(out.aspect_logits);
                    let b = g.sum_all(out.severity_logits);
                    g.add(a, b)
                },
                &[x],
                1e-5,
                probes,
                &mut rng,
            )
        }
        "metafuse" => {
            let p = crate::metafuse::MetaFusionParams::new(&mut builder, "meta", 6, 4, 12, 8);
            let f = rand_row(&mut rng, crate::metafuse::meta_feature_len(6));
            crate::graph::finite_diff_check_probes(
                |g, ins| {
                    let leaves = crate::encode::const_leaves(g, &store);
                    let l = crate::metafuse::meta_fuse(
                        g,
                        &leaves,
                        &p,
                        crate::metafuse::Task::Aspect,
                        ins[0],
                        None,
                    );
                    g.sum_all(l)
                },
                &[f],
                1e-5,
                probes,
                &mut rng,
            )
        }
        other => {
            return Err(Error::Config(format!(
                "unknown grad-check op '{other}'; known: {GRAD_CHECK_OPS:?}"
            )))
        }
    };
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err: err,
        tolerance: tol,
        pass: err < tol,
    })
}
