//! Run configuration: a flat `section.key = value` file format plus named
//! presets. Every tunable constant in the pipeline appears here exactly once;
//! unknown keys are rejected with the offending line.

use crate::datagen::GenSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{LossMode, TrainConfig};
use crate::pairing::PairingConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenSpec,
    pub pairing: PairingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::appendix(),
            gen: GenSpec::default(),
            pairing: PairingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Named bundles: `desk`/`paper` set model dimensions, `main-text`/
    /// `appendix` set training hyperparameters. They compose; the default is
    /// desk dims with appendix training.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => self.model = ModelConfig::desk(),
            "paper" => self.model = ModelConfig::paper(),
            "main-text" => self.train = TrainConfig::main_text(),
            "appendix" => self.train = TrainConfig::appendix(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (desk, paper, main-text, appendix)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pairing.normalized_weights()?;
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse value '{raw}'")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key '{key}': expected true/false, got '{other}'"
        ))),
    }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| parse_num(key, p))
        .collect()
}

/// Apply one `key = value` assignment; unknown keys are errors.
pub fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "preset" => cfg.apply_preset(v)?,
        "seed" => {
            let s: u64 = parse_num(key, v)?;
            cfg.train.seed = s;
            cfg.gen.seed = s;
        }

        "encoder.d" => cfg.model.encoder.d = parse_num(key, v)?,
        "encoder.layers" => cfg.model.encoder.layers = parse_num(key, v)?,
        "encoder.heads" => cfg.model.encoder.heads = parse_num(key, v)?,
        "encoder.max_tokens" => cfg.model.encoder.max_tokens = parse_num(key, v)?,
        "encoder.vocab" => cfg.model.encoder.vocab = parse_num(key, v)?,
        "encoder.patch" => cfg.model.encoder.patch = parse_num(key, v)?,
        "encoder.image_side" => cfg.model.encoder.image_side = parse_num(key, v)?,

        "model.d_t" => cfg.model.d_t = parse_num(key, v)?,
        "model.d_s" => cfg.model.d_s = parse_num(key, v)?,
        "model.num_experts" => cfg.model.num_experts = parse_num(key, v)?,
        "model.fusion_depth" => cfg.model.fusion_depth = parse_num(key, v)?,
        "model.stub_blocks" => cfg.model.stub_blocks = parse_num(key, v)?,
        "model.meta_hidden1" => cfg.model.meta_hidden.0 = parse_num(key, v)?,
        "model.meta_hidden2" => cfg.model.meta_hidden.1 = parse_num(key, v)?,
        "model.trace_vocab" => cfg.model.trace_vocab = parse_num(key, v)?,
        "model.top_k_route" => cfg.model.top_k_route = parse_num(key, v)?,
        "model.sas_weight" => cfg.model.sas_weight = parse_num(key, v)?,

        "data.total" => cfg.gen.total = parse_num(key, v)?,
        "data.aspect_histogram" => cfg.gen.aspect_histogram = parse_list(key, v)?,
        "data.severity_histogram" => cfg.gen.severity_histogram = parse_list(key, v)?,
        "data.multi_label_rate" => cfg.gen.multi_label_rate = parse_num(key, v)?,
        "data.image_fraction" => cfg.gen.image_fraction = parse_num(key, v)?,
        "data.vocab_size" => cfg.gen.vocab_size = parse_num(key, v)?,
        "data.image_side" => cfg.gen.image_side = parse_num(key, v)?,

        "train.lr" => cfg.train.lr = parse_num(key, v)?,
        "train.epochs" => cfg.train.epochs = parse_num(key, v)?,
        "train.batch_size" => cfg.train.batch_size = parse_num(key, v)?,
        "train.patience" => cfg.train.patience = parse_num(key, v)?,
        "train.dropout" => cfg.train.dropout = parse_num(key, v)?,
        "train.warmup" => cfg.train.warmup = parse_num(key, v)?,
        "train.t0" => cfg.train.t0 = Some(parse_num(key, v)?),
        "train.t_mult" => cfg.train.t_mult = parse_num(key, v)?,
        "train.eta_min" => cfg.train.eta_min = parse_num(key, v)?,

        "optim.beta1" => cfg.train.optim.beta1 = parse_num(key, v)?,
        "optim.beta2" => cfg.train.optim.beta2 = parse_num(key, v)?,
        "optim.eps" => cfg.train.optim.eps = parse_num(key, v)?,
        "optim.weight_decay" => cfg.train.optim.weight_decay = parse_num(key, v)?,
        "optim.clip_norm" => cfg.train.optim.clip_norm = parse_num(key, v)?,

        "loss.epsilon_ls" => cfg.train.loss.epsilon_ls = parse_num(key, v)?,
        "loss.margin" => cfg.train.loss.margin = parse_num(key, v)?,
        "loss.tau_align" => cfg.train.loss.tau_align = parse_num(key, v)?,
        "loss.tau_dom" => cfg.train.loss.tau_dom = parse_num(key, v)?,
        "loss.tau_comp" => cfg.train.loss.tau_comp = parse_num(key, v)?,
        "loss.lambda_lb" => cfg.train.loss.lambda_lb = parse_num(key, v)?,
        "loss.lambda_val" => cfg.train.loss.lambda_val = parse_num(key, v)?,
        "loss.lambda_sas" => cfg.train.loss.lambda_sas = parse_num(key, v)?,
        "loss.lambda_align" => cfg.train.loss.lambda_align = parse_num(key, v)?,
        "loss.lambda_dom" => cfg.train.loss.lambda_dom = parse_num(key, v)?,
        "loss.lambda_comp" => cfg.train.loss.lambda_comp = parse_num(key, v)?,
        "loss.mode" => {
            cfg.train.loss.loss_mode = match v {
                "per-pair-ce" => LossMode::PerPairCe,
                "multi-label-bce" => LossMode::MultiLabelBce,
                other => {
                    return Err(Error::Config(format!(
                        "key 'loss.mode': unknown mode '{other}' (per-pair-ce, multi-label-bce)"
                    )))
                }
            }
        }

        "augment.enabled" => cfg.train.augment.enabled = parse_bool(key, v)?,
        "augment.mixup_alpha" => cfg.train.augment.mixup_alpha = parse_num(key, v)?,
        "augment.cutmix_prob" => cfg.train.augment.cutmix_prob = parse_num(key, v)?,
        "augment.erase_prob" => cfg.train.augment.erase_prob = parse_num(key, v)?,
        "augment.erase_area_min" => cfg.train.augment.erase_area.0 = parse_num(key, v)?,
        "augment.erase_area_max" => cfg.train.augment.erase_area.1 = parse_num(key, v)?,
        "augment.aspect_ratio_min" => cfg.train.augment.aspect_ratio.0 = parse_num(key, v)?,
        "augment.aspect_ratio_max" => cfg.train.augment.aspect_ratio.1 = parse_num(key, v)?,

        "pairing.w_text" => cfg.pairing.w_text = parse_num(key, v)?,
        "pairing.w_aspect" => cfg.pairing.w_aspect = parse_num(key, v)?,
        "pairing.w_severity" => cfg.pairing.w_severity = parse_num(key, v)?,
        "pairing.theta_text" => cfg.pairing.theta_text = parse_num(key, v)?,
        "pairing.theta_aspect" => cfg.pairing.theta_aspect = parse_num(key, v)?,
        "pairing.theta_severity" => cfg.pairing.theta_severity = parse_num(key, v)?,
        "pairing.theta_global" => cfg.pairing.theta_global = parse_num(key, v)?,

        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Parse a flat key=value file. `#` starts a comment; blank lines are
/// skipped; later assignments override earlier ones.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        set_key(&mut cfg, key.trim(), value)
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// A complete annotated example listing every key with its default.
pub fn example_config() -> String {
    render_config(&RunConfig::default())
}

/// Render a configuration in the same annotated key=value format the parser
/// reads; `parse_config(render_config(c))` reproduces `c`.
pub fn render_config(d: &RunConfig) -> String {
    let t0_line = match d.train.t0 {
        Some(t0) => format!("train.t0 = {t0}              # first cosine period in steps"),
        None => "# train.t0 = 100               # first cosine period (default: 10 epochs)".into(),
    };
    let mode = match d.train.loss.loss_mode {
        LossMode::PerPairCe => "per-pair-ce",
        LossMode::MultiLabelBce => "multi-label-bce",
    };
    format!(
        r#"# Run configuration — flat key = value, '#' comments.
# Presets compose: desk/paper pick model dimensions, main-text/appendix pick
# training hyperparameters. Later lines override earlier ones.
seed = {seed}                    # master seed; all randomness derives from it

# ---- encoders ----
encoder.d = {ed}                 # transformer hidden size
encoder.layers = {el}
encoder.heads = {eh}
encoder.max_tokens = {em}        # text length after pad/truncate
encoder.vocab = {ev}
encoder.patch = {ep}             # image patch side
encoder.image_side = {ei}        # image side; (side/patch)^2 patches

# ---- model ----
model.d_t = {dt}                 # expert working width
model.d_s = {ds}                 # alignment-branch width
model.num_experts = {ne}
model.fusion_depth = {fd}        # cross-modal fusion blocks
model.stub_blocks = {sb}         # residual blocks inside each expert
model.meta_hidden1 = {m1}        # meta-fusion MLP hidden sizes
model.meta_hidden2 = {m2}
model.trace_vocab = {tv}         # reasoning-trace token vocabulary
model.top_k_route = {tk}         # experts mixed into primary logits (1 = hard)
model.sas_weight = {sw}          # uniform logit-shift weight

# ---- data generation ----
data.total = {total}
data.aspect_histogram = {ah}
data.severity_histogram = {sh}
data.multi_label_rate = {mlr}
data.image_fraction = {imf}      # fraction of conversations with an image
data.vocab_size = {dv}
data.image_side = {dis}

# ---- training ----
train.lr = {lr}
train.epochs = {epochs}
train.batch_size = {bs}
train.patience = {pat}           # early-stop patience in epochs
train.dropout = {dr}
train.warmup = {wu}              # linear warmup steps
{t0_line}
train.t_mult = {tm}              # restart period multiplier
train.eta_min = {emn}

# ---- optimizer ----
optim.beta1 = {b1}
optim.beta2 = {b2}
optim.eps = {oe}
optim.weight_decay = {wd}
optim.clip_norm = {cn}           # global gradient-norm clip

# ---- loss ----
loss.epsilon_ls = {els}          # label smoothing
loss.margin = {mg}               # alignment-score margin
loss.tau_align = {ta}
loss.tau_dom = {td}
loss.tau_comp = {tc}
loss.lambda_lb = {llb}           # load-balance weight
loss.lambda_val = {lv}
loss.lambda_sas = {lsas}
loss.lambda_align = {la}
loss.lambda_dom = {ld}
loss.lambda_comp = {lc}
loss.mode = {mode}               # per-pair-ce or multi-label-bce

# ---- augmentation ----
augment.enabled = {ae}
augment.mixup_alpha = {ma}
augment.cutmix_prob = {cp}
augment.erase_prob = {ep2}
augment.erase_area_min = {ea0}
augment.erase_area_max = {ea1}
augment.aspect_ratio_min = {ar0}
augment.aspect_ratio_max = {ar1}

# ---- image pairing ----
pairing.w_text = {pwt}           # facet weights, normalized before use
pairing.w_aspect = {pwa}
pairing.w_severity = {pws}
pairing.theta_text = {ptt}       # per-facet candidate thresholds
pairing.theta_aspect = {pta}
pairing.theta_severity = {pts}
pairing.theta_global = {ptg}     # combined-score assignment threshold
"#,
        seed = d.train.seed,
        ed = d.model.encoder.d,
        el = d.model.encoder.layers,
        eh = d.model.encoder.heads,
        em = d.model.encoder.max_tokens,
        ev = d.model.encoder.vocab,
        ep = d.model.encoder.patch,
        ei = d.model.encoder.image_side,
        dt = d.model.d_t,
        ds = d.model.d_s,
        ne = d.model.num_experts,
        fd = d.model.fusion_depth,
        sb = d.model.stub_blocks,
        m1 = d.model.meta_hidden.0,
        m2 = d.model.meta_hidden.1,
        tv = d.model.trace_vocab,
        tk = d.model.top_k_route,
        sw = d.model.sas_weight,
        total = d.gen.total,
        ah = d.gen.aspect_histogram.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        sh = d.gen.severity_histogram.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        mlr = d.gen.multi_label_rate,
        imf = d.gen.image_fraction,
        dv = d.gen.vocab_size,
        dis = d.gen.image_side,
        lr = d.train.lr,
        epochs = d.train.epochs,
        bs = d.train.batch_size,
        pat = d.train.patience,
        dr = d.train.dropout,
        wu = d.train.warmup,
        tm = d.train.t_mult,
        emn = d.train.eta_min,
        b1 = d.train.optim.beta1,
        b2 = d.train.optim.beta2,
        oe = d.train.optim.eps,
        wd = d.train.optim.weight_decay,
        cn = d.train.optim.clip_norm,
        els = d.train.loss.epsilon_ls,
        mg = d.train.loss.margin,
        ta = d.train.loss.tau_align,
        td = d.train.loss.tau_dom,
        tc = d.train.loss.tau_comp,
        llb = d.train.loss.lambda_lb,
        lv = d.train.loss.lambda_val,
        lsas = d.train.loss.lambda_sas,
        la = d.train.loss.lambda_align,
        ld = d.train.loss.lambda_dom,
        lc = d.train.loss.lambda_comp,
        ae = d.train.augment.enabled,
        ma = d.train.augment.mixup_alpha,
        cp = d.train.augment.cutmix_prob,
        ep2 = d.train.augment.erase_prob,
        ea0 = d.train.augment.erase_area.0,
        ea1 = d.train.augment.erase_area.1,
        ar0 = d.train.augment.aspect_ratio.0,
        ar1 = d.train.augment.aspect_ratio.1,
        pwt = d.pairing.w_text,
        pwa = d.pairing.w_aspect,
        pws = d.pairing.w_severity,
        ptt = d.pairing.theta_text,
        pta = d.pairing.theta_aspect,
        pts = d.pairing.theta_severity,
        ptg = d.pairing.theta_global,
        t0_line = t0_line,
        mode = mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_round_trips_to_defaults() {
        let cfg = parse_config(&example_config()).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.model.d_t, d.model.d_t);
        assert_eq!(cfg.train.lr, d.train.lr);
        assert_eq!(cfg.train.loss.lambda_lb, d.train.loss.lambda_lb);
        assert_eq!(cfg.gen.aspect_histogram, d.gen.aspect_histogram);
        assert_eq!(cfg.pairing.theta_global, d.pairing.theta_global);
    }

    #[test]
    fn render_round_trips_non_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("main-text").unwrap();
        cfg.train.t0 = Some(77);
        cfg.train.loss.loss_mode = LossMode::MultiLabelBce;
        cfg.model.num_experts = 6;
        let back = parse_config(&render_config(&cfg)).unwrap();
        assert_eq!(back.train.lr, cfg.train.lr);
        assert_eq!(back.train.t0, Some(77));
        assert_eq!(back.model.num_experts, 6);
        assert!(matches!(back.train.loss.loss_mode, LossMode::MultiLabelBce));
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = parse_config("model.d_t = 32\nbogus.key = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("bogus.key"), "{err}");
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg = parse_config(
            "# comment\n\ntrain.lr = 0.1  # inline\ntrain.lr = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.2);
    }

    #[test]
    fn presets_compose() {
        let cfg = parse_config("preset = paper\npreset = main-text\n").unwrap();
        assert_eq!(cfg.model.encoder.d, 768);
        let mt = TrainConfig::main_text();
        assert_eq!(cfg.train.lr, mt.lr);
        assert!(parse_config("preset = nope\n").is_err());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_config("just words\n").is_err());
        assert!(parse_config("train.lr = abc\n").is_err());
        assert!(parse_config("augment.enabled = yes\n").is_err());
        assert!(parse_config("loss.mode = sigmoid\n").is_err());
    }

    #[test]
    fn seed_sets_both_streams() {
        let cfg = parse_config("seed = 7\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.gen.seed, 7);
    }

    #[test]
    fn histograms_parse_as_lists() {
        let cfg = parse_config("data.aspect_histogram = 1,2,3,4,5,6\n").unwrap();
        assert_eq!(cfg.gen.aspect_histogram, vec![1, 2, 3, 4, 5, 6]);
    }
}
