//! Text and image encoders: tokenization, patching, and pre-norm transformer
//! stacks yielding token/patch matrices plus CLS vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Image, ASPECT_KEYWORDS, SEVERITY_KEYWORDS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, P};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub vocab: usize,
    pub patch: usize,
    pub image_side: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 8,
            max_tokens: 32,
            vocab: 1000,
            patch: 8,
            image_side: 32,
        }
    }

    pub fn paper() -> Self {
        EncoderConfig {
            d: 768,
            layers: 12,
            heads: 12,
            max_tokens: 512,
            vocab: 30522,
            patch: 16,
            image_side: 224,
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Desk => Self::desk(),
            ScalePreset::Paper => Self::paper(),
        }
    }

    pub fn patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.vocab < 13 {
            return Err(Error::Config("vocabulary too small for class keywords".into()));
        }
        Ok(())
    }
}

/// Fixed synthetic vocabulary: pad/cls/unk, the class keywords, then filler.
pub fn vocabulary(size: usize) -> Vec<String> {
    let mut v: Vec<String> = vec!["<pad>".into(), "<cls>".into(), "<unk>".into()];
    v.extend(ASPECT_KEYWORDS.iter().map(|s| s.to_string()));
    v.extend(SEVERITY_KEYWORDS.iter().map(|s| s.to_string()));
    let mut i = 0usize;
    while v.len() < size {
        v.push(format!("tok{i}"));
        i += 1;
    }
    v.truncate(size);
    v
}

#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    map: BTreeMap<String, usize>,
    pub max_tokens: usize,
}

impl Tokenizer {
    pub fn new(config: &EncoderConfig) -> Self {
        let map = vocabulary(config.vocab)
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w, i))
            .collect();
        Tokenizer {
            map,
            max_tokens: config.max_tokens,
        }
    }

    /// Whitespace tokenization to exactly `max_tokens` ids; position 0 is CLS,
    /// unknown words map to UNK, the tail is padded.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = vec![CLS_ID];
        for word in text.split_whitespace() {
            if ids.len() >= self.max_tokens {
                break;
            }
            let w = word
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if w.is_empty() {
                continue;
            }
            ids.push(*self.map.get(&w).unwrap_or(&UNK_ID));
        }
        ids.resize(self.max_tokens, PAD_ID);
        let mask = ids.iter().map(|&i| i != PAD_ID).collect();
        TokenSequence { ids, mask }
    }
}

/// Conversation text as one stream, speakers interleaved.
pub fn flatten_utterances(utterances: &[(crate::datagen::Speaker, String)]) -> String {
    utterances
        .iter()
        .map(|(_, t)| t.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Non-overlapping row-major patches, each flattened channel-major to
/// 3 * patch^2 values.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if image.side % patch != 0 {
        return Err(Error::Shape(format!(
            "image side {} not divisible by patch {}",
            image.side, patch
        )));
    }
    let per_side = image.side / patch;
    let n = per_side * per_side;
    let mut out = Tensor::zeros(n, 3 * patch * patch);
    for py in 0..per_side {
        for px in 0..per_side {
            let row = py * per_side + px;
            let mut j = 0;
            for c in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        *out.at_mut(row, j) = image.at(c, py * patch + y, px * patch + x);
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

struct LayerParams {
    ln1_g: P,
    ln1_b: P,
    wq: Vec<P>,
    wk: Vec<P>,
    wv: Vec<P>,
    wo: P,
    bo: P,
    ln2_g: P,
    ln2_b: P,
    w1: P,
    b1: P,
    w2: P,
    b2: P,
}

/// Pre-norm transformer encoder over a fixed-length sequence. The residual
/// stream is left un-normalized at the top so zeroed attention/FFN weights
/// reduce the stack to the input embeddings.
pub struct TransformerParams {
    pub d: usize,
    pub heads: usize,
    pub seq_len: usize,
    embed: Embedding,
    pos: P,
    layers: Vec<LayerParams>,
}

enum Embedding {
    /// token table (V x d); CLS is a reserved token id
    Tokens(P),
    /// patch projection (3p^2 x d) with bias, plus a learned CLS row
    Patches { proj: P, bias: P, cls: P },
}

impl TransformerParams {
    pub fn text(b: &mut ParamBuilder, prefix: &str, cfg: &EncoderConfig) -> Self {
        let embed = Embedding::Tokens(b.gaussian(&format!("{prefix}.tok_embed"), cfg.vocab, cfg.d, 0.5));
        Self::common(b, prefix, cfg, embed, cfg.max_tokens)
    }

    pub fn image(b: &mut ParamBuilder, prefix: &str, cfg: &EncoderConfig) -> Self {
        let pdim = 3 * cfg.patch * cfg.patch;
        let embed = Embedding::Patches {
            proj: b.dense(&format!("{prefix}.patch_proj"), pdim, cfg.d),
            bias: b.zeros(&format!("{prefix}.patch_bias"), 1, cfg.d),
            cls: b.gaussian(&format!("{prefix}.cls"), 1, cfg.d, 0.5),
        };
        Self::common(b, prefix, cfg, embed, cfg.patches() + 1)
    }

    fn common(
        b: &mut ParamBuilder,
        prefix: &str,
        cfg: &EncoderConfig,
        embed: Embedding,
        seq_len: usize,
    ) -> Self {
        let dh = cfg.d / cfg.heads;
        let pos = b.gaussian(&format!("{prefix}.pos"), seq_len, cfg.d, 0.1);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.l{l}");
            let mut wq = Vec::new();
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for h in 0..cfg.heads {
                wq.push(b.dense(&format!("{p}.wq{h}"), cfg.d, dh));
                wk.push(b.dense(&format!("{p}.wk{h}"), cfg.d, dh));
                wv.push(b.dense(&format!("{p}.wv{h}"), cfg.d, dh));
            }
            layers.push(LayerParams {
                ln1_g: b.ones(&format!("{p}.ln1_g"), 1, cfg.d),
                ln1_b: b.zeros(&format!("{p}.ln1_b"), 1, cfg.d),
                wq,
                wk,
                wv,
                wo: b.dense(&format!("{p}.wo"), cfg.d, cfg.d),
                bo: b.zeros(&format!("{p}.bo"), 1, cfg.d),
                ln2_g: b.ones(&format!("{p}.ln2_g"), 1, cfg.d),
                ln2_b: b.zeros(&format!("{p}.ln2_b"), 1, cfg.d),
                w1: b.dense(&format!("{p}.ffn_w1"), cfg.d, 4 * cfg.d),
                b1: b.zeros(&format!("{p}.ffn_b1"), 1, 4 * cfg.d),
                w2: b.dense(&format!("{p}.ffn_w2"), 4 * cfg.d, cfg.d),
                b2: b.zeros(&format!("{p}.ffn_b2"), 1, cfg.d),
            });
        }
        TransformerParams {
            d: cfg.d,
            heads: cfg.heads,
            seq_len,
            embed,
            pos,
            layers,
        }
    }

    fn embed_tokens(&self, g: &mut Graph, leaves: &[NodeId], tokens: &TokenSequence) -> NodeId {
        match &self.embed {
            Embedding::Tokens(tab) => g.gather_rows(leaves[tab.0], &tokens.ids),
            Embedding::Patches { .. } => unreachable!("text encoder expected"),
        }
    }

    fn embed_patches(&self, g: &mut Graph, leaves: &[NodeId], patches: &Tensor) -> NodeId {
        match &self.embed {
            Embedding::Patches { proj, bias, cls } => {
                let x = g.constant(patches.clone());
                let proj = g.matmul(x, leaves[proj.0]);
                let proj = g.add_row(proj, leaves[bias.0]);
                g.concat_rows(&[leaves[cls.0], proj])
            }
            Embedding::Tokens(_) => unreachable!("image encoder expected"),
        }
    }

    /// Pre-norm stack; `mask[i] = false` removes position i from every
    /// attention softmax (as a key) and from downstream pooling.
    fn stack(&self, g: &mut Graph, leaves: &[NodeId], mut x: NodeId, mask: &[bool]) -> NodeId {
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = self.seq_len;
        // additive key-mask bias, shared across layers
        let mut bias = Tensor::zeros(l, l);
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                for i in 0..l {
                    *bias.at_mut(i, j) = -1e9;
                }
            }
        }
        let masked = mask.iter().any(|&m| !m);

        for lp in &self.layers {
            let u = g.layer_norm(x, leaves[lp.ln1_g.0], leaves[lp.ln1_b.0]);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = g.matmul(u, leaves[lp.wq[h].0]);
                let k = g.matmul(u, leaves[lp.wk[h].0]);
                let v = g.matmul(u, leaves[lp.wv[h].0]);
                let mut s = g.matmul_nt(q, k);
                s = g.scale(s, scale);
                if masked {
                    s = g.add_const(s, bias.clone());
                }
                let a = g.softmax(s);
                heads.push(g.matmul(a, v));
            }
            let cat = g.concat_cols(&heads);
            let o = g.matmul(cat, leaves[lp.wo.0]);
            let o = g.add_row(o, leaves[lp.bo.0]);
            x = g.add(x, o);

            let v = g.layer_norm(x, leaves[lp.ln2_g.0], leaves[lp.ln2_b.0]);
            let f1 = g.matmul(v, leaves[lp.w1.0]);
            let f1 = g.add_row(f1, leaves[lp.b1.0]);
            let f1 = g.gelu(f1);
            let f2 = g.matmul(f1, leaves[lp.w2.0]);
            let f2 = g.add_row(f2, leaves[lp.b2.0]);
            x = g.add(x, f2);
        }
        x
    }
}

/// (H, h): full hidden matrix at graph node `.0`, CLS row at `.1`.
pub struct Encoding {
    pub hidden: NodeId,
    pub cls: NodeId,
}

pub fn encode_text(
    g: &mut Graph,
    leaves: &[NodeId],
    params: &TransformerParams,
    tokens: &TokenSequence,
) -> Encoding {
    let e = params.embed_tokens(g, leaves, tokens);
    let x = g.add(e, leaves[params.pos.0]);
    let h = params.stack(g, leaves, x, &tokens.mask);
    Encoding {
        hidden: h,
        cls: g.slice_rows(h, 0, 1),
    }
}

pub fn encode_image(
    g: &mut Graph,
    leaves: &[NodeId],
    params: &TransformerParams,
    patches: &Tensor,
) -> Encoding {
    let e = params.embed_patches(g, leaves, patches);
    let x = g.add(e, leaves[params.pos.0]);
    let mask = vec![true; params.seq_len];
    let h = params.stack(g, leaves, x, &mask);
    Encoding {
        hidden: h,
        cls: g.slice_rows(h, 0, 1),
    }
}

/// Insert every stored parameter as a differentiable graph leaf, in
/// registration order.
pub fn param_leaves(g: &mut Graph, store: &crate::params::ParamStore) -> Vec<NodeId> {
    store
        .values()
        .iter()
        .map(|t| g.param(t.clone()))
        .collect()
}

/// Same, but as constants (inference).
pub fn const_leaves(g: &mut Graph, store: &crate::params::ParamStore) -> Vec<NodeId> {
    store
        .values()
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect()
}
