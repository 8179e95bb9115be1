//! Task metrics (accuracy, macro-F1, per-class precision/recall/F1),
//! confusion matrices, and the expert weight-similarity analysis.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<usize>>,
}

/// Entry (g, p) counts gold class g predicted as p.
pub fn confusion_matrix(preds: &[usize], golds: &[usize], c: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let mut m = vec![vec![0usize; c]; c];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= c || g >= c {
            return Err(Error::Data(format!(
                "label out of range: pred {p}, gold {g}, C = {c}"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over per-pair-expanded predictions; 0/0 ratios collapse to 0.
pub fn task_metrics(preds: &[usize], golds: &[usize], c: usize) -> Result<TaskMetrics> {
    if preds.is_empty() {
        return Err(Error::Data("metrics over an empty split".into()));
    }
    let confusion = confusion_matrix(preds, golds, c)?;
    let total = preds.len();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(c);
    let mut f1_sum = 0.0;
    for k in 0..c {
        let tp = confusion[k][k];
        let gold_k: usize = confusion[k].iter().sum();
        let pred_k: usize = (0..c).map(|g| confusion[g][k]).sum();
        let precision = ratio(tp, pred_k);
        let recall = ratio(tp, gold_k);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
        });
    }
    Ok(TaskMetrics {
        accuracy: trace as f64 / total as f64,
        macro_f1: f1_sum / c as f64,
        per_class,
        confusion,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub aspect: TaskMetrics,
    pub severity: TaskMetrics,
}

/// Multi-label variants: subset accuracy plus per-label F1.
#[derive(Debug, Clone, Serialize)]
pub struct MultiLabelMetrics {
    pub subset_accuracy: f64,
    pub per_label_f1: Vec<f64>,
}

pub fn multi_label_metrics(
    preds: &[Vec<bool>],
    golds: &[Vec<bool>],
    c: usize,
) -> Result<MultiLabelMetrics> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::Data("multi-label metrics need matched, non-empty inputs".into()));
    }
    let mut exact = 0usize;
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fne = vec![0usize; c];
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != c || g.len() != c {
            return Err(Error::Shape("label vector width mismatch".into()));
        }
        if p == g {
            exact += 1;
        }
        for k in 0..c {
            match (p[k], g[k]) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fne[k] += 1,
                _ => {}
            }
        }
    }
    let per_label_f1 = (0..c)
        .map(|k| ratio(2 * tp[k], 2 * tp[k] + fp[k] + fne[k]))
        .collect();
    Ok(MultiLabelMetrics {
        subset_accuracy: exact as f64 / preds.len() as f64,
        per_label_f1,
    })
}

/// Which expert weight matrix the similarity analysis compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMatrix {
    Alpha,
    WIn,
    WOut,
}

impl std::str::FromStr for SimilarityMatrix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SimilarityMatrix::Alpha),
            "w_in" => Ok(SimilarityMatrix::WIn),
            "w_out" => Ok(SimilarityMatrix::WOut),
            other => Err(Error::Config(format!(
                "unknown similarity matrix '{other}' (alpha, w_in, w_out)"
            ))),
        }
    }
}

/// Pairwise cosine similarity of flattened weight matrices: symmetric with a
/// unit diagonal. Zero-norm or shape-mismatched matrices are rejected.
pub fn expert_similarity(weights: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    if weights.is_empty() {
        return Err(Error::Data("expert_similarity over no matrices".into()));
    }
    let norms: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if !w.same_shape(weights[0]) {
                return Err(Error::Shape(format!("matrix {i} has a different shape")));
            }
            let n = w.frobenius_norm();
            if n == 0.0 {
                return Err(Error::Undefined(format!("matrix {i} has zero norm")));
            }
            Ok(n)
        })
        .collect::<Result<_>>()?;
    let k = weights.len();
    let mut sim = vec![vec![0.0; k]; k];
    for i in 0..k {
        sim[i][i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = weights[i]
                .data
                .iter()
                .zip(&weights[j].data)
                .map(|(a, b)| a * b)
                .sum();
            let s = dot / (norms[i] * norms[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(sim)
}

/// Pull the selected per-expert weight matrices and compare them pairwise.
/// `WOut` compares the aspect-head output matrices.
pub fn expert_weight_similarity(
    store: &crate::params::ParamStore,
    bank: &crate::experts::ExpertBankParams,
    which: SimilarityMatrix,
) -> Result<Vec<Vec<f64>>> {
    let mats: Vec<&Tensor> = bank
        .experts
        .iter()
        .map(|e| {
            store.get(match which {
                SimilarityMatrix::Alpha => e.alpha,
                SimilarityMatrix::WIn => e.w_in,
                SimilarityMatrix::WOut => e.w_out_aspect,
            })
        })
        .collect();
    expert_similarity(&mats)
}

/// Run the model over a split in eval mode and score both tasks.
pub fn evaluate(
    store: &crate::params::ParamStore,
    mp: &crate::model::ModelParams,
    samples: &[crate::objective::TrainSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluate over an empty split".into()));
    }
    let tokenizer = crate::encode::Tokenizer::new(&mp.cfg.encoder);
    let mut pa = Vec::with_capacity(samples.len());
    let mut ps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let prepared: Vec<crate::model::PreparedSample> = chunk
            .iter()
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
        let mut g = crate::graph::Graph::new();
        let leaves = crate::encode::const_leaves(&mut g, store);
        let fwd = crate::model::forward_batch(&mut g, &leaves, mp, &prepared, None)?;
        for nodes in &fwd.samples {
            pa.push(crate::metafuse::predict(&g.value(nodes.final_aspect).data));
            ps.push(crate::metafuse::predict(&g.value(nodes.final_severity).data));
        }
    }
    let golds_a: Vec<usize> = samples.iter().map(|s| s.aspect).collect();
    let golds_s: Vec<usize> = samples.iter().map(|s| s.severity).collect();
    Ok(MetricsReport {
        aspect: task_metrics(&pa, &golds_a, mp.cfg.num_aspects)?,
        severity: task_metrics(&ps, &golds_s, mp.cfg.num_severities)?,
    })
}

/// CSV rendering of a numeric matrix (heatmap-ready).
pub fn matrix_to_csv(m: &[Vec<f64>]) -> String {
    m.iter()
        .map(|row| {
            row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn confusion_to_csv(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|row| {
            row.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
