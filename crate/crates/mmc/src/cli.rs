//! Command-line wiring: data generation, splitting, training, evaluation,
//! diagnostics, and image pairing. JSON reports go to stdout, progress logs
//! to stderr; every run is reproducible from its config and seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, render_config, set_key, RunConfig};
use crate::datagen::{self, Corpus, GenSpec};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::{self, TrainSample, GRAD_CHECK_OPS};
use crate::params::ParamStore;

const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Parser)]
#[command(
    name = "mmc",
    about = "Two-phase mixture-of-experts pipeline for multimodal complaint classification",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (flat key=value; see README for the annotated example).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to apply after the config file: desk, paper, main-text, appendix.
    #[arg(long)]
    preset: Vec<String>,
    /// Individual key overrides, e.g. --set train.lr=1e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed override; wins over config and presets.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        for p in &self.preset {
            cfg.apply_preset(p)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{kv}': expected KEY=VALUE")))?;
            set_key(&mut cfg, k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.gen.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into --out.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generate a linearly separable corpus of this size instead of the
        /// default histograms.
        #[arg(long)]
        separable: Option<usize>,
    },
    /// Split a corpus directory into train/val/test subdirectories.
    Split {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory; receives train/, val/, test/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus; writes checkpoint.bin, history.jsonl, config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory, either raw or pre-split.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split; prints a metrics report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training output directory (checkpoint.bin + config.txt).
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory, either raw or pre-split.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Expert weight-similarity matrix as CSV, or training-history reports.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Training output directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which per-expert matrix to compare: alpha, w_in, w_out.
        #[arg(long)]
        matrix: Option<String>,
        /// Print the per-epoch validation reports from history.jsonl instead.
        #[arg(long)]
        history: bool,
    },
    /// Assign images to conversations with the mock embedding provider.
    Pair {
        #[command(flatten)]
        common: Common,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory of metadata-named .jpg files.
        #[arg(long)]
        images: PathBuf,
        /// Output directory for assignments.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// One of quadratic, sas, fusion, validation, metafuse, or all.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn corpus_text(sample: &datagen::ConversationSample) -> String {
    sample
        .utterances
        .iter()
        .map(|(_, text)| text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Expand a corpus into one training sample per (aspect, severity) pair.
pub fn corpus_to_samples(corpus: &Corpus) -> Vec<TrainSample> {
    datagen::expand_pairs(corpus)
        .into_iter()
        .map(|inst| {
            let s = &corpus.samples[inst.sample];
            TrainSample {
                text: corpus_text(s),
                image: s
                    .image_ref
                    .as_ref()
                    .and_then(|r| corpus.images.get(r))
                    .cloned(),
                aspect: inst.aspect,
                severity: inst.severity,
            }
        })
        .collect()
}

/// Load train/val/test: pre-split subdirectories win; otherwise a single
/// corpus is split in memory with the config seed.
fn load_splits(data: &Path, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if data.join("train").join("corpus.jsonl").exists() {
        Ok((
            datagen::load_corpus(&data.join("train"))?,
            datagen::load_corpus(&data.join("val"))?,
            datagen::load_corpus(&data.join("test"))?,
        ))
    } else {
        let corpus = datagen::load_corpus(data)?;
        datagen::split_corpus(&corpus, SPLIT_RATIOS, seed)
    }
}

fn emit<T: serde::Serialize>(report: &T) -> Result<()> {
    println!("{}", serde_json::to_string(report)?);
    Ok(())
}

fn load_checkpoint(ckpt: &Path, common: &Common) -> Result<(ParamStore, ModelParams, RunConfig)> {
    // The saved config.txt is the source of truth for rebuilding the model;
    // CLI flags still override (e.g. to point eval at another preset's dims).
    let saved = ckpt.join("config.txt");
    let mut merged = common.clone();
    if merged.config.is_none() && saved.exists() {
        merged.config = Some(saved);
    }
    let cfg = merged.resolve()?;
    let mut store = ParamStore::new();
    let mp = ModelParams::new(&mut store, &cfg.model, cfg.train.seed)?;
    store.load(&ckpt.join("checkpoint.bin"))?;
    Ok((store, mp, cfg))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            out,
            separable,
        } => {
            let cfg = common.resolve()?;
            let spec = match separable {
                Some(n) => GenSpec {
                    seed: cfg.gen.seed,
                    ..GenSpec::separable(n, cfg.gen.seed)
                },
                None => cfg.gen.clone(),
            };
            let corpus = datagen::generate_corpus(&spec)?;
            datagen::save_corpus(&corpus, &out)?;
            let (aspects, severities) = datagen::label_histogram(&corpus);
            eprintln!("wrote {} conversations to {}", corpus.samples.len(), out.display());
            emit(&serde_json::json!({
                "conversations": corpus.samples.len(),
                "images": corpus.images.len(),
                "aspect_histogram": aspects,
                "severity_histogram": severities,
            }))
        }
        Command::Split { common, data, out } => {
            let cfg = common.resolve()?;
            let corpus = datagen::load_corpus(&data)?;
            let (train, val, test) = datagen::split_corpus(&corpus, SPLIT_RATIOS, cfg.gen.seed)?;
            datagen::save_corpus(&train, &out.join("train"))?;
            datagen::save_corpus(&val, &out.join("val"))?;
            datagen::save_corpus(&test, &out.join("test"))?;
            emit(&serde_json::json!({
                "train": train.samples.len(),
                "val": val.samples.len(),
                "test": test.samples.len(),
            }))
        }
        Command::Train { common, data, out } => {
            let cfg = common.resolve()?;
            let (train_c, val_c, _test_c) = load_splits(&data, cfg.gen.seed)?;
            let train_set = corpus_to_samples(&train_c);
            let val_set = corpus_to_samples(&val_c);
            eprintln!(
                "training on {} instances, validating on {}",
                train_set.len(),
                val_set.len()
            );
            let mut store = ParamStore::new();
            let mp = ModelParams::new(&mut store, &cfg.model, cfg.train.seed)?;
            let outcome = objective::train(&mut store, &mp, &train_set, &val_set, &cfg.train)?;
            std::fs::create_dir_all(&out)?;
            store.save(&out.join("checkpoint.bin"))?;
            std::fs::write(out.join("config.txt"), render_config(&cfg))?;
            let mut history = String::new();
            for rec in &outcome.history {
                history.push_str(&serde_json::to_string(rec)?);
                history.push('\n');
            }
            std::fs::write(out.join("history.jsonl"), history)?;
            let last = outcome.history.last().expect("non-empty history");
            emit(&serde_json::json!({
                "epochs": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "expert_selections": outcome.expert_selections,
                "final_train_acc_aspect": last.train_acc_aspect,
                "final_train_acc_severity": last.train_acc_severity,
                "final_val_acc_aspect": last.val_acc_aspect,
                "final_val_acc_severity": last.val_acc_severity,
            }))
        }
        Command::Eval {
            common,
            ckpt,
            data,
            split,
        } => {
            let (store, mp, cfg) = load_checkpoint(&ckpt, &common)?;
            let (train_c, val_c, test_c) = load_splits(&data, cfg.gen.seed)?;
            let corpus = match split.as_str() {
                "train" => train_c,
                "val" => val_c,
                "test" => test_c,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split '{other}' (train, val, test)"
                    )))
                }
            };
            let samples = corpus_to_samples(&corpus);
            eprintln!("scoring {} instances from the {split} split", samples.len());
            let report = crate::evalkit::evaluate(&store, &mp, &samples, cfg.train.batch_size)?;
            emit(&report)
        }
        Command::Analyze {
            common,
            ckpt,
            matrix,
            history,
        } => {
            if history {
                let text = std::fs::read_to_string(ckpt.join("history.jsonl"))?;
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let rec: objective::EpochRecord = serde_json::from_str(line)?;
                    emit(&serde_json::json!({
                        "epoch": rec.epoch,
                        "report": rec.report,
                    }))?;
                }
                return Ok(());
            }
            let which: crate::evalkit::SimilarityMatrix = matrix
                .as_deref()
                .ok_or_else(|| Error::Config("pass --matrix or --history".into()))?
                .parse()?;
            let (store, mp, _cfg) = load_checkpoint(&ckpt, &common)?;
            let sim = crate::evalkit::expert_weight_similarity(&store, &mp.bank, which)?;
            print!("{}", crate::evalkit::matrix_to_csv(&sim));
            Ok(())
        }
        Command::Pair {
            common,
            data,
            images,
            out,
        } => {
            let cfg = common.resolve()?;
            let corpus = datagen::load_corpus(&data)?;
            let queries: Vec<crate::pairing::PairingQuery> = corpus
                .samples
                .iter()
                .map(|s| {
                    let (a, sv) = s.labels[0];
                    crate::pairing::PairingQuery {
                        id: s.id.clone(),
                        text: corpus_text(s),
                        aspect_prompt: crate::pairing::aspect_prompt(datagen::ASPECTS[a]),
                        severity_prompt: crate::pairing::severity_prompt(datagen::SEVERITIES[sv]),
                    }
                })
                .collect();
            let mut records = Vec::new();
            let mut malformed = Vec::new();
            let mut names: Vec<String> = std::fs::read_dir(&images)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".jpg"))
                .collect();
            names.sort();
            for name in names {
                match crate::pairing::parse_image_filename(&name) {
                    Ok(rec) => records.push(rec),
                    Err(e) => malformed.push(e.to_string()),
                }
            }
            let provider = crate::pairing::MockProvider::new(cfg.gen.seed, 64);
            let (assignments, skipped) =
                crate::pairing::assign_images(&queries, &records, &provider, &cfg.pairing)?;
            for msg in malformed.iter().chain(&skipped) {
                eprintln!("skipped: {msg}");
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("assignments.csv"),
                crate::pairing::assignments_to_csv(&assignments),
            )?;
            emit(&serde_json::json!({
                "conversations": queries.len(),
                "images": records.len(),
                "assigned": assignments.len(),
                "skipped": malformed.len() + skipped.len(),
            }))
        }
        Command::Gradcheck {
            common,
            op,
            probes,
            tol,
        } => {
            let cfg = common.resolve()?;
            let ops: Vec<&str> = if op == "all" {
                GRAD_CHECK_OPS.to_vec()
            } else {
                vec![op.as_str()]
            };
            let mut failed = Vec::new();
            for name in ops {
                let report = objective::grad_check(name, probes, tol, cfg.train.seed)?;
                if !report.pass {
                    failed.push(name.to_string());
                }
                emit(&report)?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!(
                    "gradient check failed for: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

/// Process exit code for a pipeline error: I/O problems are 1; everything
/// else also maps to 1, with usage errors handled by the parser (exit 2).
pub fn exit_code(err: &Error) -> i32 {
    let _ = err;
    1
}
