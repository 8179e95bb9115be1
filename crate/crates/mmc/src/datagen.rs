//! Synthetic corpus generation, splitting, and audit utilities.
//!
//! Generated conversations carry a class-correlated keyword in their text and
//! a class-coded geometric pattern in their image so the classification task
//! is learnable without any external data.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, substream};

pub const ASPECTS: [&str; 6] = ["Software", "Quality", "Hardware", "Service", "Price", "Packaging"];
pub const SEVERITIES: [&str; 4] = ["No Explicit Reproach", "Disapproval", "Blame", "Accusation"];
pub const NUM_ASPECTS: usize = 6;
pub const NUM_SEVERITIES: usize = 4;

/// Single-token class keywords planted in generated text.
pub const ASPECT_KEYWORDS: [&str; 6] =
    ["software", "quality", "hardware", "service", "price", "packaging"];
pub const SEVERITY_KEYWORDS: [&str; 4] = ["calm", "disapproval", "blame", "accusation"];

/// Reference label distribution used as the generator default.
pub const DEFAULT_ASPECT_COUNTS: [usize; 6] = [1662, 117, 112, 77, 23, 13];
pub const DEFAULT_SEVERITY_COUNTS: [usize; 4] = [235, 486, 799, 484];
pub const DEFAULT_TOTAL: usize = 2004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Customer,
    Agent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationSample {
    pub id: String,
    pub utterances: Vec<(Speaker, String)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_ref: Option<String>,
    /// (aspect, severity) class-id pairs; non-empty, unique within a sample.
    pub labels: Vec<(usize, usize)>,
}

/// Raw image: 3 channels of side x side, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            data: vec![0.0; 3 * side * side],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.side * self.side + y * self.side + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[c * self.side * self.side + y * self.side + x]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<ConversationSample>,
    pub images: BTreeMap<String, Image>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub total: usize,
    pub aspect_histogram: Vec<usize>,
    pub severity_histogram: Vec<usize>,
    /// Fraction of samples carrying two (aspect, severity) pairs.
    pub multi_label_rate: f64,
    /// Fraction of samples with an image (at most one per sample).
    pub image_fraction: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub image_side: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            total: DEFAULT_TOTAL,
            aspect_histogram: DEFAULT_ASPECT_COUNTS.to_vec(),
            severity_histogram: DEFAULT_SEVERITY_COUNTS.to_vec(),
            multi_label_rate: 0.0,
            // 4478 images over 2004 conversations, clamped to one per sample
            image_fraction: 1.0,
            seed: 42,
            vocab_size: 1000,
            image_side: 32,
        }
    }
}

impl GenSpec {
    /// Small balanced corpus for bench runs; keyword signal fully separable.
    pub fn separable(total: usize, seed: u64) -> Self {
        let mut aspect = vec![0usize; NUM_ASPECTS];
        let mut severity = vec![0usize; NUM_SEVERITIES];
        for i in 0..total {
            aspect[i % NUM_ASPECTS] += 1;
            severity[i % NUM_SEVERITIES] += 1;
        }
        GenSpec {
            total,
            aspect_histogram: aspect,
            severity_histogram: severity,
            multi_label_rate: 0.0,
            image_fraction: 1.0,
            seed,
            vocab_size: 1000,
            image_side: 32,
        }
    }

    fn validate(&self) -> Result<usize> {
        if self.aspect_histogram.len() != NUM_ASPECTS {
            return Err(Error::Config(format!(
                "aspect histogram needs {NUM_ASPECTS} entries"
            )));
        }
        if self.severity_histogram.len() != NUM_SEVERITIES {
            return Err(Error::Config(format!(
                "severity histogram needs {NUM_SEVERITIES} entries"
            )));
        }
        let pa: usize = self.aspect_histogram.iter().sum();
        let ps: usize = self.severity_histogram.iter().sum();
        if pa != ps {
            return Err(Error::Config(format!(
                "aspect pairs ({pa}) and severity pairs ({ps}) disagree"
            )));
        }
        let extra = (self.multi_label_rate * self.total as f64).round() as usize;
        if pa != self.total + extra {
            return Err(Error::Config(format!(
                "histograms sum to {pa} pairs but total {} with multi_label_rate {} implies {}",
                self.total,
                self.multi_label_rate,
                self.total + extra
            )));
        }
        if !(0.0..=1.0).contains(&self.image_fraction) {
            return Err(Error::Config("image_fraction must be in [0,1]".into()));
        }
        Ok(extra)
    }
}

fn class_text(rng: &mut impl Rng, labels: &[(usize, usize)], n_utts: usize) -> Vec<(Speaker, String)> {
    let mut utts = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let speaker = if u % 2 == 0 { Speaker::Customer } else { Speaker::Agent };
        let mut words: Vec<String> = Vec::new();
        if speaker == Speaker::Customer {
            // plant each class keyword early and repeatedly
            for &(a, s) in labels {
                for _ in 0..5 {
                    words.push(ASPECT_KEYWORDS[a].to_string());
                    words.push(SEVERITY_KEYWORDS[s].to_string());
                }
            }
        }
        let fillers = rng.gen_range(2..5);
        for _ in 0..fillers {
            words.push(format!("tok{}", rng.gen_range(0..50)));
        }
        utts.push((speaker, words.join(" ")));
    }
    utts
}

fn class_image(rng: &mut impl Rng, aspect: usize, severity: usize, side: usize) -> Image {
    let mut img = Image::zeros(side);
    // low-amplitude noise everywhere
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.0..0.1);
    }
    // aspect: global channel-0 intensity level ...
    let a_level = (aspect + 1) as f64 / (NUM_ASPECTS + 1) as f64;
    for y in 0..side {
        for x in 0..side {
            *img.at_mut(0, y, x) = a_level;
        }
    }
    // ... plus a bright block positioned on a 2x3 grid
    let (gy, gx) = (aspect / 3, aspect % 3);
    let bh = side / 2;
    let bw = side / 3;
    for y in gy * bh..(gy + 1) * bh {
        for x in gx * bw..(gx + 1) * bw {
            *img.at_mut(0, y, x) = 1.0;
        }
    }
    // severity: channel-1 intensity level plus channel-2 stripe count
    let level = (severity + 1) as f64 / NUM_SEVERITIES as f64;
    for y in 0..side {
        for x in 0..side {
            *img.at_mut(1, y, x) = level;
        }
    }
    for s in 0..=severity {
        let row = (s * side) / (NUM_SEVERITIES + 1);
        for x in 0..side {
            *img.at_mut(2, row, x) = 1.0;
        }
    }
    img
}

/// Deterministic corpus generation; the output label histogram matches the
/// spec exactly.
pub fn generate_corpus(spec: &GenSpec) -> Result<Corpus> {
    let extra = spec.validate()?;
    let mut rng = substream(spec.seed, streams::DATAGEN);

    // expand histograms into label pools and shuffle
    let mut aspects: Vec<usize> = Vec::new();
    for (a, &n) in spec.aspect_histogram.iter().enumerate() {
        aspects.extend(std::iter::repeat(a).take(n));
    }
    let mut severities: Vec<usize> = Vec::new();
    for (s, &n) in spec.severity_histogram.iter().enumerate() {
        severities.extend(std::iter::repeat(s).take(n));
    }
    aspects.shuffle(&mut rng);
    severities.shuffle(&mut rng);
    let pairs: Vec<(usize, usize)> = aspects.into_iter().zip(severities).collect();

    // one pair per sample, then spread the extras
    let mut labels: Vec<Vec<(usize, usize)>> =
        pairs[..spec.total].iter().map(|&p| vec![p]).collect();
    for (i, &p) in pairs[spec.total..].iter().enumerate() {
        // walk forward from a deterministic start until the pair is new to the sample
        let mut idx = if spec.total > 0 { (i * 7919) % spec.total } else { 0 };
        let mut placed = false;
        for _ in 0..spec.total {
            if labels[idx].len() == 1 && !labels[idx].contains(&p) {
                labels[idx].push(p);
                placed = true;
                break;
            }
            idx = (idx + 1) % spec.total;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place extra pair {p:?}; multi_label_rate too high for total {}",
                spec.total
            )));
        }
        let _ = extra;
    }

    let image_count = (spec.image_fraction * spec.total as f64).round() as usize;
    let mut has_image: Vec<bool> = (0..spec.total).map(|i| i < image_count).collect();
    has_image.shuffle(&mut rng);

    let mut corpus = Corpus::default();
    for (i, lab) in labels.into_iter().enumerate() {
        let id = format!("conv{i:05}");
        let n_utts = rng.gen_range(2..=10usize);
        let utterances = class_text(&mut rng, &lab, n_utts);
        let image_ref = if has_image[i] {
            let (a, s) = lab[0];
            let img = class_image(&mut rng, a, s, spec.image_side);
            let iref = format!("{id}.img");
            corpus.images.insert(iref.clone(), img);
            Some(iref)
        } else {
            None
        };
        corpus.samples.push(ConversationSample {
            id,
            utterances,
            image_ref,
            labels: lab,
        });
    }
    Ok(corpus)
}

/// Deterministic shuffle split with sizes (floor(r0 n), floor(r1 n), rest).
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (r0, r1, r2) = ratios;
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios sum to {}, expected 1",
            r0 + r1 + r2
        )));
    }
    if r0 < 0.0 || r1 < 0.0 || r2 < 0.0 {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, streams::SHUFFLE));
    let n_train = (r0 * n as f64).floor() as usize;
    let n_val = (r1 * n as f64).floor() as usize;

    let subset = |idxs: &[usize]| -> Corpus {
        let mut c = Corpus::default();
        for &i in idxs {
            let s = corpus.samples[i].clone();
            if let Some(r) = &s.image_ref {
                if let Some(img) = corpus.images.get(r) {
                    c.images.insert(r.clone(), img.clone());
                }
            }
            c.samples.push(s);
        }
        c
    };
    Ok((
        subset(&order[..n_train]),
        subset(&order[n_train..n_train + n_val]),
        subset(&order[n_train + n_val..]),
    ))
}

/// Fleiss' kappa over an items x categories count matrix with `n` raters per
/// item. Undefined when expected agreement is 1 (all mass in one category).
pub fn fleiss_kappa(ratings: &[Vec<usize>], raters_per_item: usize) -> Result<f64> {
    let n_items = ratings.len();
    if n_items == 0 {
        return Err(Error::Data("fleiss_kappa needs at least one item".into()));
    }
    if raters_per_item < 2 {
        return Err(Error::Data("fleiss_kappa needs n >= 2 raters".into()));
    }
    let n_cats = ratings[0].len();
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != n_cats {
            return Err(Error::Shape(format!("row {i} has inconsistent width")));
        }
        let s: usize = row.iter().sum();
        if s != raters_per_item {
            return Err(Error::Data(format!(
                "row {i} sums to {s}, expected {raters_per_item}"
            )));
        }
    }
    let n = raters_per_item as f64;
    let mut p_bar = 0.0;
    let mut cat_totals = vec![0.0f64; n_cats];
    for row in ratings {
        let mut agree = 0.0;
        for (j, &c) in row.iter().enumerate() {
            agree += (c * c) as f64;
            cat_totals[j] += c as f64;
        }
        p_bar += (agree - n) / (n * (n - 1.0));
    }
    p_bar /= n_items as f64;
    let total = n * n_items as f64;
    let p_e: f64 = cat_totals.iter().map(|&t| (t / total) * (t / total)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::Undefined(
            "expected agreement is 1; kappa undefined".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// (aspect counts, severity counts) over all pairs.
pub fn label_histogram(corpus: &Corpus) -> (Vec<usize>, Vec<usize>) {
    let mut aspects = vec![0usize; NUM_ASPECTS];
    let mut severities = vec![0usize; NUM_SEVERITIES];
    for s in &corpus.samples {
        for &(a, sv) in &s.labels {
            aspects[a] += 1;
            severities[sv] += 1;
        }
    }
    (aspects, severities)
}

/// One classification instance per (aspect, severity) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub sample: usize,
    pub aspect: usize,
    pub severity: usize,
}

pub fn expand_pairs(corpus: &Corpus) -> Vec<Instance> {
    let mut out = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        for &(a, sv) in &s.labels {
            out.push(Instance {
                sample: i,
                aspect: a,
                severity: sv,
            });
        }
    }
    out
}

// ---- persistence -----------------------------------------------------------

/// JSONL corpus plus raw tensor side-car files under `dir/images/`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut f = std::fs::File::create(dir.join("corpus.jsonl"))?;
    for s in &corpus.samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    for (id, img) in &corpus.images {
        save_raw_tensor(
            &dir.join("images").join(format!("{id}.bin")),
            (3 * img.side) as u32,
            img.side as u32,
            &img.data,
        )?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let f = std::fs::File::open(dir.join("corpus.jsonl"))?;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ConversationSample = serde_json::from_str(&line)?;
        if s.labels.is_empty() {
            return Err(Error::Data(format!("sample {} has no labels", s.id)));
        }
        corpus.samples.push(s);
    }
    for s in &corpus.samples {
        if let Some(r) = &s.image_ref {
            let (rows, cols, data) =
                load_raw_tensor(&dir.join("images").join(format!("{r}.bin")))?;
            let side = cols as usize;
            if rows as usize != 3 * side {
                return Err(Error::Shape(format!("image {r} has rows {rows}, cols {cols}")));
            }
            corpus.images.insert(r.clone(), Image { side, data });
        }
    }
    Ok(corpus)
}

/// Little-endian float32 payload behind an 8-byte (rows, cols) header.
pub fn save_raw_tensor(path: &Path, rows: u32, cols: u32, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + data.len() * 4);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_raw_tensor(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Parse(format!("{}: missing header", path.display())));
    }
    let rows = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let cols = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let expect = 8 + (rows as usize) * (cols as usize) * 4;
    if bytes.len() != expect {
        return Err(Error::Parse(format!(
            "{}: expected {expect} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_spec_matches_reference_histograms() {
        let corpus = generate_corpus(&GenSpec::default()).unwrap();
        let (a, s) = label_histogram(&corpus);
        assert_eq!(a, DEFAULT_ASPECT_COUNTS.to_vec());
        assert_eq!(s, DEFAULT_SEVERITY_COUNTS.to_vec());
        assert_eq!(corpus.len(), 2004);
        for smp in &corpus.samples {
            assert!(!smp.labels.is_empty());
            assert!((2..=10).contains(&smp.utterances.len()));
        }
    }

    #[test]
    fn empty_spec_yields_empty_corpus() {
        let spec = GenSpec {
            total: 0,
            aspect_histogram: vec![0; 6],
            severity_histogram: vec![0; 4],
            ..GenSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert!(corpus.is_empty());
        let (a, s) = label_histogram(&corpus);
        assert_eq!(a, vec![0; 6]);
        assert_eq!(s, vec![0; 4]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec::separable(16, 9);
        let c1 = generate_corpus(&spec).unwrap();
        let c2 = generate_corpus(&spec).unwrap();
        let j1: Vec<String> = c1.samples.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        let j2: Vec<String> = c2.samples.iter().map(|s| serde_json::to_string(s).unwrap()).collect();
        assert_eq!(j1, j2);
        assert_eq!(c1.images, c2.images);
    }

    #[test]
    fn inconsistent_histogram_rejected() {
        let spec = GenSpec {
            total: 10,
            aspect_histogram: vec![5, 5, 0, 0, 0, 0],
            severity_histogram: vec![9, 0, 0, 0],
            ..GenSpec::default()
        };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn multi_label_rate_adds_second_pairs() {
        let mut spec = GenSpec::separable(10, 3);
        spec.multi_label_rate = 0.2;
        spec.aspect_histogram[0] += 2;
        spec.severity_histogram[1] += 2;
        let corpus = generate_corpus(&spec).unwrap();
        let n_multi = corpus.samples.iter().filter(|s| s.labels.len() == 2).count();
        assert_eq!(n_multi, 2);
        let (a, s) = label_histogram(&corpus);
        assert_eq!(a, spec.aspect_histogram);
        assert_eq!(s, spec.severity_histogram);
        // pair uniqueness within sample
        for smp in &corpus.samples {
            let mut seen = smp.labels.clone();
            seen.dedup();
            assert_eq!(seen.len(), smp.labels.len());
        }
        assert_eq!(expand_pairs(&corpus).len(), 12);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let corpus = generate_corpus(&GenSpec::default()).unwrap();
        let (tr, va, te) = split_corpus(&corpus, (0.70, 0.10, 0.20), 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1402, 200, 402));

        let small = generate_corpus(&GenSpec::separable(10, 1)).unwrap();
        let (tr, va, te) = split_corpus(&small, (0.70, 0.10, 0.20), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let corpus = generate_corpus(&GenSpec::separable(4, 1)).unwrap();
        assert!(split_corpus(&corpus, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let corpus = generate_corpus(&GenSpec::separable(23, 5)).unwrap();
        let (a1, b1, c1) = split_corpus(&corpus, (0.70, 0.10, 0.20), 11).unwrap();
        let (a2, b2, c2) = split_corpus(&corpus, (0.70, 0.10, 0.20), 11).unwrap();
        let ids = |c: &Corpus| c.samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
        assert_eq!(ids(&c1), ids(&c2));
        let mut all: Vec<String> = ids(&a1).into_iter().chain(ids(&b1)).chain(ids(&c1)).collect();
        all.sort();
        let mut orig = ids(&corpus);
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn fleiss_kappa_examples() {
        // perfect agreement
        let k = fleiss_kappa(&[vec![3, 0], vec![0, 3]], 3).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
        // hand-evaluated: P_bar = 1/3, P_e = 1/2
        let k = fleiss_kappa(&[vec![2, 1], vec![1, 2]], 3).unwrap();
        assert!((k + 1.0 / 3.0).abs() < 1e-12, "{k}");
        // degenerate: all raters on one category
        assert!(matches!(
            fleiss_kappa(&[vec![3, 0], vec![3, 0]], 3),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn fleiss_kappa_rejects_bad_rows() {
        assert!(fleiss_kappa(&[vec![2, 2]], 3).is_err());
        assert!(fleiss_kappa(&[vec![1, 0]], 1).is_err());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&GenSpec::separable(8, 2)).unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.len(), loaded.len());
        for (a, b) in corpus.samples.iter().zip(&loaded.samples) {
            assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
        }
        // images round-trip at f32 precision
        for (id, img) in &corpus.images {
            let l = &loaded.images[id];
            assert_eq!(img.side, l.side);
            for (x, y) in img.data.iter().zip(&l.data) {
                assert!((*x as f32) == (*y as f32));
            }
        }
    }

    proptest! {
        #[test]
        fn histogram_matches_spec_for_random_specs(total in 1usize..40, seed in 0u64..1000) {
            let spec = GenSpec::separable(total, seed);
            let corpus = generate_corpus(&spec).unwrap();
            let (a, s) = label_histogram(&corpus);
            prop_assert_eq!(a, spec.aspect_histogram);
            prop_assert_eq!(s, spec.severity_histogram);
        }

        #[test]
        fn split_is_exhaustive_and_disjoint(n in 1usize..60, seed in 0u64..500) {
            let corpus = generate_corpus(&GenSpec::separable(n, 7)).unwrap();
            let (tr, va, te) = split_corpus(&corpus, (0.70, 0.10, 0.20), seed).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let mut ids: Vec<&str> = tr.samples.iter()
                .chain(&va.samples).chain(&te.samples)
                .map(|s| s.id.as_str()).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
        }

        #[test]
        fn kappa_is_one_on_full_agreement(rows in proptest::collection::vec(0usize..3, 2..8)) {
            let mut m: Vec<Vec<usize>> = Vec::new();
            for &c in &rows {
                let mut row = vec![0usize; 3];
                row[c] = 4;
                m.push(row);
            }
            let distinct = {
                let mut r = rows.clone();
                r.sort();
                r.dedup();
                r.len()
            };
            if distinct > 1 {
                let k = fleiss_kappa(&m, 4).unwrap();
                prop_assert!((k - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn kappa_invariant_under_category_permutation(
            rows in proptest::collection::vec(proptest::collection::vec(0usize..4, 3), 2..6)
        ) {
            // build count rows summing to 4 over 3 categories
            let mut m: Vec<Vec<usize>> = Vec::new();
            for r in &rows {
                let s: usize = r.iter().sum();
                let mut row = r.clone();
                if s == 0 { row[0] = 4; } else {
                    // rescale to sum 4 by padding the first category
                    let mut total: usize = row.iter().sum();
                    while total > 4 {
                        for v in row.iter_mut() {
                            if *v > 0 && total > 4 { *v -= 1; total -= 1; }
                        }
                    }
                    row[0] += 4 - row.iter().sum::<usize>();
                }
                m.push(row);
            }
            let permuted: Vec<Vec<usize>> = m.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
            match (fleiss_kappa(&m, 4), fleiss_kappa(&permuted, 4)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed definedness"),
            }
        }
    }
}
