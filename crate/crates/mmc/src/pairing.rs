//! Image-to-conversation assignment: the three-facet similarity score with
//! hierarchical thresholding, the metadata filename codec, and the
//! word-overlap reporter. Embeddings come from a pluggable provider; a
//! deterministic mock ships for tests.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone)]
pub struct PairingConfig {
    pub w_text: f64,
    pub w_aspect: f64,
    pub w_severity: f64,
    pub theta_text: f64,
    pub theta_aspect: f64,
    pub theta_severity: f64,
    pub theta_global: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            w_text: 0.5,
            w_aspect: 0.25,
            w_severity: 0.25,
            theta_text: 0.20,
            theta_aspect: 0.20,
            theta_severity: 0.20,
            theta_global: 0.25,
        }
    }
}

impl PairingConfig {
    /// Normalized weights; rejects negatives and an all-zero triple.
    pub fn normalized_weights(&self) -> Result<(f64, f64, f64)> {
        if self.w_text < 0.0 || self.w_aspect < 0.0 || self.w_severity < 0.0 {
            return Err(Error::Config("pairing weights must be non-negative".into()));
        }
        let sum = self.w_text + self.w_aspect + self.w_severity;
        if sum == 0.0 {
            return Err(Error::Config("pairing weights sum to zero".into()));
        }
        Ok((self.w_text / sum, self.w_aspect / sum, self.w_severity / sum))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub category: String,
    pub subreddit: String,
    pub score: i64,
    pub term: String,
    pub post_id: String,
}

impl ImageRecord {
    pub fn id(&self) -> String {
        format_image_filename(self)
    }
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Parse(format!("empty {name} field")));
    }
    if value.contains("__") {
        return Err(Error::Parse(format!(
            "{name} field '{value}' contains the separator '__'"
        )));
    }
    Ok(())
}

/// `category__subreddit__score{score}__{term}__{post_id}.jpg`
pub fn format_image_filename(r: &ImageRecord) -> String {
    format!(
        "{}__{}__score{}__{}__{}.jpg",
        r.category, r.subreddit, r.score, r.term, r.post_id
    )
}

/// Inverse of [`format_image_filename`]; errors name the offending segment.
pub fn parse_image_filename(name: &str) -> Result<ImageRecord> {
    let stem = name
        .strip_suffix(".jpg")
        .ok_or_else(|| Error::Parse(format!("'{name}': missing .jpg suffix")))?;
    let parts: Vec<&str> = stem.split("__").collect();
    if parts.len() != 5 {
        return Err(Error::Parse(format!(
            "'{name}': expected 5 '__'-separated segments, found {}",
            parts.len()
        )));
    }
    let score_str = parts[2]
        .strip_prefix("score")
        .ok_or_else(|| Error::Parse(format!("'{name}': segment 3 lacks the 'score' prefix")))?;
    let score: i64 = score_str
        .parse()
        .map_err(|_| Error::Parse(format!("'{name}': segment 3 score '{score_str}' is not an integer")))?;
    let rec = ImageRecord {
        category: parts[0].to_string(),
        subreddit: parts[1].to_string(),
        score,
        term: parts[3].to_string(),
        post_id: parts[4].to_string(),
    };
    for (field, value) in [
        ("category", &rec.category),
        ("subreddit", &rec.subreddit),
        ("term", &rec.term),
        ("post_id", &rec.post_id),
    ] {
        check_field(field, value)?;
    }
    Ok(rec)
}

/// Weighted three-facet similarity with normalized weights.
pub fn combined_score(
    s_text: f64,
    s_aspect: f64,
    s_severity: f64,
    cfg: &PairingConfig,
) -> Result<f64> {
    let (wt, wa, ws) = cfg.normalized_weights()?;
    Ok(wt * s_text + wa * s_aspect + ws * s_severity)
}

/// Embedding source for conversations, facet prompts, and images. Vectors
/// must be unit-normalized; errors mark the item as skipped.
pub trait EmbedProvider {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, record: &ImageRecord) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic mock provider: seeded random unit vectors with a shared
/// class-correlated component, so images of a category score higher against
/// conversations mentioning the matching terms.
pub struct MockProvider {
    seed: u64,
    dim: usize,
}

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockProvider { seed, dim }
    }

    fn unit_vector(&self, key: &str) -> Vec<f64> {
        let mut rng = substream(self.seed, &format!("embed:{key}"));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        v
    }

    fn blended(&self, noise_key: &str, class_keys: &[String]) -> Vec<f64> {
        let mut v = self.unit_vector(noise_key);
        for key in class_keys {
            let class = self.unit_vector(&format!("class:{key}"));
            for (a, &b) in v.iter_mut().zip(&class) {
                *a += 2.0 * b;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        v
    }
}

impl EmbedProvider for MockProvider {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let class_keys: Vec<String> = crate::datagen::ASPECT_KEYWORDS
            .iter()
            .chain(crate::datagen::SEVERITY_KEYWORDS.iter())
            .filter(|k| text.to_lowercase().contains(*k as &str))
            .map(|k| k.to_string())
            .collect();
        Ok(self.blended(&format!("text:{text}"), &class_keys))
    }

    fn embed_image(&self, record: &ImageRecord) -> Result<Vec<f64>> {
        let keys = vec![record.category.to_lowercase(), record.term.to_lowercase()];
        Ok(self.blended(&format!("image:{}", record.id()), &keys))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Assignment {
    pub conversation_id: String,
    pub image_id: String,
    pub s_text: f64,
    pub s_aspect: f64,
    pub s_severity: f64,
    pub s_combined: f64,
}

/// A conversation to pair: its text plus the two facet prompts.
#[derive(Debug, Clone)]
pub struct PairingQuery {
    pub id: String,
    pub text: String,
    pub aspect_prompt: String,
    pub severity_prompt: String,
}

pub fn aspect_prompt(aspect: &str) -> String {
    format!("This complaint is about {aspect}.")
}

pub fn severity_prompt(severity: &str) -> String {
    format!("The severity of this complaint is {severity}.")
}

/// Hierarchical thresholding: an image is a candidate only when all three
/// facet similarities clear their thresholds; the best candidate by combined
/// score wins, and only if it clears the global threshold. Ties break to the
/// lexicographically smallest image id. Provider failures skip the item.
pub fn assign_images<P: EmbedProvider>(
    queries: &[PairingQuery],
    images: &[ImageRecord],
    provider: &P,
    cfg: &PairingConfig,
) -> Result<(Vec<Assignment>, Vec<String>)> {
    cfg.normalized_weights()?;
    let mut skipped = Vec::new();
    let mut embedded: Vec<(String, &ImageRecord, Vec<f64>)> = Vec::with_capacity(images.len());
    for rec in images {
        match provider.embed_image(rec) {
            Ok(e) => embedded.push((rec.id(), rec, e)),
            Err(err) => skipped.push(format!("image {}: {err}", rec.id())),
        }
    }
    // deterministic candidate order for the lexicographic tie-break
    embedded.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = Vec::new();
    for q in queries {
        let (et, ea, es) = match (
            provider.embed_text(&q.text),
            provider.embed_text(&q.aspect_prompt),
            provider.embed_text(&q.severity_prompt),
        ) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            _ => {
                skipped.push(format!("conversation {}: embedding failed", q.id));
                continue;
            }
        };
        let mut best: Option<Assignment> = None;
        for (id, _rec, ei) in &embedded {
            let s_text = cosine(&et, ei);
            let s_aspect = cosine(&ea, ei);
            let s_severity = cosine(&es, ei);
            if s_text < cfg.theta_text
                || s_aspect < cfg.theta_aspect
                || s_severity < cfg.theta_severity
            {
                continue;
            }
            let s_combined = combined_score(s_text, s_aspect, s_severity, cfg)?;
            let better = match &best {
                None => true,
                Some(b) => s_combined > b.s_combined,
            };
            if better {
                best = Some(Assignment {
                    conversation_id: q.id.clone(),
                    image_id: id.clone(),
                    s_text,
                    s_aspect,
                    s_severity,
                    s_combined,
                });
            }
        }
        match best {
            Some(a) if a.s_combined >= cfg.theta_global => out.push(a),
            _ => {} // no image assigned
        }
    }
    Ok((out, skipped))
}

/// CSV rendering of assignments.
pub fn assignments_to_csv(assignments: &[Assignment]) -> String {
    let mut s = String::from("conversation_id,image_id,s_text,s_aspect,s_severity,s_combined\n");
    for a in assignments {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.conversation_id, a.image_id, a.s_text, a.s_aspect, a.s_severity, a.s_combined
        ));
    }
    s
}

fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Jaccard word overlap between a caption and the conversation text;
/// reported only, never used in assignment. Two empty sets give 0.
pub fn word_overlap(caption: &str, text: &str) -> f64 {
    let a = token_set(caption);
    let b = token_set(text);
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filename_codec_examples() {
        let r = ImageRecord {
            category: "battery".into(),
            subreddit: "apple".into(),
            score: 152,
            term: "drain".into(),
            post_id: "ab12".into(),
        };
        assert_eq!(format_image_filename(&r), "battery__apple__score152__drain__ab12.jpg");
        assert_eq!(parse_image_filename(&format_image_filename(&r)).unwrap(), r);
        assert!(parse_image_filename("battery__apple__score152__drain__ab12").is_err());
        assert!(parse_image_filename("a__b__score1__c.jpg").is_err());
        assert!(parse_image_filename("a__b__1__c__d.jpg").is_err());
        assert!(parse_image_filename("a__b__scoreX__c__d.jpg").is_err());
        // negative scores round-trip too
        let neg = ImageRecord {
            score: -3,
            ..r.clone()
        };
        assert_eq!(parse_image_filename(&format_image_filename(&neg)).unwrap(), neg);
    }

    #[test]
    fn parse_errors_name_the_segment() {
        let err = parse_image_filename("a__b__1__c__d.jpg").unwrap_err().to_string();
        assert!(err.contains("segment 3"), "{err}");
        let err = parse_image_filename("nope.jpg").unwrap_err().to_string();
        assert!(err.contains("segments"), "{err}");
        let err = parse_image_filename("x").unwrap_err().to_string();
        assert!(err.contains(".jpg"), "{err}");
    }

    #[test]
    fn combined_score_examples() {
        let cfg = PairingConfig::default();
        assert!((combined_score(0.8, 0.4, 0.4, &cfg).unwrap() - 0.6).abs() < 1e-12);
        // equal sims collapse to the shared value under any normalized weights
        let odd = PairingConfig {
            w_text: 2.0,
            w_aspect: 3.0,
            w_severity: 5.0,
            ..cfg.clone()
        };
        assert!((combined_score(0.7, 0.7, 0.7, &odd).unwrap() - 0.7).abs() < 1e-12);
        let text_only = PairingConfig {
            w_text: 1.0,
            w_aspect: 0.0,
            w_severity: 0.0,
            ..cfg.clone()
        };
        assert_eq!(combined_score(0.33, 0.9, -0.2, &text_only).unwrap(), 0.33);
        let bad = PairingConfig {
            w_text: -0.1,
            ..cfg
        };
        assert!(combined_score(0.5, 0.5, 0.5, &bad).is_err());
    }

    #[test]
    fn word_overlap_examples() {
        assert_eq!(word_overlap("broken screen", "Broken screen!"), 1.0);
        assert_eq!(word_overlap("alpha beta", "gamma delta"), 0.0);
        assert!((word_overlap("broken screen", "screen cracked badly") - 0.25).abs() < 1e-12);
        assert_eq!(word_overlap("", ""), 0.0);
        assert_eq!(word_overlap("...", "!!!"), 0.0);
    }

    fn mock_images(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| ImageRecord {
                category: crate::datagen::ASPECT_KEYWORDS[i % 6].to_string(),
                subreddit: format!("sub{}", i % 3),
                score: (i as i64) * 7 % 300,
                term: crate::datagen::SEVERITY_KEYWORDS[i % 4].to_string(),
                post_id: format!("p{i:04}"),
            })
            .collect()
    }

    fn mock_queries(n: usize) -> Vec<PairingQuery> {
        (0..n)
            .map(|i| {
                let aspect = crate::datagen::ASPECT_KEYWORDS[i % 6];
                let severity = crate::datagen::SEVERITY_KEYWORDS[i % 4];
                PairingQuery {
                    id: format!("c{i:03}"),
                    text: format!("my {aspect} problem feels like {severity} honestly"),
                    aspect_prompt: aspect_prompt(aspect),
                    severity_prompt: severity_prompt(severity),
                }
            })
            .collect()
    }

    #[test]
    fn assignment_respects_thresholds_and_argmax() {
        let provider = MockProvider::new(9, 32);
        let queries = mock_queries(20);
        let images = mock_images(40);
        let cfg = PairingConfig::default();
        let (assignments, skipped) = assign_images(&queries, &images, &provider, &cfg).unwrap();
        assert!(skipped.is_empty());
        assert!(!assignments.is_empty(), "mock classes should align some pairs");
        for a in &assignments {
            assert!(a.s_text >= cfg.theta_text);
            assert!(a.s_aspect >= cfg.theta_aspect);
            assert!(a.s_severity >= cfg.theta_severity);
            assert!(a.s_combined >= cfg.theta_global);
        }
        // determinism
        let (again, _) = assign_images(&queries, &images, &provider, &cfg).unwrap();
        assert_eq!(assignments.len(), again.len());
        for (a, b) in assignments.iter().zip(&again) {
            assert_eq!(a.image_id, b.image_id);
        }
    }

    #[test]
    fn impossible_thresholds_assign_nothing() {
        let provider = MockProvider::new(9, 32);
        let cfg = PairingConfig {
            theta_text: 1.1,
            ..PairingConfig::default()
        };
        let (assignments, _) =
            assign_images(&mock_queries(5), &mock_images(10), &provider, &cfg).unwrap();
        assert!(assignments.is_empty());
    }

    #[test]
    fn raising_global_threshold_is_monotone() {
        let provider = MockProvider::new(21, 24);
        let queries = mock_queries(30);
        let images = mock_images(60);
        let mut last = usize::MAX;
        for theta in [0.20, 0.25, 0.30, 0.35, 0.40] {
            let cfg = PairingConfig {
                theta_global: theta,
                ..PairingConfig::default()
            };
            let (assignments, _) = assign_images(&queries, &images, &provider, &cfg).unwrap();
            assert!(assignments.len() <= last);
            last = assignments.len();
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let a = Assignment {
            conversation_id: "c1".into(),
            image_id: "i1".into(),
            s_text: 0.5,
            s_aspect: 0.25,
            s_severity: 0.75,
            s_combined: 0.5,
        };
        let csv = assignments_to_csv(&[a]);
        assert!(csv.starts_with("conversation_id,image_id,"));
        assert!(csv.contains("c1,i1,0.5,0.25,0.75,0.5"));
    }

    proptest! {
        #[test]
        fn codec_round_trips(
            cat in "[a-z]{1,8}", sub in "[a-z0-9]{1,8}", score in -500i64..5000,
            term in "[a-z]{1,8}", post in "[a-z0-9]{1,8}",
        ) {
            let r = ImageRecord {
                category: cat, subreddit: sub, score, term, post_id: post,
            };
            prop_assert_eq!(parse_image_filename(&format_image_filename(&r)).unwrap(), r);
        }

        #[test]
        fn combined_score_stays_in_hull(
            st in -1.0f64..1.0, sa in -1.0f64..1.0, ss in -1.0f64..1.0,
            wt in 0.0f64..2.0, wa in 0.0f64..2.0, ws in 0.0f64..2.0,
        ) {
            prop_assume!(wt + wa + ws > 1e-9);
            let cfg = PairingConfig {
                w_text: wt, w_aspect: wa, w_severity: ws,
                ..PairingConfig::default()
            };
            let s = combined_score(st, sa, ss, &cfg).unwrap();
            let lo = st.min(sa).min(ss) - 1e-12;
            let hi = st.max(sa).max(ss) + 1e-12;
            prop_assert!(s >= lo && s <= hi);
        }

        #[test]
        fn raising_any_facet_threshold_is_monotone(step in 0usize..4) {
            let provider = MockProvider::new(4, 16);
            let queries = mock_queries(12);
            let images = mock_images(24);
            let base = PairingConfig::default();
            let theta = 0.15 + 0.05 * step as f64;
            let tighter = PairingConfig { theta_aspect: theta, ..base.clone() };
            let looser = PairingConfig { theta_aspect: theta - 0.05, ..base };
            let (a, _) = assign_images(&queries, &images, &provider, &tighter).unwrap();
            let (b, _) = assign_images(&queries, &images, &provider, &looser).unwrap();
            prop_assert!(a.len() <= b.len());
        }
    }
}
