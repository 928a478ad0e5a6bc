//! Embedding similarity, regime classification and the wake–wake control.

pub mod report;
pub mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{embed, BackendError, EmbeddingBackend};
use crate::domain::{EmbeddingVector, RunRecord, Stage};

pub use stats::{mann_whitney_u, spearman, StatResult, StatsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("similarity {0} is outside [-1, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, AnalysisError> {
    let (a, b) = (u.values(), v.values());
    if a.len() != b.len() {
        return Err(AnalysisError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    // sqrt(aa * bb) is exact for identical inputs, so cos(u, u) == 1.0.
    let product = aa * bb;
    let denom = if product.is_normal() { product.sqrt() } else { aa.sqrt() * bb.sqrt() };
    Ok((dot / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityRegime {
    Low,
    Intermediate,
    High,
}

impl SimilarityRegime {
    pub const ALL: [SimilarityRegime; 3] = [Self::Low, Self::Intermediate, Self::High];
    pub const LOW_BOUND: f64 = 0.4;
    pub const HIGH_BOUND: f64 = 0.7;
}

impl fmt::Display for SimilarityRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Low => "low",
            Self::Intermediate => "intermediate",
            Self::High => "high",
        })
    }
}

/// Low below 0.4, high above 0.7, intermediate in between with both bounds included.
pub fn classify_regime(similarity: f64) -> Result<SimilarityRegime, AnalysisError> {
    if !(-1.0..=1.0).contains(&similarity) {
        return Err(AnalysisError::OutOfRange(similarity));
    }
    Ok(if similarity < SimilarityRegime::LOW_BOUND {
        SimilarityRegime::Low
    } else if similarity > SimilarityRegime::HIGH_BOUND {
        SimilarityRegime::High
    } else {
        SimilarityRegime::Intermediate
    })
}

/// Embeds texts once and enforces a single dimension across one analysis.
pub struct EmbeddingCache<'a> {
    backend: &'a dyn EmbeddingBackend,
    dim: Option<usize>,
    cache: HashMap<String, EmbeddingVector>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(backend: &'a dyn EmbeddingBackend) -> Self {
        Self {
            backend,
            dim: None,
            cache: HashMap::new(),
        }
    }

    pub fn embed(&mut self, text: &str) -> Result<EmbeddingVector, AnalysisError> {
        if let Some(v) = self.cache.get(text) {
            return Ok(v.clone());
        }
        let v = embed(self.backend, text)?;
        match self.dim {
            Some(d) if d != v.dim() => {
                return Err(BackendError::DimensionMismatch {
                    expected: d,
                    got: v.dim(),
                }
                .into())
            }
            _ => self.dim = Some(v.dim()),
        }
        self.cache.insert(text.to_string(), v.clone());
        Ok(v)
    }

    pub fn similarity(&mut self, a: &str, b: &str) -> Result<f64, AnalysisError> {
        let u = self.embed(a)?;
        let v = self.embed(b)?;
        cosine_similarity(&u, &v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityOutcome {
    Attached(f64),
    /// idea_wake or idea_dream absent; record left as is.
    MissingIdeas,
    /// Embedding or similarity failed; record annotated.
    Failed(AnalysisError),
}

/// Sets `record.similarity` to cos(embed(idea_wake), embed(idea_dream)).
pub fn attach_similarity(record: &mut RunRecord, embeddings: &mut EmbeddingCache<'_>) -> SimilarityOutcome {
    let (Some(wake), Some(dream)) = (record.idea_wake.clone(), record.idea_dream.clone()) else {
        return SimilarityOutcome::MissingIdeas;
    };
    match embeddings.similarity(&wake, &dream) {
        Ok(s) => {
            record.similarity = Some(s);
            record.annotations.retain(|a| a.stage != Stage::Similarity);
            SimilarityOutcome::Attached(s)
        }
        Err(e) => {
            record.similarity = None;
            record.annotate(Stage::Similarity, e.to_string());
            SimilarityOutcome::Failed(e)
        }
    }
}

/// Conditions under which two wake outputs are expected to coincide:
/// everything that shapes the wake request, i.e. the run config minus run id
/// and dream temperature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WakeConditions {
    pub pair_id: String,
    pub template: u8,
    pub word_limit: u32,
    pub wake_temperature_bits: u64,
    pub seed: u64,
}

impl WakeConditions {
    pub fn of(record: &RunRecord) -> Self {
        let c = &record.config;
        Self {
            pair_id: c.pair.pair_id.clone(),
            template: c.template.get(),
            word_limit: c.word_limit,
            wake_temperature_bits: c.wake_temperature.to_bits(),
            seed: c.seed,
        }
    }
}

impl fmt::Display for WakeConditions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/t{}/z{}/w{}/s{}",
            self.pair_id,
            self.template,
            self.word_limit,
            f64::from_bits(self.wake_temperature_bits),
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    pub group: String,
    pub run_a: u64,
    pub run_b: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlResult {
    pub pairs: Vec<ControlPair>,
    /// Groups with a single wake output, which have nothing to compare.
    pub skipped_groups: Vec<String>,
    pub failures: Vec<String>,
}

impl ControlResult {
    pub fn similarities(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.similarity).collect()
    }
}

/// Pairwise wake_out similarity within each group of identical wake conditions.
pub fn wake_wake_control(records: &[RunRecord], embeddings: &mut EmbeddingCache<'_>) -> ControlResult {
    let mut groups: BTreeMap<WakeConditions, Vec<(u64, &str)>> = BTreeMap::new();
    for r in records {
        if let Some(w) = r.wake_out.as_deref() {
            groups.entry(WakeConditions::of(r)).or_default().push((r.run_id(), w));
        }
    }
    let mut out = ControlResult::default();
    for (key, mut members) in groups {
        let label = key.to_string();
        if members.len() < 2 {
            log::warn!("wake-wake control: group {label} has a single wake output; skipped");
            out.skipped_groups.push(label);
            continue;
        }
        members.sort_by_key(|m| m.0);
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                match embeddings.similarity(members[i].1, members[j].1) {
                    Ok(s) => out.pairs.push(ControlPair {
                        group: label.clone(),
                        run_a: members[i].0,
                        run_b: members[j].0,
                        similarity: s,
                    }),
                    Err(e) => out.failures.push(format!("{label}: {e}")),
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::HashEmbedder;
    use crate::domain::tests::gated_record;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 1 / sqrt(2)
        let s = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((s - 0.707_106_781_186_547_6).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v(&[-2.0, 0.0]), &v(&[3.0, 0.0])).unwrap(), -1.0);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(AnalysisError::DimMismatch(1, 2))
        );
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(AnalysisError::ZeroVector));
    }

    #[test]
    fn regimes_from_reference_runs() {
        assert_eq!(classify_regime(0.316).unwrap(), SimilarityRegime::Low);
        assert_eq!(classify_regime(0.636).unwrap(), SimilarityRegime::Intermediate);
        assert_eq!(classify_regime(0.71).unwrap(), SimilarityRegime::High);
        assert_eq!(classify_regime(0.4).unwrap(), SimilarityRegime::Intermediate);
        assert_eq!(classify_regime(0.7).unwrap(), SimilarityRegime::Intermediate);
        assert_eq!(classify_regime(-1.0).unwrap(), SimilarityRegime::Low);
        assert!(classify_regime(1.01).is_err());
        assert!(classify_regime(f64::NAN).is_err());
    }

    #[test]
    fn attach_similarity_cases() {
        let e = HashEmbedder::new(16);
        let mut cache = EmbeddingCache::new(&e);

        let mut same = gated_record();
        same.idea_dream = same.idea_wake.clone();
        assert_eq!(attach_similarity(&mut same, &mut cache), SimilarityOutcome::Attached(1.0));

        let mut r = gated_record();
        let outcome = attach_similarity(&mut r, &mut cache);
        // Independent recomputation straight from the embedder.
        let a = e.embed_text(r.idea_wake.as_deref().unwrap()).unwrap();
        let b = e.embed_text(r.idea_dream.as_deref().unwrap()).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        match outcome {
            SimilarityOutcome::Attached(s) => assert!((s - dot / (na * nb)).abs() < 1e-12),
            other => panic!("{other:?}"),
        }

        let mut missing = gated_record();
        missing.idea_dream = None;
        missing.similarity = None;
        let before = missing.clone();
        assert_eq!(attach_similarity(&mut missing, &mut cache), SimilarityOutcome::MissingIdeas);
        assert_eq!(missing, before);
    }

    struct FixedDim(usize);
    impl EmbeddingBackend for FixedDim {
        fn model_name(&self) -> &str {
            "fixed"
        }
        fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
            let d = if text.len() % 2 == 0 { self.0 } else { self.0 + 1 };
            Ok(vec![1.0; d])
        }
    }

    #[test]
    fn dimension_change_within_analysis_is_fatal() {
        let e = FixedDim(4);
        let mut cache = EmbeddingCache::new(&e);
        cache.embed("ab").unwrap();
        assert!(matches!(
            cache.embed("abc"),
            Err(AnalysisError::Backend(BackendError::DimensionMismatch { expected: 4, got: 5 }))
        ));
    }

    #[test]
    fn wake_wake_control_cases() {
        let e = HashEmbedder::new(32);
        let mut base = gated_record();
        base.config.seed = 0;
        let mut recs = Vec::new();
        for (id, t) in [(1, 1.0), (2, 3.0), (3, 10.0)] {
            let mut r = base.clone();
            r.config.run_id = id;
            r.config.dream_temperature = t;
            recs.push(r);
        }
        let mut cache = EmbeddingCache::new(&e);
        let res = wake_wake_control(&recs, &mut cache);
        assert_eq!(res.pairs.len(), 3);
        assert!(res.pairs.iter().all(|p| p.similarity == 1.0));

        recs[1].wake_out = Some("Something else entirely, about rivers.".into());
        let res = wake_wake_control(&recs, &mut cache);
        let expected = {
            let a = e.embed_text(recs[0].wake_out.as_deref().unwrap()).unwrap();
            let b = e.embed_text(recs[1].wake_out.as_deref().unwrap()).unwrap();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let p12 = res.pairs.iter().find(|p| (p.run_a, p.run_b) == (1, 2)).unwrap();
        assert!(p12.similarity < 1.0);
        assert!((p12.similarity - expected).abs() < 1e-12);

        let mut lone = base.clone();
        lone.config.seed = 9;
        let res = wake_wake_control(&[lone], &mut cache);
        assert!(res.pairs.is_empty());
        assert_eq!(res.skipped_groups.len(), 1);

        assert_eq!(wake_wake_control(&[], &mut cache), ControlResult::default());
    }
}
