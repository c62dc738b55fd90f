//! Keyword tagging, cross-pair selection and sound-term retrieval.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{FunnelError, Result};
use crate::tensor::{dot, norm, Tensor};

/// `{visual_tag: [audio_keywords]}`.
pub type KeywordTable = BTreeMap<String, Vec<String>>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TagMatch {
    pub tags: BTreeSet<(String, String)>,
    /// No visual tag occurred together with one of its audio keywords.
    pub silent: bool,
}

fn word_regex(term: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(term.trim()))).expect("escaped term")
}

/// Case-insensitive whole-word matching without stemming. A visual tag must
/// occur as a phrase; an audio keyword matches on its leading word, so
/// "horn" in a caption matches the keyword "horn blasts".
pub fn match_tags(caption: &str, table: &KeywordTable) -> Result<TagMatch> {
    if table.is_empty() {
        return Err(FunnelError::Config("keyword table is empty".into()));
    }
    let mut tags = BTreeSet::new();
    for (visual, keywords) in table {
        if !word_regex(visual).is_match(caption) {
            continue;
        }
        for k in keywords {
            let head = k.split_whitespace().next().unwrap_or("");
            if !head.is_empty() && word_regex(head).is_match(caption) {
                tags.insert((visual.clone(), k.clone()));
            }
        }
    }
    let silent = tags.is_empty();
    Ok(TagMatch { tags, silent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub record_a: String,
    pub record_b: String,
    pub face_sim: f64,
    pub global_sim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossPairConfig {
    pub face_min: f64,
    pub global_min: f64,
    pub proximity_center: f64,
    pub proximity_tol: f64,
}

impl Default for CrossPairConfig {
    fn default() -> Self {
        CrossPairConfig {
            face_min: 0.35,
            global_min: 0.7,
            proximity_center: 0.9,
            proximity_tol: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairVerdict {
    Accepted,
    FaceTooLow,
    GlobalTooLow,
    /// Above the proximity band: near-duplicate frames.
    QuasiIdentical,
    /// Above the global floor but below the proximity band.
    TooDissimilar,
    InvalidSimilarity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDecision {
    pub record_a: String,
    pub record_b: String,
    pub verdict: PairVerdict,
}

fn verdict(c: &PairCandidate, cfg: &CrossPairConfig) -> PairVerdict {
    let in_range = |s: f64| (-1.0..=1.0).contains(&s);
    if !in_range(c.face_sim) || !in_range(c.global_sim) {
        return PairVerdict::InvalidSimilarity;
    }
    if c.face_sim <= cfg.face_min {
        return PairVerdict::FaceTooLow;
    }
    if c.global_sim <= cfg.global_min {
        return PairVerdict::GlobalTooLow;
    }
    let off = c.global_sim - cfg.proximity_center;
    if off.abs() <= cfg.proximity_tol {
        PairVerdict::Accepted
    } else if off > 0.0 {
        PairVerdict::QuasiIdentical
    } else {
        PairVerdict::TooDissimilar
    }
}

/// `face > face_min`, `global > global_min` and `|global - center| <= tol`.
pub fn select_cross_pairs(candidates: &[PairCandidate], cfg: &CrossPairConfig) -> Vec<PairDecision> {
    candidates
        .iter()
        .map(|c| PairDecision {
            record_a: c.record_a.clone(),
            record_b: c.record_b.clone(),
            verdict: verdict(c, cfg),
        })
        .collect()
}

/// Exact cosine index over unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    terms: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

const UNIT_TOL: f64 = 1e-9;

fn check_unit(term: &str, v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(FunnelError::Config(format!("vector for {term:?} has norm {n}, expected 1")));
    }
    Ok(())
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.1.len());
        let mut terms = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        for (t, v) in entries {
            if v.len() != dim {
                return Err(FunnelError::Config(format!("vector for {t:?} has {} dims, expected {dim}", v.len())));
            }
            check_unit(&t, &v)?;
            terms.push(t);
            vectors.push(v);
        }
        Ok(EmbeddingIndex { terms, vectors })
    }

    /// Builds from checkpoint records; each record's name is its term.
    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        Self::new(records.into_iter().map(|(n, t)| (n, t.into_data())).collect())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn term(&self, k: usize) -> &str {
        &self.terms[k]
    }

    /// Highest cosine similarity, first entry on ties, clamped to [-1, 1].
    pub fn nearest(&self, query: &[f64]) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(FunnelError::Config("embedding index is empty".into()));
        }
        if query.len() != self.dim() {
            return Err(FunnelError::Config(format!("query has {} dims, index has {}", query.len(), self.dim())));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (k, v) in self.vectors.iter().enumerate() {
            let s = dot(query, v);
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok((best.0, best.1.clamp(-1.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Substitution {
    pub term: String,
    pub matched: String,
    pub similarity: f64,
    pub substituted: bool,
    /// The term to use downstream.
    pub output: String,
}

/// Replaces a term with its nearest indexed description when the cosine
/// similarity is strictly above `tau`.
pub fn refine_sound_terms(terms: &[(String, Vec<f64>)], index: &EmbeddingIndex, tau: f64) -> Result<Vec<Substitution>> {
    if index.is_empty() {
        return Err(FunnelError::Config("embedding index is empty".into()));
    }
    terms
        .iter()
        .map(|(term, q)| {
            check_unit(term, q)?;
            let (k, similarity) = index.nearest(q)?;
            let substituted = similarity > tau;
            Ok(Substitution {
                term: term.clone(),
                matched: index.term(k).to_string(),
                similarity,
                substituted,
                output: if substituted { index.term(k).to_string() } else { term.clone() },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[&str])]) -> KeywordTable {
        entries
            .iter()
            .map(|(v, ks)| (v.to_string(), ks.iter().map(|k| k.to_string()).collect()))
            .collect()
    }

    #[test]
    fn tag_examples() {
        let t = table(&[("cat", &["meowing", "purring"]), ("boat", &["horn blasts", "engine sounds"])]);
        let m = match_tags("a cat meowing on a sofa", &t).unwrap();
        assert_eq!(m.tags, [("cat".to_string(), "meowing".to_string())].into());
        assert!(!m.silent);
        let m = match_tags("a cat on a sofa", &t).unwrap();
        assert!(m.tags.is_empty() && m.silent);
        let m = match_tags("A Boat sounds its HORN at dawn", &t).unwrap();
        assert_eq!(m.tags, [("boat".to_string(), "horn blasts".to_string())].into());
        assert!(match_tags("a catamaran meowing", &t).unwrap().silent);
        assert!(match_tags("x", &KeywordTable::new()).is_err());
    }

    fn cand(face: f64, global: f64) -> PairCandidate {
        PairCandidate {
            record_a: "a".into(),
            record_b: "b".into(),
            face_sim: face,
            global_sim: global,
        }
    }

    #[test]
    fn cross_pair_examples() {
        let cfg = CrossPairConfig::default();
        let v: Vec<_> = select_cross_pairs(&[cand(0.5, 0.88), cand(0.3, 0.9), cand(0.9, 0.99)], &cfg)
            .into_iter()
            .map(|d| d.verdict)
            .collect();
        assert_eq!(v, [PairVerdict::Accepted, PairVerdict::FaceTooLow, PairVerdict::QuasiIdentical]);
    }

    #[test]
    fn refine_threshold_is_strict() {
        let s = 0.8f64;
        let idx = EmbeddingIndex::new(vec![("explosion".into(), vec![1.0, 0.0])]).unwrap();
        let q = vec![("loud noise".to_string(), vec![s, (1.0 - s * s).sqrt()])];
        let r = refine_sound_terms(&q, &idx, 0.85).unwrap();
        assert!(!r[0].substituted);
        assert_eq!(r[0].output, "loud noise");
        let same = vec![("boom".to_string(), vec![1.0, 0.0])];
        let r = refine_sound_terms(&same, &idx, 0.85).unwrap();
        assert!(r[0].substituted && r[0].similarity == 1.0 && r[0].output == "explosion");
        let empty = EmbeddingIndex::new(Vec::new()).unwrap();
        assert!(refine_sound_terms(&same, &empty, 0.85).is_err());
    }
}
