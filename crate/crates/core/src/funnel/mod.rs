//! Staged record filtering and balancing.
//!
//! A stage applies its predicates in order, then rebalances the survivors
//! toward per-category target fractions by seeded stratified downsampling.
//! Within a category the kept records are those with the smallest
//! seed-derived key, so repeated balancing keeps a nested subset and a stage
//! applied twice equals the stage applied once.

mod retrieval;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedTree;

pub use retrieval::{
    match_tags, refine_sound_terms, select_cross_pairs, CrossPairConfig, EmbeddingIndex, KeywordTable,
    PairCandidate, PairDecision, PairVerdict, Substitution, TagMatch,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunnelError {
    #[error("record {id}: missing field {field}")]
    MissingField { id: String, field: &'static str },

    #[error("record {id}: {field} out of range: {detail}")]
    OutOfRange { id: String, field: &'static str, detail: String },

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("invalid funnel configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, FunnelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvCoherence {
    None,
    Weak,
    Strong,
}

/// Quality-model label. The low-quality class names are placeholders; the
/// source taxonomy counts thirteen classes without naming them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityLabel {
    HighQuality,
    Blurry,
    Watermark,
    OverlaidText,
    StaticFrames,
    CameraShake,
    LowLight,
    Overexposed,
    CompressionArtifacts,
    BlackBorders,
    Slideshow,
    SplitScreen,
    AbnormalSpeed,
    LowResolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Speaking,
    NonSpeaking,
}

/// One clip's precomputed annotations. Metric fields are optional so that a
/// stage can report exactly which field a record lacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarity_score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aesthetics: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_text_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub av_coherence: Option<AvCoherence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_label: Option<QualityLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    /// Label-system category, e.g. "animals" or "sports".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

fn need<T: Copy>(r: &DataRecord, v: Option<T>, field: &'static str) -> Result<T> {
    v.ok_or_else(|| FunnelError::MissingField {
        id: r.id.clone(),
        field,
    })
}

impl DataRecord {
    pub fn clarity(&self) -> Result<u8> {
        let c = need(self, self.clarity_score, "clarity_score")?;
        if !(1..=6).contains(&c) {
            return Err(FunnelError::OutOfRange {
                id: self.id.clone(),
                field: "clarity_score",
                detail: format!("{c} not in 1..=6"),
            });
        }
        Ok(c)
    }
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DataRecord>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(|e| FunnelError::Parse {
            line: k + 1,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FunnelError::Parse {
            line: k + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Predicate {
    HighQuality,
    OcrMax(f64),
    AestheticsMin(f64),
    AudioQualityMin(f64),
    CoherenceMin(AvCoherence),
    ClarityMin(u8),
}

impl Predicate {
    pub fn test(&self, r: &DataRecord) -> Result<bool> {
        Ok(match *self {
            Predicate::HighQuality => need(r, r.quality_label, "quality_label")? == QualityLabel::HighQuality,
            Predicate::OcrMax(m) => need(r, r.ocr_text_ratio, "ocr_text_ratio")? <= m,
            Predicate::AestheticsMin(m) => need(r, r.aesthetics, "aesthetics")? >= m,
            Predicate::AudioQualityMin(m) => need(r, r.audio_quality, "audio_quality")? >= m,
            Predicate::CoherenceMin(m) => need(r, r.av_coherence, "av_coherence")? >= m,
            Predicate::ClarityMin(m) => r.clarity()? >= m,
        })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::HighQuality => write!(f, "quality_label == high_quality"),
            Predicate::OcrMax(m) => write!(f, "ocr_text_ratio <= {m}"),
            Predicate::AestheticsMin(m) => write!(f, "aesthetics >= {m}"),
            Predicate::AudioQualityMin(m) => write!(f, "audio_quality >= {m}"),
            Predicate::CoherenceMin(m) => write!(f, "av_coherence >= {m:?}"),
            Predicate::ClarityMin(m) => write!(f, "clarity_score >= {m}"),
        }
    }
}

/// What a balancing step stratifies on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BalanceKey {
    Scenario,
    Category,
    /// "aesthetic" when `aesthetics >= min`, otherwise "realistic".
    AestheticClass { min: f64 },
}

impl BalanceKey {
    fn class(&self, r: &DataRecord) -> Result<String> {
        Ok(match self {
            BalanceKey::Scenario => match need(r, r.scenario, "scenario")? {
                Scenario::Speaking => "speaking".into(),
                Scenario::NonSpeaking => "non_speaking".into(),
            },
            BalanceKey::Category => r.category.clone().ok_or_else(|| FunnelError::MissingField {
                id: r.id.clone(),
                field: "category",
            })?,
            BalanceKey::AestheticClass { min } => {
                if need(r, r.aesthetics, "aesthetics")? >= *min {
                    "aesthetic".into()
                } else {
                    "realistic".into()
                }
            }
        })
    }
}

/// Target fractions per class; classes without a target share the remainder,
/// or are dropped when the targets sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub key: BalanceKey,
    pub targets: BTreeMap<String, f64>,
}

const OTHER: &str = "\u{0}other";

impl Balance {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.targets.values().sum();
        if self.targets.values().any(|f| !(*f >= 0.0 && *f <= 1.0)) || sum > 1.0 + 1e-9 {
            return Err(FunnelError::Config(format!("target fractions must lie in [0, 1] and sum to <= 1, got {sum}")));
        }
        Ok(())
    }

    /// Per-class quotas for the given class counts.
    fn quotas(&self, counts: &BTreeMap<String, usize>) -> BTreeMap<String, usize> {
        let rest = 1.0 - self.targets.values().sum::<f64>();
        let frac = |c: &str| -> f64 {
            if c == OTHER {
                if rest > 1e-9 { rest } else { 0.0 }
            } else {
                self.targets.get(c).copied().unwrap_or(0.0)
            }
        };
        let total = counts
            .iter()
            .filter(|(c, _)| frac(c) > 0.0)
            .map(|(c, &n)| n as f64 / frac(c))
            .fold(f64::INFINITY, f64::min);
        let total = if total.is_finite() { total } else { 0.0 };
        counts
            .iter()
            .map(|(c, &n)| {
                let q = (frac(c) * total + 1e-9).floor() as usize;
                (c.clone(), q.min(n))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Joint,
    Ct,
    Sft,
    Refiner,
}

impl std::str::FromStr for StageName {
    type Err = FunnelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(StageName::Joint),
            "ct" => Ok(StageName::Ct),
            "sft" => Ok(StageName::Sft),
            "refiner" => Ok(StageName::Refiner),
            _ => Err(FunnelError::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub name: StageName,
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub balance: Vec<Balance>,
    #[serde(default)]
    pub seed: u64,
}

impl FunnelStage {
    /// Canonical stages with nested thresholds: each stage keeps the
    /// previous stage's predicates and tightens them.
    pub fn preset(name: StageName) -> Self {
        let mut predicates = vec![
            Predicate::HighQuality,
            Predicate::OcrMax(0.05),
            Predicate::AestheticsMin(4.0),
            Predicate::AudioQualityMin(3.0),
            Predicate::CoherenceMin(AvCoherence::Weak),
        ];
        let mut balance = Vec::new();
        if name >= StageName::Ct {
            predicates.push(Predicate::ClarityMin(3));
        }
        if name == StageName::Ct {
            balance.push(Balance {
                key: BalanceKey::Scenario,
                targets: [("speaking".to_string(), 0.5), ("non_speaking".to_string(), 0.5)].into(),
            });
        }
        if name >= StageName::Sft {
            predicates.push(Predicate::ClarityMin(4));
        }
        if name == StageName::Sft {
            balance.push(Balance {
                key: BalanceKey::AestheticClass { min: 6.5 },
                targets: [("aesthetic".to_string(), 0.75), ("realistic".to_string(), 0.25)].into(),
            });
        }
        if name == StageName::Refiner {
            predicates.push(Predicate::ClarityMin(6));
        }
        FunnelStage {
            name,
            predicates,
            balance,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.balance.iter().try_for_each(Balance::validate)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PredicateCount {
    pub predicate: String,
    pub removed: usize,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: StageName,
    pub input: usize,
    pub predicates: Vec<PredicateCount>,
    /// Output count per class of each balancing key, keyed `key/class`.
    pub categories: BTreeMap<String, usize>,
    pub balance_removed: usize,
    pub output: usize,
}

fn balance_key_name(k: &BalanceKey) -> &'static str {
    match k {
        BalanceKey::Scenario => "scenario",
        BalanceKey::Category => "category",
        BalanceKey::AestheticClass { .. } => "aesthetic_class",
    }
}

fn balance_once(records: Vec<DataRecord>, b: &Balance, seed: u64) -> Result<Vec<DataRecord>> {
    let tree = SeedTree::new(seed).derive("balance");
    let mut groups: BTreeMap<String, Vec<(u64, DataRecord)>> = BTreeMap::new();
    for r in records {
        let mut class = b.key.class(&r)?;
        if !b.targets.contains_key(&class) {
            class = OTHER.to_string();
        }
        let key = tree.derive(&r.id).seed();
        groups.entry(class).or_default().push((key, r));
    }
    let counts = groups.iter().map(|(c, v)| (c.clone(), v.len())).collect();
    let quotas = b.quotas(&counts);
    let mut kept = Vec::new();
    for (class, mut members) in groups {
        members.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        members.truncate(quotas[&class]);
        kept.extend(members.into_iter().map(|(_, r)| r));
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(kept)
}

/// Filters then balances; output is ordered by record id.
pub fn apply_stage(records: &[DataRecord], stage: &FunnelStage) -> Result<(Vec<DataRecord>, StageReport)> {
    stage.validate()?;
    let mut current: Vec<DataRecord> = records.to_vec();
    let mut counts = Vec::with_capacity(stage.predicates.len());
    for p in &stage.predicates {
        let before = current.len();
        let mut next = Vec::with_capacity(before);
        for r in current {
            if p.test(&r)? {
                next.push(r);
            }
        }
        counts.push(PredicateCount {
            predicate: p.to_string(),
            removed: before - next.len(),
            remaining: next.len(),
        });
        current = next;
    }
    let filtered = current.len();
    // Iterate to a fixed point so that a second application changes nothing.
    loop {
        let before = current.len();
        for b in &stage.balance {
            current = balance_once(current, b, stage.seed)?;
        }
        if current.len() == before {
            break;
        }
    }
    current.sort_by(|a, b| a.id.cmp(&b.id));
    let mut categories = BTreeMap::new();
    for b in &stage.balance {
        for r in &current {
            *categories
                .entry(format!("{}/{}", balance_key_name(&b.key), b.key.class(r)?))
                .or_insert(0) += 1;
        }
    }
    let report = StageReport {
        stage: stage.name,
        input: records.len(),
        predicates: counts,
        categories,
        balance_removed: filtered - current.len(),
        output: current.len(),
    };
    Ok((current, report))
}

const CAPTIONS: [&str; 6] = [
    "a cat meowing on a sofa",
    "a boat horn blasts across the harbor",
    "a man talks to the camera",
    "rain falls on a quiet street",
    "a dog barking in the yard",
    "two people chat in a kitchen",
];

const LOW_QUALITY: [QualityLabel; 4] = [
    QualityLabel::Blurry,
    QualityLabel::Watermark,
    QualityLabel::CameraShake,
    QualityLabel::LowLight,
];

/// Random records with every field populated, ids `rec-00000`, ...
pub fn make_synthetic_records(n: usize, seed: u64) -> Vec<DataRecord> {
    use rand::Rng as _;
    let root = SeedTree::new(seed).derive("records");
    (0..n)
        .map(|k| {
            let mut rng = root.index(k as u64).rng();
            let quality_label = if rng.random::<f64>() < 0.8 {
                QualityLabel::HighQuality
            } else {
                LOW_QUALITY[rng.random_range(0..LOW_QUALITY.len())]
            };
            let av_coherence = match rng.random_range(0..10) {
                0 => AvCoherence::None,
                1..=3 => AvCoherence::Weak,
                _ => AvCoherence::Strong,
            };
            DataRecord {
                id: format!("rec-{k:05}"),
                caption: CAPTIONS[rng.random_range(0..CAPTIONS.len())].to_string(),
                clarity_score: Some(rng.random_range(1..=6)),
                aesthetics: Some((rng.random::<f64>() * 10.0 * 100.0).round() / 100.0),
                ocr_text_ratio: Some((rng.random::<f64>() * 0.1 * 1000.0).round() / 1000.0),
                audio_quality: Some(((1.0 + rng.random::<f64>() * 4.0) * 100.0).round() / 100.0),
                av_coherence: Some(av_coherence),
                quality_label: Some(quality_label),
                tags: Vec::new(),
                scenario: Some(if rng.random::<bool>() { Scenario::Speaking } else { Scenario::NonSpeaking }),
                category: Some(["animals", "sports", "transportation", "music"][rng.random_range(0..4)].to_string()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: usize, clarity: u8, aesthetics: f64, speaking: bool) -> DataRecord {
        DataRecord {
            id: format!("r{id:05}"),
            caption: "a cat meowing".into(),
            clarity_score: Some(clarity),
            aesthetics: Some(aesthetics),
            ocr_text_ratio: Some(0.0),
            audio_quality: Some(4.0),
            av_coherence: Some(AvCoherence::Strong),
            quality_label: Some(QualityLabel::HighQuality),
            tags: Vec::new(),
            scenario: Some(if speaking { Scenario::Speaking } else { Scenario::NonSpeaking }),
            category: None,
        }
    }

    #[test]
    fn empty_input_gives_zero_report() {
        let (out, rep) = apply_stage(&[], &FunnelStage::preset(StageName::Sft)).unwrap();
        assert!(out.is_empty());
        assert_eq!((rep.input, rep.output, rep.balance_removed), (0, 0, 0));
        assert!(rep.predicates.iter().all(|p| p.removed == 0 && p.remaining == 0));
    }

    #[test]
    fn missing_field_names_record_and_field() {
        let mut r = record(1, 5, 5.0, true);
        r.audio_quality = None;
        let e = apply_stage(&[r], &FunnelStage::preset(StageName::Joint)).unwrap_err();
        assert_eq!(
            e,
            FunnelError::MissingField {
                id: "r00001".into(),
                field: "audio_quality"
            }
        );
    }

    #[test]
    fn quotas_follow_targets() {
        let b = Balance {
            key: BalanceKey::AestheticClass { min: 6.5 },
            targets: [("aesthetic".to_string(), 0.75), ("realistic".to_string(), 0.25)].into(),
        };
        let counts = [("aesthetic".to_string(), 900), ("realistic".to_string(), 1000)].into();
        let q = b.quotas(&counts);
        assert_eq!((q["aesthetic"], q["realistic"]), (900, 300));
    }

    #[test]
    fn placeholder_labels_number_thirteen() {
        let low = [
            QualityLabel::Blurry,
            QualityLabel::Watermark,
            QualityLabel::OverlaidText,
            QualityLabel::StaticFrames,
            QualityLabel::CameraShake,
            QualityLabel::LowLight,
            QualityLabel::Overexposed,
            QualityLabel::CompressionArtifacts,
            QualityLabel::BlackBorders,
            QualityLabel::Slideshow,
            QualityLabel::SplitScreen,
            QualityLabel::AbnormalSpeed,
            QualityLabel::LowResolution,
        ];
        assert_eq!(low.len(), 13);
        assert!(!low.contains(&QualityLabel::HighQuality));
    }
}
