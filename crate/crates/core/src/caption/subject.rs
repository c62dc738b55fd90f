//! Speaker correction from precomputed detector outputs.
//!
//! Lip-sync scores are thresholded into an active-speaker matrix, each
//! transcript sentence is assigned the track with the most active frames in
//! its window, tracks map to subjects, and the narration's speech spans are
//! relabelled. Any sentence that cannot be resolved discards the document.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{normalize, CaptionDoc, CaptionError, NodeKind, Result};

/// Raw detector scores, one row per face track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncScores {
    pub fps: f64,
    pub tracks: usize,
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSpeakerMatrix {
    pub tracks: usize,
    pub frames: usize,
    pub fps: f64,
    cells: Vec<u8>,
}

impl ActiveSpeakerMatrix {
    pub fn new(tracks: usize, frames: usize, fps: f64, cells: Vec<u8>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(CaptionError::Detector(format!("fps must be positive, got {fps}")));
        }
        if cells.len() != tracks * frames {
            return Err(CaptionError::Detector(format!(
                "{} cells for {tracks} tracks x {frames} frames",
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(CaptionError::Detector("cells must be 0 or 1".into()));
        }
        Ok(ActiveSpeakerMatrix {
            tracks,
            frames,
            fps,
            cells,
        })
    }

    pub fn get(&self, track: usize, frame: usize) -> u8 {
        self.cells[track * self.frames + frame]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }
}

/// `cell = 1` iff `score >= theta`.
pub fn threshold_sync_scores(scores: &SyncScores, theta: f64) -> Result<ActiveSpeakerMatrix> {
    if !theta.is_finite() {
        return Err(CaptionError::Detector(format!("theta must be finite, got {theta}")));
    }
    if scores.scores.len() != scores.tracks {
        return Err(CaptionError::Detector(format!(
            "{} score rows for {} tracks",
            scores.scores.len(),
            scores.tracks
        )));
    }
    let frames = scores.scores.first().map_or(0, Vec::len);
    if scores.scores.iter().any(|r| r.len() != frames) {
        return Err(CaptionError::Detector("ragged score rows".into()));
    }
    let cells = scores
        .scores
        .iter()
        .flatten()
        .map(|&s| u8::from(s >= theta))
        .collect();
    ActiveSpeakerMatrix::new(scores.tracks, frames, scores.fps, cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_track: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_subject: Option<String>,
}

impl SentenceSpan {
    pub fn new(text: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        SentenceSpan {
            text: text.into(),
            t_start,
            t_end,
            assigned_track: None,
            assigned_subject: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unresolved {
    /// The window does not intersect the matrix, or the span is malformed.
    OutOfRange,
    NoSpeech,
    Tie,
    LowMargin,
    /// The winning track has no subject mapping.
    Unmapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackAssignment {
    Track(usize),
    Unresolved(Unresolved),
}

/// Majority vote over frames `[floor(t_start fps), ceil(t_end fps))`.
pub fn assign_sentence_track(m: &ActiveSpeakerMatrix, s: &SentenceSpan, min_margin: f64) -> TrackAssignment {
    if !(s.t_start >= 0.0 && s.t_start < s.t_end && s.t_end.is_finite()) {
        return TrackAssignment::Unresolved(Unresolved::OutOfRange);
    }
    let fps = m.fps;
    let lo = (s.t_start * fps).floor() as usize;
    let hi = ((s.t_end * fps).ceil() as usize).min(m.frames);
    if lo >= hi || m.tracks == 0 {
        return TrackAssignment::Unresolved(Unresolved::OutOfRange);
    }
    let counts: Vec<usize> = (0..m.tracks)
        .map(|t| (lo..hi).map(|f| usize::from(m.get(t, f))).sum())
        .collect();
    let best = (0..m.tracks).max_by_key(|&t| (counts[t], std::cmp::Reverse(t))).expect("tracks > 0");
    let top = counts[best];
    if top == 0 {
        return TrackAssignment::Unresolved(Unresolved::NoSpeech);
    }
    if counts.iter().filter(|&&c| c == top).count() > 1 {
        return TrackAssignment::Unresolved(Unresolved::Tie);
    }
    if (top as f64) / ((hi - lo) as f64) < min_margin {
        return TrackAssignment::Unresolved(Unresolved::LowMargin);
    }
    TrackAssignment::Track(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAssignment {
    pub subject: String,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

/// Track id to subject id, loaded from `{"0": {"subject": "Subject1", ...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackSubjectMap {
    pub entries: BTreeMap<usize, SubjectAssignment>,
}

impl TrackSubjectMap {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (track, a) in &self.entries {
            if !seen.insert(a.subject.as_str()) {
                return Err(CaptionError::Detector(format!(
                    "subject {} mapped from more than one track (second: {track})",
                    a.subject
                )));
            }
        }
        Ok(())
    }

    pub fn subject(&self, track: usize) -> Option<&str> {
        self.entries.get(&track).map(|a| a.subject.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rewrite {
    Corrected(CaptionDoc),
    Discarded { sentence: String, reason: Unresolved },
}

impl Rewrite {
    pub fn corrected(self) -> Option<CaptionDoc> {
        match self {
            Rewrite::Corrected(d) => Some(d),
            Rewrite::Discarded { .. } => None,
        }
    }
}

fn span_subject<'a>(s: &'a SentenceSpan, map: &'a TrackSubjectMap) -> std::result::Result<&'a str, Unresolved> {
    match (&s.assigned_subject, s.assigned_track) {
        (Some(id), _) => Ok(id),
        (None, Some(t)) => map.subject(t).ok_or(Unresolved::Unmapped),
        (None, None) => Err(Unresolved::NoSpeech),
    }
}

/// Relabels the speech span matching each sentence; every other node is
/// left untouched. A sentence without a subject discards the document.
pub fn rewrite_narration(doc: &CaptionDoc, spans: &[SentenceSpan], map: &TrackSubjectMap) -> Result<Rewrite> {
    map.validate()?;
    let mut targets = Vec::with_capacity(spans.len());
    for s in spans {
        let subject = match span_subject(s, map) {
            Ok(id) => id,
            Err(reason) => {
                return Ok(Rewrite::Discarded {
                    sentence: s.text.clone(),
                    reason,
                })
            }
        };
        let want = normalize(&s.text);
        let mut hits = doc
            .narration
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::SpeechSpan && normalize(&n.text) == want)
            .map(|(k, _)| k);
        let k = hits.next().ok_or_else(|| CaptionError::SpanNotFound(s.text.clone()))?;
        if hits.next().is_some() {
            return Err(CaptionError::AmbiguousSpan(s.text.clone()));
        }
        targets.push((k, subject.to_string()));
    }
    let mut out = doc.clone();
    for (k, subject) in targets {
        out.narration[k].speaker = Some(subject);
    }
    out.validate()?;
    Ok(Rewrite::Corrected(out))
}

/// Thresholds, assigns every sentence, and rewrites the document.
pub fn correct_subjects(
    doc: &CaptionDoc,
    scores: &SyncScores,
    sentences: &[SentenceSpan],
    map: &TrackSubjectMap,
    theta: f64,
    min_margin: f64,
) -> Result<Rewrite> {
    let m = threshold_sync_scores(scores, theta)?;
    let mut assigned = Vec::with_capacity(sentences.len());
    for s in sentences {
        let mut s = s.clone();
        match assign_sentence_track(&m, &s, min_margin) {
            TrackAssignment::Track(t) => {
                s.assigned_track = Some(t);
                s.assigned_subject = map.subject(t).map(str::to_string);
                if s.assigned_subject.is_none() {
                    return Ok(Rewrite::Discarded {
                        sentence: s.text,
                        reason: Unresolved::Unmapped,
                    });
                }
            }
            TrackAssignment::Unresolved(reason) => return Ok(Rewrite::Discarded { sentence: s.text, reason }),
        }
        assigned.push(s);
    }
    rewrite_narration(doc, &assigned, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::parse_caption;

    fn two_track() -> ActiveSpeakerMatrix {
        let mut cells = vec![0u8; 12];
        cells[..3].fill(1);
        cells[9..].fill(1);
        ActiveSpeakerMatrix::new(2, 6, 6.0, cells).unwrap()
    }

    #[test]
    fn majority_vote_examples() {
        let m = two_track();
        let s = SentenceSpan::new("x", 0.0, 0.5);
        assert_eq!(assign_sentence_track(&m, &s, 0.5), TrackAssignment::Track(0));
        let full = ActiveSpeakerMatrix::new(2, 6, 6.0, vec![1; 12]).unwrap();
        assert_eq!(assign_sentence_track(&full, &s, 0.5), TrackAssignment::Unresolved(Unresolved::Tie));
        let empty = ActiveSpeakerMatrix::new(2, 6, 6.0, vec![0; 12]).unwrap();
        assert_eq!(assign_sentence_track(&empty, &s, 0.5), TrackAssignment::Unresolved(Unresolved::NoSpeech));
        let late = SentenceSpan::new("x", 2.0, 3.0);
        assert_eq!(assign_sentence_track(&m, &late, 0.5), TrackAssignment::Unresolved(Unresolved::OutOfRange));
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = SyncScores {
            fps: 1.0,
            tracks: 1,
            scores: vec![vec![0.2, 0.5, 0.7]],
        };
        assert_eq!(threshold_sync_scores(&s, 0.5).unwrap().cells(), &[0, 1, 1]);
        assert_eq!(threshold_sync_scores(&s, 0.9).unwrap().cells(), &[0, 0, 0]);
        assert!(threshold_sync_scores(&s, f64::NAN).is_err());
    }

    #[test]
    fn rewrite_relabels_only_the_speaker() {
        let doc = parse_caption(
            "Subjects: Subject1: A. Subject2: B. Visual: v. Narration: Subject1 says <W>Hello there</W> and leaves.",
        )
        .unwrap();
        let mut s = SentenceSpan::new("Hello   there", 0.0, 1.0);
        s.assigned_subject = Some("Subject2".into());
        let out = rewrite_narration(&doc, &[s.clone()], &TrackSubjectMap::default()).unwrap().corrected().unwrap();
        assert_eq!(out.speech_spans().next().unwrap().speaker.as_deref(), Some("Subject2"));
        assert_eq!(out.narration.len(), doc.narration.len());

        s.assigned_subject = Some("Subject1".into());
        let same = rewrite_narration(&doc, &[s], &TrackSubjectMap::default()).unwrap().corrected().unwrap();
        assert_eq!(same, doc);

        let unresolved = SentenceSpan::new("Hello there", 0.0, 1.0);
        let r = rewrite_narration(&doc, &[unresolved], &TrackSubjectMap::default()).unwrap();
        assert!(matches!(r, Rewrite::Discarded { .. }));

        let mut missing = SentenceSpan::new("Goodbye", 0.0, 1.0);
        missing.assigned_subject = Some("Subject1".into());
        assert!(matches!(
            rewrite_narration(&doc, &[missing], &TrackSubjectMap::default()),
            Err(CaptionError::SpanNotFound(_))
        ));
    }

    #[test]
    fn track_map_must_be_injective() {
        let m: TrackSubjectMap = serde_json::from_str(r#"{"0": {"subject": "Subject1"}, "1": {"subject": "Subject1"}}"#).unwrap();
        assert!(m.validate().is_err());
    }
}
