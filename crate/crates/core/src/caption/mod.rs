//! Structured captions: `Subjects: … Visual: … Narration: …`.
//!
//! Narration is tokenized into plain text, subject references and two kinds
//! of tagged span, `<W>speech</W>` and `<I>event</I>`. Spans never nest.
//! A speech span is attributed to the subject of its clause: the nearest
//! preceding clause-initial `SubjectN` in the same sentence, falling back to
//! the nearest preceding reference. A speaker that differs from that reading
//! is written explicitly as `<W who="SubjectN">`.

mod subject;

use std::collections::{BTreeSet, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use subject::{
    assign_sentence_track, correct_subjects, rewrite_narration, threshold_sync_scores, ActiveSpeakerMatrix,
    Rewrite, SentenceSpan, SubjectAssignment, SyncScores, TrackAssignment, TrackSubjectMap, Unresolved,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptionError {
    #[error("missing section header {header:?} (searched from byte {offset})")]
    MissingHeader { header: &'static str, offset: usize },

    #[error("malformed subject registry at byte {offset}: {detail}")]
    MalformedSubject { offset: usize, detail: String },

    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),

    #[error("unclosed <{tag}> tag opened at byte {offset}")]
    UnclosedTag { tag: char, offset: usize },

    #[error("<{inner}> nested inside <{outer}> at byte {offset}")]
    NestedTag { outer: char, inner: char, offset: usize },

    #[error("closing </{tag}> without an open tag at byte {offset}")]
    UnmatchedClose { tag: char, offset: usize },

    #[error("unknown subject reference(s): {}", .0.join(", "))]
    UnknownSubject(Vec<String>),

    #[error("sentence not found among speech spans: {0:?}")]
    SpanNotFound(String),

    #[error("sentence matches more than one speech span: {0:?}")]
    AmbiguousSpan(String),

    #[error("invalid detector input: {0}")]
    Detector(String),
}

type Result<T> = std::result::Result<T, CaptionError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub visual_desc: String,
    /// Voice description, e.g. "a deep voice"; empty when the entry has none.
    pub vocal_desc: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    PlainText,
    SpeechSpan,
    EventSpan,
    SubjectRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrationNode {
    pub kind: NodeKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

impl NarrationNode {
    pub fn plain(text: impl Into<String>) -> Self {
        NarrationNode {
            kind: NodeKind::PlainText,
            text: text.into(),
            speaker: None,
        }
    }

    pub fn subject(id: impl Into<String>) -> Self {
        NarrationNode {
            kind: NodeKind::SubjectRef,
            text: id.into(),
            speaker: None,
        }
    }

    pub fn speech(text: impl Into<String>, speaker: Option<String>) -> Self {
        NarrationNode {
            kind: NodeKind::SpeechSpan,
            text: text.into(),
            speaker,
        }
    }

    pub fn event(text: impl Into<String>) -> Self {
        NarrationNode {
            kind: NodeKind::EventSpan,
            text: text.into(),
            speaker: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDoc {
    pub subjects: Vec<Subject>,
    pub visual_context: String,
    pub narration: Vec<NarrationNode>,
}

impl CaptionDoc {
    pub fn subject_ids(&self) -> BTreeSet<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn speech_spans(&self) -> impl Iterator<Item = &NarrationNode> {
        self.narration.iter().filter(|n| n.kind == NodeKind::SpeechSpan)
    }

    pub fn event_spans(&self) -> impl Iterator<Item = &NarrationNode> {
        self.narration.iter().filter(|n| n.kind == NodeKind::EventSpan)
    }

    /// Checks ids and references; every referenced id must be registered.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !SUBJECT_ID.is_match(&s.id) {
                return Err(CaptionError::MalformedSubject {
                    offset: 0,
                    detail: format!("bad subject id {:?}", s.id),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CaptionError::DuplicateSubject(s.id.clone()));
            }
        }
        let mut unknown = BTreeSet::new();
        for n in &self.narration {
            let id = match n.kind {
                NodeKind::SubjectRef => Some(&n.text),
                NodeKind::SpeechSpan => n.speaker.as_ref(),
                _ => None,
            };
            if let Some(id) = id {
                if !seen.contains(id.as_str()) {
                    unknown.insert(id.clone());
                }
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CaptionError::UnknownSubject(unknown.into_iter().collect()))
        }
    }
}

static SUBJECT_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Subject[1-9][0-9]*$").unwrap());
static SUBJECT_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bSubject[1-9][0-9]*:").unwrap());
static SUBJECT_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bSubject[1-9][0-9]*\b").unwrap());
static TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"<(/?)([WI])(?: who="([^"]*)")?>"#).unwrap());

const SUBJECTS: &str = "Subjects:";
const VISUAL: &str = "Visual:";
const NARRATION: &str = "Narration:";

/// Collapses whitespace runs to one space and trims both ends.
pub fn normalize(text: &str) -> String {
    normalize_with_offsets(text).0
}

/// Normalized text plus, for every output byte, the input byte it came from.
fn normalize_with_offsets(text: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(text.len() + 1);
    let mut pending_space = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(at) = pending_space.take() {
            out.push(' ');
            map.push(at);
        }
        out.push(ch);
        map.extend(std::iter::repeat_n(i, ch.len_utf8()));
    }
    map.push(text.len());
    (out, map)
}

/// Splits a subject description into visual and vocal parts at the last
/// `" with "` whose tail names a voice.
fn split_description(desc: &str) -> (String, String) {
    if let Some(k) = desc.rfind(" with ") {
        let tail = &desc[k + 6..];
        if tail.ends_with("voice") && !tail.is_empty() {
            return (desc[..k].to_string(), tail.to_string());
        }
    }
    (desc.to_string(), String::new())
}

fn join_description(s: &Subject) -> String {
    if s.vocal_desc.is_empty() {
        s.visual_desc.clone()
    } else {
        format!("{} with {}", s.visual_desc, s.vocal_desc)
    }
}

fn parse_subjects(body: &str, base: usize, map: &[usize]) -> Result<Vec<Subject>> {
    let labels: Vec<_> = SUBJECT_LABEL.find_iter(body).collect();
    let malformed = |at: usize, detail: &str| CaptionError::MalformedSubject {
        offset: map[base + at],
        detail: detail.to_string(),
    };
    match labels.first() {
        None if body.trim().is_empty() => return Ok(Vec::new()),
        None => return Err(malformed(0, "expected a SubjectN: entry")),
        Some(m) if !body[..m.start()].trim().is_empty() => {
            return Err(malformed(0, "text before the first subject entry"));
        }
        _ => {}
    }
    let mut subjects = Vec::with_capacity(labels.len());
    let mut seen = HashSet::new();
    for (k, m) in labels.iter().enumerate() {
        let end = labels.get(k + 1).map_or(body.len(), |n| n.start());
        let id = &body[m.start()..m.end() - 1];
        let desc = body[m.end()..end].trim();
        let Some(desc) = desc.strip_suffix('.') else {
            return Err(malformed(m.start(), "subject description must end with '.'"));
        };
        if desc.is_empty() {
            return Err(malformed(m.start(), "empty subject description"));
        }
        if !seen.insert(id.to_string()) {
            return Err(CaptionError::DuplicateSubject(id.to_string()));
        }
        let (visual_desc, vocal_desc) = split_description(desc);
        subjects.push(Subject {
            id: id.to_string(),
            visual_desc,
            vocal_desc,
        });
    }
    Ok(subjects)
}

fn push_plain(nodes: &mut Vec<NarrationNode>, text: &str) {
    let mut last = 0;
    for m in SUBJECT_REF.find_iter(text) {
        if m.start() > last {
            nodes.push(NarrationNode::plain(&text[last..m.start()]));
        }
        nodes.push(NarrationNode::subject(m.as_str()));
        last = m.end();
    }
    if last < text.len() {
        nodes.push(NarrationNode::plain(&text[last..]));
    }
}

fn tokenize_narration(body: &str, base: usize, map: &[usize]) -> Result<Vec<NarrationNode>> {
    let mut nodes = Vec::new();
    // (tag, content start, open offset, explicit speaker)
    let mut open: Option<(char, usize, usize, Option<String>)> = None;
    let mut last = 0;
    for caps in TAG.captures_iter(body) {
        let m = caps.get(0).expect("whole match");
        let closing = !caps[1].is_empty();
        let tag = caps[2].chars().next().expect("one letter");
        let who = caps.get(3).map(|w| w.as_str().to_string());
        let at = map[base + m.start()];
        match (&open, closing) {
            (None, false) => {
                if who.is_some() && tag != 'W' {
                    return Err(CaptionError::MalformedSubject {
                        offset: at,
                        detail: "only <W> carries a speaker".into(),
                    });
                }
                push_plain(&mut nodes, &body[last..m.start()]);
                open = Some((tag, m.end(), at, who));
            }
            (None, true) => return Err(CaptionError::UnmatchedClose { tag, offset: at }),
            (Some((outer, ..)), false) => {
                return Err(CaptionError::NestedTag {
                    outer: *outer,
                    inner: tag,
                    offset: at,
                });
            }
            (Some((outer, start, ..)), true) => {
                if *outer != tag {
                    return Err(CaptionError::UnmatchedClose { tag, offset: at });
                }
                let content = &body[*start..m.start()];
                let (_, _, _, who) = open.take().expect("open span");
                nodes.push(match tag {
                    'W' => NarrationNode {
                        kind: NodeKind::SpeechSpan,
                        text: content.to_string(),
                        // Explicit speakers are resolved after tokenizing.
                        speaker: who.map(|w| format!("={w}")),
                    },
                    _ => NarrationNode::event(content),
                });
            }
        }
        last = m.end();
    }
    if let Some((tag, _, offset, _)) = open {
        return Err(CaptionError::UnclosedTag { tag, offset });
    }
    push_plain(&mut nodes, &body[last..]);

    for k in 0..nodes.len() {
        if nodes[k].kind != NodeKind::SpeechSpan {
            continue;
        }
        nodes[k].speaker = match nodes[k].speaker.take() {
            Some(explicit) => Some(explicit[1..].to_string()).filter(|s| !s.is_empty()),
            None => contextual_speaker(&nodes, k),
        };
    }
    Ok(nodes)
}

const CLAUSE_WORDS: [&str; 7] = ["and", "then", "while", "but", "as", "so", "when"];

fn has_terminator(s: &str) -> bool {
    s.contains(['.', '!', '?'])
}

fn is_clause_initial(nodes: &[NarrationNode], k: usize) -> bool {
    let Some(prev) = k.checked_sub(1).map(|p| &nodes[p]) else {
        return true;
    };
    if prev.kind != NodeKind::PlainText {
        return prev.kind != NodeKind::SubjectRef;
    }
    let t = prev.text.trim_end();
    if t.is_empty() || t.ends_with(['.', '!', '?', ',', ';', ':']) {
        return true;
    }
    let word = t.rsplit(' ').next().unwrap_or(t);
    CLAUSE_WORDS.contains(&word.to_ascii_lowercase().as_str())
}

/// Speaker implied by the surrounding prose for the speech span at `k`.
pub fn contextual_speaker(nodes: &[NarrationNode], k: usize) -> Option<String> {
    let mut nearest = None;
    for j in (0..k).rev() {
        let n = &nodes[j];
        match n.kind {
            NodeKind::PlainText if has_terminator(&n.text) => break,
            NodeKind::SubjectRef => {
                if is_clause_initial(nodes, j) {
                    return Some(n.text.clone());
                }
                nearest.get_or_insert_with(|| n.text.clone());
            }
            _ => {}
        }
    }
    nearest
}

pub fn parse_caption(text: &str) -> Result<CaptionDoc> {
    let (s, map) = normalize_with_offsets(text);
    if !s.starts_with(SUBJECTS) {
        return Err(CaptionError::MissingHeader {
            header: SUBJECTS,
            offset: 0,
        });
    }
    let subj_start = SUBJECTS.len();
    let visual_at = s[subj_start..].find(VISUAL).map(|i| i + subj_start).ok_or(CaptionError::MissingHeader {
        header: VISUAL,
        offset: map[subj_start],
    })?;
    let vis_start = visual_at + VISUAL.len();
    let narr_at = s[vis_start..].find(NARRATION).map(|i| i + vis_start).ok_or(CaptionError::MissingHeader {
        header: NARRATION,
        offset: map[vis_start],
    })?;
    let narr_start = narr_at + NARRATION.len();

    let trimmed = |a: usize, b: usize| -> (usize, &str) {
        let raw = &s[a..b];
        let lead = raw.len() - raw.trim_start().len();
        (a + lead, raw.trim())
    };
    let (sb, subjects_body) = trimmed(subj_start, visual_at);
    let subjects = parse_subjects(subjects_body, sb, &map)?;
    let (_, visual) = trimmed(vis_start, narr_at);
    let (nb, narration_body) = trimmed(narr_start, s.len());
    let narration = tokenize_narration(narration_body, nb, &map)?;
    let doc = CaptionDoc {
        subjects,
        visual_context: visual.to_string(),
        narration,
    };
    doc.validate()?;
    Ok(doc)
}

fn section(out: &mut String, header: &str, body: &str) {
    if !out.is_empty() {
        out.push(' ');
    }
    out.push_str(header);
    if !body.is_empty() {
        out.push(' ');
        out.push_str(body);
    }
}

/// Canonical text form; a speech span whose speaker differs from the
/// contextual reading carries an explicit `who` attribute.
pub fn serialize_caption(doc: &CaptionDoc) -> String {
    let subjects = doc
        .subjects
        .iter()
        .map(|s| format!("{}: {}.", s.id, join_description(s)))
        .collect::<Vec<_>>()
        .join(" ");
    let mut narration = String::new();
    for (k, n) in doc.narration.iter().enumerate() {
        match n.kind {
            NodeKind::PlainText | NodeKind::SubjectRef => narration.push_str(&n.text),
            NodeKind::EventSpan => {
                narration.push_str("<I>");
                narration.push_str(&n.text);
                narration.push_str("</I>");
            }
            NodeKind::SpeechSpan => {
                if n.speaker == contextual_speaker(&doc.narration, k) {
                    narration.push_str("<W>");
                } else {
                    narration.push_str(&format!("<W who=\"{}\">", n.speaker.as_deref().unwrap_or("")));
                }
                narration.push_str(&n.text);
                narration.push_str("</W>");
            }
        }
    }
    let mut out = String::new();
    section(&mut out, SUBJECTS, &subjects);
    section(&mut out, VISUAL, &doc.visual_context);
    section(&mut out, NARRATION, &narration);
    out
}
