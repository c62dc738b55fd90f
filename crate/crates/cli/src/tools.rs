//! Caption and data-funnel commands.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use alive_core::caption::{correct_subjects, parse_caption, serialize_caption, Rewrite, SentenceSpan, SyncScores, TrackSubjectMap};
use alive_core::checkpoint;
use alive_core::funnel::{
    apply_stage, match_tags, read_records, refine_sound_terms, select_cross_pairs, CrossPairConfig, EmbeddingIndex,
    FunnelStage, KeywordTable, PairCandidate,
};
use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::hash_json;
use crate::manifest::{path_for_file, RunManifest};
use crate::{CorrectArgs, CrossPairArgs, FilterArgs, ParseCaptionArgs, RefineArgs};

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?);
    }
    Ok(out)
}

/// Writes to `out`, or stdout when absent.
fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_lines<T: Serialize>(out: Option<&Path>, items: &[T]) -> Result<()> {
    let mut w = sink(out)?;
    for it in items {
        writeln!(w, "{}", serde_json::to_string(it)?)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
}

#[derive(Serialize)]
struct ParsedLine {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    doc: Option<alive_core::caption::CaptionDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    /// Whether serializing the parsed document gives back the input.
    canonical: bool,
}

fn parse_one(id: String, text: &str) -> ParsedLine {
    match parse_caption(text) {
        Ok(doc) => ParsedLine {
            canonical: serialize_caption(&doc) == text,
            id,
            doc: Some(doc),
            error: None,
        },
        Err(e) => ParsedLine {
            id,
            doc: None,
            error: Some(e.to_string()),
            canonical: false,
        },
    }
}

/// Plain text holds one document; `.jsonl` input holds `{id, caption}` lines.
pub fn parse_caption_cmd(args: &ParseCaptionArgs) -> Result<bool> {
    let is_jsonl = args.input.extension().is_some_and(|e| e == "jsonl");
    let parsed: Vec<ParsedLine> = if is_jsonl {
        read_jsonl::<CaptionLine>(&args.input)?
            .into_iter()
            .map(|l| parse_one(l.id, &l.caption))
            .collect()
    } else {
        let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
        let id = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![parse_one(id, &text)]
    };
    let ok = parsed.iter().all(|p| p.error.is_none());
    let mut manifest = RunManifest::start("parse-caption", hash_json(&json!({ "input": args.input }))?, 0);
    write_lines(args.out.as_deref(), &parsed)?;
    if let Some(out) = &args.out {
        manifest.outputs = vec![out.clone()];
        let failed = parsed.iter().filter(|p| p.error.is_some()).count();
        manifest.finish(&path_for_file(out), json!({ "documents": parsed.len(), "failed": failed }))?;
    }
    Ok(ok)
}

pub fn correct_subjects_cmd(args: &CorrectArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.caption).with_context(|| format!("reading {}", args.caption.display()))?;
    let doc = parse_caption(&text).with_context(|| format!("parsing {}", args.caption.display()))?;
    let scores: SyncScores = read_json(&args.scores)?;
    let sentences: Vec<SentenceSpan> = read_jsonl(&args.sentences)?;
    let map: TrackSubjectMap = read_json(&args.trackmap)?;
    let hash = hash_json(&json!({
        "caption": text,
        "scores": scores,
        "sentences": sentences,
        "trackmap": map,
        "theta": args.theta,
        "min_margin": args.min_margin,
    }))?;
    let mut manifest = RunManifest::start("correct-subjects", hash, 0);
    let summary = match correct_subjects(&doc, &scores, &sentences, &map, args.theta, args.min_margin)? {
        Rewrite::Corrected(doc) => {
            std::fs::write(&args.out, serialize_caption(&doc)).with_context(|| format!("writing {}", args.out.display()))?;
            manifest.outputs = vec![args.out.clone()];
            json!({ "status": "corrected" })
        }
        Rewrite::Discarded { sentence, reason } => json!({ "status": "discarded", "sentence": sentence, "reason": reason }),
    };
    println!("{}", serde_json::to_string(&summary)?);
    manifest.finish(&path_for_file(&args.out), summary)
}

pub fn filter_cmd(args: &FilterArgs) -> Result<()> {
    let mut records = read_records(open(&args.records)?)?;
    if let Some(path) = &args.keywords {
        let table: KeywordTable = read_json(path)?;
        for r in &mut records {
            r.tags = match_tags(&r.caption, &table)?.tags.into_iter().collect();
        }
    }
    let stage = FunnelStage {
        seed: args.seed,
        ..FunnelStage::preset(args.stage)
    };
    let mut manifest = RunManifest::start("filter", hash_json(&stage)?, args.seed);
    let (kept, report) = apply_stage(&records, &stage)?;
    write_lines(Some(&args.out), &kept)?;
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", args.report.display()))?;
    manifest.outputs = vec![args.out.clone(), args.report.clone()];
    manifest.finish(&path_for_file(&args.out), json!({ "input": report.input, "output": report.output }))
}

pub fn cross_pairs_cmd(args: &CrossPairArgs) -> Result<()> {
    let candidates: Vec<PairCandidate> = read_jsonl(&args.candidates)?;
    let cfg = CrossPairConfig {
        proximity_tol: args.tol,
        ..CrossPairConfig::default()
    };
    write_lines(None, &select_cross_pairs(&candidates, &cfg))
}

pub fn refine_sounds_cmd(args: &RefineArgs) -> Result<()> {
    let load = |p: &Path| checkpoint::load(p).with_context(|| format!("loading {}", p.display()));
    let index = EmbeddingIndex::from_records(load(&args.index)?)?;
    let terms: Vec<(String, Vec<f64>)> = load(&args.terms)?.into_iter().map(|(n, t)| (n, t.into_data())).collect();
    write_lines(None, &refine_sound_terms(&terms, &index, args.tau)?)
}
