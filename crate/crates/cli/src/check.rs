//! Self-check suites. Each prints a JSON report; the command fails unless
//! every assertion holds.

use alive_core::caption::{assign_sentence_track, ActiveSpeakerMatrix, SentenceSpan, TrackAssignment, Unresolved};
use alive_core::dit::{ConditioningState, DiTConfig, DiTModel, JointInputs, SequenceLayout, TextCondition};
use alive_core::flow::gaussian_like;
use alive_core::funnel::{
    apply_stage, make_synthetic_records, refine_sound_terms, select_cross_pairs, AvCoherence, CrossPairConfig,
    EmbeddingIndex, FunnelStage, PairCandidate, PairVerdict, QualityLabel, StageName,
};
use alive_core::gradcheck::{check_model, Probe};
use alive_core::guidance::{
    apg_project, dual_cond_velocity, guided_velocity, initial_noise, ApgReference, FourStatePrediction,
    ModalityGuidance, Projection,
};
use alive_core::params::ParamGroup;
use alive_core::rng::{Rng, SeedTree};
use alive_core::temporal::{audio_positions, video_positions, ModalityTiming};
use alive_core::tensor::{dot, norm, Tensor};
use anyhow::Result;
use rand::Rng as _;
use serde::Serialize;
use serde_json::{json, Value};

use crate::Suite;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Serialize)]
pub struct Assertion {
    pub name: &'static str,
    pub passed: bool,
    pub detail: Value,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub output: Value,
}

struct Collector(Vec<Assertion>);

impl Collector {
    fn check(&mut self, name: &'static str, passed: bool, detail: Value) {
        self.0.push(Assertion { name, passed, detail });
    }

    fn report(self, suite: Suite, output: Value) -> Report {
        Report {
            suite,
            passed: self.0.iter().all(|a| a.passed),
            assertions: self.0,
            output,
        }
    }
}

pub struct PositionArgs {
    pub video_latents: usize,
    pub audio_latents: usize,
}

pub fn run(suite: Suite, pos: &PositionArgs) -> Result<Report> {
    match suite {
        Suite::Positions => positions(pos),
        Suite::Guidance => guidance(),
        Suite::Gradients => gradients(),
        Suite::Oracle => oracle(),
        Suite::Params => params(),
    }
}

/// Both modalities span one second.
fn one_second(lv: usize, la: usize) -> Result<(ModalityTiming, ModalityTiming)> {
    Ok((ModalityTiming::new(lv, lv as f64)?, ModalityTiming::new(la, la as f64)?))
}

/// Overlap-weighted mean of every audio index, scanning all of them.
fn centroid_oracle(i: usize, lv: usize, la: usize) -> f64 {
    let rho = la as f64 / lv as f64;
    let (lo, hi) = (i as f64 * rho, (i + 1) as f64 * rho);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..la {
        let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
        num += w * j as f64;
        den += w;
    }
    num / den
}

fn positions(args: &PositionArgs) -> Result<Report> {
    let (lv, la) = (args.video_latents, args.audio_latents);
    let (v, a) = one_second(lv, la)?;
    let pv = video_positions(&v, &a)?;
    let pa = audio_positions(&a);
    let mut c = Collector(Vec::new());

    let want: Vec<f64> = (0..lv).map(|i| centroid_oracle(i, lv, la)).collect();
    let close = pv.positions.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);
    c.check("requested layout matches overlap centroid", close, json!({ "expected": want }));

    let mut mismatches = Vec::new();
    for rho in [1usize, 2, 3, 4, 6, 8] {
        for lv in 1..=32 {
            let (v, a) = one_second(lv, lv * rho)?;
            let p = video_positions(&v, &a)?;
            for (i, x) in p.positions.iter().enumerate() {
                let covered: Vec<usize> = (i * rho..(i + 1) * rho).collect();
                let mean = covered.iter().sum::<usize>() as f64 / covered.len() as f64;
                if *x != mean {
                    mismatches.push(json!({ "rho": rho, "video_latents": lv, "index": i }));
                }
            }
        }
    }
    c.check("integral ratios give the covered-index mean exactly", mismatches.is_empty(), json!(mismatches));

    let mut rng = SeedTree::new(1).derive("check-positions").rng();
    let mut violations = 0usize;
    for _ in 0..10_000 {
        let rho = [1usize, 2, 3, 4, 6, 8][rng.random_range(0..6)];
        let lv = rng.random_range(1..=64);
        let (v, a) = one_second(lv, lv * rho)?;
        let p = video_positions(&v, &a)?;
        let i = rng.random_range(0..lv);
        for j in i * rho..(i + 1) * rho {
            if !((p.positions[i] - j as f64).abs() < rho as f64) {
                violations += 1;
            }
        }
    }
    c.check("overlapping audio indices lie within rho", violations == 0, json!({ "configurations": 10_000, "violations": violations }));
    c.check("video positions increase", pv.is_strictly_increasing(), Value::Null);

    let output = json!([
        { "modality": "video", "positions": pv.positions },
        { "modality": "audio", "positions": pa.positions },
    ]);
    Ok(c.report(Suite::Positions, output))
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    gaussian_like(&Tensor::zeros(&[rows, cols]), rng)
}

fn guidance() -> Result<Report> {
    let mut rng = SeedTree::new(2).derive("check-guidance").rng();
    let mut c = Collector(Vec::new());

    let mut exact = true;
    for _ in 0..200 {
        let p = FourStatePrediction {
            eps_pos_mutual: random_tensor(&mut rng, 6, 4),
            eps_pos_indep: random_tensor(&mut rng, 6, 4),
            eps_neg_mutual: random_tensor(&mut rng, 6, 4),
            eps_neg_indep: random_tensor(&mut rng, 6, 4),
        };
        for proj in [Projection::Flattened, Projection::PerToken] {
            let out = guided_velocity(&p, &ModalityGuidance::CONDITIONAL, ApgReference::PosMutual, proj)?;
            exact &= out == p.eps_pos_mutual;
        }
    }
    c.check("eta 1, w1 1, w2 = w3 = 0 returns eps_pos_mutual", exact, Value::Null);

    let model = DiTModel::new(DiTConfig::desk(), &mut rng)?;
    let layout = SequenceLayout::new(ModalityTiming::new(6, 3.0)?, ModalityTiming::new(12, 6.0)?)?;
    let (v, a) = initial_noise(&model, &layout, 3);
    let on = ConditioningState::new(TextCondition::Positive(1), true);
    let off = on.with_mutual(false);
    let inp = |s| JointInputs {
        video: &v,
        audio: &a,
        video_t: 0.5,
        audio_t: 0.5,
        state: s,
        layout: &layout,
        video_cond: None,
    };
    let same = model.predict(&inp(&on))? == model.predict(&inp(&off))?;
    c.check("zero-gated init makes the mutual delta exactly zero", same, Value::Null);

    let mut exact = true;
    for _ in 0..200 {
        let (u, t, r) = (random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 3, 4), random_tensor(&mut rng, 3, 4));
        exact &= dual_cond_velocity(&u, &t, &r, 1.0, 1.0)? == r;
    }
    c.check("dual conditioning at unit scales returns the fully conditioned prediction", exact, Value::Null);

    let mut worst: f64 = 0.0;
    let mut identity = true;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=32);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let eta = rng.random_range(0.0..=1.0);
        let out = apg_project(&d, &r, eta);
        worst = worst.max(norm(&out) - norm(&d));
        identity &= apg_project(&d, &r, 1.0) == d;
    }
    c.check("projection never increases the norm", worst <= 1e-12, json!({ "vectors": 10_000, "max_growth": worst }));
    c.check("eta 1 leaves the delta unchanged", identity, Value::Null);

    let d = [1.0, 2.0, 0.0];
    let r = [1.0, 0.0, 0.0];
    let out = apg_project(&d, &r, 0.0);
    c.check("eta 0 removes the parallel part", dot(&out, &r) == 0.0 && out[1] == 2.0, json!({ "out": out }));
    Ok(c.report(Suite::Guidance, Value::Null))
}

fn gradients() -> Result<Report> {
    let tree = SeedTree::new(3).derive("check-gradients");
    let cfg = DiTConfig::desk();
    let mut model = DiTModel::new(cfg.clone(), &mut tree.derive("init").rng())?;
    model.jitter(&mut tree.derive("jitter").rng(), 0.2);
    let probe = Probe::new(&cfg, &mut tree.derive("probe").rng())?;
    let report = check_model(&mut model, GRAD_STEP, |m, t| probe.loss(m, t))?;
    let worst = report.worst().cloned();
    let max = worst.as_ref().map_or(0.0, |w| w.max_rel_error);
    let failures: Vec<_> = report.failures(GRAD_TOL).iter().map(|p| p.name.clone()).collect();
    let mut c = Collector(Vec::new());
    c.check(
        "every parameter matches central differences",
        failures.is_empty(),
        json!({ "max_rel_error": max, "worst": worst.map(|w| w.name), "failures": failures, "tolerance": GRAD_TOL }),
    );
    let output = json!({
        "step": GRAD_STEP,
        "parameters": report.params.len(),
        "scalars": report.scalars(),
        "max_rel_error": max,
    });
    Ok(c.report(Suite::Gradients, output))
}

fn vote_oracle(cells: &[Vec<u8>], fps: f64, t0: f64, t1: f64, margin: f64) -> TrackAssignment {
    let window: Vec<usize> = (0..cells[0].len())
        .filter(|&f| (f as f64) >= (t0 * fps).floor() && (f as f64) < (t1 * fps).ceil())
        .collect();
    if window.is_empty() {
        return TrackAssignment::Unresolved(Unresolved::OutOfRange);
    }
    let counts: Vec<usize> = cells.iter().map(|row| window.iter().filter(|&&f| row[f] == 1).count()).collect();
    let top = *counts.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..counts.len()).filter(|&t| counts[t] == top).collect();
    if top == 0 {
        TrackAssignment::Unresolved(Unresolved::NoSpeech)
    } else if winners.len() > 1 {
        TrackAssignment::Unresolved(Unresolved::Tie)
    } else if (top as f64) < margin * window.len() as f64 {
        TrackAssignment::Unresolved(Unresolved::LowMargin)
    } else {
        TrackAssignment::Track(winners[0])
    }
}

fn unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v = random_tensor(rng, 1, dim).into_data();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn oracle() -> Result<Report> {
    let mut rng = SeedTree::new(4).derive("check-oracle").rng();
    let mut c = Collector(Vec::new());

    let mut disagreements = 0;
    for _ in 0..2000 {
        let tracks = rng.random_range(1..=4);
        let frames = rng.random_range(1..=32);
        let cells: Vec<Vec<u8>> = (0..tracks)
            .map(|_| (0..frames).map(|_| u8::from(rng.random_bool(0.4))).collect())
            .collect();
        let fps = 8.0;
        let t0 = rng.random_range(0.0..frames as f64 / fps);
        let t1 = t0 + rng.random_range(0.05..2.0);
        let margin = rng.random_range(0.0..0.6);
        let m = ActiveSpeakerMatrix::new(tracks, frames, fps, cells.concat())?;
        let got = assign_sentence_track(&m, &SentenceSpan::new("s", t0, t1), margin);
        disagreements += usize::from(got != vote_oracle(&cells, fps, t0, t1, margin));
    }
    c.check("majority vote equals brute force", disagreements == 0, json!({ "matrices": 2000, "disagreements": disagreements }));

    let entries: Vec<(String, Vec<f64>)> = (0..300).map(|k| (format!("term {k}"), unit(&mut rng, 8))).collect();
    let index = EmbeddingIndex::new(entries.clone())?;
    let queries: Vec<(String, Vec<f64>)> = (0..100).map(|k| (format!("q{k}"), unit(&mut rng, 8))).collect();
    let mut mismatched = 0;
    for (s, (_, q)) in refine_sound_terms(&queries, &index, 0.85)?.iter().zip(&queries) {
        let (best, sim) = entries
            .iter()
            .map(|(t, v)| (t, dot(q, v)))
            .fold((&entries[0].0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        mismatched += usize::from(&s.matched != best || s.similarity != sim.clamp(-1.0, 1.0) || s.substituted != (sim > 0.85));
    }
    c.check("nearest term equals exhaustive scan", mismatched == 0, json!({ "queries": 100, "mismatched": mismatched }));

    let cand = |face, global| PairCandidate {
        record_a: "a".into(),
        record_b: "b".into(),
        face_sim: face,
        global_sim: global,
    };
    let verdicts: Vec<PairVerdict> = select_cross_pairs(&[cand(0.5, 0.88), cand(0.3, 0.9), cand(0.9, 0.99)], &CrossPairConfig::default())
        .into_iter()
        .map(|d| d.verdict)
        .collect();
    c.check(
        "cross-pair example decisions",
        verdicts == [PairVerdict::Accepted, PairVerdict::FaceTooLow, PairVerdict::QuasiIdentical],
        json!(verdicts),
    );

    let records = make_synthetic_records(2000, 5);
    let (kept, _) = apply_stage(&records, &FunnelStage::preset(StageName::Refiner))?;
    let expected: Vec<_> = records
        .iter()
        .filter(|r| {
            r.quality_label == Some(QualityLabel::HighQuality)
                && r.ocr_text_ratio.is_some_and(|x| x <= 0.05)
                && r.aesthetics.is_some_and(|x| x >= 4.0)
                && r.audio_quality.is_some_and(|x| x >= 3.0)
                && r.av_coherence.is_some_and(|x| x >= AvCoherence::Weak)
                && r.clarity_score == Some(6)
        })
        .cloned()
        .collect();
    c.check("refiner stage keeps exactly the threshold survivors", kept == expected, json!({ "kept": kept.len() }));
    Ok(c.report(Suite::Oracle, Value::Null))
}

fn params() -> Result<Report> {
    let mut c = Collector(Vec::new());
    let mut out = serde_json::Map::new();
    for (name, cfg) in [("desk", DiTConfig::desk()), ("full_scale", DiTConfig::full_scale())] {
        let count = cfg.parameter_count()?;
        c.check(
            "group counts sum to the total",
            count.video + count.audio + count.video_to_audio_cross == count.total,
            json!({ "config": name }),
        );
        out.insert(name.into(), serde_json::to_value(count)?);
    }
    let desk = DiTConfig::desk();
    let model = DiTModel::new(desk.clone(), &mut SeedTree::new(5).rng())?;
    let count = desk.parameter_count()?;
    let allocated: Vec<u64> = [ParamGroup::Video, ParamGroup::Audio, ParamGroup::VideoToAudioCross]
        .iter()
        .map(|&g| model.params().group_scalar_count(g) as u64)
        .collect();
    c.check(
        "allocated desk parameters match the count",
        allocated == [count.video, count.audio, count.video_to_audio_cross],
        json!({ "allocated": allocated }),
    );
    Ok(c.report(Suite::Params, Value::Object(out)))
}
