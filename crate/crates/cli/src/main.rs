//! `alive-forge`: training, sampling, caption and data tools, and self-checks.

mod check;
mod config;
mod generate;
mod manifest;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use alive_core::flow::Stage;
use alive_core::funnel::StageName;
use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const SEED_ENV: &str = "ALIVE_FORGE_SEED";

#[derive(Parser)]
#[command(name = "alive-forge", version, about = "Desk-scale joint audio-video generation toolkit")]
#[command(after_help = "Environment:\n  ALIVE_FORGE_SEED  default seed for every command that takes --seed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the joint model on synthetic correlated latents.
    Train(TrainArgs),
    /// Generate one audio-video latent pair with multi-condition guidance.
    Sample(SampleArgs),
    /// Parse structured captions and report them as JSON.
    ParseCaption(ParseCaptionArgs),
    /// Relabel speakers from lip-sync scores and sentence timings.
    CorrectSubjects(CorrectArgs),
    /// Run one stage of the data funnel over a JSONL record file.
    Filter(FilterArgs),
    /// Decide which candidate pairs become cross-pairs.
    CrossPairs(CrossPairArgs),
    /// Replace sound terms by their nearest indexed description.
    RefineSounds(RefineArgs),
    /// Run a self-check suite and print its JSON report.
    Check(CheckArgs),
    /// Dataset, training, sampling and the synchronization statistic, end to end.
    Demo(DemoArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training stage: joint, ct, sft, rjt or refiner.
    #[arg(long, default_value = "joint")]
    pub stage: Stage,
    /// TOML or JSON file with optional [model], [train] and [synth] tables and `pairs`.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Optimiser steps; overrides the config file.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for metrics.jsonl, model.alvf and manifest.json.
    #[arg(long, value_name = "DIR", default_value = "train-out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    T2va,
    I2va,
    R2va,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long, value_enum, default_value = "t2va")]
    pub mode: ModeArg,
    /// Guidance weight on the total delta (both modalities).
    #[arg(long)]
    pub w1: Option<f64>,
    /// Guidance weight on the text delta (both modalities).
    #[arg(long)]
    pub w2: Option<f64>,
    /// Guidance weight on the mutual delta (both modalities).
    #[arg(long)]
    pub w3: Option<f64>,
    /// Parallel damping for video, in [0, 1].
    #[arg(long)]
    pub eta_video: Option<f64>,
    /// Parallel damping for audio, in [0, 1].
    #[arg(long)]
    pub eta_audio: Option<f64>,
    /// Text scale of dual-conditioning guidance (r2va).
    #[arg(long)]
    pub s_txt: Option<f64>,
    /// Reference scale of dual-conditioning guidance (r2va).
    #[arg(long)]
    pub s_ref: Option<f64>,
    /// Euler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for latents.alvf and manifest.json.
    #[arg(long, value_name = "DIR", default_value = "sample-out")]
    pub out: PathBuf,
    /// Trained weights; without it the seed's fresh initialisation is used.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Run config supplying [model] and [synth].
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Caption id.
    #[arg(long, default_value_t = 0)]
    pub caption: usize,
    /// Speech text, tokenized with the built-in byte vocabulary.
    #[arg(long)]
    pub speech: Option<String>,
    /// Comma-separated first video latent (i2va).
    #[arg(long, allow_hyphen_values = true)]
    pub first_frame: Option<String>,
    /// Comma-separated reference embedding (r2va); repeat for several.
    #[arg(long, allow_hyphen_values = true)]
    pub reference: Vec<String>,
}

#[derive(Args)]
pub struct ParseCaptionArgs {
    /// Caption text file, or JSONL of {id, caption} when the name ends in .jsonl.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// JSONL output; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CorrectArgs {
    /// Caption text file.
    #[arg(long, value_name = "FILE")]
    pub caption: PathBuf,
    /// Lip-sync scores as JSON {fps, tracks, scores}.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Sentence spans as JSONL {text, t_start, t_end}.
    #[arg(long, value_name = "FILE")]
    pub sentences: PathBuf,
    /// Track to subject map as JSON {"0": {"subject": "Subject1"}}.
    #[arg(long, value_name = "FILE")]
    pub trackmap: PathBuf,
    /// Activity threshold on the scores (inclusive).
    #[arg(long, allow_hyphen_values = true)]
    pub theta: f64,
    /// Minimum fraction of window frames the winning track must hold.
    #[arg(long, default_value_t = 0.0)]
    pub min_margin: f64,
    /// Corrected caption file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FilterArgs {
    /// Funnel stage: joint, ct, sft or refiner.
    #[arg(long)]
    pub stage: StageName,
    /// Input records, JSONL.
    #[arg(long, value_name = "FILE")]
    pub records: PathBuf,
    /// Kept records, JSONL.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-predicate and per-class counts, JSON.
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Keyword table {visual_tag: [audio_keywords]} used to tag records first.
    #[arg(long, value_name = "FILE")]
    pub keywords: Option<PathBuf>,
    /// Balancing seed.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct CrossPairArgs {
    /// Candidate pairs as JSONL {record_a, record_b, face_sim, global_sim}.
    #[arg(long, value_name = "FILE")]
    pub candidates: PathBuf,
    /// Half-width of the accepted band around a global similarity of 0.9.
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
}

#[derive(Args)]
pub struct RefineArgs {
    /// Query embeddings, tensor container with names = terms.
    #[arg(long, value_name = "FILE")]
    pub terms: PathBuf,
    /// Description embeddings, tensor container with names = descriptions.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    /// Substitute only when cosine similarity is strictly above this.
    #[arg(long, default_value_t = 0.85)]
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Positions,
    Guidance,
    Gradients,
    Oracle,
    Params,
}

#[derive(Args)]
pub struct CheckArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// Video latents for the positions suite.
    #[arg(long, default_value_t = 2)]
    pub video_latents: usize,
    /// Audio latents for the positions suite.
    #[arg(long, default_value_t = 8)]
    pub audio_latents: usize,
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Force mutual-signal dropout to 1 during training (ablation control).
    #[arg(long)]
    pub mutual_off: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "demo-out")]
    pub out: PathBuf,
    /// Training steps.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Sampled pairs scored by the synchronization statistic.
    #[arg(long, default_value_t = 200)]
    pub eval_pairs: usize,
    /// Euler steps per sample.
    #[arg(long, default_value_t = 20)]
    pub sampler_steps: usize,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => generate::train(&a)?,
        Command::Sample(a) => generate::sample_cmd(&a)?,
        Command::ParseCaption(a) => return tools::parse_caption_cmd(&a),
        Command::CorrectSubjects(a) => tools::correct_subjects_cmd(&a)?,
        Command::Filter(a) => tools::filter_cmd(&a)?,
        Command::CrossPairs(a) => tools::cross_pairs_cmd(&a)?,
        Command::RefineSounds(a) => tools::refine_sounds_cmd(&a)?,
        Command::Check(a) => {
            let pos = check::PositionArgs {
                video_latents: a.video_latents,
                audio_latents: a.audio_latents,
            };
            let report = check::run(a.suite, &pos)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(report.passed);
        }
        Command::Demo(a) => generate::demo(&a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
