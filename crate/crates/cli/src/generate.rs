//! `train`, `sample` and `demo`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use alive_core::checkpoint;
use alive_core::dit::DiTModel;
use alive_core::flow::{degrade_video, RefinerSample, Stage, StepMetrics, Trainer};
use alive_core::guidance::{sample, GuidanceConfig, Prompt, SampleMode};
use alive_core::rng::SeedTree;
use alive_core::synth::{make_synthetic_av_dataset_with, sync_statistic, AvDataset};
use alive_core::tensor::Tensor;
use alive_core::tokens;
use anyhow::{bail, Context, Result};
use serde_json::json;

use crate::config::{hash_json, RunConfig};
use crate::manifest::RunManifest;
use crate::{DemoArgs, ModeArg, SampleArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn metrics_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Builds the dataset and model for `cfg` and trains for `cfg.train.steps`.
/// The data, initial weights and training stream derive from `seed`.
fn run_training<W: Write>(cfg: &RunConfig, seed: u64, log: &mut W) -> Result<(Trainer, AvDataset, Vec<StepMetrics>)> {
    let tree = SeedTree::new(seed);
    let data = make_synthetic_av_dataset_with(cfg.pairs, tree.derive("data").seed(), &cfg.synth)
        .context("stage dataset")?;
    let model = DiTModel::new(cfg.model.clone(), &mut tree.derive("init").rng()).context("stage model")?;
    let mut train = cfg.train.clone();
    train.seed = tree.derive("train").seed();
    let mut trainer = Trainer::new(model, train).context("stage train")?;
    let metrics = if cfg.train.stage == Stage::Refiner {
        let mut metrics = Vec::with_capacity(cfg.train.steps);
        for _ in 0..cfg.train.steps {
            let batch: Vec<RefinerSample> = trainer
                .sample_batch(&data.samples)
                .into_iter()
                .map(|s| RefinerSample {
                    clean_video: s.video.clone(),
                    degraded_video: degrade_video(&s.video),
                    clean_audio: s.audio.clone(),
                    caption: s.caption,
                })
                .collect();
            let m = trainer.refiner_step(&batch, &data.layout).context("stage train")?;
            writeln!(log, "{}", serde_json::to_string(&m)?)?;
            metrics.push(m);
        }
        metrics
    } else {
        trainer.fit(&data.samples, &data.layout, Some(&mut *log)).context("stage train")?
    };
    log.flush()?;
    Ok((trainer, data, metrics))
}

fn tail_mean(metrics: &[StepMetrics]) -> (f64, f64) {
    let n = (metrics.len() / 10).max(1).min(metrics.len());
    let tail = &metrics[metrics.len() - n..];
    let k = tail.len().max(1) as f64;
    (
        tail.iter().map(|m| m.video_mse).sum::<f64>() / k,
        tail.iter().map(|m| m.audio_mse).sum::<f64>() / k,
    )
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref(), Some(args.stage))?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let mut manifest = RunManifest::start("train", hash_json(&cfg)?, args.seed);
    create_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut log = metrics_writer(&metrics_path)?;
    let (trainer, _, metrics) = run_training(&cfg, args.seed, &mut log)?;
    let model_path = args.out.join("model.alvf");
    checkpoint::save(&model_path, &trainer.model.params().named_tensors())?;
    let (v, a) = tail_mean(&metrics);
    manifest.outputs = vec![metrics_path, model_path];
    manifest.finish(
        &args.out.join("manifest.json"),
        json!({
            "stage": cfg.train.stage,
            "steps": cfg.train.steps,
            "final_video_mse": v,
            "final_audio_mse": a,
            "param_checksum": trainer.model.params().checksum(None),
        }),
    )
}

fn parse_row(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad number {x:?} in {s:?}")))
        .collect()
}

fn guidance_from(args: &SampleArgs) -> GuidanceConfig {
    let mut g = GuidanceConfig::default();
    for m in [&mut g.video, &mut g.audio] {
        m.w1 = args.w1.unwrap_or(m.w1);
        m.w2 = args.w2.unwrap_or(m.w2);
        m.w3 = args.w3.unwrap_or(m.w3);
    }
    g.video.eta = args.eta_video.unwrap_or(g.video.eta);
    g.audio.eta = args.eta_audio.unwrap_or(g.audio.eta);
    g.s_txt = args.s_txt.unwrap_or(g.s_txt);
    g.s_ref = args.s_ref.unwrap_or(g.s_ref);
    g.steps = args.steps.unwrap_or(g.steps);
    g
}

pub fn sample_cmd(args: &SampleArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), None)?;
    let guidance = guidance_from(args);
    let mode = match args.mode {
        ModeArg::T2va => SampleMode::T2va,
        ModeArg::I2va => {
            let Some(frame) = &args.first_frame else {
                bail!("--mode i2va needs --first-frame");
            };
            SampleMode::I2va { first_frame: parse_row(frame)? }
        }
        ModeArg::R2va => {
            if args.reference.is_empty() {
                bail!("--mode r2va needs at least one --reference");
            }
            SampleMode::R2va {
                references: args.reference.iter().map(|r| parse_row(r)).collect::<Result<_>>()?,
            }
        }
    };
    let tree = SeedTree::new(args.seed);
    let mut model = DiTModel::new(cfg.model.clone(), &mut tree.derive("init").rng())?;
    if let Some(path) = &args.checkpoint {
        let named = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        model.params_mut().load_named(named)?;
    }
    let prompt = Prompt {
        caption: args.caption,
        speech_tokens: args.speech.as_deref().map(tokens::encode).unwrap_or_default(),
        mode,
        layout: cfg.synth.layout()?,
    };
    let hash = hash_json(&json!({
        "model": cfg.model,
        "synth": cfg.synth,
        "guidance": guidance,
        "mode": format!("{:?}", prompt.mode),
        "caption": prompt.caption,
        "speech_tokens": prompt.speech_tokens,
        "model_checksum": model.params().checksum(None),
    }))?;
    let mut manifest = RunManifest::start("sample", hash, args.seed);
    let out = sample(&model, &prompt, &guidance, tree.derive("sample").seed()).context("stage sample")?;
    create_dir(&args.out)?;
    let latents = args.out.join("latents.alvf");
    checkpoint::save(&latents, &[("video".into(), out.video), ("audio".into(), out.audio)])?;
    manifest.outputs = vec![latents];
    manifest.finish(
        &args.out.join("manifest.json"),
        json!({ "mode": args.mode, "forwards": out.forwards, "guidance": guidance }),
    )
}

/// Training recipe of the end-to-end demo.
pub fn demo_config(steps: usize, mutual_off: bool) -> RunConfig {
    let mut cfg = RunConfig::defaults(Stage::Joint);
    cfg.train.lr_video = 3e-3;
    cfg.train.lr_audio = 3e-3;
    cfg.train.lr_v2a_cross = 3e-3;
    cfg.train.batch = 8;
    cfg.train.steps = steps;
    if mutual_off {
        cfg.train.mutual_dropout_prob = 1.0;
    }
    cfg
}

pub fn demo(args: &DemoArgs) -> Result<()> {
    let cfg = demo_config(args.steps, args.mutual_off);
    let mut guidance = GuidanceConfig::default();
    guidance.steps = args.sampler_steps;
    let hash = hash_json(&json!({ "run": cfg, "guidance": guidance, "eval_pairs": args.eval_pairs }))?;
    let mut manifest = RunManifest::start("demo", hash, args.seed);
    create_dir(&args.out)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut log = metrics_writer(&metrics_path)?;
    let (trainer, data, _) = run_training(&cfg, args.seed, &mut log)?;

    let sample_tree = SeedTree::new(args.seed).derive("sample");
    let pairs: Vec<(Tensor, Tensor)> = (0..args.eval_pairs)
        .map(|k| {
            let prompt = Prompt {
                caption: k % cfg.synth.event_types,
                speech_tokens: Vec::new(),
                mode: SampleMode::T2va,
                layout: data.layout.clone(),
            };
            let out = sample(&trainer.model, &prompt, &guidance, sample_tree.index(k as u64).seed())?;
            Ok((out.video, out.audio))
        })
        .collect::<alive_core::Result<_>>()
        .context("stage sample")?;

    let stat = sync_statistic(&pairs, &data.layout).context("stage statistic")?;
    let latents_path = args.out.join("latents.alvf");
    let records: Vec<(String, Tensor)> = pairs
        .into_iter()
        .enumerate()
        .flat_map(|(k, (v, a))| [(format!("video/{k:04}"), v), (format!("audio/{k:04}"), a)])
        .collect();
    checkpoint::save(&latents_path, &records).context("stage write")?;
    let model_path = args.out.join("model.alvf");
    checkpoint::save(&model_path, &trainer.model.params().named_tensors()).context("stage write")?;
    let sync_path = args.out.join("sync.json");
    let sync = json!({
        "mutual": !args.mutual_off,
        "matched_mean": stat.matched_mean,
        "shuffled_mean": stat.shuffled_mean,
        "z": stat.z,
        "pairs": stat.pairs,
    });
    std::fs::write(&sync_path, serde_json::to_string_pretty(&sync)? + "\n").context("stage write")?;
    println!("{}", serde_json::to_string(&sync)?);
    manifest.outputs = vec![metrics_path, latents_path, model_path, sync_path];
    manifest.finish(&args.out.join("manifest.json"), sync)
}
