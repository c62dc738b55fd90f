//! Rectified-flow training: shifted timestep sampling, per-element mutual
//! signal dropout, grouped learning rates and the frozen-audio refiner mode.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dit::{ConditioningState, DiTModel, JointInputs, SequenceLayout, TextCondition};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::rng::{Rng, SeedTree};
use crate::synth::AvSample;
use crate::tensor::Tensor;

/// `t = s u / (1 + (s - 1) u)`.
pub fn shift_timestep(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Joint,
    Ct,
    Sft,
    Rjt,
    Refiner,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Stage::Joint),
            "ct" => Ok(Stage::Ct),
            "sft" => Ok(Stage::Sft),
            "rjt" => Ok(Stage::Rjt),
            "refiner" => Ok(Stage::Refiner),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sigma_shift: f64,
    pub mutual_dropout_prob: f64,
    /// Probability of replacing the caption with the null embedding.
    pub text_dropout_prob: f64,
    /// Probability of first-frame conditioning on a training element.
    pub i2va_prob: f64,
    pub lr_video: f64,
    pub lr_audio: f64,
    pub lr_v2a_cross: f64,
    pub stage: Stage,
    pub freeze_audio: bool,
    pub video_loss_weight: f64,
    pub audio_loss_weight: f64,
    /// Noise added on top of the degraded video in refiner training.
    pub refiner_noise: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Stage::Joint)
    }
}

impl TrainConfig {
    /// Stage learning rates and flags; data volumes are not modelled.
    pub fn preset(stage: Stage) -> Self {
        let (lr_video, lr_side, freeze_audio, i2va_prob) = match stage {
            Stage::Joint => (1e-4, 1e-4, false, 0.0),
            Stage::Ct => (5e-5, 5e-5, false, 0.4),
            Stage::Sft | Stage::Rjt => (1e-5, 1e-6, false, 0.4),
            Stage::Refiner => (5e-5, 5e-5, true, 0.0),
        };
        TrainConfig {
            sigma_shift: 7.0,
            mutual_dropout_prob: 0.3,
            text_dropout_prob: 0.1,
            i2va_prob,
            lr_video,
            lr_audio: lr_side,
            lr_v2a_cross: lr_side,
            stage,
            freeze_audio,
            video_loss_weight: 1.0,
            audio_loss_weight: 1.0,
            refiner_noise: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 100,
            batch: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mutual_dropout_prob", self.mutual_dropout_prob),
            ("text_dropout_prob", self.text_dropout_prob),
            ("i2va_prob", self.i2va_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.sigma_shift >= 1.0) {
            return Err(Error::Config(format!("sigma_shift must be at least 1, got {}", self.sigma_shift)));
        }
        for (name, lr) in [
            ("lr_video", self.lr_video),
            ("lr_audio", self.lr_audio),
            ("lr_v2a_cross", self.lr_v2a_cross),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative finite rate, got {lr}")));
            }
        }
        if self.lr_video == 0.0 {
            return Err(Error::Config("lr_video must be positive; the video branch is never frozen".into()));
        }
        if self.stage == Stage::Refiner && !self.freeze_audio {
            return Err(Error::Config(
                "refiner stage requires freeze_audio = true; noising or training the audio branch alters the audio".into(),
            ));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate of a group; zero means frozen.
    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        let frozen_by_flag = self.freeze_audio && group != ParamGroup::Video;
        match group {
            _ if frozen_by_flag => 0.0,
            ParamGroup::Video => self.lr_video,
            ParamGroup::Audio => self.lr_audio,
            ParamGroup::VideoToAudioCross => self.lr_v2a_cross,
        }
    }
}

/// Adam with one learning rate per parameter group. Groups with rate zero
/// are skipped entirely, so their values stay bit-identical.
#[derive(Clone, Debug)]
pub struct Adam {
    lrs: [f64; 3],
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Video => 0,
        ParamGroup::Audio => 1,
        ParamGroup::VideoToAudioCross => 2,
    }
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let partition: usize = ParamGroup::ALL.iter().map(|g| store.group_scalar_count(*g)).sum();
        if partition != store.scalar_count() {
            return Err(Error::Contract(format!(
                "parameter groups cover {partition} of {} scalars",
                store.scalar_count()
            )));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Ok(Adam {
            lrs: ParamGroup::ALL.map(|g| cfg.group_lr(g)),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.lrs[group_index(group)]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.has_non_finite() {
            return Err(Error::NonFinite {
                location: "optimizer".into(),
                detail: "gradient contains NaN or infinity".into(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let lr = self.lrs[group_index(p.group)];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, (x, g)) in p.tensor.data_mut().iter_mut().zip(grads.get(id)).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rectified-flow training pair for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub noise: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub target: Tensor,
}

impl FlowSample {
    /// `x_t = (1 - t) x0 + t noise`, `target = noise - x0`.
    pub fn new(x0: &Tensor, noise: &Tensor, t: f64) -> Result<Self> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape("flow sample", x0.shape(), noise.shape()));
        }
        let x_t = x0.data().iter().zip(noise.data()).map(|(a, n)| (1.0 - t) * a + t * n).collect();
        let target = x0.data().iter().zip(noise.data()).map(|(a, n)| n - a).collect();
        Ok(FlowSample {
            x0: x0.clone(),
            noise: noise.clone(),
            t,
            x_t: Tensor::new(x0.shape().to_vec(), x_t)?,
            target: Tensor::new(x0.shape().to_vec(), target)?,
        })
    }
}

pub fn gaussian_like(x: &Tensor, rng: &mut Rng) -> Tensor {
    let data = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same length")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DropoutCounter {
    pub forwards: u64,
    pub mutual_disabled: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub video_mse: f64,
    pub audio_mse: f64,
    pub mutual_active_fraction: f64,
}

/// Step state written out when the loss stops being finite.
#[derive(Clone, Debug, Serialize)]
struct StepDump {
    step: usize,
    timesteps: Vec<f64>,
    mutual: Vec<bool>,
    video_mse: Vec<f64>,
    audio_mse: Vec<f64>,
    param_checksum: u64,
    nan_in_softmax: bool,
}

/// I2VA conditioning: the first frame is clean and flagged in the first
/// extra input channel.
fn first_frame_condition(model: &DiTModel, x_t: &mut Tensor, x0: &Tensor) -> Result<Tensor> {
    let c = model.config();
    let extra = c.video_in_dim - c.video_out_dim;
    if extra == 0 {
        return Err(Error::Config("first-frame conditioning needs video_in_dim > video_out_dim".into()));
    }
    let w = x0.cols();
    x_t.data_mut()[..w].copy_from_slice(&x0.data()[..w]);
    let mut cond = Tensor::zeros(&[x0.rows(), extra]);
    cond.data_mut()[0] = 1.0;
    Ok(cond)
}

fn masked_mse(tape: &mut Tape, pred: Var, target: &Tensor, skip_rows: usize) -> Result<Var> {
    if skip_rows == 0 {
        return tape.mse(pred, target.data());
    }
    let (r, c) = tape.shape(pred);
    let p = tape.slice_rows(pred, skip_rows, r - skip_rows)?;
    tape.mse(p, &target.data()[skip_rows * c..])
}

/// One optimisation step over a batch; the loss is the batch mean of the
/// weighted per-modality velocity errors.
pub fn train_step(
    model: &mut DiTModel,
    optimizer: &mut Adam,
    batch: &[AvSample],
    layout: &SequenceLayout,
    cfg: &TrainConfig,
    rng: &mut Rng,
    step: usize,
    counter: &mut DropoutCounter,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if cfg.stage == Stage::Refiner {
        return Err(Error::Config("refiner stage trains through refiner_step".into()));
    }
    let mut prepared = Vec::with_capacity(batch.len());
    for s in batch {
        let t = shift_timestep(rng.random::<f64>(), cfg.sigma_shift);
        let nv = gaussian_like(&s.video, rng);
        let na = gaussian_like(&s.audio, rng);
        let mutual = rng.random::<f64>() >= cfg.mutual_dropout_prob;
        let text = if rng.random::<f64>() < cfg.text_dropout_prob {
            TextCondition::Null
        } else {
            TextCondition::Positive(s.caption)
        };
        let i2va = rng.random::<f64>() < cfg.i2va_prob;
        let fv = FlowSample::new(&s.video, &nv, t)?;
        let fa = FlowSample::new(&s.audio, &na, t)?;
        counter.forwards += 1;
        counter.mutual_disabled += u64::from(!mutual);
        prepared.push((fv, fa, ConditioningState::new(text, mutual), i2va));
    }

    let store_checksum = model.params().checksum(None);
    let (grads, vm, am, nan_softmax) = {
        let mut tape = Tape::new(model.params());
        let mut losses = Vec::with_capacity(batch.len());
        let (mut vm, mut am) = (Vec::new(), Vec::new());
        for (fv, fa, state, i2va) in &mut prepared {
            let cond = if *i2va {
                Some(first_frame_condition(model, &mut fv.x_t, &fv.x0)?)
            } else {
                None
            };
            let inp = JointInputs {
                video: &fv.x_t,
                audio: &fa.x_t,
                video_t: fv.t,
                audio_t: fa.t,
                state,
                layout,
                video_cond: cond.as_ref(),
            };
            let out = model.forward(&mut tape, &inp)?;
            let lv = masked_mse(&mut tape, out.video, &fv.target, usize::from(*i2va))?;
            let la = tape.mse(out.audio, fa.target.data())?;
            vm.push(tape.value(lv)[0]);
            am.push(tape.value(la)[0]);
            let lv = tape.scale(lv, cfg.video_loss_weight);
            let la = tape.scale(la, cfg.audio_loss_weight);
            losses.push(tape.add(lv, la)?);
        }
        let mut total = losses[0];
        for l in &losses[1..] {
            total = tape.add(total, *l)?;
        }
        let total = tape.scale(total, 1.0 / batch.len() as f64);
        if !tape.value(total)[0].is_finite() {
            let dump = StepDump {
                step,
                timesteps: prepared.iter().map(|p| p.0.t).collect(),
                mutual: prepared.iter().map(|p| p.2.mutual).collect(),
                video_mse: vm,
                audio_mse: am,
                param_checksum: store_checksum,
                nan_in_softmax: tape.nan_in_softmax(),
            };
            return Err(Error::NonFinite {
                location: format!("train step {step}"),
                detail: serde_json::to_string(&dump)?,
            });
        }
        (tape.backward(total)?, vm, am, tape.nan_in_softmax())
    };
    debug_assert!(!nan_softmax);
    optimizer.step(model.params_mut(), &grads)?;
    let n = batch.len() as f64;
    let active = prepared.iter().filter(|p| p.2.mutual).count() as f64;
    Ok(StepMetrics {
        step,
        video_mse: vm.iter().sum::<f64>() / n,
        audio_mse: am.iter().sum::<f64>() / n,
        mutual_active_fraction: active / n,
    })
}

/// Refiner training element: the clean pair and its degraded video.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    pub clean_video: Tensor,
    pub degraded_video: Tensor,
    pub clean_audio: Tensor,
    pub caption: usize,
}

/// Video-only refiner step. Clean audio enters the frozen audio branch at
/// `t = 0` without noise; the video interpolates from the clean latent
/// toward the noised degraded latent.
#[allow(clippy::too_many_arguments)]
pub fn refiner_step(
    model: &mut DiTModel,
    optimizer: &mut Adam,
    batch: &[RefinerSample],
    layout: &SequenceLayout,
    cfg: &TrainConfig,
    rng: &mut Rng,
    step: usize,
) -> Result<StepMetrics> {
    if !cfg.freeze_audio {
        return Err(Error::Config(
            "refiner training requires freeze_audio = true; the audio branch must stay untouched".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut prepared = Vec::with_capacity(batch.len());
    for s in batch {
        let t = shift_timestep(rng.random::<f64>(), cfg.sigma_shift);
        let noise = gaussian_like(&s.degraded_video, rng);
        let source: Vec<f64> = s
            .degraded_video
            .data()
            .iter()
            .zip(noise.data())
            .map(|(d, n)| d + cfg.refiner_noise * n)
            .collect();
        let source = Tensor::new(s.degraded_video.shape().to_vec(), source)?;
        prepared.push((FlowSample::new(&s.clean_video, &source, t)?, s));
    }
    let (grads, vm) = {
        let mut tape = Tape::new(model.params());
        let mut total: Option<Var> = None;
        let mut vm = Vec::new();
        for (fv, s) in &prepared {
            let state = ConditioningState::new(TextCondition::Positive(s.caption), true);
            let inp = JointInputs {
                video: &fv.x_t,
                audio: &s.clean_audio,
                video_t: fv.t,
                audio_t: 0.0,
                state: &state,
                layout,
                video_cond: None,
            };
            let out = model.forward(&mut tape, &inp)?;
            let lv = tape.mse(out.video, fv.target.data())?;
            vm.push(tape.value(lv)[0]);
            total = Some(match total {
                None => lv,
                Some(acc) => tape.add(acc, lv)?,
            });
        }
        let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        if !tape.value(total)[0].is_finite() {
            return Err(Error::NonFinite {
                location: format!("refiner step {step}"),
                detail: format!("video losses {vm:?}"),
            });
        }
        (tape.backward(total)?, vm)
    };
    optimizer.step(model.params_mut(), &grads)?;
    Ok(StepMetrics {
        step,
        video_mse: vm.iter().sum::<f64>() / batch.len() as f64,
        audio_mse: 0.0,
        mutual_active_fraction: 1.0,
    })
}

/// Temporal blur plus attenuation: a stand-in for low-resolution first-stage output.
pub fn degrade_video(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let lo = r.saturating_sub(1);
        let hi = (r + 1).min(rows - 1);
        for c in 0..cols {
            let s: f64 = (lo..=hi).map(|k| x.data()[k * cols + c]).sum();
            out[r * cols + c] = 0.8 * s / (hi - lo + 1) as f64;
        }
    }
    Tensor::new(vec![rows, cols], out).expect("same shape")
}

/// Owns the model, optimiser, random stream and dropout counter of a run.
pub struct Trainer {
    pub model: DiTModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub counter: DropoutCounter,
    rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: DiTModel, config: TrainConfig) -> Result<Self> {
        let optimizer = Adam::new(model.params(), &config)?;
        let rng = SeedTree::new(config.seed).derive("train").rng();
        Ok(Trainer {
            model,
            optimizer,
            config,
            counter: DropoutCounter::default(),
            rng,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Draws a batch uniformly with replacement from `samples`.
    pub fn sample_batch<'a>(&mut self, samples: &'a [AvSample]) -> Vec<&'a AvSample> {
        (0..self.config.batch)
            .map(|_| &samples[self.rng.random_range(0..samples.len())])
            .collect()
    }

    pub fn train_step(&mut self, batch: &[AvSample], layout: &SequenceLayout) -> Result<StepMetrics> {
        let m = train_step(
            &mut self.model,
            &mut self.optimizer,
            batch,
            layout,
            &self.config,
            &mut self.rng,
            self.step,
            &mut self.counter,
        )?;
        self.step += 1;
        Ok(m)
    }

    pub fn refiner_step(&mut self, batch: &[RefinerSample], layout: &SequenceLayout) -> Result<StepMetrics> {
        let m = refiner_step(
            &mut self.model,
            &mut self.optimizer,
            batch,
            layout,
            &self.config,
            &mut self.rng,
            self.step,
        )?;
        self.step += 1;
        Ok(m)
    }

    /// Runs `config.steps` steps on random batches, writing one JSON line per step.
    pub fn fit<W: Write>(&mut self, samples: &[AvSample], layout: &SequenceLayout, mut log: Option<W>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let batch: Vec<AvSample> = self.sample_batch(samples).into_iter().cloned().collect();
            let m = self.train_step(&batch, layout)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&m)?)?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_examples() {
        assert_eq!(shift_timestep(0.3, 1.0), 0.3);
        assert_eq!(shift_timestep(0.5, 7.0), 0.875);
        assert!((shift_timestep(1.0 - 1e-12, 7.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let x0 = Tensor::new(vec![3], vec![0.1, -2.0, 3.3]).unwrap();
        let n = Tensor::new(vec![3], vec![1.7, 0.2, -0.9]).unwrap();
        assert_eq!(FlowSample::new(&x0, &n, 0.0).unwrap().x_t, x0);
        assert_eq!(FlowSample::new(&x0, &n, 1.0).unwrap().x_t, n);
        let a = FlowSample::new(&x0, &n, 0.2).unwrap().target;
        let b = FlowSample::new(&x0, &n, 0.9).unwrap().target;
        assert_eq!(a, b);
    }

    #[test]
    fn sft_preset_rates() {
        let c = TrainConfig::preset(Stage::Sft);
        assert_eq!((c.lr_video, c.lr_audio, c.lr_v2a_cross), (1e-5, 1e-6, 1e-6));
        let j = TrainConfig::preset(Stage::Joint);
        assert_eq!((j.lr_video, j.lr_audio, j.sigma_shift, j.mutual_dropout_prob), (1e-4, 1e-4, 7.0, 0.3));
    }

    #[test]
    fn refiner_without_freeze_is_rejected() {
        let mut c = TrainConfig::preset(Stage::Refiner);
        c.freeze_audio = false;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::preset(Stage::Joint);
        c.mutual_dropout_prob = 1.5;
        assert!(c.validate().is_err());
    }
}
