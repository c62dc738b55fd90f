//! Guidance algebra and the Euler sampler.
//!
//! Multi-condition mode evaluates the model in the four combinations of
//! {positive, negative} text and {with, without} the mutual signal and
//! combines them per modality. Reference mode evaluates null/text/text+ref
//! and applies two independent scales.

use serde::{Deserialize, Serialize};

use crate::dit::{ConditioningState, DiTModel, JointInputs, SequenceLayout, TextCondition};
use crate::error::{Error, Result};
use crate::flow::{gaussian_like, shift_timestep};
use crate::rng::SeedTree;
use crate::tensor::{dot, Tensor};

/// `eta * parallel + perpendicular`, the split taken against `reference`.
/// A zero reference has no parallel component.
pub fn apg_project(delta: &[f64], reference: &[f64], eta: f64) -> Vec<f64> {
    let rr = dot(reference, reference);
    if rr == 0.0 || eta == 1.0 {
        return delta.to_vec();
    }
    let k = dot(delta, reference) / rr;
    delta
        .iter()
        .zip(reference)
        .map(|(d, r)| {
            let par = k * r;
            eta * par + (d - par)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityGuidance {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub eta: f64,
}

impl ModalityGuidance {
    pub const VIDEO_DEFAULT: ModalityGuidance = ModalityGuidance {
        w1: 3.0,
        w2: 3.0,
        w3: 3.0,
        eta: 0.5,
    };
    pub const AUDIO_DEFAULT: ModalityGuidance = ModalityGuidance {
        w1: 2.0,
        w2: 10.0,
        w3: 2.0,
        eta: 0.2,
    };
    /// Plain conditional prediction: `eps_pos,mutual`.
    pub const CONDITIONAL: ModalityGuidance = ModalityGuidance {
        w1: 1.0,
        w2: 0.0,
        w3: 0.0,
        eta: 1.0,
    };
}

/// Which prediction the guidance deltas are projected against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApgReference {
    PosMutual,
    NegIndep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// One projection over the whole flattened latent.
    Flattened,
    /// One projection per latent row.
    PerToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub video: ModalityGuidance,
    pub audio: ModalityGuidance,
    pub s_txt: f64,
    pub s_ref: f64,
    pub steps: usize,
    pub sigma_shift: f64,
    pub reference: ApgReference,
    pub projection: Projection,
    /// Text condition used for the negative branch.
    pub negative: TextCondition,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            video: ModalityGuidance::VIDEO_DEFAULT,
            audio: ModalityGuidance::AUDIO_DEFAULT,
            s_txt: 5.0,
            s_ref: 2.0,
            steps: 20,
            sigma_shift: 7.0,
            reference: ApgReference::PosMutual,
            projection: Projection::Flattened,
            negative: TextCondition::Null,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("video", self.video), ("audio", self.audio)] {
            if !(0.0..=1.0).contains(&g.eta) {
                return Err(Error::Config(format!("{name} eta must lie in [0, 1], got {}", g.eta)));
            }
            if ![g.w1, g.w2, g.w3].iter().all(|w| w.is_finite()) {
                return Err(Error::Config(format!("{name} weights must be finite")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.sigma_shift >= 1.0) {
            return Err(Error::Config("sigma_shift must be at least 1".into()));
        }
        Ok(())
    }
}

/// The four conditional predictions for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FourStatePrediction {
    pub eps_pos_mutual: Tensor,
    pub eps_pos_indep: Tensor,
    pub eps_neg_mutual: Tensor,
    pub eps_neg_indep: Tensor,
}

impl FourStatePrediction {
    fn validate(&self) -> Result<()> {
        let s = self.eps_pos_mutual.shape();
        for t in [&self.eps_pos_indep, &self.eps_neg_mutual, &self.eps_neg_indep] {
            if t.shape() != s {
                return Err(Error::shape("four-state prediction", s, t.shape()));
            }
        }
        Ok(())
    }
}

fn project(delta: &[f64], reference: &[f64], eta: f64, projection: Projection, cols: usize) -> Vec<f64> {
    match projection {
        Projection::Flattened => apg_project(delta, reference, eta),
        Projection::PerToken => delta
            .chunks(cols)
            .zip(reference.chunks(cols))
            .flat_map(|(d, r)| apg_project(d, r, eta))
            .collect(),
    }
}

/// `eps_neg,indep + w1 A(pm - ni) + w2 A(pm - nm) + w3 A(pm - pi)`.
pub fn guided_velocity(
    preds: &FourStatePrediction,
    weights: &ModalityGuidance,
    reference: ApgReference,
    projection: Projection,
) -> Result<Tensor> {
    preds.validate()?;
    let pm = preds.eps_pos_mutual.data();
    let pi = preds.eps_pos_indep.data();
    let nm = preds.eps_neg_mutual.data();
    let ni = preds.eps_neg_indep.data();
    let cols = preds.eps_pos_mutual.shape().last().copied().unwrap_or(1).max(1);
    let refv = match reference {
        ApgReference::PosMutual => pm,
        ApgReference::NegIndep => ni,
    };
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let w1 = weights.w1;
    // Undamped, the total term is an interpolation; this form keeps the
    // w1 = 0 and w1 = 1 endpoints exact.
    let base: Vec<f64> = if weights.eta == 1.0 {
        (0..pm.len()).map(|k| (1.0 - w1) * ni[k] + w1 * pm[k]).collect()
    } else {
        let total = project(&diff(pm, ni), refv, weights.eta, projection, cols);
        (0..pm.len()).map(|k| ni[k] + w1 * total[k]).collect()
    };
    let text = project(&diff(pm, nm), refv, weights.eta, projection, cols);
    let mutual = project(&diff(pm, pi), refv, weights.eta, projection, cols);
    let out = (0..pm.len())
        .map(|k| base[k] + weights.w2 * text[k] + weights.w3 * mutual[k])
        .collect();
    Tensor::new(preds.eps_pos_mutual.shape().to_vec(), out)
}

/// `e(0,0) + s_txt (e(c,0) - e(0,0)) + s_ref (e(c,r) - e(c,0))`, evaluated as
/// `(1 - s_txt) e(0,0) + (s_txt - s_ref) e(c,0) + s_ref e(c,r)` so that unit
/// scales return `e(c,r)` exactly.
pub fn dual_cond_velocity(
    eps_uncond: &Tensor,
    eps_text: &Tensor,
    eps_text_ref: &Tensor,
    s_txt: f64,
    s_ref: f64,
) -> Result<Tensor> {
    for t in [eps_text, eps_text_ref] {
        if t.shape() != eps_uncond.shape() {
            return Err(Error::shape("dual_cond_velocity", eps_uncond.shape(), t.shape()));
        }
    }
    let out = eps_uncond
        .data()
        .iter()
        .zip(eps_text.data())
        .zip(eps_text_ref.data())
        .map(|((u, t), r)| (1.0 - s_txt) * u + (s_txt - s_ref) * t + s_ref * r)
        .collect();
    Tensor::new(eps_uncond.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleMode {
    /// Text to video and audio, four-state guidance.
    T2va,
    /// First video latent fixed to the given frame, four-state guidance.
    I2va { first_frame: Vec<f64> },
    /// Reference-conditioned, dual-conditioning guidance.
    R2va { references: Vec<Vec<f64>> },
}

#[derive(Clone, Debug)]
pub struct Prompt {
    pub caption: usize,
    pub speech_tokens: Vec<u32>,
    pub mode: SampleMode,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub video: Tensor,
    pub audio: Tensor,
    /// Model evaluations performed.
    pub forwards: usize,
}

/// Euler steps on the shifted grid `t_k = shift(1 - k / steps)`, from noise
/// at `t = 1` to data at `t = 0`.
pub fn time_grid(steps: usize, shift: f64) -> Vec<f64> {
    (0..=steps)
        .map(|k| shift_timestep(1.0 - k as f64 / steps as f64, shift))
        .collect()
}

struct Evaluator<'a> {
    model: &'a DiTModel,
    layout: &'a SequenceLayout,
    cond: Option<Tensor>,
    forwards: usize,
}

impl Evaluator<'_> {
    fn eval(&mut self, video: &Tensor, audio: &Tensor, t: f64, state: &ConditioningState) -> Result<(Tensor, Tensor)> {
        self.forwards += 1;
        self.model.predict(&JointInputs {
            video,
            audio,
            video_t: t,
            audio_t: t,
            state,
            layout: self.layout,
            video_cond: self.cond.as_ref(),
        })
    }
}

/// The latents at `t = 1` that `sample` starts from.
pub fn initial_noise(model: &DiTModel, layout: &SequenceLayout, seed: u64) -> (Tensor, Tensor) {
    let c = model.config();
    let mut rng = SeedTree::new(seed).derive("sample").rng();
    let video = gaussian_like(&Tensor::zeros(&[layout.video.latent_count, c.video_out_dim]), &mut rng);
    let audio = gaussian_like(&Tensor::zeros(&[layout.audio.latent_count, c.audio_out_dim]), &mut rng);
    (video, audio)
}

pub fn sample(model: &DiTModel, prompt: &Prompt, cfg: &GuidanceConfig, seed: u64) -> Result<SampleOutput> {
    cfg.validate()?;
    let c = model.config();
    let lv = prompt.layout.video.latent_count;
    let (mut video, mut audio) = initial_noise(model, &prompt.layout, seed);

    let first_frame = match &prompt.mode {
        SampleMode::I2va { first_frame } => {
            if first_frame.len() != c.video_out_dim {
                return Err(Error::shape("first frame", &[first_frame.len()], &[c.video_out_dim]));
            }
            Some(first_frame.clone())
        }
        _ => None,
    };
    let cond = match &first_frame {
        Some(_) => {
            let extra = c.video_in_dim - c.video_out_dim;
            if extra == 0 {
                return Err(Error::Config("first-frame conditioning needs video_in_dim > video_out_dim".into()));
            }
            let mut m = Tensor::zeros(&[lv, extra]);
            m.data_mut()[0] = 1.0;
            Some(m)
        }
        None => None,
    };
    let mut ev = Evaluator {
        model,
        layout: &prompt.layout,
        cond,
        forwards: 0,
    };
    let pos = {
        let mut s = ConditioningState::new(TextCondition::Positive(prompt.caption), true);
        s.speech_tokens = prompt.speech_tokens.clone();
        s
    };
    let grid = time_grid(cfg.steps, cfg.sigma_shift);
    for (k, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        if let Some(f) = &first_frame {
            video.data_mut()[..f.len()].copy_from_slice(f);
        }
        let (vv, va) = match &prompt.mode {
            SampleMode::T2va | SampleMode::I2va { .. } => {
                let neg = pos.with_text(cfg.negative);
                let (pmv, pma) = ev.eval(&video, &audio, t, &pos)?;
                let (piv, pia) = ev.eval(&video, &audio, t, &pos.with_mutual(false))?;
                let (nmv, nma) = ev.eval(&video, &audio, t, &neg)?;
                let (niv, nia) = ev.eval(&video, &audio, t, &neg.with_mutual(false))?;
                let vp = FourStatePrediction {
                    eps_pos_mutual: pmv,
                    eps_pos_indep: piv,
                    eps_neg_mutual: nmv,
                    eps_neg_indep: niv,
                };
                let ap = FourStatePrediction {
                    eps_pos_mutual: pma,
                    eps_pos_indep: pia,
                    eps_neg_mutual: nma,
                    eps_neg_indep: nia,
                };
                (
                    guided_velocity(&vp, &cfg.video, cfg.reference, cfg.projection)?,
                    guided_velocity(&ap, &cfg.audio, cfg.reference, cfg.projection)?,
                )
            }
            SampleMode::R2va { references } => {
                let uncond = pos.with_text(TextCondition::Null);
                let mut with_ref = pos.clone();
                with_ref.references = references.clone();
                let (uv, ua) = ev.eval(&video, &audio, t, &uncond)?;
                let (tv, ta) = ev.eval(&video, &audio, t, &pos)?;
                let (rv, ra) = ev.eval(&video, &audio, t, &with_ref)?;
                (
                    dual_cond_velocity(&uv, &tv, &rv, cfg.s_txt, cfg.s_ref)?,
                    dual_cond_velocity(&ua, &ta, &ra, cfg.s_txt, cfg.s_ref)?,
                )
            }
        };
        for (x, v) in video.data_mut().iter_mut().zip(vv.data()) {
            *x += dt * v;
        }
        for (x, v) in audio.data_mut().iter_mut().zip(va.data()) {
            *x += dt * v;
        }
        if video.has_non_finite() || audio.has_non_finite() {
            return Err(Error::NonFinite {
                location: format!("sampler step {k}"),
                detail: "latents contain NaN or infinity".into(),
            });
        }
    }
    if let Some(f) = &first_frame {
        video.data_mut()[..f.len()].copy_from_slice(f);
    }
    Ok(SampleOutput {
        video,
        audio,
        forwards: ev.forwards,
    })
}

/// Refines a degraded video against fixed clean audio, which enters the
/// audio branch at `t = 0` and is returned untouched.
pub fn refine(
    model: &DiTModel,
    degraded_video: &Tensor,
    clean_audio: &Tensor,
    caption: usize,
    layout: &SequenceLayout,
    steps: usize,
    sigma_shift: f64,
) -> Result<(Tensor, Tensor)> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let state = ConditioningState::new(TextCondition::Positive(caption), true);
    let mut video = degraded_video.clone();
    for w in time_grid(steps, sigma_shift).windows(2) {
        let (v, _) = model.predict(&JointInputs {
            video: &video,
            audio: clean_audio,
            video_t: w[0],
            audio_t: 0.0,
            state: &state,
            layout,
            video_cond: None,
        })?;
        for (x, d) in video.data_mut().iter_mut().zip(v.data()) {
            *x += (w[1] - w[0]) * d;
        }
    }
    Ok((video, clean_audio.clone()))
}
