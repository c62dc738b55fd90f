//! Central finite-difference check of tape gradients.

use serde::Serialize;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::dit::{ConditioningState, DiTConfig, DiTModel, JointInputs, SequenceLayout, TextCondition};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::temporal::ModalityTiming;
use crate::tensor::Tensor;
use crate::tokens::TAG_W_OPEN;

/// Denominator floor for the relative error. Central differences at step
/// `1e-5` on an O(1) loss carry about `1e-10` of rounding noise, so smaller
/// gradients are compared in absolute terms against `1e-4 * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn scalars(&self) -> usize {
        self.params.iter().map(|p| p.scalars).sum()
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn failures(&self, tol: f64) -> Vec<&ParamReport> {
        self.params.iter().filter(|p| !(p.max_rel_error < tol)).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(model: &DiTModel, loss: &F) -> Result<f64>
where
    F: Fn(&DiTModel, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(model.params());
    let l = loss(model, &mut tape)?;
    Ok(tape.value(l)[0])
}

/// Compares every scalar parameter's analytic gradient with
/// `(L(p + h) - L(p - h)) / 2h`. Parameters are restored bit-exactly.
pub fn check_model<F>(model: &mut DiTModel, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&DiTModel, &mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(model.params());
        let l = loss(model, &mut tape)?;
        tape.backward(l)?
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params().get(id).tensor.len();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let orig = model.params().get(id).tensor.data()[k];
            model.params_mut().get_mut(id).tensor.data_mut()[k] = orig + step;
            let up = evaluate(model, &loss);
            model.params_mut().get_mut(id).tensor.data_mut()[k] = orig - step;
            let down = evaluate(model, &loss);
            model.params_mut().get_mut(id).tensor.data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * step);
            let rel = relative_error(grads.get(id)[k], numeric);
            if rel.is_nan() {
                return Err(Error::NonFinite {
                    location: model.params().get(id).name.clone(),
                    detail: format!("gradient comparison at scalar {k} is NaN"),
                });
            }
            worst = worst.max(rel);
        }
        params.push(ParamReport {
            name: model.params().get(id).name.clone(),
            scalars: n,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { step, params })
}

/// Small random joint input that touches every parameter path: one
/// reference frame, speech tokens, video conditioning channels and both
/// modalities' targets.
#[derive(Clone, Debug)]
pub struct Probe {
    pub layout: SequenceLayout,
    pub video: Tensor,
    pub audio: Tensor,
    pub video_cond: Option<Tensor>,
    pub video_target: Tensor,
    pub audio_target: Tensor,
    pub state: ConditioningState,
}

impl Probe {
    pub fn new(config: &DiTConfig, rng: &mut Rng) -> Result<Self> {
        let (lv, la) = (2, 4);
        let layout = SequenceLayout::new(ModalityTiming::new(lv, 2.0)?, ModalityTiming::new(la, 4.0)?)?;
        let normal = |rng: &mut Rng, shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
        };
        let extra = config.video_in_dim - config.video_out_dim;
        let reference: Vec<f64> = (0..config.video_out_dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut state = ConditioningState::new(TextCondition::Positive(0), true);
        state.references = vec![reference];
        state.speech_tokens = vec![72, TAG_W_OPEN, 105];
        Ok(Probe {
            video: normal(rng, &[lv, config.video_out_dim])?,
            audio: normal(rng, &[la, config.audio_out_dim])?,
            video_cond: if extra > 0 { Some(normal(rng, &[lv, extra])?) } else { None },
            video_target: normal(rng, &[lv, config.video_out_dim])?,
            audio_target: normal(rng, &[la, config.audio_out_dim])?,
            layout,
            state,
        })
    }

    pub fn inputs(&self) -> JointInputs<'_> {
        JointInputs {
            video: &self.video,
            audio: &self.audio,
            video_t: 0.6,
            audio_t: 0.3,
            state: &self.state,
            layout: &self.layout,
            video_cond: self.video_cond.as_ref(),
        }
    }

    /// Sum of both modalities' mean squared errors.
    pub fn loss(&self, model: &DiTModel, tape: &mut Tape) -> Result<Var> {
        let out = model.forward(tape, &self.inputs())?;
        let lv = tape.mse(out.video, self.video_target.data())?;
        let la = tape.mse(out.audio, self.audio_target.data())?;
        tape.add(lv, la)
    }
}
