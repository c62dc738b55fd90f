use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::temporal::{
    audio_positions, reference_positions, video_positions, ModalityTiming, PositionVector, RotaryTable,
};
use crate::tensor::Tensor;
use crate::tokens::VOCAB_SIZE;

use super::layers::{Allocator, Block, FinalLayer, Fusion, Linear, ParamSink, TaCrossAttn, TimeEmbedder};
use super::{ConditioningState, DiTConfig, TextCondition};

/// Timings and shared-timeline positions of one clip shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub video: ModalityTiming,
    pub audio: ModalityTiming,
    pub video_positions: PositionVector,
    pub audio_positions: PositionVector,
}

impl SequenceLayout {
    pub fn new(video: ModalityTiming, audio: ModalityTiming) -> Result<Self> {
        Ok(SequenceLayout {
            video_positions: video_positions(&video, &audio)?,
            audio_positions: audio_positions(&audio),
            video,
            audio,
        })
    }
}

/// One forward pass worth of inputs. Latents are `L x out_dim`.
#[derive(Clone, Copy, Debug)]
pub struct JointInputs<'a> {
    pub video: &'a Tensor,
    pub audio: &'a Tensor,
    pub video_t: f64,
    pub audio_t: f64,
    pub state: &'a ConditioningState,
    pub layout: &'a SequenceLayout,
    /// Extra input channels for video, `L_v x (video_in_dim - video_out_dim)`.
    pub video_cond: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct JointOutput {
    pub video: Var,
    pub audio: Var,
}

pub(crate) struct Layers {
    video_in: Linear,
    audio_in: Linear,
    video_time: TimeEmbedder,
    audio_time: TimeEmbedder,
    video_caption: ParamId,
    audio_caption: ParamId,
    speech: ParamId,
    video_dual: Vec<Block>,
    video_single: Vec<Block>,
    audio: Vec<Block>,
    a2v_dual: Vec<TaCrossAttn>,
    v2a: Vec<TaCrossAttn>,
    a2v_single: Vec<TaCrossAttn>,
    video_final: FinalLayer,
    audio_final: FinalLayer,
}

impl Layers {
    pub(crate) fn build(c: &DiTConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        let (dv, da) = (c.video_hidden(), c.audio_hidden());
        let (v, a, x) = (ParamGroup::Video, ParamGroup::Audio, ParamGroup::VideoToAudioCross);
        let caption_rows = c.caption_vocab + 2;
        let mut layers = Layers {
            video_in: Linear::new(sink, "video.embed", c.video_in_dim, dv, v, Init::FanIn)?,
            audio_in: Linear::new(sink, "audio.embed", c.audio_in_dim, da, a, Init::FanIn)?,
            video_time: TimeEmbedder::new(sink, "video.time", c.time_freq_dim, dv, v)?,
            audio_time: TimeEmbedder::new(sink, "audio.time", c.time_freq_dim, da, a)?,
            video_caption: sink.declare("video.caption".into(), &[caption_rows, c.text_dim], v, Init::Normal(1.0))?,
            audio_caption: sink.declare("audio.caption".into(), &[caption_rows, c.text_dim], a, Init::Normal(1.0))?,
            speech: sink.declare("audio.speech".into(), &[VOCAB_SIZE, da], a, Init::Normal(0.5))?,
            video_dual: Vec::new(),
            video_single: Vec::new(),
            audio: Vec::new(),
            a2v_dual: Vec::new(),
            v2a: Vec::new(),
            a2v_single: Vec::new(),
            video_final: FinalLayer::new(sink, "video.final", dv, c.video_out_dim, v)?,
            audio_final: FinalLayer::new(sink, "audio.final", da, c.audio_out_dim, a)?,
        };
        let block = |sink: &mut dyn ParamSink, name: String, dim, group| {
            Block::new(sink, &name, dim, c.text_dim, c.heads, c.mlp_ratio, group)
        };
        for i in 0..c.video_dual_blocks {
            layers.video_dual.push(block(sink, format!("video.dual.{i}"), dv, v)?);
        }
        for j in 0..c.video_single_blocks {
            layers.video_single.push(block(sink, format!("video.single.{j}"), dv, v)?);
        }
        for b in 0..c.audio_blocks {
            layers.audio.push(block(sink, format!("audio.block.{b}"), da, a)?);
        }
        if c.mutual_attention {
            for i in 0..c.video_dual_blocks {
                layers.a2v_dual.push(TaCrossAttn::new(
                    sink,
                    &format!("a2v.dual.{i}"),
                    dv,
                    da,
                    dv,
                    c.heads,
                    c.rotary_base,
                    v,
                )?);
                layers.v2a.push(TaCrossAttn::new(
                    sink,
                    &format!("v2a.{i}"),
                    da,
                    dv,
                    da,
                    c.heads,
                    c.rotary_base,
                    x,
                )?);
            }
            for j in 0..c.video_single_blocks {
                layers.a2v_single.push(TaCrossAttn::new(
                    sink,
                    &format!("a2v.single.{j}"),
                    dv,
                    da,
                    dv,
                    c.heads,
                    c.rotary_base,
                    v,
                )?);
            }
        }
        Ok(layers)
    }
}

/// Per-pass values shared by all stages.
pub struct StageContext {
    pub video_hidden: Var,
    pub audio_hidden: Var,
    video_c: Var,
    audio_c: Var,
    video_text: Var,
    audio_text: Var,
    references: usize,
    video_len: usize,
    audio_len: usize,
    mutual: bool,
    video_angles: Vec<f64>,
    audio_angles: Vec<f64>,
    video_gen_positions: PositionVector,
    audio_all_positions: PositionVector,
}

/// Hidden states after every stage, for inspection.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub video: Vec<Tensor>,
    pub audio: Vec<Tensor>,
}

pub struct DiTModel {
    config: DiTConfig,
    store: ParamStore,
    layers: Layers,
    video_rope: RotaryTable,
    audio_rope: RotaryTable,
}

impl DiTModel {
    pub fn new(config: DiTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layers = Layers::build(&config, &mut Allocator { store: &mut store, rng })?;
        Ok(DiTModel {
            video_rope: RotaryTable::new(config.video_head_dim, config.rotary_base)?,
            audio_rope: RotaryTable::new(config.audio_head_dim, config.rotary_base)?,
            config,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn a2v_dual(&self, stage: usize) -> Option<&TaCrossAttn> {
        self.layers.a2v_dual.get(stage)
    }

    pub fn v2a(&self, stage: usize) -> Option<&TaCrossAttn> {
        self.layers.v2a.get(stage)
    }

    /// Adds Gaussian noise to every parameter, opening all zero-initialised gates.
    pub fn jitter(&mut self, rng: &mut Rng, std: f64) {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("finite std");
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            for v in self.store.get_mut(id).tensor.data_mut() {
                *v += normal.sample(rng);
            }
        }
    }

    fn caption_row(&self, text: TextCondition) -> Result<usize> {
        match text {
            TextCondition::Null => Ok(0),
            TextCondition::Negative => Ok(1),
            TextCondition::Positive(id) if id < self.config.caption_vocab => Ok(id + 2),
            TextCondition::Positive(id) => Err(Error::Config(format!(
                "caption id {id} outside vocabulary of {}",
                self.config.caption_vocab
            ))),
        }
    }

    fn check_inputs(&self, inp: &JointInputs) -> Result<()> {
        let c = &self.config;
        let (lv, la) = (inp.layout.video.latent_count, inp.layout.audio.latent_count);
        if inp.video.shape() != [lv, c.video_out_dim] {
            return Err(Error::shape("joint_forward video", inp.video.shape(), &[lv, c.video_out_dim]));
        }
        if inp.audio.shape() != [la, c.audio_out_dim] {
            return Err(Error::shape("joint_forward audio", inp.audio.shape(), &[la, c.audio_out_dim]));
        }
        if let Some(r) = inp.state.references.iter().find(|r| r.len() != c.video_out_dim) {
            return Err(Error::shape("reference latent", &[r.len()], &[c.video_out_dim]));
        }
        if let Some(bad) = inp.state.speech_tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Config(format!("speech token {bad} outside vocabulary")));
        }
        if let Some(cond) = inp.video_cond {
            let extra = c.video_in_dim - c.video_out_dim;
            if cond.shape() != [lv, extra] {
                return Err(Error::shape("video conditioning channels", cond.shape(), &[lv, extra]));
            }
        }
        Ok(())
    }

    fn embed(tape: &mut Tape, layer: &Linear, x: &Tensor, extra: Option<&Tensor>) -> Result<Var> {
        let rows = x.rows();
        let xv = tape.constant(rows, x.cols(), x.data().to_vec())?;
        let pad = layer.in_dim - x.cols();
        let input = if pad == 0 {
            xv
        } else {
            let e = match extra {
                Some(t) => tape.constant(rows, pad, t.data().to_vec())?,
                None => tape.constant(rows, pad, vec![0.0; rows * pad])?,
            };
            tape.concat_cols(&[xv, e])?
        };
        layer.forward(tape, input)
    }

    /// Embeds latents, references, speech tokens, timesteps and captions.
    pub fn prepare(&self, tape: &mut Tape, inp: &JointInputs) -> Result<StageContext> {
        self.check_inputs(inp)?;
        let c = &self.config;
        let (lv, la) = (inp.layout.video.latent_count, inp.layout.audio.latent_count);
        let state = inp.state;
        let k = state.references.len();

        let frames = Self::embed(tape, &self.layers.video_in, inp.video, inp.video_cond)?;
        let (video_hidden, video_all_positions) = if k == 0 {
            (frames, inp.layout.video_positions.clone())
        } else {
            let refs = Tensor::from_rows(&state.references)?;
            let r = Self::embed(tape, &self.layers.video_in, &refs, None)?;
            let pos = reference_positions(k, c.reference_phi)?.concat(&inp.layout.video_positions);
            (tape.concat_rows(&[r, frames])?, pos)
        };

        let latents = Self::embed(tape, &self.layers.audio_in, inp.audio, None)?;
        let (audio_hidden, audio_all_positions) = self.audio_branch_input(
            tape,
            latents,
            &state.speech_tokens,
            &inp.layout.audio_positions,
        )?;

        let row = self.caption_row(state.text)?;
        let vt = tape.param(self.layers.video_caption);
        let at = tape.param(self.layers.audio_caption);
        let video_text = tape.gather_rows(vt, &[row])?;
        let audio_text = tape.gather_rows(at, &[row])?;

        Ok(StageContext {
            video_hidden,
            audio_hidden,
            video_c: self.layers.video_time.forward(tape, inp.video_t)?,
            audio_c: self.layers.audio_time.forward(tape, inp.audio_t)?,
            video_text,
            audio_text,
            references: k,
            video_len: lv,
            audio_len: la,
            mutual: state.mutual && c.mutual_attention,
            video_angles: self.video_rope.angles(&video_all_positions.positions),
            audio_angles: self.audio_rope.angles(&audio_all_positions.positions),
            video_gen_positions: inp.layout.video_positions.clone(),
            audio_all_positions,
        })
    }

    /// Appends embedded speech tokens after the audio latents. Token `j` of
    /// `S` sits at `(j + 0.5) L_a / S - 0.5` on the audio timeline.
    pub fn audio_branch_input(
        &self,
        tape: &mut Tape,
        latents: Var,
        speech_tokens: &[u32],
        positions: &PositionVector,
    ) -> Result<(Var, PositionVector)> {
        if speech_tokens.is_empty() {
            return Ok((latents, positions.clone()));
        }
        let la = positions.len() as f64;
        let s = speech_tokens.len() as f64;
        let table = tape.param(self.layers.speech);
        let idx: Vec<usize> = speech_tokens.iter().map(|&t| t as usize).collect();
        let speech = tape.gather_rows(table, &idx)?;
        let pos = PositionVector {
            positions: (0..speech_tokens.len())
                .map(|j| (j as f64 + 0.5) * la / s - 0.5)
                .collect(),
            basis: positions.basis,
        };
        Ok((tape.concat_rows(&[latents, speech])?, positions.concat(&pos)))
    }

    /// One audio block without cross-modal input.
    pub fn audio_block_forward(
        &self,
        tape: &mut Tape,
        block: usize,
        hidden: Var,
        caption_embedding: Var,
        t_emb: Var,
        positions: &PositionVector,
    ) -> Result<Var> {
        let b = self
            .layers
            .audio
            .get(block)
            .ok_or_else(|| Error::Config(format!("no audio block {block}")))?;
        let (rows, _) = tape.shape(hidden);
        if rows != positions.len() {
            return Err(Error::shape("audio_block_forward", &[rows], &[positions.len()]));
        }
        let angles = self.audio_rope.angles(&positions.positions);
        b.forward(tape, hidden, t_emb, caption_embedding, &angles, None)
    }

    /// Audio-branch timestep embedding `[1 x audio_hidden]`.
    pub fn audio_time_embedding(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        self.layers.audio_time.forward(tape, t)
    }

    pub fn audio_caption_embedding(&self, tape: &mut Tape, text: TextCondition) -> Result<Var> {
        let row = self.caption_row(text)?;
        let table = tape.param(self.layers.audio_caption);
        tape.gather_rows(table, &[row])
    }

    fn video_generated(&self, tape: &mut Tape, ctx: &StageContext, v: Var) -> Result<Var> {
        if ctx.references == 0 {
            Ok(v)
        } else {
            tape.slice_rows(v, ctx.references, ctx.video_len)
        }
    }

    /// Dual-stream stage `i`: one video block and its audio group, exchanging
    /// information in both directions when the mutual signal is on.
    pub fn dual_stage(&self, tape: &mut Tape, ctx: &StageContext, i: usize, video: Var, audio: Var) -> Result<(Var, Var)> {
        let video_kv = if ctx.mutual { Some(self.video_generated(tape, ctx, video)?) } else { None };
        let fusion = ctx.mutual.then(|| Fusion {
            module: &self.layers.a2v_dual[i],
            key_value: audio,
            q_positions: &ctx.video_gen_positions,
            kv_positions: &ctx.audio_all_positions,
            skip_rows: ctx.references,
        });
        let v = self.layers.video_dual[i].forward(tape, video, ctx.video_c, ctx.video_text, &ctx.video_angles, fusion)?;
        let mut a = audio;
        for (n, b) in self.config.audio_group(i).enumerate() {
            let fusion = match (n, video_kv) {
                (0, Some(kv)) => Some(Fusion {
                    module: &self.layers.v2a[i],
                    key_value: kv,
                    q_positions: &ctx.audio_all_positions,
                    kv_positions: &ctx.video_gen_positions,
                    skip_rows: 0,
                }),
                _ => None,
            };
            a = self.layers.audio[b].forward(tape, a, ctx.audio_c, ctx.audio_text, &ctx.audio_angles, fusion)?;
        }
        Ok((v, a))
    }

    /// Single-stream stage `j`: video reads audio, audio passes through.
    pub fn single_stage(&self, tape: &mut Tape, ctx: &StageContext, j: usize, video: Var, audio: Var) -> Result<(Var, Var)> {
        let fusion = ctx.mutual.then(|| Fusion {
            module: &self.layers.a2v_single[j],
            key_value: audio,
            q_positions: &ctx.video_gen_positions,
            kv_positions: &ctx.audio_all_positions,
            skip_rows: ctx.references,
        });
        let v = self.layers.video_single[j].forward(tape, video, ctx.video_c, ctx.video_text, &ctx.video_angles, fusion)?;
        Ok((v, audio))
    }

    fn heads(&self, tape: &mut Tape, ctx: &StageContext, v: Var, a: Var) -> Result<JointOutput> {
        let v = self.video_generated(tape, ctx, v)?;
        let video = self.layers.video_final.forward(tape, v, ctx.video_c)?;
        let a = if tape.shape(a).0 == ctx.audio_len { a } else { tape.slice_rows(a, 0, ctx.audio_len)? };
        let audio = self.layers.audio_final.forward(tape, a, ctx.audio_c)?;
        Ok(JointOutput { video, audio })
    }

    /// Velocity predictions for both modalities on the given tape.
    pub fn forward(&self, tape: &mut Tape, inp: &JointInputs) -> Result<JointOutput> {
        let ctx = self.prepare(tape, inp)?;
        let (mut v, mut a) = (ctx.video_hidden, ctx.audio_hidden);
        for i in 0..self.config.video_dual_blocks {
            (v, a) = self.dual_stage(tape, &ctx, i, v, a)?;
        }
        for j in 0..self.config.video_single_blocks {
            (v, a) = self.single_stage(tape, &ctx, j, v, a)?;
        }
        self.heads(tape, &ctx, v, a)
    }

    /// Forward pass that also records hidden states after every stage.
    pub fn forward_traced(&self, inp: &JointInputs) -> Result<(Tensor, Tensor, StageTrace)> {
        let mut tape = Tape::new(&self.store);
        let ctx = self.prepare(&mut tape, inp)?;
        let (mut v, mut a) = (ctx.video_hidden, ctx.audio_hidden);
        let mut trace = StageTrace {
            video: Vec::new(),
            audio: Vec::new(),
        };
        let snap = |tape: &Tape, x: Var| {
            let (r, c) = tape.shape(x);
            Tensor::new(vec![r, c], tape.value(x).to_vec())
        };
        for i in 0..self.config.video_dual_blocks {
            (v, a) = self.dual_stage(&mut tape, &ctx, i, v, a)?;
            trace.video.push(snap(&tape, v)?);
            trace.audio.push(snap(&tape, a)?);
        }
        for j in 0..self.config.video_single_blocks {
            (v, a) = self.single_stage(&mut tape, &ctx, j, v, a)?;
            trace.video.push(snap(&tape, v)?);
            trace.audio.push(snap(&tape, a)?);
        }
        let out = self.heads(&mut tape, &ctx, v, a)?;
        Ok((snap(&tape, out.video)?, snap(&tape, out.audio)?, trace))
    }

    /// Forward-only prediction `(video, audio)`.
    pub fn predict(&self, inp: &JointInputs) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, inp)?;
        let v = Tensor::new(vec![inp.layout.video.latent_count, self.config.video_out_dim], tape.value(out.video).to_vec())?;
        let a = Tensor::new(vec![inp.layout.audio.latent_count, self.config.audio_out_dim], tape.value(out.audio).to_vec())?;
        if tape.nan_in_softmax() || v.has_non_finite() || a.has_non_finite() {
            return Err(Error::NonFinite {
                location: "joint_forward".into(),
                detail: "prediction contains NaN or infinity".into(),
            });
        }
        Ok((v, a))
    }

    /// Video branch alone, never touching audio values.
    pub fn predict_video_only(&self, inp: &JointInputs) -> Result<Tensor> {
        let state = inp.state.with_mutual(false);
        let zeros = Tensor::zeros(inp.audio.shape());
        let inp = JointInputs {
            audio: &zeros,
            state: &state,
            ..*inp
        };
        Ok(self.predict(&inp)?.0)
    }

    /// Audio branch alone, never touching video values.
    pub fn predict_audio_only(&self, inp: &JointInputs) -> Result<Tensor> {
        let state = ConditioningState {
            references: Vec::new(),
            ..inp.state.with_mutual(false)
        };
        let zeros = Tensor::zeros(inp.video.shape());
        let inp = JointInputs {
            video: &zeros,
            video_cond: None,
            state: &state,
            ..*inp
        };
        Ok(self.predict(&inp)?.1)
    }
}
