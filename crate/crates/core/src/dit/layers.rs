use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::temporal::{CoordinateBasis, PositionVector, RotaryTable};
use crate::tensor::Tensor;

use super::ParamCount;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Destination for parameter declarations: a real store, or a counter.
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], group: ParamGroup, init: Init) -> Result<ParamId>;
}

pub(crate) struct Allocator<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl ParamSink for Allocator<'_> {
    fn declare(&mut self, name: String, shape: &[usize], group: ParamGroup, init: Init) -> Result<ParamId> {
        self.store.add(name, shape, group, init, self.rng)
    }
}

#[derive(Default)]
pub(crate) struct Counter {
    next: usize,
    count: ParamCount,
}

impl Counter {
    pub fn into_count(self) -> ParamCount {
        self.count
    }
}

impl ParamSink for Counter {
    fn declare(&mut self, _name: String, shape: &[usize], group: ParamGroup, _init: Init) -> Result<ParamId> {
        let n = shape.iter().map(|&d| d as u64).product::<u64>();
        self.count.total += n;
        match group {
            ParamGroup::Video => self.count.video += n,
            ParamGroup::Audio => self.count.audio += n,
            ParamGroup::VideoToAudioCross => self.count.video_to_audio_cross += n,
        }
        self.next += 1;
        Ok(ParamId(self.next - 1))
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub(crate) fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self> {
        Ok(Linear {
            weight: sink.declare(format!("{name}.weight"), &[in_dim, out_dim], group, init)?,
            bias: sink.declare(format!("{name}.bias"), &[1, out_dim], group, Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with optional rotary angles.
///
/// Returns the concatenated head outputs and each head's probability matrix.
pub(crate) fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
    angles: Option<(&[f64], &[f64])>,
) -> Result<(Var, Vec<Var>)> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let mut kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        if let Some((qa, ka)) = angles {
            qh = tape.rotary(qh, qa)?;
            kh = tape.rotary(kh, ka)?;
        }
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let p = tape.softmax_rows(logits);
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Explicit-loop attention used as a test oracle; `q`, `k`, `v` are row-major
/// `len x (heads*head_dim)` and rotation angles are `len x head_dim/2`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    heads: usize,
    head_dim: usize,
    q_angles: &[f64],
    k_angles: &[f64],
) -> Vec<f64> {
    let width = heads * head_dim;
    let half = head_dim / 2;
    let rot = |x: &[f64], row: usize, h: usize, angles: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; head_dim];
        for j in 0..half {
            let a = angles[row * half + j];
            let (x0, x1) = (x[row * width + h * head_dim + 2 * j], x[row * width + h * head_dim + 2 * j + 1]);
            out[2 * j] = x0 * a.cos() - x1 * a.sin();
            out[2 * j + 1] = x0 * a.sin() + x1 * a.cos();
        }
        out
    };
    let mut out = vec![0.0; lq * width];
    for h in 0..heads {
        for i in 0..lq {
            let qi = rot(q, i, h, q_angles);
            let mut logits = Vec::with_capacity(lk);
            for j in 0..lk {
                let kj = rot(k, j, h, k_angles);
                let mut s = 0.0;
                for d in 0..head_dim {
                    s += qi[d] * kj[d];
                }
                logits.push(s / (head_dim as f64).sqrt());
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..lk {
                let p = (logits[j] - m).exp() / z;
                for d in 0..head_dim {
                    out[i * width + h * head_dim + d] += p * v[j * width + h * head_dim + d];
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        Ok(SelfAttention {
            qkv: Linear::new(sink, &format!("{name}.qkv"), dim, 3 * dim, group, Init::FanIn)?,
            out: Linear::new(sink, &format!("{name}.out"), dim, dim, group, Init::FanIn)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, angles: &[f64]) -> Result<Var> {
        let d = self.heads * self.head_dim;
        let qkv = self.qkv.forward(tape, x)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let (o, _) = attention(tape, q, k, v, self.heads, self.head_dim, Some((angles, angles)))?;
        self.out.forward(tape, o)
    }
}

/// Caption cross-attention; the output projection starts at zero.
#[derive(Clone, Debug)]
pub(crate) struct TextCrossAttn {
    q: Linear,
    kv: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl TextCrossAttn {
    fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(TextCrossAttn {
            q: Linear::new(sink, &format!("{name}.q"), dim, dim, group, Init::FanIn)?,
            kv: Linear::new(sink, &format!("{name}.kv"), text_dim, 2 * dim, group, Init::FanIn)?,
            out: Linear::new(sink, &format!("{name}.out"), dim, dim, group, Init::Zeros)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, text: Var) -> Result<Var> {
        let (_, w) = tape.shape(text);
        if w != self.kv.in_dim {
            return Err(Error::Config(format!(
                "caption embedding width {w} does not match expected {}",
                self.kv.in_dim
            )));
        }
        let d = self.heads * self.head_dim;
        let xn = tape.layer_norm_rows(x, LN_EPS);
        let q = self.q.forward(tape, xn)?;
        let kv = self.kv.forward(tape, text)?;
        let k = tape.slice_cols(kv, 0, d)?;
        let v = tape.slice_cols(kv, d, d)?;
        let (o, _) = attention(tape, q, k, v, self.heads, self.head_dim, None)?;
        self.out.forward(tape, o)
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, ratio: usize, group: ParamGroup) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(sink, &format!("{name}.fc1"), dim, ratio * dim, group, Init::FanIn)?,
            fc2: Linear::new(sink, &format!("{name}.fc2"), ratio * dim, dim, group, Init::FanIn)?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, h)
    }
}

/// `LN(x) * (1 + scale) + shift`.
pub(crate) fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, scale)?;
    let h = tape.add(n, scaled)?;
    tape.add_row(h, shift)
}

/// Temporally aligned cross-attention with a timestep-aware adaptive norm.
///
/// The query projection and the modulation start at zero, so a fresh module
/// attends uniformly and contributes nothing until trained.
#[derive(Clone, Debug)]
pub struct TaCrossAttn {
    pub(crate) q: Linear,
    pub(crate) kv: Linear,
    pub(crate) out: Linear,
    pub(crate) ada: Linear,
    heads: usize,
    head_dim: usize,
    table: RotaryTable,
}

/// Intermediate values of one cross-attention call.
pub(crate) struct TaTrace {
    pub delta: Var,
    pub probs: Vec<Var>,
}

impl TaCrossAttn {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        t_dim: usize,
        heads: usize,
        rotary_base: f64,
        group: ParamGroup,
    ) -> Result<Self> {
        let head_dim = q_dim / heads;
        Ok(TaCrossAttn {
            q: Linear::new(sink, &format!("{name}.q"), q_dim, q_dim, group, Init::Zeros)?,
            kv: Linear::new(sink, &format!("{name}.kv"), kv_dim, 2 * q_dim, group, Init::FanIn)?,
            out: Linear::new(sink, &format!("{name}.out"), q_dim, q_dim, group, Init::FanIn)?,
            ada: Linear::new(sink, &format!("{name}.ada"), t_dim, 3 * q_dim, group, Init::Zeros)?,
            heads,
            head_dim,
            table: RotaryTable::new(head_dim, rotary_base)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rotary(&self) -> &RotaryTable {
        &self.table
    }

    /// Fusion delta to add to the query stream's residual.
    pub fn forward(
        &self,
        tape: &mut Tape,
        query: Var,
        key_value: Var,
        q_positions: &PositionVector,
        kv_positions: &PositionVector,
        t_emb: Var,
    ) -> Result<Var> {
        Ok(self.trace(tape, query, key_value, q_positions, kv_positions, t_emb)?.delta)
    }

    pub(crate) fn trace(
        &self,
        tape: &mut Tape,
        query: Var,
        key_value: Var,
        q_positions: &PositionVector,
        kv_positions: &PositionVector,
        t_emb: Var,
    ) -> Result<TaTrace> {
        for (what, p) in [("query", q_positions), ("key/value", kv_positions)] {
            if p.basis != CoordinateBasis::AudioIndexed {
                return Err(Error::Alignment(format!(
                    "{what} positions use {:?} coordinates; cross-modal attention needs the audio-indexed timeline",
                    p.basis
                )));
            }
        }
        let (lq, _) = tape.shape(query);
        let (lk, _) = tape.shape(key_value);
        if lq != q_positions.len() || lk != kv_positions.len() {
            return Err(Error::shape(
                "ta_cross_attention",
                &[lq, lk],
                &[q_positions.len(), kv_positions.len()],
            ));
        }
        let d = self.heads * self.head_dim;
        let qn = tape.layer_norm_rows(query, LN_EPS);
        let kvn = tape.layer_norm_rows(key_value, LN_EPS);
        let q = self.q.forward(tape, qn)?;
        let kv = self.kv.forward(tape, kvn)?;
        let k = tape.slice_cols(kv, 0, d)?;
        let v = tape.slice_cols(kv, d, d)?;
        let qa = self.table.angles(&q_positions.positions);
        let ka = self.table.angles(&kv_positions.positions);
        let (o, probs) = attention(tape, q, k, v, self.heads, self.head_dim, Some((&qa, &ka)))?;
        let o = self.out.forward(tape, o)?;
        let c = tape.silu(t_emb);
        let m = self.ada.forward(tape, c)?;
        let scale = tape.slice_cols(m, 0, d)?;
        let shift = tape.slice_cols(m, d, d)?;
        let gate = tape.slice_cols(m, 2 * d, d)?;
        let h = modulate(tape, o, shift, scale)?;
        let delta = tape.mul_row(h, gate)?;
        Ok(TaTrace { delta, probs })
    }

    /// Attention probabilities of every head, `heads x (Lq x Lk)`.
    pub fn attention_weights(
        &self,
        store: &ParamStore,
        query: &Tensor,
        key_value: &Tensor,
        q_positions: &PositionVector,
        kv_positions: &PositionVector,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(store);
        let q = tape.constant(query.rows(), query.cols(), query.data().to_vec())?;
        let kv = tape.constant(key_value.rows(), key_value.cols(), key_value.data().to_vec())?;
        let t = tape.constant(1, self.ada.in_dim, vec![0.0; self.ada.in_dim])?;
        let tr = self.trace(&mut tape, q, kv, q_positions, kv_positions, t)?;
        tr.probs
            .iter()
            .map(|p| {
                let (r, c) = tape.shape(*p);
                Tensor::new(vec![r, c], tape.value(*p).to_vec())
            })
            .collect()
    }
}

/// AdaLN-Zero transformer block with caption cross-attention.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ada: Linear,
    attn: SelfAttention,
    text: TextCrossAttn,
    mlp: Mlp,
    dim: usize,
}

/// Optional cross-modal input to a block.
pub(crate) struct Fusion<'a> {
    pub module: &'a TaCrossAttn,
    pub key_value: Var,
    pub q_positions: &'a PositionVector,
    pub kv_positions: &'a PositionVector,
    /// Leading query rows (references) that do not receive the delta.
    pub skip_rows: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        sink: &mut dyn ParamSink,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Block {
            ada: Linear::new(sink, &format!("{name}.ada"), dim, 6 * dim, group, Init::Zeros)?,
            attn: SelfAttention::new(sink, &format!("{name}.attn"), dim, heads, group)?,
            text: TextCrossAttn::new(sink, &format!("{name}.text"), dim, text_dim, heads, group)?,
            mlp: Mlp::new(sink, &format!("{name}.mlp"), dim, mlp_ratio, group)?,
            dim,
        })
    }

    /// `c` is the branch's timestep embedding, `[1 x dim]`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        c: Var,
        text: Var,
        angles: &[f64],
        fusion: Option<Fusion>,
    ) -> Result<Var> {
        let d = self.dim;
        let sc = tape.silu(c);
        let m = self.ada.forward(tape, sc)?;
        let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?);
        let (shift2, scale2, gate2) = (chunk(tape, 3)?, chunk(tape, 4)?, chunk(tape, 5)?);

        let h = modulate(tape, x, shift1, scale1)?;
        let a = self.attn.forward(tape, h, angles)?;
        let a = tape.mul_row(a, gate1)?;
        let mut x = tape.add(x, a)?;

        let t = self.text.forward(tape, x, text)?;
        x = tape.add(x, t)?;

        if let Some(f) = fusion {
            x = apply_fusion(tape, x, c, f)?;
        }

        let h = modulate(tape, x, shift2, scale2)?;
        let y = self.mlp.forward(tape, h)?;
        let y = tape.mul_row(y, gate2)?;
        tape.add(x, y)
    }
}

pub(crate) fn apply_fusion(tape: &mut Tape, x: Var, c: Var, f: Fusion) -> Result<Var> {
    let (rows, _) = tape.shape(x);
    if f.skip_rows == 0 {
        let delta = f.module.forward(tape, x, f.key_value, f.q_positions, f.kv_positions, c)?;
        return tape.add(x, delta);
    }
    let head = tape.slice_rows(x, 0, f.skip_rows)?;
    let tail = tape.slice_rows(x, f.skip_rows, rows - f.skip_rows)?;
    let delta = f.module.forward(tape, tail, f.key_value, f.q_positions, f.kv_positions, c)?;
    let tail = tape.add(tail, delta)?;
    tape.concat_rows(&[head, tail])
}

/// Modulated output projection; both linears start at zero.
#[derive(Clone, Debug)]
pub(crate) struct FinalLayer {
    ada: Linear,
    out: Linear,
    dim: usize,
}

impl FinalLayer {
    pub(crate) fn new(sink: &mut dyn ParamSink, name: &str, dim: usize, out_dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(FinalLayer {
            ada: Linear::new(sink, &format!("{name}.ada"), dim, 2 * dim, group, Init::Zeros)?,
            out: Linear::new(sink, &format!("{name}.out"), dim, out_dim, group, Init::Zeros)?,
            dim,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, x: Var, c: Var) -> Result<Var> {
        let sc = tape.silu(c);
        let m = self.ada.forward(tape, sc)?;
        let shift = tape.slice_cols(m, 0, self.dim)?;
        let scale = tape.slice_cols(m, self.dim, self.dim)?;
        let h = modulate(tape, x, shift, scale)?;
        self.out.forward(tape, h)
    }
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub(crate) struct TimeEmbedder {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
}

impl TimeEmbedder {
    pub(crate) fn new(sink: &mut dyn ParamSink, name: &str, freq_dim: usize, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(TimeEmbedder {
            fc1: Linear::new(sink, &format!("{name}.fc1"), freq_dim, dim, group, Init::FanIn)?,
            fc2: Linear::new(sink, &format!("{name}.fc2"), dim, dim, group, Init::FanIn)?,
            freq_dim,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        let e = super::timestep_embedding(t, self.freq_dim);
        let x = tape.constant(1, self.freq_dim, e.embedding)?;
        let h = self.fc1.forward(tape, x)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, h)
    }
}
