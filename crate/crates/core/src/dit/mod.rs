//! Joint audio-video diffusion transformer.
//!
//! The video branch runs `video_dual_blocks` dual-stream blocks followed by
//! `video_single_blocks` single-stream blocks. The audio branch runs
//! `audio_blocks` blocks, split into one contiguous group per dual-stream
//! block. In every dual stage the two streams exchange information through
//! temporally aligned cross-attention in both directions; single-stream
//! blocks only read the final audio states.

mod layers;
mod model;

pub use layers::{attention_oracle, Linear, ParamSink, TaCrossAttn};
pub use model::{DiTModel, JointInputs, JointOutput, SequenceLayout, StageContext, StageTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::temporal::DEFAULT_ROTARY_BASE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub video_dual_blocks: usize,
    pub video_single_blocks: usize,
    pub audio_blocks: usize,
    pub heads: usize,
    pub video_head_dim: usize,
    pub audio_head_dim: usize,
    pub video_in_dim: usize,
    pub video_out_dim: usize,
    pub audio_in_dim: usize,
    pub audio_out_dim: usize,
    pub mutual_attention: bool,
    #[serde(default = "defaults::text_dim")]
    pub text_dim: usize,
    /// Number of distinct caption ids with a learned embedding.
    #[serde(default = "defaults::caption_vocab")]
    pub caption_vocab: usize,
    #[serde(default = "defaults::time_freq_dim")]
    pub time_freq_dim: usize,
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "defaults::rotary_base")]
    pub rotary_base: f64,
    #[serde(default = "defaults::reference_phi")]
    pub reference_phi: f64,
}

mod defaults {
    pub fn text_dim() -> usize {
        16
    }
    pub fn caption_vocab() -> usize {
        8
    }
    pub fn time_freq_dim() -> usize {
        16
    }
    pub fn mlp_ratio() -> usize {
        2
    }
    pub fn rotary_base() -> f64 {
        super::DEFAULT_ROTARY_BASE
    }
    pub fn reference_phi() -> f64 {
        10.0
    }
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiTConfig {
    /// Small configuration that keeps every structural ratio of the full model.
    pub fn desk() -> Self {
        DiTConfig {
            video_dual_blocks: 2,
            video_single_blocks: 2,
            audio_blocks: 4,
            heads: 2,
            video_head_dim: 16,
            audio_head_dim: 8,
            video_in_dim: 6,
            video_out_dim: 4,
            audio_in_dim: 4,
            audio_out_dim: 4,
            mutual_attention: true,
            text_dim: defaults::text_dim(),
            caption_vocab: defaults::caption_vocab(),
            time_freq_dim: defaults::time_freq_dim(),
            mlp_ratio: defaults::mlp_ratio(),
            rotary_base: defaults::rotary_base(),
            reference_phi: defaults::reference_phi(),
        }
    }

    /// Production sizes; only used for symbolic parameter counting.
    pub fn full_scale() -> Self {
        DiTConfig {
            video_dual_blocks: 16,
            video_single_blocks: 40,
            audio_blocks: 32,
            heads: 24,
            video_head_dim: 128,
            audio_head_dim: 64,
            video_in_dim: 36,
            video_out_dim: 16,
            audio_in_dim: 32,
            audio_out_dim: 32,
            mutual_attention: true,
            text_dim: 4096,
            caption_vocab: 1,
            time_freq_dim: 256,
            mlp_ratio: 4,
            rotary_base: DEFAULT_ROTARY_BASE,
            reference_phi: 10.0,
        }
    }

    pub fn video_hidden(&self) -> usize {
        self.heads * self.video_head_dim
    }

    pub fn audio_hidden(&self) -> usize {
        self.heads * self.audio_head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("video_dual_blocks", self.video_dual_blocks),
            ("video_single_blocks", self.video_single_blocks),
            ("audio_blocks", self.audio_blocks),
            ("heads", self.heads),
            ("video_head_dim", self.video_head_dim),
            ("audio_head_dim", self.audio_head_dim),
            ("video_in_dim", self.video_in_dim),
            ("video_out_dim", self.video_out_dim),
            ("audio_in_dim", self.audio_in_dim),
            ("audio_out_dim", self.audio_out_dim),
            ("text_dim", self.text_dim),
            ("caption_vocab", self.caption_vocab),
            ("time_freq_dim", self.time_freq_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("video_head_dim", self.video_head_dim),
            ("audio_head_dim", self.audio_head_dim),
            ("time_freq_dim", self.time_freq_dim),
        ] {
            if v % 2 != 0 {
                return Err(Error::Config(format!("{name} must be even, got {v}")));
            }
        }
        if self.video_in_dim < self.video_out_dim || self.audio_in_dim < self.audio_out_dim {
            return Err(Error::Config(
                "input width must be at least the output width".into(),
            ));
        }
        if self.audio_blocks < self.video_dual_blocks {
            return Err(Error::Config(format!(
                "{} audio blocks cannot be paired with {} dual-stream blocks",
                self.audio_blocks, self.video_dual_blocks
            )));
        }
        if !(self.rotary_base > 1.0) || !(self.reference_phi > 0.0) {
            return Err(Error::Config("rotary_base must exceed 1 and reference_phi be positive".into()));
        }
        Ok(())
    }

    /// Audio block indices paired with dual-stream block `stage`.
    pub fn audio_group(&self, stage: usize) -> std::ops::Range<usize> {
        let (a, m) = (self.audio_blocks, self.video_dual_blocks);
        (stage * a / m)..((stage + 1) * a / m)
    }

    /// Scalar parameter counts derived from the layer shapes alone.
    pub fn parameter_count(&self) -> Result<ParamCount> {
        self.validate()?;
        let mut counter = layers::Counter::default();
        model::Layers::build(self, &mut counter)?;
        Ok(counter.into_count())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub video: u64,
    pub audio: u64,
    pub video_to_audio_cross: u64,
}

impl ParamCount {
    pub fn group(&self, g: ParamGroup) -> u64 {
        match g {
            ParamGroup::Video => self.video,
            ParamGroup::Audio => self.audio,
            ParamGroup::VideoToAudioCross => self.video_to_audio_cross,
        }
    }
}

/// Which prompt embedding conditions the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "caption")]
pub enum TextCondition {
    Positive(usize),
    Negative,
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningState {
    pub text: TextCondition,
    pub mutual: bool,
    /// Clean reference latents, one row of `video_out_dim` values each.
    pub references: Vec<Vec<f64>>,
    pub speech_tokens: Vec<u32>,
}

impl ConditioningState {
    pub fn new(text: TextCondition, mutual: bool) -> Self {
        ConditioningState {
            text,
            mutual,
            references: Vec::new(),
            speech_tokens: Vec::new(),
        }
    }

    pub fn with_mutual(&self, mutual: bool) -> Self {
        ConditioningState {
            mutual,
            ..self.clone()
        }
    }

    pub fn with_text(&self, text: TextCondition) -> Self {
        ConditioningState {
            text,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedding {
    pub t: f64,
    pub embedding: Vec<f64>,
}

/// Sinusoidal features of `1000 t`: cosines then sines over `dim / 2`
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: f64, dim: usize) -> TimestepEmbedding {
    let half = dim / 2;
    let mut embedding = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        embedding[j] = a.cos();
        embedding[half + j] = a.sin();
    }
    TimestepEmbedding { t, embedding }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates_and_groups_cover_audio_blocks() {
        let c = DiTConfig::desk();
        c.validate().unwrap();
        let covered: Vec<usize> = (0..c.video_dual_blocks).flat_map(|s| c.audio_group(s)).collect();
        assert_eq!(covered, (0..c.audio_blocks).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_odd_head_dim_and_zero_counts() {
        let mut c = DiTConfig::desk();
        c.audio_head_dim = 7;
        assert!(c.validate().is_err());
        let mut c = DiTConfig::desk();
        c.video_single_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn table_sizes_land_near_twelve_and_two_billion() {
        let n = DiTConfig::full_scale().parameter_count().unwrap();
        let video = (n.video + n.video_to_audio_cross) as f64;
        let audio = n.audio as f64;
        assert!((5e9..3e10).contains(&video), "video {video}");
        assert!((1e9..4e9).contains(&audio), "audio {audio}");
    }

    #[test]
    fn timestep_embedding_is_deterministic() {
        let a = timestep_embedding(0.37, 16);
        assert_eq!(a, timestep_embedding(0.37, 16));
        assert_eq!(a.embedding[0], (370.0f64).cos());
        assert_ne!(a, timestep_embedding(0.38, 16));
    }

    #[test]
    fn config_parses_from_toml_with_verbatim_names() {
        let text = r#"
            video_dual_blocks = 1
            video_single_blocks = 1
            audio_blocks = 2
            heads = 2
            video_head_dim = 8
            audio_head_dim = 4
            video_in_dim = 4
            video_out_dim = 4
            audio_in_dim = 4
            audio_out_dim = 4
            mutual_attention = false
        "#;
        let c: DiTConfig = toml::from_str(text).unwrap();
        assert_eq!(c.audio_blocks, 2);
        assert!(!c.mutual_attention);
        assert_eq!(c.text_dim, 16);
        c.validate().unwrap();
    }
}
