//! Shared audio-indexed timeline for both modalities.
//!
//! Audio latents sit at integer positions `0..L_a`. Each video latent is placed
//! at the centroid of the audio indices its time span overlaps, so a video
//! frame and the audio it co-occurs with get numerically close positions and
//! rotary attention between the streams sees physical time offsets rather
//! than raw index offsets. Reference images live at negative positions,
//! outside the generated timeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Length and rate of one modality's latent sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTiming {
    pub latent_count: usize,
    pub latents_per_second: f64,
    #[serde(default)]
    pub start_offset_seconds: f64,
}

impl ModalityTiming {
    pub fn new(latent_count: usize, latents_per_second: f64) -> Result<Self> {
        let t = ModalityTiming {
            latent_count,
            latents_per_second,
            start_offset_seconds: 0.0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_count == 0 {
            return Err(Error::Config("latent_count must be at least 1".into()));
        }
        if !(self.latents_per_second > 0.0 && self.latents_per_second.is_finite()) {
            return Err(Error::Config(format!(
                "latents_per_second must be positive, got {}",
                self.latents_per_second
            )));
        }
        Ok(())
    }

    pub fn duration_seconds(&self) -> f64 {
        self.latent_count as f64 / self.latents_per_second
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinateBasis {
    AudioIndexed,
    /// Raw per-modality latent indices; not comparable across modalities.
    FrameIndexed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionVector {
    pub positions: Vec<f64>,
    pub basis: CoordinateBasis,
}

impl PositionVector {
    pub fn audio_indexed(positions: Vec<f64>) -> Self {
        PositionVector {
            positions,
            basis: CoordinateBasis::AudioIndexed,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.positions.windows(2).all(|w| w[0] < w[1])
    }

    /// Concatenation in sequence order, e.g. references followed by frames.
    pub fn concat(&self, other: &PositionVector) -> PositionVector {
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        PositionVector {
            positions,
            basis: self.basis,
        }
    }
}

/// Naive per-modality indices `0..L`, kept for ablations.
pub fn frame_positions(timing: &ModalityTiming) -> PositionVector {
    PositionVector {
        positions: (0..timing.latent_count).map(|j| j as f64).collect(),
        basis: CoordinateBasis::FrameIndexed,
    }
}

/// `p_a = [0, 1, ..., L_a - 1]`.
pub fn audio_positions(audio: &ModalityTiming) -> PositionVector {
    PositionVector::audio_indexed((0..audio.latent_count).map(|j| j as f64).collect())
}

/// Audio-timeline position of every video latent.
///
/// With `rho = L_a / L_v` integral the centroid has the closed form
/// `(i + 0.5) * rho - 0.5`; otherwise each audio index is weighted by how
/// much of its unit span overlaps the video latent's span.
pub fn video_positions(video: &ModalityTiming, audio: &ModalityTiming) -> Result<PositionVector> {
    video.validate()?;
    audio.validate()?;
    let (dv, da) = (video.duration_seconds(), audio.duration_seconds());
    if (dv - da).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "video covers {dv} s but audio covers {da} s"
        )));
    }
    let (lv, la) = (video.latent_count, audio.latent_count);
    let offset = (video.start_offset_seconds - audio.start_offset_seconds) * audio.latents_per_second;
    if la % lv == 0 && offset == 0.0 {
        let rho = (la / lv) as f64;
        return Ok(PositionVector::audio_indexed(
            (0..lv).map(|i| (i as f64 + 0.5) * rho - 0.5).collect(),
        ));
    }
    let rho = la as f64 / lv as f64;
    let positions = (0..lv)
        .map(|i| overlap_centroid(offset + i as f64 * rho, offset + (i + 1) as f64 * rho, la))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositionVector::audio_indexed(positions))
}

/// Overlap-weighted mean of audio indices `j` whose span `[j, j+1)` meets `[lo, hi)`.
fn overlap_centroid(lo: f64, hi: f64, audio_len: usize) -> Result<f64> {
    let first = lo.floor().max(0.0) as usize;
    let last = (hi.ceil() as usize).min(audio_len);
    let (mut num, mut den) = (0.0, 0.0);
    for j in first..last {
        let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
        num += w * j as f64;
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::Alignment(format!(
            "video span [{lo}, {hi}) covers no audio latent"
        )));
    }
    Ok(num / den)
}

/// `T_ref(k) = -phi * k` for `k = 1..=count`.
pub fn reference_positions(count: usize, phi: f64) -> Result<PositionVector> {
    if count == 0 {
        return Err(Error::Config("at least one reference is required".into()));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Config(format!("phi must be positive, got {phi}")));
    }
    Ok(PositionVector::audio_indexed(
        (1..=count).map(|k| -phi * k as f64).collect(),
    ))
}

/// Per-pair rotation frequencies `base^(-2j / head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    half_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

pub const DEFAULT_ROTARY_BASE: f64 = 10_000.0;

impl RotaryTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        let half_dim = head_dim / 2;
        let freqs = (0..half_dim)
            .map(|j| base.powf(-(2.0 * j as f64) / head_dim as f64))
            .collect();
        Ok(RotaryTable {
            half_dim,
            base,
            freqs,
        })
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }

    pub fn head_dim(&self) -> usize {
        self.half_dim * 2
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Rotation angles laid out `len x half_dim`, row-major.
    pub fn angles(&self, positions: &[f64]) -> Vec<f64> {
        positions
            .iter()
            .flat_map(|p| self.freqs.iter().map(move |f| p * f))
            .collect()
    }
}

/// Rotates a `len x heads x head_dim` tensor by per-token positions.
///
/// Channel pairs are interleaved: `(2j, 2j+1)` turns by `pos * freq_j`.
pub fn apply_rotary(x: &Tensor, pos: &PositionVector, table: &RotaryTable) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("apply_rotary", shape, &[pos.len(), 0, table.head_dim()]));
    }
    let (len, heads, head_dim) = (shape[0], shape[1], shape[2]);
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!("head_dim {head_dim} is odd")));
    }
    if head_dim != table.head_dim() || len != pos.len() {
        return Err(Error::shape(
            "apply_rotary",
            shape,
            &[pos.len(), heads, table.head_dim()],
        ));
    }
    let mut out = x.data().to_vec();
    for (t, p) in pos.positions.iter().enumerate() {
        for h in 0..heads {
            let base = (t * heads + h) * head_dim;
            for (j, f) in table.freqs.iter().enumerate() {
                let (s, c) = (p * f).sin_cos();
                let (a, b) = (out[base + 2 * j], out[base + 2 * j + 1]);
                out[base + 2 * j] = a * c - b * s;
                out[base + 2 * j + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn timing(n: usize, rate: f64) -> ModalityTiming {
        ModalityTiming::new(n, rate).unwrap()
    }

    /// Plain mean of the audio indices inside the video latent's block.
    fn covered_mean(i: usize, rho: usize) -> f64 {
        let idx: Vec<usize> = (i * rho..(i + 1) * rho).collect();
        idx.iter().sum::<usize>() as f64 / idx.len() as f64
    }

    #[test]
    fn audio_positions_are_indices() {
        assert_eq!(audio_positions(&timing(4, 4.0)).positions, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(audio_positions(&timing(1, 1.0)).positions, vec![0.0]);
        let p = audio_positions(&timing(24, 24.0));
        assert_eq!(p.positions, (0..24).map(|j| j as f64).collect::<Vec<_>>());
    }

    #[test]
    fn video_positions_examples() {
        let p = video_positions(&timing(2, 1.0), &timing(8, 4.0)).unwrap();
        assert_eq!(p.positions, vec![covered_mean(0, 4), covered_mean(1, 4)]);
        assert_eq!(p.positions, vec![1.5, 5.5]);
        let p = video_positions(&timing(4, 2.0), &timing(4, 2.0)).unwrap();
        assert_eq!(p.positions, vec![0.0, 1.0, 2.0, 3.0]);
        let p = video_positions(&timing(3, 3.0), &timing(6, 6.0)).unwrap();
        assert_eq!(p.positions, vec![0.5, 2.5, 4.5]);
    }

    #[test]
    fn duration_mismatch_reports_both() {
        let err = video_positions(&timing(2, 1.0), &timing(8, 2.0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 s") && msg.contains("4 s"), "{msg}");
    }

    #[test]
    fn rational_rate_uses_overlap_centroid() {
        // rho = 1.5: latent 0 covers [0, 1.5) -> weights 1 on j=0, 0.5 on j=1.
        let p = video_positions(&timing(2, 2.0), &timing(3, 3.0)).unwrap();
        assert!((p.positions[0] - 0.5 / 1.5).abs() < 1e-12);
        // latent 1 covers [1.5, 3) -> 0.5 on j=1, 1 on j=2.
        assert!((p.positions[1] - (0.5 + 2.0) / 1.5).abs() < 1e-12);
        assert!(p.is_strictly_increasing());
    }

    #[test]
    fn reference_positions_examples() {
        assert_eq!(reference_positions(2, 10.0).unwrap().positions, vec![-10.0, -20.0]);
        assert_eq!(reference_positions(1, 1.0).unwrap().positions, vec![-1.0]);
        assert_eq!(
            reference_positions(3, 7.5).unwrap().positions,
            vec![-7.5, -15.0, -22.5]
        );
        assert!(reference_positions(0, 1.0).is_err());
        assert!(reference_positions(1, 0.0).is_err());
    }

    #[test]
    fn rotary_table_frequencies_decrease() {
        let t = RotaryTable::new(16, DEFAULT_ROTARY_BASE).unwrap();
        assert!(t.freqs().windows(2).all(|w| w[0] > w[1]));
        assert!(t.freqs().iter().all(|f| *f > 0.0));
        assert!(RotaryTable::new(7, 10_000.0).is_err());
    }

    #[test]
    fn rotary_zero_position_is_identity() {
        let t = RotaryTable::new(4, 10_000.0).unwrap();
        let x = Tensor::new(vec![2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let pos = PositionVector::audio_indexed(vec![0.0, 0.0]);
        assert_eq!(apply_rotary(&x, &pos, &t).unwrap(), x);
    }

    #[test]
    fn rotary_half_turn_negates_first_pair() {
        let t = RotaryTable::new(4, 10_000.0).unwrap();
        let x = Tensor::new(vec![1, 1, 4], vec![0.3, -0.7, 1.0, 1.0]).unwrap();
        let p = std::f64::consts::PI / t.freqs()[0];
        let y = apply_rotary(&x, &PositionVector::audio_indexed(vec![p]), &t).unwrap();
        // 2x2 rotation by pi applied directly.
        let (c, s) = (std::f64::consts::PI.cos(), std::f64::consts::PI.sin());
        let expect = [0.3 * c + 0.7 * s, 0.3 * s - 0.7 * c];
        assert!((y.data()[0] - expect[0]).abs() < 1e-12);
        assert!((y.data()[1] - expect[1]).abs() < 1e-12);
        assert!((y.data()[0] + 0.3).abs() < 1e-12 && (y.data()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn rotary_rejects_odd_head_dim() {
        let t = RotaryTable::new(4, 10_000.0).unwrap();
        let x = Tensor::zeros(&[1, 1, 3]);
        let pos = PositionVector::audio_indexed(vec![0.0]);
        assert!(matches!(apply_rotary(&x, &pos, &t), Err(Error::Config(_))));
    }

    #[test]
    fn rotary_logits_depend_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = RotaryTable::new(8, 10_000.0).unwrap();
        let q = Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let k = Tensor::new(vec![1, 1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let logit = |p1: f64, p2: f64| {
            let a = apply_rotary(&q, &PositionVector::audio_indexed(vec![p1]), &t).unwrap();
            let b = apply_rotary(&k, &PositionVector::audio_indexed(vec![p2]), &t).unwrap();
            crate::tensor::dot(a.data(), b.data())
        };
        let c = rng.random_range(-50.0..50.0);
        assert!((logit(1.5, 4.0) - logit(1.5 + c, 4.0 + c)).abs() < 1e-9);
    }
}
