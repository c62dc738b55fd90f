//! Named parameter storage with learning-rate groups.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimiser group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Video,
    Audio,
    /// Cross-attention where the audio stream queries the video stream.
    VideoToAudioCross,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Video,
        ParamGroup::Audio,
        ParamGroup::VideoToAudioCross,
    ];
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `1/sqrt(fan_in)`, fan-in being the first axis.
    FanIn,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => sample_normal(rng, n, std),
            Init::FanIn => sample_normal(rng, n, 1.0 / (shape[0].max(1) as f64).sqrt()),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.clone(),
            tensor: Tensor::new(shape.to_vec(), data)?,
            group,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn group_scalar_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Writes gradients into each parameter's `grad` slot.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (param, g) in self.params.iter_mut().zip(&grads.0) {
            param.tensor.set_grad(g.clone())?;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest over names and raw bits of one group.
    pub fn checksum(&self, group: Option<ParamGroup>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| group.is_none_or(|g| g == p.group)) {
            eat(p.name.as_bytes());
            for v in p.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replaces values from a list of named tensors; every name must already exist.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        for (name, tensor) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != tensor.shape() {
                return Err(Error::shape("load_named", slot.shape(), tensor.shape()));
            }
            *slot = tensor;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                (p.name.clone(), t)
            })
            .collect()
    }
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Per-parameter gradient buffers, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients(pub(crate) Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= factor;
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.0.iter().flatten().any(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("w", &[2, 2], ParamGroup::Video, Init::Zeros, &mut rng).unwrap();
        assert!(s.add("w", &[2], ParamGroup::Audio, Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn checksum_tracks_group_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let v = s.add("v", &[3], ParamGroup::Video, Init::Normal(1.0), &mut rng).unwrap();
        s.add("a", &[3], ParamGroup::Audio, Init::Normal(1.0), &mut rng).unwrap();
        let audio = s.checksum(Some(ParamGroup::Audio));
        let all = s.checksum(None);
        s.get_mut(v).tensor.data_mut()[0] += 1.0;
        assert_eq!(audio, s.checksum(Some(ParamGroup::Audio)));
        assert_ne!(all, s.checksum(None));
    }
}
