//! Desk-scale joint audio-video generation: shared-timeline rotary positions,
//! a dual-branch diffusion transformer with temporally aligned cross-modal
//! attention, rectified-flow training, multi-condition guidance, and the
//! caption and data-curation procedures that feed it.

pub mod autodiff;
pub mod caption;
pub mod checkpoint;
pub mod dit;
pub mod error;
pub mod flow;
pub mod funnel;
pub mod gradcheck;
pub mod guidance;
pub mod params;
pub mod rng;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
