use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::MelSpectrogram;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub num_time_masks: usize,
    pub max_time_width: usize,
    /// Chance that an utterance receives its time masks at all.
    pub time_apply_prob: f64,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_time_masks: 2,
            max_time_width: 80,
            time_apply_prob: 0.2,
            num_freq_masks: 2,
            max_freq_width: 27,
        }
    }
}

impl SpecAugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self {
            num_time_masks: 0,
            max_time_width: 0,
            time_apply_prob: 0.0,
            num_freq_masks: 0,
            max_freq_width: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_apply_prob) {
            return Err(Error::Config("spec_augment.time_apply_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Masks drawn for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AugmentPlan {
    pub time: Vec<Range<usize>>,
    pub freq: Vec<Range<usize>>,
}

fn span<R: Rng + ?Sized>(rng: &mut R, max_width: usize, extent: usize) -> Range<usize> {
    let w = rng.random_range(0..=max_width).min(extent);
    let start = rng.random_range(0..=extent - w);
    start..start + w
}

/// Draw masks for a `frames x bins` spectrogram: one coin decides whether the time
/// masks apply; frequency masks always apply. Widths are uniform from zero to the
/// configured maximum.
pub fn draw_plan<R: Rng + ?Sized>(frames: usize, bins: usize, cfg: &SpecAugmentConfig, rng: &mut R) -> AugmentPlan {
    let mut plan = AugmentPlan::default();
    if rng.random_bool(cfg.time_apply_prob) {
        plan.time = (0..cfg.num_time_masks)
            .map(|_| span(rng, cfg.max_time_width, frames))
            .collect();
    }
    plan.freq = (0..cfg.num_freq_masks)
        .map(|_| span(rng, cfg.max_freq_width, bins))
        .collect();
    plan
}

/// Zero the planned frame spans and frequency bands.
pub fn apply_plan(mel: &MelSpectrogram, plan: &AugmentPlan) -> MelSpectrogram {
    let mut frames = mel.frames.clone();
    for r in &plan.time {
        frames.slice_mut(ndarray::s![r.clone(), ..]).fill(0.0);
    }
    for r in &plan.freq {
        frames.slice_mut(ndarray::s![.., r.clone()]).fill(0.0);
    }
    MelSpectrogram { frames }
}

pub fn spec_augment<R: Rng + ?Sized>(mel: &MelSpectrogram, cfg: &SpecAugmentConfig, rng: &mut R) -> MelSpectrogram {
    let plan = draw_plan(mel.num_frames(), mel.frames.ncols(), cfg, rng);
    apply_plan(mel, &plan)
}
