//! Span masking over input Mel frames with Gaussian noise substitution.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frontend::MelSpectrogram;
use crate::quantizer::STACK;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Probability that a given frame starts a mask span.
    pub prob: f64,
    /// Span length in 10 ms input frames.
    pub span_frames: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            prob: 0.4,
            span_frames: 40,
            noise_mean: 0.0,
            noise_std: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("mask.prob {} outside [0, 1]", self.prob)));
        }
        if self.span_frames == 0 {
            return Err(Error::Config("mask.span_frames must be at least 1".into()));
        }
        if !(self.noise_std > 0.0) || !self.noise_mean.is_finite() {
            return Err(Error::Config("mask.noise_std must be positive".into()));
        }
        Ok(())
    }
}

/// Which input frames are replaced and which label frames carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub input_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
}

impl MaskPlan {
    /// Build a plan from an input mask, deriving targets by OR over each group of four.
    pub fn from_input_mask(input_mask: Vec<bool>) -> Self {
        let target_mask = input_mask
            .chunks_exact(STACK)
            .map(|c| c.iter().any(|&m| m))
            .collect();
        Self {
            input_mask,
            target_mask,
        }
    }

    pub fn masked_frames(&self) -> usize {
        self.input_mask.iter().filter(|&&m| m).count()
    }

    pub fn target_count(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Every frame independently starts a span of `span_frames` with probability `prob`;
/// spans may overlap and are truncated at the end of the utterance.
pub fn sample_mask<R: Rng + ?Sized>(t: usize, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let mut mask = vec![false; t];
    let mut covered_until = 0usize;
    for (i, m) in mask.iter_mut().enumerate() {
        if rng.random_bool(cfg.prob) {
            covered_until = covered_until.max(i + cfg.span_frames);
        }
        *m = i < covered_until;
    }
    MaskPlan::from_input_mask(mask)
}

/// Replace masked frames with i.i.d. Normal(noise_mean, noise_std^2) draws.
pub fn apply_mask<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    plan: &MaskPlan,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MelSpectrogram> {
    if plan.input_mask.len() != mel.num_frames() {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} frames, spectrogram has {}",
            plan.input_mask.len(),
            mel.num_frames()
        )));
    }
    let normal = Normal::new(cfg.noise_mean, cfg.noise_std)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut frames: Array2<f32> = mel.frames.clone();
    for (mut row, &m) in frames.rows_mut().into_iter().zip(&plan.input_mask) {
        if m {
            row.iter_mut().for_each(|v| *v = normal.sample(rng) as f32);
        }
    }
    MelSpectrogram::new(frames)
}

/// Exact expected masked fraction for length `t`.
///
/// Frame `i` stays unmasked only if none of the `min(i + 1, span)` frames that could
/// start a span covering it fires, so early frames are covered less often.
pub fn expected_coverage(cfg: &MaskConfig, t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let q = 1.0 - cfg.prob;
    let sum: f64 = (0..t)
        .map(|i| 1.0 - q.powi((i + 1).min(cfg.span_frames) as i32))
        .sum();
    sum / t as f64
}

/// Mean masked fraction over `trials` independent plans of length `t`.
pub fn coverage_estimate<R: Rng + ?Sized>(
    cfg: &MaskConfig,
    t: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 || t == 0 {
        return Err(Error::InvalidArgument(
            "coverage_estimate needs at least one trial and one frame".into(),
        ));
    }
    let total: usize = (0..trials)
        .map(|_| sample_mask(t, cfg, rng).masked_frames())
        .sum();
    Ok(total as f64 / (trials * t) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(prob: f64, span: usize) -> MaskConfig {
        MaskConfig {
            prob,
            span_frames: span,
            ..Default::default()
        }
    }

    #[test]
    fn expected_coverage_matches_enumeration() {
        // every start pattern of a 7-frame utterance, weighted by its probability
        for (prob, span) in [(0.3, 3), (0.1, 5), (0.8, 2)] {
            let c = cfg(prob, span);
            let t = 7usize;
            let mut exact = 0.0;
            for bits in 0u32..1 << t {
                let w: f64 = (0..t)
                    .map(|i| if bits >> i & 1 == 1 { prob } else { 1.0 - prob })
                    .product();
                let covered = (0..t)
                    .filter(|&i| (i.saturating_sub(span - 1)..=i).any(|s| bits >> s & 1 == 1))
                    .count();
                exact += w * covered as f64 / t as f64;
            }
            assert!((expected_coverage(&c, t) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_zero_and_one() {
        let mut r = rng::stream("t", &[]);
        let p = sample_mask(37, &cfg(0.0, 5), &mut r);
        assert_eq!(p.masked_frames(), 0);
        assert_eq!(p.target_count(), 0);
        let p = sample_mask(37, &cfg(1.0, 5), &mut r);
        assert_eq!(p.masked_frames(), 37);
        assert_eq!(p.target_mask, vec![true; 9]);
    }

    #[test]
    fn empty_plan_is_identity() {
        let mel = MelSpectrogram::new(Array2::from_shape_fn((6, 80), |(i, j)| (i + j) as f32)).unwrap();
        let plan = MaskPlan::from_input_mask(vec![false; 6]);
        let out = apply_mask(&mel, &plan, &MaskConfig::default(), &mut rng::stream("t", &[])).unwrap();
        assert_eq!(out, mel);
    }

    #[test]
    fn mixed_plan_keeps_unmasked_frames() {
        let mel = MelSpectrogram::new(Array2::from_shape_fn((6, 80), |(i, j)| (i * 3 + j) as f32 * 0.1)).unwrap();
        let plan = MaskPlan::from_input_mask(vec![false, true, true, false, false, true]);
        let out = apply_mask(&mel, &plan, &MaskConfig::default(), &mut rng::stream("t", &[])).unwrap();
        for t in [0, 3, 4] {
            let a: Vec<u32> = out.frames.row(t).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = mel.frames.row(t).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_ne!(out.frames.row(1), mel.frames.row(1));
    }

    #[test]
    fn length_mismatch_errors() {
        let mel = MelSpectrogram::new(Array2::zeros((5, 80))).unwrap();
        let plan = MaskPlan::from_input_mask(vec![false; 4]);
        assert!(apply_mask(&mel, &plan, &MaskConfig::default(), &mut rng::stream("t", &[])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1.5, 1).validate().is_err());
        assert!(cfg(0.5, 0).validate().is_err());
        assert!(MaskConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn plan_invariants(t in 1usize..300, prob in 0.0f64..1.0, span in 1usize..50, seed in any::<u64>()) {
            let c = cfg(prob, span);
            let mut r = rng::stream("p", &[seed.into()]);
            let plan = sample_mask(t, &c, &mut r);
            prop_assert_eq!(plan.input_mask.len(), t);
            prop_assert_eq!(plan.target_mask.len(), t / 4);
            for (l, &m) in plan.target_mask.iter().enumerate() {
                prop_assert_eq!(m, plan.input_mask[4 * l..4 * l + 4].iter().any(|&x| x));
            }
            // replay the starts and check every masked frame follows one within span-1
            let mut r2 = rng::stream("p", &[seed.into()]);
            let starts: Vec<bool> = (0..t).map(|_| r2.random_bool(prob)).collect();
            for (i, &m) in plan.input_mask.iter().enumerate() {
                let lo = i.saturating_sub(span - 1);
                prop_assert_eq!(m, starts[lo..=i].iter().any(|&s| s));
            }
            let mut r3 = rng::stream("p", &[seed.into()]);
            prop_assert_eq!(sample_mask(t, &c, &mut r3), plan);
        }
    }
}
