mod common;

use common::scan_labels;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rqspeech::frontend::MelSpectrogram;
use rqspeech::quantizer::{normalize, stack_downsample, QuantizerState, StackedFeatures};

fn instance(seed: u64, n: usize, v: usize, dim: usize, l: usize) -> (QuantizerState, StackedFeatures) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let input = 320;
    let projections = (0..n)
        .map(|_| Array2::from_shape_simple_fn((input, dim), || r.random_range(-0.2f32..0.2)))
        .collect();
    let codebooks = (0..n)
        .map(|_| Array2::from_shape_simple_fn((v, dim), || r.random_range(-1.5f32..1.5)))
        .collect();
    let q = QuantizerState::from_parts(seed, projections, codebooks).unwrap();
    let frames = Array2::from_shape_simple_fn((l, input), || r.random_range(-2.0f32..2.0));
    (q, StackedFeatures { frames })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_match_distance_scan(seed in any::<u64>(), n in 1usize..=4, v in 1usize..=32, dim in 1usize..=8, l in 1usize..=16) {
        let (q, f) = instance(seed, n, v, dim, l);
        let labels = q.assign_labels(&f).unwrap();
        prop_assert_eq!(labels.labels, scan_labels(&q, &f));
    }

    #[test]
    fn labels_are_in_vocabulary(seed in any::<u64>(), t in 4usize..60) {
        let q = QuantizerState::new(seed % 7, rqspeech::quantizer::QuantizerConfig { codebooks: 3, vocab: 17, ..Default::default() }).unwrap();
        let mel = rqspeech::synth::random_mel(t, seed);
        let labels = q.labels_for(&mel).unwrap();
        prop_assert_eq!(labels.len(), t / 4);
        prop_assert!(labels.labels.iter().all(|&k| k < 17));
    }
}

#[test]
fn default_quantizer_matches_scan_on_real_features() {
    let q = QuantizerState::new(5, Default::default()).unwrap();
    let mel = rqspeech::frontend::log_mel(&rqspeech::synth::babble(0.5, 2)).unwrap();
    let f = normalize(&stack_downsample(&mel).unwrap());
    assert_eq!(q.labels_for(&mel).unwrap().labels, scan_labels(&q, &f));
}

#[test]
fn normalization_is_shift_and_scale_invariant() {
    let mel = rqspeech::synth::random_mel(40, 3);
    let shifted = MelSpectrogram {
        frames: mel.frames.mapv(|v| 3.0 * v - 7.0),
    };
    let q = QuantizerState::new(1, Default::default()).unwrap();
    assert_eq!(q.labels_for(&mel).unwrap(), q.labels_for(&shifted).unwrap());
}
