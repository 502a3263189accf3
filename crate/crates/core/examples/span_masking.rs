//! Span masking: sample masks, compare their coverage with the exact expectation and
//! substitute noise into a spectrogram.
//!
//! ```text
//! cargo run --example span_masking
//! ```

use rqspeech::masking::{apply_mask, coverage_estimate, expected_coverage, sample_mask, MaskConfig};
use rqspeech::{rng, synth};

fn main() -> rqspeech::Result<()> {
    let mut r = rng::stream("example.masking", &[0u64.into()]);
    println!("{:>6} {:>10} {:>10}", "prob", "expected", "sampled");
    for prob in [0.01, 0.05, 0.15, 0.25, 0.4] {
        let cfg = MaskConfig {
            prob,
            ..MaskConfig::default()
        };
        let mc = coverage_estimate(&cfg, 4000, 200, &mut r)?;
        println!("{prob:>6} {:>10.4} {mc:>10.4}", expected_coverage(&cfg, 4000));
    }

    let cfg = MaskConfig {
        prob: 0.02,
        ..MaskConfig::default()
    };
    let mel = synth::random_mel(200, 5);
    let plan = sample_mask(mel.num_frames(), &cfg, &mut r);
    let line: String = plan.input_mask.iter().map(|&m| if m { '#' } else { '.' }).collect();
    println!("input mask  {line}");
    let line: String = plan.target_mask.iter().map(|&m| if m { '#' } else { '.' }).collect();
    println!("label mask  {line}");

    let masked = apply_mask(&mel, &plan, &cfg, &mut r)?;
    let changed = (0..mel.num_frames())
        .filter(|&t| masked.frames.row(t) != mel.frames.row(t))
        .count();
    println!("{changed} of {} frames replaced by noise", mel.num_frames());
    Ok(())
}
