//! Write a WAV file, read it back at a different rate and compute log-Mel features.
//!
//! ```text
//! cargo run --example features
//! ```

use rqspeech::frontend::{load_audio, log_mel, resample, write_wav, Waveform, SAMPLE_RATE};
use rqspeech::synth;

fn main() -> rqspeech::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| rqspeech::Error::io("tempdir", e))?;
    let path = dir.path().join("babble.wav");

    // 1.5 s of synthetic speech-like audio, stored at 22.05 kHz
    let native = synth::babble(1.5, 3);
    let at_22k = resample(&native, 22_050)?;
    write_wav(&path, &at_22k)?;

    let loaded: Waveform = load_audio(&path)?;
    println!("loaded {} samples at {} Hz ({:.2} s)", loaded.len(), loaded.sample_rate, loaded.duration_s());
    let audio = resample(&loaded, SAMPLE_RATE)?;
    let mel = log_mel(&audio)?;
    let (frames, bins) = mel.frames.dim();
    println!("log-Mel: {frames} frames x {bins} bins");

    let mean = mel.frames.mean().unwrap_or(0.0);
    let energy: Vec<f32> = mel.frames.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect();
    let loudest = energy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!("mean log energy {mean:.3}; loudest frame {loudest} ({:.2} s)", loudest as f64 * 0.01);
    Ok(())
}
