//! Synthetic audio for tests, examples and smoke runs.
//!
//! [`babble`] produces speech-like audio: a chain of short voiced segments, each a
//! harmonic stack at a random pitch under a random formant-like envelope, separated by
//! brief pauses. [`spell`] renders text with one fixed harmonic signature per
//! character so that a small CTC model can learn to transcribe it.

use std::f32::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::frontend::{write_wav, MelSpectrogram, Waveform, N_MELS, SAMPLE_RATE};
use crate::rng;
use crate::{Error, Result};

/// Log-Mel-shaped random matrix (values around -4 with unit-ish spread).
pub fn random_mel(frames: usize, seed: u64) -> MelSpectrogram {
    let mut r = rng::stream("synth.mel", &[seed.into()]);
    let normal = Normal::new(-4.0f32, 1.5).expect("valid normal");
    MelSpectrogram {
        frames: Array2::from_shape_simple_fn((frames, N_MELS), || normal.sample(&mut r)),
    }
}

fn harmonic(out: &mut [f32], f0: f32, formant: f32, amp: f32) {
    let n = out.len();
    let mut phase = [0.0f32; 12];
    for (i, s) in out.iter_mut().enumerate() {
        // 10 ms raised-cosine fades at both ends
        let fade = (i.min(n - 1 - i) as f32 / 160.0).min(1.0);
        let env = amp * 0.5 * (1.0 - (std::f32::consts::PI * fade).cos());
        let mut v = 0.0;
        for (k, ph) in phase.iter_mut().enumerate() {
            let f = f0 * (k + 1) as f32;
            if f >= 7600.0 {
                break;
            }
            let w = (-((f - formant) / 600.0).powi(2)).exp() + 0.1 / (k + 1) as f32;
            *ph = (*ph + TAU * f / SAMPLE_RATE as f32) % TAU;
            v += w * ph.sin();
        }
        *s = env * v * 0.25;
    }
}

/// Speech-like audio of `duration_s` seconds at 16 kHz.
pub fn babble(duration_s: f64, seed: u64) -> Waveform {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut r = rng::stream("synth.babble", &[seed.into()]);
    let mut samples = vec![0.0f32; n];
    let mut pos = 0;
    while pos < n {
        let seg = r.random_range(1200..4000).min(n - pos);
        if r.random_bool(0.85) {
            let f0 = r.random_range(90.0..260.0);
            let formant = r.random_range(300.0..3000.0);
            let amp = r.random_range(0.3..0.9);
            harmonic(&mut samples[pos..pos + seg], f0, formant, amp);
        }
        pos += seg;
        pos += r.random_range(0..800);
    }
    let noise = Normal::new(0.0f32, 0.003).expect("valid normal");
    for s in &mut samples {
        *s = (*s + noise.sample(&mut r)).clamp(-1.0, 1.0);
    }
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

/// Samples per rendered character.
pub const CHAR_SAMPLES: usize = 2400;

fn char_signature(c: char) -> Option<(f32, f32)> {
    let k = match c {
        'a'..='z' => c as u32 - 'a' as u32,
        '0'..='9' => 26 + c as u32 - '0' as u32,
        '\'' => 36,
        _ => return None,
    } as f32;
    // pitch and formant grids interleaved so neighbouring letters differ in both
    let f0 = 100.0 + 23.0 * (k % 7.0);
    let formant = 400.0 + 140.0 * ((k * 5.0) % 19.0);
    Some((f0, formant))
}

/// Render lowercase text, one 150 ms tone per character and silence for spaces.
pub fn spell(text: &str, seed: u64) -> Result<Waveform> {
    let mut r = rng::stream("synth.spell", &[seed.into(), text.into()]);
    let mut samples = vec![0.0f32; 800];
    for c in text.chars() {
        let start = samples.len();
        samples.resize(start + CHAR_SAMPLES, 0.0);
        if c == ' ' {
            continue;
        }
        let (f0, formant) = char_signature(c)
            .ok_or_else(|| Error::InvalidArgument(format!("cannot render character {c:?}")))?;
        let jitter = r.random_range(0.98..1.02);
        harmonic(&mut samples[start..], f0 * jitter, formant, r.random_range(0.6..0.9));
    }
    samples.resize(samples.len() + 800, 0.0);
    let noise = Normal::new(0.0f32, 0.002).expect("valid normal");
    for s in &mut samples {
        *s += noise.sample(&mut r);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Write `n` babble utterances with durations uniform in `[min_s, max_s]`.
pub fn write_babble_corpus(dir: impl AsRef<Path>, n: usize, min_s: f64, max_s: f64, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut r = rng::stream("synth.corpus", &[seed.into()]);
    (0..n)
        .map(|i| {
            let d = r.random_range(min_s..=max_s);
            let path = dir.join(format!("utt{i:03}.wav"));
            write_wav(&path, &babble(d, seed.wrapping_mul(1000).wrapping_add(i as u64)))?;
            Ok(path)
        })
        .collect()
}

/// Words used by [`toy_transcripts`].
const WORDS: &[&str] = &[
    "the", "cat", "sat", "on", "mat", "a", "dog", "ran", "far", "sun", "is", "hot", "we", "go", "up",
    "red", "box", "big", "fox", "hid",
];

/// `n` short lowercase sentences of two or three words.
pub fn toy_transcripts(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng::stream("synth.text", &[seed.into()]);
    (0..n)
        .map(|_| {
            let k = r.random_range(2..=3);
            (0..k)
                .map(|_| WORDS[r.random_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Render transcripts to `dir/utt###.wav` and write `dir/transcripts.tsv`
/// (`id<TAB>text`). Returns the transcript path.
pub fn write_spelled_corpus(dir: impl AsRef<Path>, texts: &[String], seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tpath = dir.join("transcripts.tsv");
    let mut tf = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
    for (i, text) in texts.iter().enumerate() {
        let id = format!("utt{i:03}");
        write_wav(dir.join(format!("{id}.wav")), &spell(text, seed.wrapping_add(i as u64))?)?;
        writeln!(tf, "{id}\t{text}").map_err(|e| Error::io(&tpath, e))?;
    }
    Ok(tpath)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::log_mel;

    #[test]
    fn babble_has_requested_length_and_range() {
        let w = babble(1.37, 4);
        assert_eq!(w.len(), 21920);
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
        assert!(w.samples.iter().any(|s| s.abs() > 0.05));
        assert_eq!(w, babble(1.37, 4));
        assert_ne!(w, babble(1.37, 5));
    }

    #[test]
    fn spelled_characters_are_distinct() {
        let mut sigs: Vec<(u32, u32)> = ('a'..='z')
            .chain('0'..='9')
            .chain(['\''])
            .map(|c| {
                let (a, b) = char_signature(c).unwrap();
                (a as u32, b as u32)
            })
            .collect();
        sigs.sort_unstable();
        sigs.dedup();
        assert_eq!(sigs.len(), 37);
        let w = spell("ab c", 1).unwrap();
        assert_eq!(w.len(), 1600 + 4 * CHAR_SAMPLES);
        assert!(log_mel(&w).is_ok());
        assert!(spell("é", 1).is_err());
    }

    #[test]
    fn corpora_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_babble_corpus(dir.path().join("b"), 3, 0.5, 0.8, 1).unwrap();
        assert_eq!(paths.len(), 3);
        let texts = toy_transcripts(4, 2);
        assert!(texts.iter().all(|t| t.split(' ').count() >= 2));
        let t = write_spelled_corpus(dir.path().join("s"), &texts, 3).unwrap();
        assert_eq!(fs::read_to_string(t).unwrap().lines().count(), 4);
    }
}
