//! Audio decoding, resampling and log-Mel feature extraction.

mod mel;
mod resample;
mod wav;

pub use mel::{frame_count, log_mel, mel_filterbank, MelSpectrogram, LOG_FLOOR, N_FFT, N_MELS};
pub use resample::{resample, resampled_len};
pub use wav::{load_audio, read_header, write_wav, WavHeader};

use crate::{Error, Result};

/// Sample rate every feature path runs at.
pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window at 16 kHz.
pub const WIN_LENGTH: usize = 400;
/// 10 ms hop at 16 kHz.
pub const HOP_LENGTH: usize = 160;

/// Mono audio with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
