use std::sync::OnceLock;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Waveform, HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH};
use crate::{Error, Result};

pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
/// Power floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Time-major log-Mel features: `frames[t, m]` for frame `t` and Mel bin `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.ncols() != N_MELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {N_MELS} Mel bins, got {}",
                frames.ncols()
            )));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frames produced for `num_samples` samples at 16 kHz without center padding.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WIN_LENGTH {
        0
    } else {
        1 + (num_samples - WIN_LENGTH) / HOP_LENGTH
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over 0..8000 Hz, shape `[N_MELS, N_FFT/2 + 1]`.
pub fn mel_filterbank() -> &'static Array2<f64> {
    static BANK: OnceLock<Array2<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let n_bins = N_FFT / 2 + 1;
        let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let mut bank = Array2::zeros((N_MELS, n_bins));
        for m in 0..N_MELS {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                bank[[m, k]] = up.min(down).max(0.0);
            }
        }
        bank
    })
}

fn hann_window() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WIN_LENGTH)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN_LENGTH as f64).cos())
            .collect()
    })
}

/// 80-bin log-Mel spectrogram with a 25 ms Hann window and 10 ms hop.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "log_mel expects {SAMPLE_RATE} Hz input, got {}",
            w.sample_rate
        )));
    }
    let t = frame_count(w.len());
    if t == 0 {
        return Err(Error::TooShort(format!(
            "{} samples is shorter than one {WIN_LENGTH}-sample window",
            w.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let bank = mel_filterbank();
    let win = hann_window();
    let n_bins = N_FFT / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; n_bins];
    let mut out = Array2::<f32>::zeros((t, N_MELS));
    for (f, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = f * HOP_LENGTH;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WIN_LENGTH {
                Complex::new(w.samples[start + i] as f64 * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, out) in row.iter_mut().enumerate() {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            *out = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    MelSpectrogram::new(out)
}
