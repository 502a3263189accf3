use std::f64::consts::PI;

use super::Waveform;
use crate::{Error, Result};

const KAISER_BETA: f64 = 8.6;
const ZERO_CROSSINGS: f64 = 64.0;

/// Number of output samples for `n` input samples, rounded to nearest.
pub fn resampled_len(n: usize, from: u32, to: u32) -> usize {
    ((n as u128 * to as u128 + from as u128 / 2) / from as u128) as usize
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as f64;
    let dst = target_rate as f64;
    let n = w.samples.len();
    let out_len = resampled_len(n, w.sample_rate, target_rate);
    // Cutoff relative to the input Nyquist frequency.
    let cutoff = (dst / src).min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let input: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 * src / dst;
        let lo = ((t - half_width).ceil().max(0.0)) as usize;
        let hi = ((t + half_width).floor() as isize).min(n as isize - 1);
        let mut acc = 0.0;
        if hi >= lo as isize {
            for (k, &x) in input.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let d = t - k as f64;
                let r = d / half_width;
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += x * cutoff * sinc(cutoff * d) * win;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rate_is_bit_identical() {
        let w = Waveform::new((0..1000).map(|i| (i as f32 * 0.37).sin()).collect(), 16000).unwrap();
        assert_eq!(resample(&w, 16000).unwrap(), w);
    }

    #[test]
    fn upsampling_doubles_length() {
        let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.sample_rate, 16000);
        assert!((out.len() as i64 - 16000).abs() <= 1);
    }

    #[test]
    fn downsampling_length_and_dc_gain() {
        let w = Waveform::new(vec![0.5; 44100], 44100).unwrap();
        let out = resample(&w, 16000).unwrap();
        assert_eq!(out.len(), 16000);
        // interior samples keep the DC level
        for &s in &out.samples[2000..14000] {
            assert!((s - 0.5).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn zero_target_rejected() {
        let w = Waveform::new(vec![0.0; 10], 8000).unwrap();
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn bessel_matches_reference() {
        // I0(1) and I0(8.6) reference values
        assert!((bessel_i0(1.0) - 1.2660658777520082).abs() < 1e-12);
        assert!((bessel_i0(8.6) / 750.4611595631659 - 1.0).abs() < 1e-12);
    }
}
