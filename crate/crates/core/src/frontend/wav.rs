use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::Waveform;
use crate::{Error, Result};

/// Format information read from a WAV header without decoding samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavHeader {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    /// Frames (samples per channel) announced by the data chunk.
    pub num_frames: u64,
}

impl WavHeader {
    pub fn duration_s(&self) -> f64 {
        self.num_frames as f64 / self.sample_rate as f64
    }
}

fn open(path: &Path) -> Result<hound::WavReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    hound::WavReader::new(BufReader::new(file)).map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other
            ) =>
        {
            Error::MalformedContainer(format!("{}: truncated ({io})", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => {
            Error::UnsupportedEncoding(format!("{}: unsupported WAV variant", path.display()))
        }
        other => Error::MalformedContainer(format!("{}: {other}", path.display())),
    }
}

fn check_format(path: &Path, spec: &hound::WavSpec) -> Result<()> {
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: expected 16-bit PCM, found {:?} with {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}: {} channels (mono or stereo only)",
            path.display(),
            spec.channels
        )));
    }
    Ok(())
}

/// Read only the header of a 16-bit PCM WAV file.
pub fn read_header(path: impl AsRef<Path>) -> Result<WavHeader> {
    let path = path.as_ref();
    let reader = open(path)?;
    let spec = reader.spec();
    check_format(path, &spec)?;
    let num_frames = u64::from(reader.duration());
    let data_bytes = num_frames * u64::from(spec.channels) * 2;
    let file_len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    // The 44-byte canonical header is the smallest possible prefix.
    if data_bytes + 44 > file_len {
        return Err(Error::MalformedContainer(format!(
            "{}: data chunk announces {data_bytes} bytes but file has {file_len}",
            path.display()
        )));
    }
    Ok(WavHeader {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        bits_per_sample: spec.bits_per_sample,
        num_frames,
    })
}

/// Decode a 16-bit PCM WAV file, downmixing stereo by channel averaging.
pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let spec = reader.spec();
    check_format(path, &spec)?;
    let channels = spec.channels as usize;
    let expected = reader.len() as usize;
    let mut raw = Vec::with_capacity(expected);
    for s in reader.samples::<i16>() {
        raw.push(s.map_err(|e| map_hound(path, e))?);
    }
    if raw.len() != expected || raw.len() % channels != 0 {
        return Err(Error::MalformedContainer(format!(
            "{}: expected {expected} samples, decoded {}",
            path.display(),
            raw.len()
        )));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / channels as f32
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Write mono 16-bit PCM. Samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_pcm16(path, &[&w.samples], w.sample_rate)
}

pub(crate) fn write_pcm16(path: impl AsRef<Path>, channels: &[&[f32]], rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    let n = channels.iter().map(|c| c.len()).min().unwrap_or(0);
    for i in 0..n {
        for ch in channels {
            let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| map_hound(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
