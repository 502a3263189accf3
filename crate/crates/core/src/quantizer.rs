//! Random-projection quantizer producing frozen discrete targets.
//!
//! Mel frames are stacked four at a time, normalized per utterance, projected by a
//! frozen random matrix per codebook and mapped to the nearest frozen codeword in
//! squared Euclidean distance.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frontend::{MelSpectrogram, N_MELS};
use crate::rng;
use crate::{Error, Result};

/// Mel frames per label frame.
pub const STACK: usize = 4;
/// Variance floor used by [`normalize`].
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub codebooks: usize,
    pub vocab: usize,
    pub dim: usize,
    pub input_dim: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebooks: 32,
            vocab: 2048,
            dim: 16,
            input_dim: STACK * N_MELS,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebooks == 0 || self.vocab == 0 || self.dim == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "quantizer sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Stacked (and possibly normalized) quantizer input, one row per label frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatures {
    pub frames: Array2<f32>,
}

/// `labels[[l, j]]` is the codeword index chosen by codebook `j` for label frame `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTensor {
    pub labels: Array2<u32>,
}

impl LabelTensor {
    pub fn len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.nrows() == 0
    }

    pub fn codebooks(&self) -> usize {
        self.labels.ncols()
    }
}

/// Concatenate non-overlapping groups of four Mel frames; the `T mod 4` tail is dropped.
pub fn stack_downsample(mel: &MelSpectrogram) -> Result<StackedFeatures> {
    let t = mel.num_frames();
    let bins = mel.frames.ncols();
    let l = t / STACK;
    if l == 0 {
        return Err(Error::TooShort(format!(
            "utterance too short for one label frame ({t} frames)"
        )));
    }
    let mut out = Array2::zeros((l, STACK * bins));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        for k in 0..STACK {
            let src = mel.frames.row(i * STACK + k);
            row.slice_mut(ndarray::s![k * bins..(k + 1) * bins]).assign(&src);
        }
    }
    Ok(StackedFeatures { frames: out })
}

/// Per-channel mean/variance normalization over the label frames of one utterance.
pub fn normalize(sf: &StackedFeatures) -> StackedFeatures {
    let (l, d) = sf.frames.dim();
    let mut out = Array2::zeros((l, d));
    if l == 0 {
        return StackedFeatures { frames: out };
    }
    for c in 0..d {
        let col = sf.frames.column(c);
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / l as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (o, &v) in out.column_mut(c).iter_mut().zip(col.iter()) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    StackedFeatures { frames: out }
}

/// Frozen projection matrices and codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerState {
    config: QuantizerConfig,
    seed: u64,
    /// One `input_dim x dim` matrix per codebook.
    projections: Vec<Array2<f32>>,
    /// One `vocab x dim` table per codebook.
    codebooks: Vec<Array2<f32>>,
}

impl QuantizerState {
    /// Xavier-uniform projections and standard-normal codewords, each drawn from its own
    /// seed-derived stream.
    pub fn new(seed: u64, config: QuantizerConfig) -> Result<Self> {
        config.validate()?;
        let bound = (6.0 / (config.input_dim + config.dim) as f64).sqrt();
        let projections = (0..config.codebooks)
            .map(|j| {
                let mut r = rng::stream("quantizer.projection", &[seed.into(), (j as u64).into()]);
                Array2::from_shape_simple_fn((config.input_dim, config.dim), || {
                    r.random_range(-bound..=bound) as f32
                })
            })
            .collect();
        let codebooks = (0..config.codebooks)
            .map(|j| {
                let mut r = rng::stream("quantizer.codebook", &[seed.into(), (j as u64).into()]);
                Array2::from_shape_simple_fn((config.vocab, config.dim), || {
                    r.sample::<f64, _>(StandardNormal) as f32
                })
            })
            .collect();
        Ok(Self {
            config,
            seed,
            projections,
            codebooks,
        })
    }

    /// Build a state from explicit parameters.
    pub fn from_parts(
        seed: u64,
        projections: Vec<Array2<f32>>,
        codebooks: Vec<Array2<f32>>,
    ) -> Result<Self> {
        if projections.is_empty() || projections.len() != codebooks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} projections vs {} codebooks",
                projections.len(),
                codebooks.len()
            )));
        }
        let (input_dim, dim) = projections[0].dim();
        let vocab = codebooks[0].nrows();
        for (a, c) in projections.iter().zip(&codebooks) {
            if a.dim() != (input_dim, dim) || c.dim() != (vocab, dim) {
                return Err(Error::ShapeMismatch("inconsistent quantizer parts".into()));
            }
        }
        let config = QuantizerConfig {
            codebooks: projections.len(),
            vocab,
            dim,
            input_dim,
        };
        config.validate()?;
        if codebooks.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("codewords must be finite".into()));
        }
        Ok(Self {
            config,
            seed,
            projections,
            codebooks,
        })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self, j: usize) -> &Array2<f32> {
        &self.projections[j]
    }

    pub fn codebook(&self, j: usize) -> &Array2<f32> {
        &self.codebooks[j]
    }

    /// Label each normalized frame with its nearest codeword in every codebook.
    ///
    /// Distances are accumulated in `f64`; ties resolve to the smallest index.
    pub fn assign_labels(&self, nf: &StackedFeatures) -> Result<LabelTensor> {
        let (l, d) = nf.frames.dim();
        if d != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "features have {d} channels, projection expects {}",
                self.config.input_dim
            )));
        }
        let n = self.config.dim;
        let mut labels = Array2::zeros((l, self.config.codebooks));
        let mut proj = vec![0.0f64; n];
        for (row, mut out) in nf.frames.rows().into_iter().zip(labels.rows_mut()) {
            for (j, (a, cb)) in self.projections.iter().zip(&self.codebooks).enumerate() {
                project(row, a, &mut proj);
                out[j] = nearest(&proj, cb);
            }
        }
        Ok(LabelTensor { labels })
    }

    /// Mel spectrogram to labels: stack, normalize, project, look up.
    pub fn labels_for(&self, mel: &MelSpectrogram) -> Result<LabelTensor> {
        self.assign_labels(&normalize(&stack_downsample(mel)?))
    }

    /// Canonical little-endian serialization of the full state.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        for v in [c.codebooks, c.vocab, c.dim, c.input_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for m in self.projections.iter().chain(&self.codebooks) {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of [`Self::to_bytes`], hex encoded.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn project(x: ArrayView1<f32>, a: &Array2<f32>, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&xv, arow) in x.iter().zip(a.rows()) {
        let xv = xv as f64;
        for (o, &w) in out.iter_mut().zip(arow.iter()) {
            *o += xv * w as f64;
        }
    }
}

fn nearest(p: &[f64], codebook: &Array2<f32>) -> u32 {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for (i, c) in codebook.rows().into_iter().enumerate() {
        let d: f64 = p
            .iter()
            .zip(c.iter())
            .map(|(&a, &b)| {
                let e = a - b as f64;
                e * e
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = i as u32;
        }
    }
    best
}

const CACHE_MAGIC: &str = "MSEQ1";

/// Write a label cache: `MSEQ1 L N V\n` followed by `L*N` little-endian `u16` labels.
pub fn write_label_cache(path: impl AsRef<Path>, labels: &LabelTensor, vocab: usize) -> Result<()> {
    let path = path.as_ref();
    if vocab > 1 << 16 {
        return Err(Error::InvalidArgument(format!(
            "vocab {vocab} does not fit the 16-bit cache format"
        )));
    }
    let (l, n) = labels.labels.dim();
    let mut buf = format!("{CACHE_MAGIC} {l} {n} {vocab}\n").into_bytes();
    for &v in labels.labels.iter() {
        buf.extend_from_slice(&(v as u16).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Read a label cache, returning the labels and the vocabulary size from the header.
pub fn read_label_cache(path: impl AsRef<Path>) -> Result<(LabelTensor, usize)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let bad = || Error::MalformedContainer(format!("{}: bad label cache header", path.display()));
    let parts: Vec<&str> = header.trim_end().split(' ').collect();
    if parts.len() != 4 || parts[0] != CACHE_MAGIC {
        return Err(bad());
    }
    let nums: Vec<usize> = parts[1..]
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (l, n, v) = (nums[0], nums[1], nums[2]);
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != l * n * 2 {
        return Err(Error::MalformedContainer(format!(
            "{}: expected {} label bytes, found {}",
            path.display(),
            l * n * 2,
            body.len()
        )));
    }
    let vals: Vec<u32> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    let labels = Array2::from_shape_vec((l, n), vals).expect("sized above");
    Ok((LabelTensor { labels }, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mel_from(frames: Array2<f32>) -> MelSpectrogram {
        MelSpectrogram::new(frames).unwrap()
    }

    #[test]
    fn ten_frames_give_two_label_frames() {
        let mel = mel_from(Array2::from_shape_fn((10, 80), |(t, _)| t as f32));
        let sf = stack_downsample(&mel).unwrap();
        assert_eq!(sf.frames.dim(), (2, 320));
        assert_eq!(sf.frames[[1, 0]], 4.0);
        assert_eq!(sf.frames[[1, 319]], 7.0);
    }

    #[test]
    fn channel_order_is_frame_major() {
        let mel = mel_from(Array2::from_shape_fn((8, 80), |(t, _)| t as f32));
        let sf = stack_downsample(&mel).unwrap();
        let expected: Vec<f32> = (0..4).flat_map(|t| std::iter::repeat_n(t as f32, 80)).collect();
        assert_eq!(sf.frames.row(0).to_vec(), expected);
    }

    #[test]
    fn three_frames_is_too_short() {
        let err = stack_downsample(&mel_from(Array2::zeros((3, 80)))).unwrap_err();
        assert!(err.to_string().contains("too short for one label frame"));
    }

    #[test]
    fn normalize_two_values() {
        let sf = StackedFeatures {
            frames: Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap(),
        };
        let out = normalize(&sf);
        assert!((out.frames[[0, 0]] + 1.0).abs() < 1e-4);
        assert!((out.frames[[1, 0]] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_goes_to_zero() {
        let sf = StackedFeatures {
            frames: Array2::from_elem((5, 3), 7.5),
        };
        assert!(normalize(&sf).frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let sf = StackedFeatures {
            frames: Array2::from_shape_vec((4, 1), vec![-1.0, 1.0, -1.0, 1.0]).unwrap(),
        };
        let out = normalize(&sf);
        for (a, b) in out.frames.iter().zip(sf.frames.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = QuantizerConfig {
            codebooks: 2,
            vocab: 8,
            dim: 4,
            input_dim: 12,
        };
        let a = QuantizerState::new(7, cfg).unwrap();
        assert_eq!(a, QuantizerState::new(7, cfg).unwrap());
        assert_ne!(a.to_bytes(), QuantizerState::new(8, cfg).unwrap().to_bytes());
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(a.projection(0).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn single_codeword_always_wins() {
        let cfg = QuantizerConfig {
            codebooks: 1,
            vocab: 1,
            dim: 3,
            input_dim: 8,
        };
        let q = QuantizerState::new(1, cfg).unwrap();
        let nf = StackedFeatures {
            frames: Array2::from_shape_fn((6, 8), |(i, j)| (i * 8 + j) as f32 - 20.0),
        };
        let labels = q.assign_labels(&nf).unwrap();
        assert!(labels.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn nearest_point_by_inspection() {
        let mut a = Array2::zeros((4, 4));
        for i in 0..4 {
            a[[i, i]] = 1.0;
        }
        let mut cb = Array2::zeros((2, 4));
        cb[[1, 0]] = 1.0;
        cb[[1, 1]] = 1.0;
        let q = QuantizerState::from_parts(0, vec![a], vec![cb]).unwrap();
        let nf = StackedFeatures {
            frames: Array2::from_shape_vec((1, 4), vec![0.9, 0.8, 0.0, 0.0]).unwrap(),
        };
        assert_eq!(q.assign_labels(&nf).unwrap().labels[[0, 0]], 1);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let a = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let cb = Array2::from_shape_vec((3, 1), vec![5.0, -1.0, 1.0]).unwrap();
        let q = QuantizerState::from_parts(0, vec![a], vec![cb]).unwrap();
        let nf = StackedFeatures {
            frames: Array2::zeros((1, 1)),
        };
        assert_eq!(q.assign_labels(&nf).unwrap().labels[[0, 0]], 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = QuantizerState::new(0, QuantizerConfig::default()).unwrap();
        let nf = StackedFeatures {
            frames: Array2::zeros((2, 10)),
        };
        assert!(matches!(q.assign_labels(&nf), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn label_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.labels");
        let labels = LabelTensor {
            labels: Array2::from_shape_fn((3, 2), |(i, j)| (i * 700 + j) as u32),
        };
        write_label_cache(&p, &labels, 2048).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"MSEQ1 3 2 2048\n"));
        assert_eq!(bytes.len(), 15 + 12);
        assert_eq!(&bytes[15..17], &0u16.to_le_bytes());
        assert_eq!(&bytes[17..19], &1u16.to_le_bytes());
        let (back, v) = read_label_cache(&p).unwrap();
        assert_eq!(back, labels);
        assert_eq!(v, 2048);
    }
}
