//! Corpus indexing, length bucketing, batch scheduling and prefetching.

mod bucket;
mod corpus;

pub use bucket::{build_buckets, frames_for_duration, schedule_epoch, BatchDescriptor, BucketSpec};
pub use corpus::{
    crop, crop_offset, scan_corpus, CorpusIndex, Utterance, MAX_DURATION_S, MIN_DURATION_S,
};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::frontend::{load_audio, log_mel, resample, MelSpectrogram, N_MELS, SAMPLE_RATE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_buckets: usize,
    /// Mel frames per batch before rounding down to whole utterances.
    pub tokens_per_batch: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_buckets: 6,
            tokens_per_batch: 12_000,
            min_duration_s: MIN_DURATION_S,
            max_duration_s: MAX_DURATION_S,
            workers: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_buckets == 0 {
            return bad("data.num_buckets must be at least 1");
        }
        if self.tokens_per_batch == 0 {
            return bad("data.tokens_per_batch must be at least 1");
        }
        if !(self.max_duration_s > self.min_duration_s && self.min_duration_s >= 0.0) {
            return bad("data durations must satisfy 0 <= min_duration_s < max_duration_s");
        }
        if self.workers == 0 {
            return bad("data.workers must be at least 1");
        }
        Ok(())
    }
}

/// Padded log-Mel features of one scheduled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B x T_max x 80`, zero beyond each utterance's length.
    pub features: Array3<f32>,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
    pub epoch: u64,
    pub bucket: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded spectrogram of utterance `u`.
    pub fn mel(&self, u: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: self.features.slice(s![u, ..self.lengths[u], ..]).to_owned(),
        }
    }

    /// Stack spectrograms into a batch padded to `pad_to` frames.
    pub fn from_mels(
        mels: &[MelSpectrogram],
        ids: Vec<String>,
        pad_to: usize,
        epoch: u64,
        bucket: usize,
    ) -> Result<Self> {
        let mut features = Array3::zeros((mels.len(), pad_to, N_MELS));
        for (i, m) in mels.iter().enumerate() {
            if m.num_frames() > pad_to {
                return Err(Error::ShapeMismatch(format!(
                    "utterance {} has {} frames, bucket pads to {pad_to}",
                    ids[i],
                    m.num_frames()
                )));
            }
            features.slice_mut(s![i, ..m.num_frames(), ..]).assign(&m.frames);
        }
        Ok(Self {
            features,
            lengths: mels.iter().map(MelSpectrogram::num_frames).collect(),
            ids,
            epoch,
            bucket,
        })
    }
}

/// Decode, resample, crop and featurize one utterance for `epoch`.
pub fn load_features(utt: &Utterance, cfg: &DataConfig, seed: u64, epoch: u64) -> Result<MelSpectrogram> {
    let missing = |e: Error| Error::MissingUtterance {
        id: utt.id.clone(),
        reason: e.to_string(),
    };
    let w = load_audio(&utt.path).map_err(missing)?;
    let w = resample(&w, SAMPLE_RATE)?;
    let w = crop(&w, cfg.max_duration_s, seed, epoch, &utt.id);
    log_mel(&w)
}

/// Load every member of a descriptor, padded to the bucket's max frame length.
pub fn load_batch(
    desc: &BatchDescriptor,
    index: &CorpusIndex,
    spec: &BucketSpec,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Batch> {
    let mut mels = Vec::with_capacity(desc.members.len());
    let mut ids = Vec::with_capacity(desc.members.len());
    for &m in &desc.members {
        let utt = &index.entries[m];
        mels.push(load_features(utt, cfg, seed, desc.epoch)?);
        ids.push(utt.id.clone());
    }
    Batch::from_mels(&mels, ids, spec.max_frames[desc.bucket], desc.epoch, desc.bucket)
}

/// Loads descriptors on a pool of worker threads and yields batches in descriptor
/// order.
pub struct Prefetcher {
    rx: mpsc::Receiver<(usize, Result<Batch>)>,
    pending: BTreeMap<usize, Result<Batch>>,
    next: usize,
    total: usize,
    stop: Arc<AtomicBool>,
    workers: Vec<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(
        descriptors: Vec<BatchDescriptor>,
        index: Arc<CorpusIndex>,
        spec: Arc<BucketSpec>,
        cfg: DataConfig,
        seed: u64,
    ) -> Self {
        let total = descriptors.len();
        let descriptors = Arc::new(descriptors);
        let cursor = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::sync_channel(cfg.workers.max(1) * 2);
        let workers = (0..cfg.workers.max(1))
            .map(|_| {
                let (descriptors, cursor, stop, tx) =
                    (descriptors.clone(), cursor.clone(), stop.clone(), tx.clone());
                let (index, spec, cfg) = (index.clone(), spec.clone(), cfg.clone());
                thread::spawn(move || loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = cursor.fetch_add(1, Ordering::Relaxed);
                    let Some(desc) = descriptors.get(i) else { break };
                    let batch = load_batch(desc, &index, &spec, &cfg, seed);
                    if tx.send((i, batch)).is_err() {
                        break;
                    }
                })
            })
            .collect();
        Self {
            rx,
            pending: BTreeMap::new(),
            next: 0,
            total,
            stop,
            workers,
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        loop {
            if let Some(b) = self.pending.remove(&self.next) {
                self.next += 1;
                return Some(b);
            }
            match self.rx.recv() {
                Ok((i, b)) => {
                    self.pending.insert(i, b);
                }
                Err(_) => {
                    self.next = self.total;
                    return Some(Err(Error::InvalidArgument("prefetch workers exited early".into())));
                }
            }
        }
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        while self.rx.try_recv().is_ok() {}
        let (_, dead) = mpsc::sync_channel::<(usize, Result<Batch>)>(0);
        drop(std::mem::replace(&mut self.rx, dead));
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
