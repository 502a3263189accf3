use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use super::CorpusIndex;
use crate::frontend::{frame_count, SAMPLE_RATE};
use crate::rng;
use crate::{Error, Result};

/// Mel frames of a 16 kHz utterance of `duration_s` after cropping to `max_s`.
pub fn frames_for_duration(duration_s: f64, max_s: f64) -> usize {
    let samples = (duration_s.min(max_s) * SAMPLE_RATE as f64).round() as usize;
    frame_count(samples)
}

/// Length buckets over a corpus index.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketSpec {
    /// Ascending upper duration bounds of every bucket except the last.
    pub boundaries: Vec<f64>,
    /// Longest member duration per bucket (seconds, before cropping).
    pub max_duration: Vec<f64>,
    /// Padded frame length per bucket.
    pub max_frames: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    /// Index positions of each bucket's members, ascending.
    pub members: Vec<Vec<usize>>,
}

impl BucketSpec {
    pub fn num_buckets(&self) -> usize {
        self.members.len()
    }

    /// Batches per epoch in each bucket (last partial batch included).
    pub fn batch_counts(&self) -> Vec<usize> {
        self.members
            .iter()
            .zip(&self.batch_sizes)
            .map(|(m, &b)| m.len().div_ceil(b))
            .collect()
    }
}

/// Split the index into up to `num_buckets` equal-count duration groups; each
/// bucket's batch size is `max(1, tokens_per_batch / max_frames)`.
///
/// Groups that would share a boundary are merged with a warning.
pub fn build_buckets(
    index: &CorpusIndex,
    num_buckets: usize,
    tokens_per_batch: usize,
    max_s: f64,
) -> Result<BucketSpec> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("cannot bucket an empty corpus".into()));
    }
    if num_buckets == 0 {
        return Err(Error::InvalidArgument("num_buckets must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        index.entries[a]
            .duration_s
            .total_cmp(&index.entries[b].duration_s)
            .then(a.cmp(&b))
    });
    let n = order.len();
    let mut upper: Vec<f64> = (0..num_buckets)
        .filter_map(|k| {
            let end = (k + 1) * n / num_buckets;
            let start = k * n / num_buckets;
            (end > start).then(|| index.entries[order[end - 1]].duration_s)
        })
        .collect();
    let requested = upper.len();
    upper.dedup();
    if upper.len() < num_buckets {
        warn!(
            "{} distinct bucket boundaries for {num_buckets} requested buckets ({requested} non-empty groups); merged",
            upper.len()
        );
    }
    let mut members = vec![Vec::new(); upper.len()];
    for (i, u) in index.entries.iter().enumerate() {
        let b = upper.partition_point(|&x| x < u.duration_s).min(upper.len() - 1);
        members[b].push(i);
    }
    let max_duration: Vec<f64> = members
        .iter()
        .map(|m| {
            m.iter()
                .map(|&i| index.entries[i].duration_s)
                .fold(0.0, f64::max)
        })
        .collect();
    let max_frames: Vec<usize> = max_duration
        .iter()
        .map(|&d| frames_for_duration(d, max_s).max(1))
        .collect();
    let batch_sizes = max_frames
        .iter()
        .map(|&f| (tokens_per_batch / f).max(1))
        .collect();
    upper.pop();
    Ok(BucketSpec {
        boundaries: upper,
        max_duration,
        max_frames,
        batch_sizes,
        members,
    })
}

/// One scheduled batch: which utterances, from which bucket, in which epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub epoch: u64,
    pub bucket: usize,
    /// Index positions of the members.
    pub members: Vec<usize>,
}

/// Shuffle each bucket, cut it into batches, then interleave the buckets by
/// repeatedly drawing one with probability proportional to its remaining batches.
pub fn schedule_epoch(spec: &BucketSpec, epoch: u64, seed: u64) -> Vec<BatchDescriptor> {
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = spec
        .members
        .iter()
        .zip(&spec.batch_sizes)
        .enumerate()
        .map(|(b, (m, &size))| {
            let mut m = m.clone();
            let mut r = rng::stream("datapipe.shuffle", &[seed.into(), epoch.into(), (b as u64).into()]);
            m.shuffle(&mut r);
            m.chunks(size).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let mut r = rng::stream("datapipe.schedule", &[seed.into(), epoch.into()]);
    let mut remaining: usize = queues.iter().map(|q| q.len()).sum();
    let mut out = Vec::with_capacity(remaining);
    while remaining > 0 {
        let mut pick = r.random_range(0..remaining);
        let bucket = queues
            .iter()
            .position(|q| {
                if pick < q.len() {
                    true
                } else {
                    pick -= q.len();
                    false
                }
            })
            .expect("draw below remaining count");
        let members = queues[bucket].pop_front().expect("non-empty queue");
        out.push(BatchDescriptor {
            epoch,
            bucket,
            members,
        });
        remaining -= 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{Utterance, MAX_DURATION_S};

    fn index(durations: &[f64]) -> CorpusIndex {
        CorpusIndex {
            entries: durations
                .iter()
                .enumerate()
                .map(|(i, &d)| Utterance {
                    id: format!("u{i:04}"),
                    path: format!("u{i}.wav").into(),
                    duration_s: d,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn sextiles_of_twelve() {
        let d: Vec<f64> = (1..=12).rev().map(f64::from).collect();
        let spec = build_buckets(&index(&d), 6, 4000, MAX_DURATION_S).unwrap();
        assert_eq!(spec.boundaries, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert!(spec.members.iter().all(|m| m.len() == 2));
        assert_eq!(spec.max_duration, vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn identical_durations_merge() {
        let spec = build_buckets(&index(&[3.0; 20]), 6, 4000, MAX_DURATION_S).unwrap();
        assert_eq!(spec.num_buckets(), 1);
        assert!(spec.boundaries.is_empty());
        assert_eq!(spec.members[0].len(), 20);
    }

    #[test]
    fn batch_size_is_inverse_to_length() {
        // 10.015 s -> 1000 frames, 20.015 s -> 2000 frames
        let spec = build_buckets(&index(&[10.015, 20.015]), 2, 4000, MAX_DURATION_S).unwrap();
        assert_eq!(spec.max_frames, vec![1000, 2000]);
        assert_eq!(spec.batch_sizes, vec![4, 2]);
        let tiny = build_buckets(&index(&[30.0]), 1, 10, MAX_DURATION_S).unwrap();
        assert_eq!(tiny.batch_sizes, vec![1]);
    }

    #[test]
    fn long_utterances_bucket_at_crop_length() {
        let spec = build_buckets(&index(&[55.0]), 1, 8000, MAX_DURATION_S).unwrap();
        assert_eq!(spec.max_frames, vec![frame_count(640_000)]);
    }

    #[test]
    fn schedule_is_a_partition() {
        let d: Vec<f64> = (0..137).map(|i| 0.5 + (i * 37 % 101) as f64 * 0.1).collect();
        let idx = index(&d);
        let spec = build_buckets(&idx, 6, 3000, MAX_DURATION_S).unwrap();
        for epoch in 0..3 {
            let sched = schedule_epoch(&spec, epoch, 9);
            assert_eq!(sched.len(), spec.batch_counts().iter().sum::<usize>());
            let mut seen: Vec<usize> = sched.iter().flat_map(|b| b.members.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..idx.len()).collect::<Vec<_>>());
            for b in &sched {
                assert!(b.members.len() <= spec.batch_sizes[b.bucket]);
                assert!(b.members.iter().all(|m| spec.members[b.bucket].contains(m)));
            }
        }
        assert_ne!(schedule_epoch(&spec, 0, 9), schedule_epoch(&spec, 1, 9));
        assert_eq!(schedule_epoch(&spec, 2, 9), schedule_epoch(&spec, 2, 9));
    }

    #[test]
    fn single_bucket_is_sequential_batches() {
        let spec = build_buckets(&index(&[2.0; 10]), 6, frames_for_duration(2.0, 40.0) * 3, MAX_DURATION_S).unwrap();
        let sched = schedule_epoch(&spec, 0, 1);
        let sizes: Vec<usize> = sched.iter().map(|b| b.members.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn tokens_per_batch_roughly_constant() {
        let d: Vec<f64> = (0..300).map(|i| 0.4 + i as f64 * 0.05).collect();
        let spec = build_buckets(&index(&d), 6, 20_000, MAX_DURATION_S).unwrap();
        for (&b, &f) in spec.batch_sizes.iter().zip(&spec.max_frames) {
            assert!(b * f <= 20_000 && 20_000 - b * f < f, "{b} x {f}");
        }
    }
}
