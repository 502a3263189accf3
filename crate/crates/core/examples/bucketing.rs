//! Duration bucketing and the epoch scheduler over a small on-disk corpus.
//!
//! ```text
//! cargo run --example bucketing
//! ```

use std::sync::Arc;

use rqspeech::datapipe::{build_buckets, scan_corpus, schedule_epoch, DataConfig, Prefetcher};
use rqspeech::synth;

fn main() -> rqspeech::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| rqspeech::Error::io("tempdir", e))?;
    synth::write_babble_corpus(dir.path(), 30, 0.5, 6.0, 11)?;
    let index = scan_corpus(dir.path(), 0.3)?;
    let cfg = DataConfig {
        tokens_per_batch: 2000,
        ..DataConfig::default()
    };
    let spec = build_buckets(&index, cfg.num_buckets, cfg.tokens_per_batch, cfg.max_duration_s)?;
    println!("{:>7} {:>9} {:>7} {:>6} {:>8}", "bucket", "upper(s)", "frames", "batch", "members");
    for b in 0..spec.num_buckets() {
        let upper = spec.boundaries.get(b).map_or("inf".to_string(), |u| format!("{u:.2}"));
        println!(
            "{b:>7} {upper:>9} {:>7} {:>6} {:>8}",
            spec.max_frames[b],
            spec.batch_sizes[b],
            spec.members[b].len()
        );
    }

    let order = schedule_epoch(&spec, 0, 7);
    let buckets: Vec<usize> = order.iter().map(|d| d.bucket).collect();
    println!("epoch 0 bucket order: {buckets:?}");

    let batches = Prefetcher::new(order, Arc::new(index), Arc::new(spec), cfg, 7);
    for batch in batches.take(3) {
        let batch = batch?;
        println!("batch of {} from bucket {}: features {:?}", batch.len(), batch.bucket, batch.features.dim());
    }
    Ok(())
}
