//! Frozen random-projection quantizer: labels for an utterance, codebook usage and
//! the on-disk label cache.
//!
//! ```text
//! cargo run --example quantize_labels
//! ```

use rqspeech::quantizer::{read_label_cache, write_label_cache, QuantizerConfig, QuantizerState};
use rqspeech::{frontend::log_mel, synth};

fn main() -> rqspeech::Result<()> {
    let config = QuantizerConfig::default();
    let q = QuantizerState::new(42, config)?;
    println!(
        "{} codebooks x {} codewords, projection {} -> {}",
        config.codebooks, config.vocab, config.input_dim, config.dim
    );
    println!("fingerprint {}", q.fingerprint());

    let mel = log_mel(&synth::babble(2.0, 1))?;
    let labels = q.labels_for(&mel)?;
    println!("{} Mel frames -> {} label frames", mel.num_frames(), labels.len());
    for j in 0..3 {
        let first: Vec<u32> = labels.labels.column(j).iter().take(10).copied().collect();
        println!("codebook {j}: {first:?} ...");
    }

    let mut distinct: Vec<u32> = labels.labels.column(0).to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    println!("codebook 0 uses {} distinct codewords in this utterance", distinct.len());

    // the same seed always rebuilds the same quantizer
    assert_eq!(QuantizerState::new(42, config)?.labels_for(&mel)?, labels);

    let dir = tempfile::tempdir().map_err(|e| rqspeech::Error::io("tempdir", e))?;
    let path = dir.path().join("utt.lab");
    write_label_cache(&path, &labels, config.vocab)?;
    let (back, vocab) = read_label_cache(&path)?;
    assert_eq!(back, labels);
    println!("cache round trip ok ({} bytes, vocab {vocab})", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    Ok(())
}
