//! Checkpoint anatomy: tensor listing, parameter counts and the three
//! initialization modes for continued pre-training.
//!
//! ```text
//! cargo run --example inspect_checkpoint
//! ```

use rqspeech::cli::describe_encoder;
use rqspeech::encoder::EncoderConfig;
use rqspeech::pretrain::{Checkpoint, InitMode, PretrainConfig, Pretrainer};

fn main() -> rqspeech::Result<()> {
    print!("{}", describe_encoder(&EncoderConfig::full_scale()));

    let encoder = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        ffn: 64,
        heads: 4,
        ..EncoderConfig::default()
    };
    let run = Pretrainer::new(encoder, PretrainConfig::default(), 9)?;
    let dir = tempfile::tempdir().map_err(|e| rqspeech::Error::io("tempdir", e))?;
    let path = dir.path().join("small.msec");
    run.checkpoint()?.save(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    println!("\n{} tensors, {} scalars, step {}", ckpt.params.len(), ckpt.params.num_scalars(), ckpt.step);
    for e in ckpt.tensor_entries().iter().take(6) {
        println!("  {:<32} {:?}", e.name, e.shape);
    }
    println!("  ...");

    // a tensor counts as restored when it matches the checkpoint but not a fresh
    // initialization with the new seed
    let fresh = Pretrainer::new(encoder, PretrainConfig::default(), 10)?;
    for mode in [InitMode::Full, InitMode::FeatureExtractorOnly, InitMode::None] {
        let next = Pretrainer::from_checkpoint(encoder, PretrainConfig::default(), 10, &ckpt, mode)?;
        let restored: Vec<&str> = next
            .params()
            .iter()
            .filter(|(name, t)| ckpt.params.get(name) == Some(*t) && fresh.params().get(name) != Some(*t))
            .map(|(name, _)| name)
            .collect();
        let prefixes: std::collections::BTreeSet<&str> =
            restored.iter().filter_map(|n| n.split('.').next()).collect();
        println!("{mode:<24} {:>3} tensors restored from {prefixes:?}", restored.len());
    }
    Ok(())
}
