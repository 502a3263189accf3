//! A short masked-prediction pre-training run on synthetic audio, with metrics and a
//! checkpoint.
//!
//! ```text
//! cargo run --release --example pretrain_loop
//! ```

use std::sync::Arc;

use rqspeech::datapipe::{build_buckets, scan_corpus, schedule_epoch, DataConfig, Prefetcher};
use rqspeech::encoder::EncoderConfig;
use rqspeech::pretrain::{Checkpoint, PretrainConfig, Pretrainer, StepOutcome};
use rqspeech::quantizer::QuantizerConfig;
use rqspeech::synth;

fn main() -> rqspeech::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| rqspeech::Error::io("tempdir", e))?;
    synth::write_babble_corpus(dir.path(), 16, 1.0, 2.0, 5)?;
    let index = Arc::new(scan_corpus(dir.path(), 0.3)?);
    let data = DataConfig {
        num_buckets: 2,
        tokens_per_batch: 1600,
        ..DataConfig::default()
    };
    let spec = Arc::new(build_buckets(&index, data.num_buckets, data.tokens_per_batch, data.max_duration_s)?);

    let config = PretrainConfig {
        warmup_steps: 50,
        quantizer: QuantizerConfig {
            codebooks: 4,
            ..QuantizerConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut trainer = Pretrainer::new(EncoderConfig::default(), config, 1)?;
    let steps = 60;
    'outer: for epoch in 0.. {
        let order = schedule_epoch(&spec, epoch, 1);
        for batch in Prefetcher::new(order, index.clone(), spec.clone(), data.clone(), 1) {
            match trainer.train_step(&batch?)? {
                StepOutcome::Trained(m) if m.step % 10 == 0 => println!(
                    "step {:>3} loss {:.3} lr {:.2e} masked label frames {}",
                    m.step, m.loss, m.learning_rate, m.masked_label_frames
                ),
                _ => {}
            }
            if trainer.step() >= steps {
                break 'outer;
            }
        }
    }

    let path = dir.path().join("pretrain.msec");
    trainer.checkpoint()?.save(&path)?;
    let back = Checkpoint::load(&path)?;
    println!("saved step {} with {} tensors", back.step, back.params.len());
    Ok(())
}
