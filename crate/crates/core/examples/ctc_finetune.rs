//! CTC finetuning on a spelled toy corpus, then greedy and beam decoding and scoring.
//!
//! ```text
//! cargo run --release --example ctc_finetune
//! ```

use rqspeech::datapipe::Batch;
use rqspeech::encoder::EncoderConfig;
use rqspeech::finetune::{error_rate, Decoder, FinetuneConfig, Finetuner, ScoreUnit, SpecAugmentConfig, Tokenizer};
use rqspeech::frontend::log_mel;
use rqspeech::pretrain::{PretrainConfig, Pretrainer};
use rqspeech::quantizer::QuantizerConfig;
use rqspeech::synth;

fn main() -> rqspeech::Result<()> {
    let texts = synth::toy_transcripts(6, 2);
    let mels = texts
        .iter()
        .enumerate()
        .map(|(i, t)| log_mel(&synth::spell(t, i as u64)?))
        .collect::<rqspeech::Result<Vec<_>>>()?;
    let ids = (0..texts.len()).map(|i| format!("utt{i}")).collect();
    let pad = mels.iter().map(|m| m.num_frames()).max().unwrap_or(0);
    let batch = Batch::from_mels(&mels, ids, pad, 0, 0)?;

    let encoder = EncoderConfig::default();
    let mut pre = Pretrainer::new(
        encoder,
        PretrainConfig {
            warmup_steps: 20,
            quantizer: QuantizerConfig {
                codebooks: 4,
                ..QuantizerConfig::default()
            },
            ..PretrainConfig::default()
        },
        1,
    )?;
    for _ in 0..20 {
        pre.train_step(&batch)?;
    }

    let tokenizer = Tokenizer::from_transcripts(&texts);
    let targets = texts.iter().map(|t| tokenizer.encode(t)).collect::<rqspeech::Result<Vec<_>>>()?;
    let config = FinetuneConfig {
        encoder_lr: 1e-3,
        decoder_lr: 3e-3,
        warmup_steps: 100,
        freeze_steps: 100,
        spec_augment: SpecAugmentConfig::disabled(),
        ..FinetuneConfig::default()
    };
    let mut ft = Finetuner::from_pretrained(&pre.checkpoint()?, config, tokenizer, 1)?;
    let frozen = ft.encoder_hash();
    for step in 1..=400u64 {
        ft.train_step(&batch, &targets)?;
        if step == 100 {
            assert_eq!(ft.encoder_hash(), frozen, "encoder must not move while frozen");
        }
        if step % 100 == 0 {
            let hyps = (0..batch.len())
                .map(|u| Ok(ft.transcribe(&batch.mel(u), Decoder::Greedy)?.0))
                .collect::<rqspeech::Result<Vec<_>>>()?;
            println!("step {step}: CER {:.1}%", error_rate(&texts, &hyps, ScoreUnit::Char)?);
        }
    }

    for (u, text) in texts.iter().enumerate() {
        let (greedy, _) = ft.transcribe(&batch.mel(u), Decoder::Greedy)?;
        let (beam, hyp) = ft.transcribe(&batch.mel(u), Decoder::Beam(8))?;
        println!("{text:>14} | greedy {greedy:>14} | beam {beam:>14} (log p {:.2})", hyp.log_prob);
    }
    Ok(())
}
