//! CTC finetuning: character tokenizer, linear CTC head on the encoder, SpecAugment,
//! an initial encoder freeze with separate encoder and decoder learning rates,
//! decoding and error-rate scoring.

mod ctc;
mod decode;
mod score;
mod specaug;
mod tokenizer;

pub use ctc::{collapse, ctc_loss, ctc_loss_and_grad, log_softmax, min_frames};
pub use decode::{beam_decode, greedy_decode, Hypothesis};
pub use score::{edit_distance, error_rate, errors, ScoreUnit};
pub use specaug::{apply_plan, draw_plan, spec_augment, AugmentPlan, SpecAugmentConfig};
pub use tokenizer::{Tokenizer, BLANK};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, ParamSet};
use crate::datapipe::Batch;
use crate::encoder::{forward_graph, init_linear, EncoderConfig};
use crate::frontend::MelSpectrogram;
use crate::pretrain::{check_complete, lr_schedule, restore_tensors, Adam, AdamConfig, Checkpoint, HEAD};
use crate::rng;
use crate::{Error, Result};

pub const CTC_HEAD: &str = "ctc";
pub const LAYER_WEIGHTS: &str = "layer_weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub warmup_steps: u64,
    /// Steps during which only the decoder (CTC head and layer weights) trains.
    pub freeze_steps: u64,
    pub total_steps: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub spec_augment: SpecAugmentConfig,
    /// Feed the head a learned softmax-weighted sum of all layer outputs instead of
    /// the top layer.
    pub layer_weighted: bool,
    pub checkpoint_every: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::preset("ls100").expect("known preset")
    }
}

impl FinetuneConfig {
    pub const PRESETS: [&'static str; 4] = ["ls100", "ls960", "tedliumv3", "nsc"];

    /// Learning rates, warm-up and freeze lengths of a named finetuning setup.
    pub fn preset(name: &str) -> Option<Self> {
        let (encoder_lr, decoder_lr, warmup_steps, freeze_steps) = match name.to_ascii_lowercase().as_str() {
            "ls100" => (2e-4, 2e-3, 1000, 1500),
            "ls960" => (1e-4, 1e-3, 6000, 12000),
            "tedliumv3" | "tedlium" => (1e-4, 1e-3, 3000, 6000),
            "nsc" => (1e-4, 1e-3, 3000, 6000),
            _ => return None,
        };
        Some(Self {
            encoder_lr,
            decoder_lr,
            warmup_steps,
            freeze_steps,
            total_steps: 20_000,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            spec_augment: SpecAugmentConfig::default(),
            layer_weighted: false,
            checkpoint_every: 500,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.encoder_lr > 0.0 && self.decoder_lr > 0.0) {
            return Err(Error::Config("finetune learning rates must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("finetune.warmup_steps must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("finetune.clip_norm must be positive".into()));
        }
        self.adam.validate()?;
        self.spec_augment.validate()
    }

    /// `(encoder, decoder)` rates at `step`; the encoder has none while frozen and
    /// its schedule starts when the freeze ends.
    pub fn learning_rates(&self, step: u64) -> (Option<f64>, f64) {
        let enc = (step > self.freeze_steps)
            .then(|| lr_schedule(step - self.freeze_steps, self.encoder_lr, self.warmup_steps));
        (enc, lr_schedule(step, self.decoder_lr, self.warmup_steps))
    }
}

/// Parameters trained from the first step.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("ctc.") || name == LAYER_WEIGHTS
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneMetrics {
    pub step: u64,
    /// Mean per-utterance CTC loss in nats.
    pub loss: f64,
    pub encoder_lr: Option<f64>,
    pub decoder_lr: f64,
    /// Utterances dropped because their transcript needs more frames than they have.
    pub infeasible: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FinetuneOutcome {
    Trained(FinetuneMetrics),
    /// Every utterance in the batch was infeasible; nothing changed.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Beam(usize),
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    finetune: FinetuneConfig,
    tokenizer: String,
}

/// Encoder plus CTC head under finetuning.
pub struct Finetuner {
    pub encoder: EncoderConfig,
    pub config: FinetuneConfig,
    pub tokenizer: Tokenizer,
    pub seed: u64,
    params: Arc<ParamSet<f32>>,
    adam: Adam<f32>,
    step: u64,
}

impl Finetuner {
    /// Randomly initialized encoder and head.
    pub fn new(encoder: EncoderConfig, config: FinetuneConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        encoder.validate()?;
        config.validate()?;
        let mut params = encoder.init_params(seed);
        init_linear(&mut params, seed, CTC_HEAD, encoder.hidden, tokenizer.vocab_size());
        Ok(Self {
            adam: Adam::new(&params, config.adam),
            params: Arc::new(params),
            encoder,
            config,
            tokenizer,
            seed,
            step: 0,
        })
    }

    /// Encoder weights from a pre-training checkpoint; a fresh CTC head.
    pub fn from_pretrained(ckpt: &Checkpoint, config: FinetuneConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let mut run = Self::new(ckpt.encoder, config, tokenizer, seed)?;
        let params = Arc::get_mut(&mut run.params).expect("fresh parameters are unshared");
        let encoder_only = |n: &str| !n.starts_with("ctc.") && !n.starts_with(&format!("{HEAD}."));
        let mut wanted = ParamSet::new();
        for (name, t) in params.iter().filter(|(n, _)| encoder_only(n)) {
            wanted.insert(name, t.clone());
        }
        check_complete(&wanted, &ckpt.params)?;
        restore_tensors(params, &ckpt.params, encoder_only)?;
        Ok(run)
    }

    /// Resume a run saved by [`Finetuner::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "finetune" {
            return Err(Error::InvalidArgument(format!(
                "expected a finetune checkpoint, found kind {:?}",
                ckpt.kind
            )));
        }
        let saved: SavedConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("finetune config: {e}")))?;
        let tokenizer = Tokenizer::from_symbols(&saved.tokenizer)?;
        let mut run = Self::new(ckpt.encoder, saved.finetune, tokenizer, ckpt.seed)?;
        let params = Arc::get_mut(&mut run.params).expect("fresh parameters are unshared");
        check_complete(params, &ckpt.params)?;
        restore_tensors(params, &ckpt.params, |_| true)?;
        if let Some(opt) = &ckpt.optimizer {
            restore_tensors(&mut run.adam.m, &opt.m, |_| true)?;
            restore_tensors(&mut run.adam.v, &opt.v, |_| true)?;
            for (id, name) in params.names().iter().enumerate() {
                if let Some(src) = opt.m.id(name) {
                    run.adam.steps[id] = opt.steps[src];
                }
            }
        }
        run.step = ckpt.step;
        Ok(run)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let saved = SavedConfig {
            finetune: self.config.clone(),
            tokenizer: self.tokenizer.symbols(),
        };
        Ok(Checkpoint {
            kind: "finetune".into(),
            step: self.step,
            seed: self.seed,
            encoder: self.encoder,
            config: serde_json::to_value(saved).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            params: (*self.params).clone(),
            optimizer: Some(self.adam.clone()),
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// SHA-256 over the names and bytes of every encoder tensor.
    pub fn encoder_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !is_decoder_param(n)) {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Head input and CTC logits for one utterance; encoder states are detached
    /// when `frozen`.
    fn logits(
        &self,
        g: &mut Graph<f32>,
        mel: ndarray::ArrayView2<f32>,
        frozen: bool,
        dropout: Option<&mut rng::Stream>,
    ) -> Result<crate::autodiff::Var> {
        let vars = forward_graph(g, &self.encoder, mel, dropout)?;
        let mut states = vars.states;
        if frozen {
            let values: Vec<Array2<f32>> = states.iter().map(|&s| g.value(s).clone()).collect();
            states = values.into_iter().map(|v| g.input(v)).collect();
        }
        let x = if self.config.layer_weighted {
            let w = g.param(LAYER_WEIGHTS);
            g.weighted_sum(&states, w)
        } else {
            *states.last().expect("at least the extractor state")
        };
        let w = g.param(&format!("{CTC_HEAD}.weight"));
        let b = g.param(&format!("{CTC_HEAD}.bias"));
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }

    /// Frame log probabilities `L x V` for one utterance, without augmentation.
    pub fn logprobs(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        let mut g = Graph::new(self.params.clone());
        let logits = self.logits(&mut g, mel.frames.view(), true, None)?;
        Ok(log_softmax(g.value(logits).mapv(f64::from).view()))
    }

    pub fn transcribe(&self, mel: &MelSpectrogram, decoder: Decoder) -> Result<(String, Hypothesis)> {
        let lp = self.logprobs(mel)?;
        let hyp = match decoder {
            Decoder::Greedy => greedy_decode(lp.view()),
            Decoder::Beam(w) => beam_decode(lp.view(), w),
        };
        Ok((self.tokenizer.decode(&hyp.tokens), hyp))
    }

    /// One optimizer step; `targets[u]` is the token sequence of utterance `u`.
    pub fn train_step(&mut self, batch: &Batch, targets: &[Vec<u32>]) -> Result<FinetuneOutcome> {
        if targets.len() != batch.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} transcripts for {} utterances",
                targets.len(),
                batch.len()
            )));
        }
        let step = self.step + 1;
        let (enc_lr, dec_lr) = self.config.learning_rates(step);
        let frozen = enc_lr.is_none();
        let work = |u: usize| -> Result<Option<(f64, Gradients<f32>)>> {
            let id = batch.ids[u].as_str();
            let mut sr = rng::stream("finetune.specaug", &[self.seed.into(), step.into(), id.into()]);
            let mel = spec_augment(&batch.mel(u), &self.config.spec_augment, &mut sr);
            let mut g = Graph::new(self.params.clone());
            let mut dr = rng::stream("finetune.dropout", &[self.seed.into(), step.into(), id.into()]);
            let dropout = (self.encoder.dropout > 0.0 && !frozen).then_some(&mut dr);
            let logits = self.logits(&mut g, mel.frames.view(), frozen, dropout)?;
            let lp = log_softmax(g.value(logits).mapv(f64::from).view());
            match ctc_loss_and_grad(lp.view(), &targets[u]) {
                Ok((loss, grad)) => {
                    let node = g.precomputed(logits, loss as f32, grad.mapv(|v| v as f32));
                    Ok(Some((loss, g.backward(node))))
                }
                Err(Error::InfeasibleAlignment(msg)) => {
                    warn!("skipping {id}: {msg}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };
        let chunk = rayon::current_num_threads().max(1);
        let idx: Vec<usize> = (0..batch.len()).collect();
        let mut loss = 0.0;
        let mut used = 0usize;
        let mut grads = Gradients::empty(self.params.len());
        for part in idx.chunks(chunk) {
            let results: Vec<_> = part.par_iter().map(|&u| work(u)).collect();
            for r in results {
                if let Some((l, gr)) = r? {
                    loss += l;
                    used += 1;
                    grads.accumulate(gr);
                }
            }
        }
        if used == 0 {
            return Ok(FinetuneOutcome::Skipped);
        }
        loss /= used as f64;
        grads.scale(1.0 / used as f32);
        if !loss.is_finite() || !grads.is_finite() {
            warn!("non-finite loss at step {step}; parameters left unchanged");
            return Err(Error::NonFiniteLoss { step });
        }
        let norm = grads.global_norm();
        if norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / norm) as f32);
        }
        let params = Arc::get_mut(&mut self.params).expect("no graph outlives a step");
        let decoder: Vec<bool> = params.names().iter().map(|n| is_decoder_param(n)).collect();
        self.adam
            .update(params, &grads, |id| if decoder[id] { Some(dec_lr) } else { enc_lr });
        self.step = step;
        Ok(FinetuneOutcome::Trained(FinetuneMetrics {
            step,
            loss,
            encoder_lr: enc_lr,
            decoder_lr: dec_lr,
            infeasible: batch.len() - used,
        }))
    }
}

/// Read `id<TAB>text` lines. Blank lines are ignored; ids must be unique.
pub fn read_transcripts(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line.split_once('\t').unwrap_or((line, ""));
        if out.insert(id.to_string(), t.to_string()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: duplicate id {id:?}",
                path.display(),
                n + 1
            )));
        }
    }
    Ok(out)
}

pub fn write_transcripts<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let path = path.as_ref();
    let body: String = rows.into_iter().map(|(id, t)| format!("{id}\t{t}\n")).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::{PretrainConfig, Pretrainer};
    use crate::quantizer::QuantizerConfig;
    use crate::synth;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden: 16,
            ffn: 32,
            heads: 2,
            conv_kernel: 3,
            dropout: 0.0,
        }
    }

    fn setup(freeze: u64) -> (Finetuner, Batch, Vec<Vec<u32>>) {
        let texts = ["ab", "ba a"];
        let tok = Tokenizer::from_transcripts(&texts);
        let cfg = FinetuneConfig {
            freeze_steps: freeze,
            warmup_steps: 5,
            ..FinetuneConfig::default()
        };
        let pre = Pretrainer::new(
            tiny(),
            PretrainConfig {
                quantizer: QuantizerConfig {
                    codebooks: 1,
                    vocab: 8,
                    ..QuantizerConfig::default()
                },
                ..PretrainConfig::default()
            },
            2,
        )
        .unwrap();
        let ft = Finetuner::from_pretrained(&pre.checkpoint().unwrap(), cfg, tok.clone(), 4).unwrap();
        let mels: Vec<_> = (0..2).map(|i| synth::random_mel(80, i)).collect();
        let batch = Batch::from_mels(&mels, vec!["x".into(), "y".into()], 80, 0, 0).unwrap();
        let targets = texts.iter().map(|t| tok.encode(t).unwrap()).collect();
        (ft, batch, targets)
    }

    #[test]
    fn presets() {
        let d = FinetuneConfig::default();
        assert_eq!((d.encoder_lr, d.decoder_lr, d.warmup_steps, d.freeze_steps), (2e-4, 2e-3, 1000, 1500));
        let l = FinetuneConfig::preset("LS960").unwrap();
        assert_eq!((l.encoder_lr, l.decoder_lr, l.warmup_steps, l.freeze_steps), (1e-4, 1e-3, 6000, 12000));
        for p in ["tedliumv3", "nsc"] {
            let c = FinetuneConfig::preset(p).unwrap();
            assert_eq!((c.encoder_lr, c.decoder_lr, c.warmup_steps, c.freeze_steps), (1e-4, 1e-3, 3000, 6000));
        }
        assert!(FinetuneConfig::preset("wsj").is_none());
    }

    #[test]
    fn encoder_schedule_starts_after_freeze() {
        let c = FinetuneConfig::default();
        assert_eq!(c.learning_rates(1500).0, None);
        assert_eq!(c.learning_rates(1501).0, Some(lr_schedule(1, 2e-4, 1000)));
        assert_eq!(c.learning_rates(2500).0, Some(2e-4));
        assert_eq!(c.learning_rates(1000).1, 2e-3);
    }

    #[test]
    fn freeze_contract() {
        let (mut ft, batch, targets) = setup(2);
        let h0 = ft.encoder_hash();
        let head0 = ft.params().get("ctc.weight").unwrap().clone();
        for _ in 0..2 {
            ft.train_step(&batch, &targets).unwrap();
            assert_eq!(ft.encoder_hash(), h0);
        }
        assert_ne!(ft.params().get("ctc.weight").unwrap(), &head0);
        ft.train_step(&batch, &targets).unwrap();
        assert_ne!(ft.encoder_hash(), h0);
    }

    #[test]
    fn pretrained_encoder_is_copied() {
        let (ft, _, _) = setup(0);
        let pre = Pretrainer::new(
            tiny(),
            PretrainConfig {
                quantizer: QuantizerConfig {
                    codebooks: 1,
                    vocab: 8,
                    ..QuantizerConfig::default()
                },
                ..PretrainConfig::default()
            },
            2,
        )
        .unwrap();
        for (name, t) in ft.params().iter() {
            if !name.starts_with("ctc.") {
                assert_eq!(pre.params().get(name).unwrap(), t, "{name}");
            }
        }
        assert!(ft.params().get("head.weight").is_none());
    }

    #[test]
    fn checkpoint_round_trip_and_infeasible_skip() {
        let (mut ft, batch, targets) = setup(1);
        ft.train_step(&batch, &targets).unwrap();
        let ck = ft.checkpoint().unwrap();
        let back = Finetuner::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params(), ft.params());
        assert_eq!(back.tokenizer, ft.tokenizer);
        assert_eq!(back.step(), 1);

        let long = vec![vec![1u32; 30], vec![2u32; 30]];
        let before = ft.params().clone();
        assert_eq!(ft.train_step(&batch, &long).unwrap(), FinetuneOutcome::Skipped);
        assert_eq!(ft.params(), &before);
    }

    #[test]
    fn transcripts_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write_transcripts(&p, [("a", "hello there"), ("b", "")]).unwrap();
        let m = read_transcripts(&p).unwrap();
        assert_eq!(m["a"], "hello there");
        assert_eq!(m["b"], "");
        fs::write(&p, "a\tx\na\ty\n").unwrap();
        assert!(read_transcripts(&p).is_err());
    }
}
