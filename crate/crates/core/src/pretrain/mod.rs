//! Masked-prediction pre-training: multi-softmax loss over quantizer labels, Adam
//! with an inverse-square-root schedule, checkpoints and metrics.

mod checkpoint;
mod loss;
mod optim;

pub use checkpoint::{check_complete, restore_tensors, Checkpoint, InitMode, TensorEntry, MAGIC, VERSION};
pub use loss::{codebook_utilization, multi_softmax_loss, LossItem};
pub use optim::{lr_schedule, Adam, AdamConfig};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamSet};
use crate::datapipe::Batch;
use crate::encoder::{forward_graph, init_linear, output_len, EncoderConfig};
use crate::frontend::MelSpectrogram;
use crate::masking::{apply_mask, sample_mask, MaskConfig};
use crate::quantizer::{LabelTensor, QuantizerConfig, QuantizerState};
use crate::rng;
use crate::{Error, Result};

pub const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    /// Quantizer seed; the run seed when absent.
    pub quantizer_seed: Option<u64>,
    pub mask: MaskConfig,
    pub quantizer: QuantizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 8e-4,
            warmup_steps: 4000,
            total_steps: 10_000,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            checkpoint_every: 500,
            quantizer_seed: None,
            mask: MaskConfig::default(),
            quantizer: QuantizerConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("pretrain.peak_lr must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("pretrain.warmup_steps must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("pretrain.clip_norm must be positive".into()));
        }
        self.adam.validate()?;
        self.mask.validate()?;
        self.quantizer.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// What one training step observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub learning_rate: f64,
    pub masked_label_frames: usize,
    pub codebook_utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Trained(StepMetrics),
    /// No masked label frame in the batch; nothing changed.
    Skipped,
}

/// Masked inputs and loss positions for one utterance.
struct Prepared {
    input: Array2<f32>,
    targets: Vec<(usize, Vec<u32>)>,
}

/// Encoder, loss head, optimizer and frozen quantizer of a pre-training run.
pub struct Pretrainer {
    pub encoder: EncoderConfig,
    pub config: PretrainConfig,
    pub seed: u64,
    params: Arc<ParamSet<f32>>,
    adam: Adam<f32>,
    step: u64,
    quantizer: QuantizerState,
}

/// Fresh encoder plus loss head for `(encoder, quantizer)` sizes.
pub fn fresh_params(encoder: &EncoderConfig, quantizer: &QuantizerConfig, seed: u64) -> ParamSet<f32> {
    let mut ps = encoder.init_params(seed);
    init_linear(&mut ps, seed, HEAD, encoder.hidden, quantizer.codebooks * quantizer.vocab);
    ps
}

impl Pretrainer {
    pub fn new(encoder: EncoderConfig, config: PretrainConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        config.validate()?;
        let quantizer = QuantizerState::new(config.quantizer_seed.unwrap_or(seed), config.quantizer)?;
        let params = fresh_params(&encoder, &config.quantizer, seed);
        Ok(Self {
            adam: Adam::new(&params, config.adam),
            params: Arc::new(params),
            encoder,
            config,
            seed,
            step: 0,
            quantizer,
        })
    }

    /// Start a run from a checkpoint. The quantizer always comes from this run's
    /// seed and configuration.
    pub fn from_checkpoint(
        encoder: EncoderConfig,
        config: PretrainConfig,
        seed: u64,
        ckpt: &Checkpoint,
        mode: InitMode,
    ) -> Result<Self> {
        let mut run = Self::new(encoder, config, seed)?;
        let params = Arc::get_mut(&mut run.params).expect("fresh parameters are unshared");
        match mode {
            InitMode::None => {}
            InitMode::FeatureExtractorOnly => {
                restore_tensors(params, &ckpt.params, |n| n.starts_with("extractor."))?;
            }
            InitMode::Full => {
                check_complete(params, &ckpt.params)?;
                restore_tensors(params, &ckpt.params, |_| true)?;
                if let Some(opt) = &ckpt.optimizer {
                    restore_tensors(&mut run.adam.m, &opt.m, |_| true)?;
                    restore_tensors(&mut run.adam.v, &opt.v, |_| true)?;
                    for (id, name) in params.names().iter().enumerate() {
                        let src = opt.m.id(name).expect("checked complete");
                        run.adam.steps[id] = opt.steps[src];
                    }
                }
                run.step = ckpt.step;
            }
        }
        Ok(run)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "pretrain".into(),
            step: self.step,
            seed: self.seed,
            encoder: self.encoder,
            config: serde_json::to_value(&self.config).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            params: (*self.params).clone(),
            optimizer: Some(self.adam.clone()),
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn quantizer(&self) -> &QuantizerState {
        &self.quantizer
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        lr_schedule(self.step + 1, self.config.peak_lr, self.config.warmup_steps)
    }

    /// Quantizer labels of every (unmasked) utterance in the batch.
    pub fn labels(&self, batch: &Batch) -> Result<Vec<LabelTensor>> {
        (0..batch.len())
            .map(|u| self.quantizer.labels_for(&batch.mel(u)))
            .collect()
    }

    fn prepare(&self, batch: &Batch, labels: &[LabelTensor]) -> Result<Vec<Prepared>> {
        if labels.len() != batch.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} label tensors for {} utterances",
                labels.len(),
                batch.len()
            )));
        }
        let n = self.config.quantizer.codebooks;
        let mut out = Vec::with_capacity(batch.len());
        for (u, lab) in labels.iter().enumerate() {
            let mel = batch.mel(u);
            let t = mel.num_frames();
            let l = output_len(t);
            if lab.len() != l || lab.codebooks() != n {
                return Err(Error::ShapeMismatch(format!(
                    "utterance {}: labels {:?} for {l} label frames and {n} codebooks",
                    batch.ids[u],
                    lab.labels.dim()
                )));
            }
            let id = &batch.ids[u];
            let mut mr = rng::utterance_stream("pretrain.mask", self.seed, batch.epoch, id);
            let plan = sample_mask(t, &self.config.mask, &mut mr);
            let mut nr = rng::utterance_stream("pretrain.noise", self.seed, batch.epoch, id);
            let masked = apply_mask(&mel, &plan, &self.config.mask, &mut nr)?;
            let targets = plan.target_mask[..l]
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(r, _)| (r, lab.labels.row(r).to_vec()))
                .collect();
            out.push(Prepared {
                input: masked.frames,
                targets,
            });
        }
        Ok(out)
    }

    /// Loss and gradients over prepared utterances, accumulated in batch order.
    fn loss_and_grads(&self, prepared: &[Prepared], step: u64, ids: &[String]) -> Result<(f64, Gradients<f32>)> {
        let total: usize = prepared.iter().map(|p| p.targets.len()).sum();
        let n = self.config.quantizer.codebooks;
        let vocab = self.config.quantizer.vocab;
        let scale = 1.0 / (total * n) as f32;
        let work = |(p, id): (&Prepared, &String)| -> Result<Option<(f64, Gradients<f32>)>> {
            if p.targets.is_empty() {
                return Ok(None);
            }
            let mut g = Graph::new(self.params.clone());
            let mut dr = rng::stream("pretrain.dropout", &[self.seed.into(), step.into(), id.as_str().into()]);
            let dropout = (self.encoder.dropout > 0.0).then_some(&mut dr);
            let vars = forward_graph(&mut g, &self.encoder, p.input.view(), dropout)?;
            let top = *vars.states.last().expect("at least the extractor state");
            let w = g.param(&format!("{HEAD}.weight"));
            let b = g.param(&format!("{HEAD}.bias"));
            let logits = g.matmul(top, w);
            let logits = g.add_row(logits, b);
            let loss = g.multi_softmax_xent(logits, p.targets.clone(), vocab, scale);
            Ok(Some((g.scalar(loss) as f64, g.backward(loss))))
        };
        let chunk = rayon::current_num_threads().max(1);
        let items: Vec<(&Prepared, &String)> = prepared.iter().zip(ids).collect();
        let mut loss = 0.0;
        let mut grads = Gradients::empty(self.params.len());
        for part in items.chunks(chunk) {
            let results: Vec<_> = part.par_iter().map(|&x| work(x)).collect();
            for r in results {
                if let Some((l, gr)) = r? {
                    loss += l;
                    grads.accumulate(gr);
                }
            }
        }
        Ok((loss, grads))
    }

    /// Mean masked-prediction loss on a batch without updating anything.
    pub fn evaluate(&self, batch: &Batch, labels: &[LabelTensor]) -> Result<Option<f64>> {
        let prepared = self.prepare(batch, labels)?;
        if prepared.iter().all(|p| p.targets.is_empty()) {
            return Ok(None);
        }
        Ok(Some(self.loss_and_grads(&prepared, self.step + 1, &batch.ids)?.0))
    }

    /// One optimizer step with labels computed from the batch itself.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let labels = self.labels(batch)?;
        self.train_step_with_labels(batch, &labels)
    }

    /// One optimizer step with precomputed (for example cached) labels.
    pub fn train_step_with_labels(&mut self, batch: &Batch, labels: &[LabelTensor]) -> Result<StepOutcome> {
        let prepared = self.prepare(batch, labels)?;
        let targets: usize = prepared.iter().map(|p| p.targets.len()).sum();
        if targets == 0 {
            return Ok(StepOutcome::Skipped);
        }
        let step = self.step + 1;
        let (loss, mut grads) = self.loss_and_grads(&prepared, step, &batch.ids)?;
        if !loss.is_finite() || !grads.is_finite() {
            warn!("non-finite loss at step {step}; parameters left unchanged");
            return Err(Error::NonFiniteLoss { step });
        }
        let norm = grads.global_norm();
        if norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / norm) as f32);
        }
        let lr = lr_schedule(step, self.config.peak_lr, self.config.warmup_steps);
        let params = Arc::get_mut(&mut self.params).expect("no graph outlives a step");
        self.adam.update(params, &grads, |_| Some(lr));
        self.step = step;
        let rows = prepared
            .iter()
            .flat_map(|p| p.targets.iter().map(|(_, l)| ndarray::ArrayView1::from(l.as_slice())));
        let utilization =
            codebook_utilization(rows, self.config.quantizer.codebooks, self.config.quantizer.vocab)?;
        Ok(StepOutcome::Trained(StepMetrics {
            step,
            loss,
            learning_rate: lr,
            masked_label_frames: targets,
            codebook_utilization: utilization,
        }))
    }

    /// Per-codebook logits `L x N x V` of the top layer for one unmasked utterance.
    pub fn predict(&self, mel: &MelSpectrogram) -> Result<ndarray::Array3<f32>> {
        let mut g = Graph::new(self.params.clone());
        let vars = forward_graph(&mut g, &self.encoder, mel.frames.view(), None)?;
        let top = *vars.states.last().expect("at least the extractor state");
        let w = g.param(&format!("{HEAD}.weight"));
        let b = g.param(&format!("{HEAD}.bias"));
        let logits = g.matmul(top, w);
        let logits = g.add_row(logits, b);
        let v = g.value(logits);
        let (l, n, vocab) = (v.nrows(), self.config.quantizer.codebooks, self.config.quantizer.vocab);
        Ok(v.clone().into_shape_with_order((l, n, vocab)).expect("N*V columns"))
    }
}

/// Appends one CSV row per trained step.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub const HEADER: &'static str = "step,loss,lr,masked_frames,utilization";

    /// Open for appending, writing the header if the file is new or empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{}",
            m.step, m.loss, m.learning_rate, m.masked_label_frames, m.codebook_utilization
        )
    }
}
