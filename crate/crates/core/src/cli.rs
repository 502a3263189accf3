//! The `rqspeech` command line.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for invalid configuration or
//! arguments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{debug, info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::datapipe::{build_buckets, schedule_epoch, scan_corpus, Batch, CorpusIndex, Prefetcher};
use crate::encoder::EncoderConfig;
use crate::finetune::{
    errors, read_transcripts, write_transcripts, Decoder, FinetuneOutcome, Finetuner, ScoreUnit,
    Tokenizer, CTC_HEAD,
};
use crate::frontend::{load_audio, log_mel, resample, MelSpectrogram, SAMPLE_RATE};
use crate::pretrain::{Checkpoint, InitMode, MetricsWriter, Pretrainer, StepOutcome, HEAD};
use crate::quantizer::{write_label_cache, QuantizerState};
use crate::{Error, Result};

/// Parameter count reported for the full-size model.
pub const REFERENCE_PARAMS: f64 = 630e6;
/// Abort after this many consecutive non-finite steps.
const MAX_NON_FINITE: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "rqspeech", version, about = "Self-supervised speech pre-training and CTC finetuning")]
pub struct Cli {
    /// More log output (repeat for trace level).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-prediction pre-training.
    Pretrain(PretrainArgs),
    /// Write quantizer label caches for every utterance.
    Quantize(QuantizeArgs),
    /// CTC finetuning on transcribed audio.
    Finetune(FinetuneArgs),
    /// Transcribe audio with a finetuned checkpoint.
    Decode(DecodeArgs),
    /// Word and character error rates of hypotheses against references.
    Score(ScoreArgs),
    /// Describe a checkpoint or an encoder configuration.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Checkpoint to initialize from.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// What to take from --init-from (default full).
    #[arg(long)]
    pub init_mode: Option<InitMode>,
    /// Stop after this many optimizer steps instead of `pretrain.total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory (default `<output_dir>/labels`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Pre-training checkpoint for the encoder, or a finetuning checkpoint to resume.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Stop after this many optimizer steps instead of `finetune.total_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `id<TAB>path<TAB>duration` manifest of the audio to transcribe.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    pub manifest: Option<PathBuf>,
    /// Directory of WAV files to transcribe.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `id<TAB>hypothesis` output (default standard output).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8, conflicts_with = "greedy")]
    pub beam: usize,
    /// Per-frame argmax instead of beam search.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Reference transcripts, `id<TAB>text`.
    #[arg(long)]
    pub refs: PathBuf,
    /// Hypotheses, `id<TAB>text`.
    #[arg(long)]
    pub hyps: PathBuf,
    /// Per-utterance CSV report (default `<hyps>.score.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint file.
    #[arg(required_unless_present_any = ["full_scale", "config"])]
    pub checkpoint: Option<PathBuf>,
    /// Count the parameters of the 24-layer, 1024-wide configuration.
    #[arg(long, conflicts_with_all = ["checkpoint", "config"])]
    pub full_scale: bool,
    /// Count the parameters of the encoder in a run configuration.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parse the process arguments, run and map the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Quantize(a) => cmd_quantize(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn load_index(cfg: &RunConfig) -> Result<CorpusIndex> {
    let index = match &cfg.manifest {
        Some(m) => CorpusIndex::read_manifest(m, cfg.data.min_duration_s)?,
        None => scan_corpus(&cfg.corpus_root, cfg.data.min_duration_s)?,
    };
    info!(
        "{} utterances ({} unreadable, {} too short)",
        index.len(),
        index.skipped,
        index.too_short
    );
    if index.is_empty() {
        return Err(Error::InvalidArgument("the corpus has no usable utterances".into()));
    }
    Ok(index)
}

/// Feed scheduled batches to `f` epoch after epoch until it returns `false`.
/// Batches whose audio cannot be loaded are skipped with a warning.
fn for_each_batch(cfg: &RunConfig, index: CorpusIndex, mut f: impl FnMut(Batch) -> Result<bool>) -> Result<()> {
    let spec = Arc::new(build_buckets(
        &index,
        cfg.data.num_buckets,
        cfg.data.tokens_per_batch,
        cfg.data.max_duration_s,
    )?);
    debug!("bucket batch sizes {:?}, padded frames {:?}", spec.batch_sizes, spec.max_frames);
    let index = Arc::new(index);
    for epoch in 0.. {
        let descriptors = schedule_epoch(&spec, epoch, cfg.seed);
        let mut loaded = 0usize;
        for batch in Prefetcher::new(descriptors, index.clone(), spec.clone(), cfg.data.clone(), cfg.seed) {
            match batch {
                Ok(b) => {
                    loaded += 1;
                    if !f(b)? {
                        return Ok(());
                    }
                }
                Err(e @ Error::MissingUtterance { .. }) => warn!("skipping batch: {e}"),
                Err(e) => return Err(e),
            }
        }
        if loaded == 0 {
            return Err(Error::InvalidArgument(format!("epoch {epoch} produced no loadable batch")));
        }
    }
    Ok(())
}

fn checkpoint_path(out: &Path, prefix: &str, step: Option<u64>) -> PathBuf {
    let name = match step {
        Some(s) => format!("{prefix}-step-{s:06}.msec"),
        None => format!("{prefix}-final.msec"),
    };
    out.join("checkpoints").join(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_pretrain(a: &PretrainArgs) -> CmdResult {
    if a.init_mode.is_some() && a.init_from.is_none() {
        return Err(Failure::Usage("--init-mode requires --init-from".into()));
    }
    let cfg = RunConfig::load(&a.config)?;
    let index = load_index(&cfg)?;
    let out = cfg.output_dir.clone();
    ensure_dir(&out.join("checkpoints"))?;
    cfg.write_effective(&out)?;
    let mut trainer = match &a.init_from {
        Some(p) => {
            let mode = a.init_mode.unwrap_or(InitMode::Full);
            info!("initializing from {} ({mode})", p.display());
            Pretrainer::from_checkpoint(cfg.encoder, cfg.pretrain.clone(), cfg.seed, &Checkpoint::load(p)?, mode)?
        }
        None => Pretrainer::new(cfg.encoder, cfg.pretrain.clone(), cfg.seed)?,
    };
    info!("quantizer {}", trainer.quantizer().fingerprint());
    let total = a.steps.unwrap_or(cfg.pretrain.total_steps);
    let every = cfg.pretrain.checkpoint_every;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let mut bad = 0usize;
    if trainer.step() < total {
        for_each_batch(&cfg, index, |batch| {
            match trainer.train_step(&batch) {
                Ok(StepOutcome::Trained(m)) => {
                    bad = 0;
                    metrics.write(&m).map_err(|e| Error::io(&metrics_path, e))?;
                    if m.step % 50 == 0 || m.step == 1 {
                        info!("step {} loss {:.4} lr {:.3e}", m.step, m.loss, m.learning_rate);
                    }
                    if every > 0 && m.step % every == 0 && m.step < total {
                        trainer.checkpoint()?.save(checkpoint_path(&out, "pretrain", Some(m.step)))?;
                    }
                }
                Ok(StepOutcome::Skipped) => debug!("batch without masked label frames skipped"),
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    bad += 1;
                    if bad >= MAX_NON_FINITE {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
            Ok(trainer.step() < total)
        })?;
    }
    let path = checkpoint_path(&out, "pretrain", None);
    trainer.checkpoint()?.save(&path)?;
    println!("pretrained {} steps; checkpoint {}", trainer.step(), path.display());
    Ok(())
}

/// Full-length features of one utterance, without cropping.
fn utterance_features(path: &Path) -> Result<MelSpectrogram> {
    log_mel(&resample(&load_audio(path)?, SAMPLE_RATE)?)
}

fn cmd_quantize(a: &QuantizeArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let index = load_index(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("labels"));
    ensure_dir(&out)?;
    let q = QuantizerState::new(cfg.pretrain.quantizer_seed.unwrap_or(cfg.seed), cfg.pretrain.quantizer)?;
    info!("quantizer {}", q.fingerprint());
    let long = index
        .entries
        .iter()
        .filter(|u| u.duration_s > cfg.data.max_duration_s)
        .count();
    if long > 0 {
        warn!("{long} utterances exceed the crop length; their caches cover the full audio");
    }
    index.entries.par_iter().try_for_each(|u| -> Result<()> {
        let labels = q.labels_for(&utterance_features(&u.path)?)?;
        let path = out.join(format!("{}.lab", u.id));
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        write_label_cache(&path, &labels, cfg.pretrain.quantizer.vocab)
    })?;
    println!("wrote {} label caches to {}", index.len(), out.display());
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let Some(tpath) = &cfg.transcripts else {
        return Err(Failure::Usage("finetuning needs the `transcripts` key in the config".into()));
    };
    let transcripts = read_transcripts(tpath)?;
    let mut index = load_index(&cfg)?;
    let before = index.len();
    index.entries.retain(|u| transcripts.contains_key(&u.id));
    if index.len() < before {
        warn!("{} utterances have no transcript and are left out", before - index.len());
    }
    if index.is_empty() {
        return Err(Failure::Run(Error::InvalidArgument(
            "no utterance in the corpus has a transcript".into(),
        )));
    }
    let texts: Vec<&str> = index.entries.iter().map(|u| transcripts[&u.id].as_str()).collect();
    let mut trainer = match &a.init_from {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.kind == "finetune" {
                info!("resuming finetuning from {}", p.display());
                Finetuner::from_checkpoint(&ckpt)?
            } else {
                info!("encoder from {}", p.display());
                if ckpt.encoder != cfg.encoder {
                    warn!("the checkpoint's encoder shape overrides the [encoder] section");
                }
                Finetuner::from_pretrained(&ckpt, cfg.finetune.clone(), Tokenizer::from_transcripts(&texts), cfg.seed)?
            }
        }
        None => {
            warn!("no --init-from; finetuning a randomly initialized encoder");
            Finetuner::new(cfg.encoder, cfg.finetune.clone(), Tokenizer::from_transcripts(&texts), cfg.seed)?
        }
    };
    let targets: BTreeMap<&str, Vec<u32>> = index
        .entries
        .iter()
        .map(|u| Ok((u.id.as_str(), trainer.tokenizer.encode(&transcripts[&u.id])?)))
        .collect::<Result<_>>()?;
    let out = cfg.output_dir.clone();
    ensure_dir(&out.join("checkpoints"))?;
    cfg.write_effective(&out)?;
    let metrics_path = out.join("finetune_metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "step,loss,encoder_lr,decoder_lr,infeasible").map_err(|e| Error::io(&metrics_path, e))?;
    let total = a.steps.unwrap_or(trainer.config.total_steps);
    let every = trainer.config.checkpoint_every;
    let mut bad = 0usize;
    if trainer.step() < total {
        for_each_batch(&cfg, index.clone(), |batch| {
            let t: Vec<Vec<u32>> = batch.ids.iter().map(|id| targets[id.as_str()].clone()).collect();
            match trainer.train_step(&batch, &t) {
                Ok(FinetuneOutcome::Trained(m)) => {
                    bad = 0;
                    let enc = m.encoder_lr.map_or(String::from("0"), |v| v.to_string());
                    writeln!(metrics, "{},{},{},{},{}", m.step, m.loss, enc, m.decoder_lr, m.infeasible)
                        .map_err(|e| Error::io(&metrics_path, e))?;
                    if m.step % 50 == 0 || m.step == 1 {
                        info!("step {} ctc {:.4} frozen {}", m.step, m.loss, m.encoder_lr.is_none());
                    }
                    if every > 0 && m.step % every == 0 && m.step < total {
                        trainer.checkpoint()?.save(checkpoint_path(&out, "finetune", Some(m.step)))?;
                    }
                }
                Ok(FinetuneOutcome::Skipped) => warn!("every utterance in the batch was too short for its transcript"),
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    bad += 1;
                    if bad >= MAX_NON_FINITE {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
            Ok(trainer.step() < total)
        })?;
    }
    let path = checkpoint_path(&out, "finetune", None);
    trainer.checkpoint()?.save(&path)?;
    println!("finetuned {} steps; checkpoint {}", trainer.step(), path.display());
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> CmdResult {
    if a.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = Finetuner::from_checkpoint(&ckpt)?;
    let index = match (&a.manifest, &a.corpus) {
        (Some(m), _) => CorpusIndex::read_manifest(m, 0.0)?,
        (None, Some(c)) => scan_corpus(c, 0.0)?,
        (None, None) => return Err(Failure::Usage("pass --manifest or --corpus".into())),
    };
    let decoder = if a.greedy { Decoder::Greedy } else { Decoder::Beam(a.beam) };
    let hyps: Vec<String> = index
        .entries
        .par_iter()
        .map(|u| Ok(model.transcribe(&utterance_features(&u.path)?, decoder)?.0))
        .collect::<Result<_>>()?;
    let rows = index.entries.iter().map(|u| u.id.as_str()).zip(hyps.iter().map(String::as_str));
    match &a.out {
        Some(p) => {
            write_transcripts(p, rows)?;
            info!("wrote {} hypotheses to {}", hyps.len(), p.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for (id, h) in rows {
                writeln!(stdout, "{id}\t{h}").map_err(|e| Error::io("<stdout>", e))?;
            }
        }
    }
    Ok(())
}

fn rate(e: usize, n: usize) -> String {
    if n == 0 {
        String::new()
    } else {
        format!("{:.4}", 100.0 * e as f64 / n as f64)
    }
}

fn cmd_score(a: &ScoreArgs) -> CmdResult {
    let refs = read_transcripts(&a.refs)?;
    let hyps = read_transcripts(&a.hyps)?;
    let missing_hyp: Vec<&str> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(String::as_str).collect();
    let missing_ref: Vec<&str> = hyps.keys().filter(|k| !refs.contains_key(*k)).map(String::as_str).collect();
    if !missing_hyp.is_empty() || !missing_ref.is_empty() {
        let mut msg = String::from("reference and hypothesis ids differ");
        if !missing_hyp.is_empty() {
            let _ = write!(msg, "; missing from hypotheses: {}", missing_hyp.join(", "));
        }
        if !missing_ref.is_empty() {
            let _ = write!(msg, "; missing from references: {}", missing_ref.join(", "));
        }
        return Err(Failure::Usage(msg));
    }
    let mut csv = String::from("id,word_errors,words,wer,char_errors,chars,cer\n");
    let (mut we, mut wn, mut ce, mut cn) = (0, 0, 0, 0);
    for (id, r) in &refs {
        let h = &hyps[id];
        let (e1, n1) = errors(r, h, ScoreUnit::Word);
        let (e2, n2) = errors(r, h, ScoreUnit::Char);
        let _ = writeln!(csv, "{id},{e1},{n1},{},{e2},{n2},{}", rate(e1, n1), rate(e2, n2));
        (we, wn, ce, cn) = (we + e1, wn + n1, ce + e2, cn + n2);
    }
    if cn == 0 {
        return Err(Failure::Usage("the references are empty".into()));
    }
    let _ = writeln!(csv, "*total*,{we},{wn},{},{ce},{cn},{}", rate(we, wn), rate(ce, cn));
    let report = a.report.clone().unwrap_or_else(|| {
        let mut p = a.hyps.clone().into_os_string();
        p.push(".score.csv");
        PathBuf::from(p)
    });
    fs::write(&report, csv).map_err(|e| Error::io(&report, e))?;
    let pct = |e: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * e as f64 / n as f64 };
    println!("WER {:.2} ({we}/{wn} words, {} utterances)", pct(we, wn), refs.len());
    println!("CER {:.2} ({ce}/{cn} characters)", pct(ce, cn));
    Ok(())
}

/// Parameter totals grouped by tensor-name prefix.
fn breakdown<'a>(tensors: impl IntoIterator<Item = (&'a str, [usize; 2])>) -> (BTreeMap<String, usize>, usize) {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (name, s) in tensors {
        let n = s[0] * s[1];
        total += n;
        let parts: Vec<&str> = name.split('.').collect();
        let key = match parts.as_slice() {
            ["layers", _, block, ..] => format!("layers.*.{block}"),
            [first, ..] => first.to_string(),
            [] => String::new(),
        };
        *groups.entry(key).or_default() += n;
    }
    (groups, total)
}

/// Human-readable parameter summary of an encoder configuration.
pub fn describe_encoder(cfg: &EncoderConfig) -> String {
    let shapes = cfg.param_shapes();
    let (groups, total) = breakdown(shapes.iter().map(|(n, s)| (n.as_str(), *s)));
    let mut out = format!(
        "encoder: {} layers, hidden {}, feed-forward {}, {} heads, kernel {}\n",
        cfg.num_layers, cfg.hidden, cfg.ffn, cfg.heads, cfg.conv_kernel
    );
    for (g, n) in &groups {
        let _ = writeln!(out, "  {g:<24} {n:>12}");
    }
    let _ = writeln!(out, "total parameters: {total}");
    out
}

fn cmd_inspect(a: &InspectArgs) -> CmdResult {
    if a.full_scale {
        let cfg = EncoderConfig::full_scale();
        print!("{}", describe_encoder(&cfg));
        let total = cfg.param_count() as f64;
        let dev = (total - REFERENCE_PARAMS) / REFERENCE_PARAMS;
        println!("reference {:.0}M, deviation {:+.2}%", REFERENCE_PARAMS / 1e6, 100.0 * dev);
        if dev.abs() > 0.05 {
            println!("diagnostic: outside 5% of the reference; per-tensor breakdown:");
            for (n, s) in cfg.param_shapes() {
                println!("  {n:<40} {:>5} x {:<5} {:>10}", s[0], s[1], s[0] * s[1]);
            }
        }
        return Ok(());
    }
    if let Some(c) = &a.config {
        let cfg = RunConfig::load(c)?;
        print!("{}", describe_encoder(&cfg.encoder));
        return Ok(());
    }
    let path = a.checkpoint.as_ref().expect("clap requires one source");
    let ckpt = Checkpoint::load(path)?;
    println!("kind: {}", ckpt.kind);
    println!("step: {}", ckpt.step);
    println!("seed: {}", ckpt.seed);
    println!(
        "encoder: {} layers, hidden {}, feed-forward {}, {} heads, kernel {}, dropout {}",
        ckpt.encoder.num_layers,
        ckpt.encoder.hidden,
        ckpt.encoder.ffn,
        ckpt.encoder.heads,
        ckpt.encoder.conv_kernel,
        ckpt.encoder.dropout
    );
    println!(
        "config: {}",
        serde_json::to_string_pretty(&ckpt.config).map_err(|e| Error::InvalidArgument(e.to_string()))?
    );
    println!("tensors:");
    let mut encoder_total = 0;
    for (name, t) in ckpt.params.iter() {
        let (r, c) = t.dim();
        println!("  {name:<40} {r:>5} x {c:<5} {:>10}", r * c);
        if !name.starts_with(&format!("{HEAD}.")) && !name.starts_with(&format!("{CTC_HEAD}.")) {
            encoder_total += r * c;
        }
    }
    println!("encoder parameters: {encoder_total}");
    println!("total parameters: {}", ckpt.params.num_scalars());
    println!(
        "optimizer state: {}",
        if ckpt.optimizer.is_some() { "present" } else { "absent" }
    );
    Ok(())
}
