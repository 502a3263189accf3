use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rqspeech::config::RunConfig;
use rqspeech::frontend::{load_audio, log_mel};
use rqspeech::pretrain::Checkpoint;
use rqspeech::quantizer::{read_label_cache, QuantizerState};
use rqspeech::synth;

fn rqspeech(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rqspeech"));
    cmd.args(args).env_remove("RQSPEECH_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 3

[encoder]
num_layers = 1
hidden = 16
ffn = 32
heads = 2
conv_kernel = 3

[data]
num_buckets = 2
tokens_per_batch = 1000
workers = 2

[pretrain]
warmup_steps = 2
total_steps = 3
checkpoint_every = 2

[pretrain.quantizer]
codebooks = 2
vocab = 64

[finetune]
warmup_steps = 2
freeze_steps = 1
total_steps = 4
"#;

/// Write a run configuration next to `corpus` with outputs in `out`.
fn config(dir: &Path, corpus: &Path, out: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{out}.toml"));
    let text = format!("corpus_root = {:?}\noutput_dir = {out:?}\n{extra}{TINY}", corpus.display().to_string());
    fs::write(&path, text).unwrap();
    path
}

fn babble_corpus(dir: &Path, n: usize) -> PathBuf {
    let corpus = dir.join("wavs");
    synth::write_babble_corpus(&corpus, n, 0.5, 1.0, 4).unwrap();
    corpus
}

#[test]
fn missing_corpus_root_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "seed = 1\n").unwrap();
    let o = rqspeech(&["pretrain", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus_root"), "{}", stderr(&o));
}

#[test]
fn init_mode_without_init_from_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = babble_corpus(dir.path(), 2);
    let cfg = config(dir.path(), &corpus, "run", "");
    let o = rqspeech(
        &["pretrain", "--config", cfg.to_str().unwrap(), "--init-mode", "feature_extractor_only"],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--init-from"), "{}", stderr(&o));
}

#[test]
fn pretrain_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = babble_corpus(dir.path(), 6);
    let a = config(dir.path(), &corpus, "a", "");
    let b = config(dir.path(), &corpus, "b", "");
    for cfg in [&a, &b] {
        let o = rqspeech(&["pretrain", "--config", cfg.to_str().unwrap()], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let out = dir.path().join("a");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(out.join("checkpoints/pretrain-step-000002.msec").is_file());
    let effective = RunConfig::parse(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(effective.seed, 3);
    assert_eq!(effective.encoder.hidden, 16);

    let final_a = fs::read(out.join("checkpoints/pretrain-final.msec")).unwrap();
    let final_b = fs::read(dir.path().join("b/checkpoints/pretrain-final.msec")).unwrap();
    assert_eq!(final_a, final_b);
    assert_eq!(Checkpoint::from_bytes(&final_a).unwrap().step, 3);

    // the environment seed overrides the file
    let c = config(dir.path(), &corpus, "c", "");
    let o = rqspeech(&["pretrain", "--config", c.to_str().unwrap()], &[("RQSPEECH_SEED", "8")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let effective = RunConfig::parse(&fs::read_to_string(dir.path().join("c/config.toml")).unwrap()).unwrap();
    assert_eq!(effective.seed, 8);
    assert_ne!(fs::read(dir.path().join("c/checkpoints/pretrain-final.msec")).unwrap(), final_a);

    // continue from the final checkpoint with only the extractor
    let o = rqspeech(
        &[
            "pretrain",
            "--config",
            c.to_str().unwrap(),
            "--init-from",
            out.join("checkpoints/pretrain-final.msec").to_str().unwrap(),
            "--init-mode",
            "feature_extractor_only",
            "--steps",
            "1",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn quantize_caches_match_online_labels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = babble_corpus(dir.path(), 3);
    let cfg = config(dir.path(), &corpus, "q", "");
    let first = dir.path().join("labels1");
    let second = dir.path().join("labels2");
    for out in [&first, &second] {
        let o = rqspeech(&["quantize", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let run = RunConfig::load(&cfg).unwrap();
    let q = QuantizerState::new(run.seed, run.pretrain.quantizer).unwrap();
    for i in 0..3 {
        let name = format!("utt{i:03}.lab");
        let bytes = fs::read(first.join(&name)).unwrap();
        assert_eq!(bytes, fs::read(second.join(&name)).unwrap());
        let (labels, vocab) = read_label_cache(first.join(&name)).unwrap();
        assert_eq!(vocab, 64);
        let mel = log_mel(&load_audio(corpus.join(format!("utt{i:03}.wav"))).unwrap()).unwrap();
        assert_eq!(labels, q.labels_for(&mel).unwrap());
    }
    assert_eq!(fs::read_dir(&first).unwrap().count(), 3);
}

#[test]
fn finetune_decode_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let texts = synth::toy_transcripts(4, 5);
    let corpus = dir.path().join("spelled");
    let tpath = synth::write_spelled_corpus(&corpus, &texts, 5).unwrap();
    let extra = format!("transcripts = {:?}\n", tpath.display().to_string());
    let cfg = config(dir.path(), &corpus, "ft", &extra);
    // long enough for a peaked model
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "[finetune]\nwarmup_steps = 2\nfreeze_steps = 1\ntotal_steps = 4\n",
        "[finetune]\nencoder_lr = 2e-3\ndecoder_lr = 1e-2\nwarmup_steps = 20\nfreeze_steps = 20\ntotal_steps = 300\ncheckpoint_every = 0\n",
    );
    fs::write(&cfg, text).unwrap();
    let o = rqspeech(&["pretrain", "--config", cfg.to_str().unwrap(), "--steps", "2"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pre = dir.path().join("ft/checkpoints/pretrain-final.msec");
    let o = rqspeech(&["finetune", "--config", cfg.to_str().unwrap(), "--init-from", pre.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ft = dir.path().join("ft/checkpoints/finetune-final.msec");
    let ckpt = Checkpoint::load(&ft).unwrap();
    assert_eq!((ckpt.kind.as_str(), ckpt.step), ("finetune", 300));
    let metrics = fs::read_to_string(dir.path().join("ft/finetune_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 301);

    let greedy = dir.path().join("greedy.tsv");
    let beam1 = dir.path().join("beam1.tsv");
    let beam8 = dir.path().join("beam8.tsv");
    let corpus_s = corpus.to_str().unwrap();
    let ft_s = ft.to_str().unwrap();
    for (out, flags) in [(&greedy, vec!["--greedy"]), (&beam1, vec!["--beam", "1"]), (&beam8, vec![])] {
        let mut args = vec!["decode", "--checkpoint", ft_s, "--corpus", corpus_s, "--out", out.to_str().unwrap()];
        args.extend(flags);
        let o = rqspeech(&args, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());
    assert_eq!(fs::read_to_string(&beam8).unwrap().lines().count(), 4);

    let o = rqspeech(&["score", "--refs", tpath.to_str().unwrap(), "--hyps", tpath.to_str().unwrap(), "--report", dir.path().join("r.csv").to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("WER 0.00"), "{}", stdout(&o));
    assert!(stdout(&o).contains("CER 0.00"), "{}", stdout(&o));
    let report = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(report.lines().count(), 6);
    assert!(report.lines().last().unwrap().starts_with("*total*,0,"));

    let o = rqspeech(&["score", "--refs", tpath.to_str().unwrap(), "--hyps", greedy.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cer: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("CER "))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap();
    assert!(cer < 25.0, "{}", stdout(&o));
    assert!(greedy.with_file_name("greedy.tsv.score.csv").is_file());
}

#[test]
fn score_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.tsv");
    let hyps = dir.path().join("hyps.tsv");
    fs::write(&refs, "a\tthe cat\nb\ta dog\n").unwrap();
    fs::write(&hyps, "a\tthe cat\nc\ta dog\n").unwrap();
    let o = rqspeech(&["score", "--refs", refs.to_str().unwrap(), "--hyps", hyps.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("missing from hypotheses: b") && err.contains("missing from references: c"), "{err}");
}

#[test]
fn inspect_reports_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = babble_corpus(dir.path(), 2);
    let cfg = config(dir.path(), &corpus, "i", "");
    let o = rqspeech(&["pretrain", "--config", cfg.to_str().unwrap(), "--steps", "1"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("i/checkpoints/pretrain-final.msec");
    let o = rqspeech(&["inspect", ckpt.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("kind: pretrain") && text.contains("extractor.conv1.weight"), "{text}");

    let o = rqspeech(&["inspect", "--config", cfg.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.msec");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let o = rqspeech(&["inspect", cut.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt checkpoint"), "{}", stderr(&o));
}
