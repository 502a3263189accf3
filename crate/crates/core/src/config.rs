//! Run configuration files.
//!
//! A run is described by one TOML file with a few top-level keys and one section
//! per module:
//!
//! ```toml
//! corpus_root = "data/train"
//! output_dir = "runs/base"
//! seed = 7
//!
//! [encoder]
//! num_layers = 4
//!
//! [pretrain.mask]
//! prob = 0.4
//! ```
//!
//! Every key is optional except `corpus_root`; unknown keys are rejected. Relative
//! paths resolve against the directory holding the file. `RQSPEECH_SEED` overrides
//! `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::DataConfig;
use crate::encoder::EncoderConfig;
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;
use crate::{Error, Result};

pub const SEED_ENV: &str = "RQSPEECH_SEED";
/// File name of the effective configuration written next to run outputs.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory scanned for WAV files.
    pub corpus_root: PathBuf,
    /// `id<TAB>path<TAB>duration` manifest used instead of scanning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// `id<TAB>text` transcripts for finetuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// A configuration with every default and the given corpus.
    pub fn new(corpus_root: impl Into<PathBuf>) -> Self {
        Self {
            corpus_root: corpus_root.into(),
            manifest: None,
            transcripts: None,
            output_dir: default_output_dir(),
            seed: 0,
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, resolve relative paths, apply the seed override and validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.apply_env()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.output_dir);
        if let Some(p) = self.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.transcripts.as_mut() {
            fix(p);
        }
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the effective configuration to `dir/config.toml`.
    pub fn write_effective(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = RunConfig::parse("corpus_root = \"x\"").unwrap();
        assert_eq!(c, RunConfig::new("x"));
    }

    #[test]
    fn missing_corpus_root_is_named() {
        let err = RunConfig::parse("seed = 1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("corpus_root"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("corpus_root = \"x\"\n[pretrain.mask]\nprobability = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("probability"), "{err}");
        assert!(RunConfig::parse("corpus_root = \"x\"\nsed = 3\n").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let c = RunConfig::parse(
            "corpus_root = \"x\"\nseed = 9\n[encoder]\nhidden = 32\nheads = 2\n[pretrain.quantizer]\ncodebooks = 4\n[finetune]\nfreeze_steps = 10\n",
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.encoder.hidden, 32);
        assert_eq!(c.encoder.num_layers, EncoderConfig::default().num_layers);
        assert_eq!(c.pretrain.quantizer.codebooks, 4);
        assert_eq!(c.finetune.freeze_steps, 10);
        assert_eq!(c.finetune.encoder_lr, 2e-4);
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::new(dir.path().join("corpus"));
        c.seed = 11;
        c.pretrain.mask.prob = 0.25;
        c.transcripts = Some(dir.path().join("t.tsv"));
        let p = c.write_effective(dir.path().join("out")).unwrap();
        let back = RunConfig::parse(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "corpus_root = \"wavs\"\noutput_dir = \"/abs/out\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.corpus_root, dir.path().join("wavs"));
        assert_eq!(c.output_dir, PathBuf::from("/abs/out"));
    }
}
