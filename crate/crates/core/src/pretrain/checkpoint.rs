use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::autodiff::ParamSet;
use crate::encoder::EncoderConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSEC";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

/// How a run initializes from an existing checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every parameter, optimizer moment and the step counter.
    Full,
    /// Only `extractor.*` tensors; everything else fresh.
    FeatureExtractorOnly,
    /// Ignore the checkpoint.
    None,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "feature_extractor_only" => Ok(Self::FeatureExtractorOnly),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown init mode {other:?} (expected full, feature_extractor_only or none)"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Full => "full",
            Self::FeatureExtractorOnly => "feature_extractor_only",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    seed: u64,
    encoder: EncoderConfig,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    optimizer_steps: Option<Vec<u64>>,
}

/// Saved training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `"pretrain"` or `"finetune"`.
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Kind-specific run configuration.
    pub config: serde_json::Value,
    pub params: ParamSet<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    /// Tensor layout in file order: parameters, then first and second moments.
    pub fn tensor_entries(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, t: &Array2<f32>| {
            let (r, c) = t.dim();
            out.push(TensorEntry {
                name,
                shape: [r, c],
                offset,
            });
            offset += (t.len() * 4) as u64;
        };
        for (n, t) in self.params.iter() {
            push(n.to_string(), t);
        }
        if let Some(opt) = &self.optimizer {
            for (n, t) in opt.m.iter() {
                push(format!("{MOMENT_M}{n}"), t);
            }
            for (n, t) in opt.v.iter() {
                push(format!("{MOMENT_V}{n}"), t);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            seed: self.seed,
            encoder: self.encoder,
            config: self.config.clone(),
            tensors: self.tensor_entries(),
            optimizer_steps: self.optimizer.as_ref().map(|o| o.steps.clone()),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.params.num_scalars() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensors: Vec<&Array2<f32>> = self.params.iter().map(|(_, t)| t).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(_, t)| t));
            tensors.extend(opt.v.iter().map(|(_, t)| t));
        }
        for t in tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MSEC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = 16u64
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header extends past end of file"))? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let data = &bytes[data_start..];
        let mut expected_offset = 0u64;
        let mut all = ParamSet::new();
        for e in &header.tensors {
            let n = e.shape[0]
                .checked_mul(e.shape[1])
                .ok_or_else(|| corrupt(format!("tensor {} has an absurd shape", e.name)))?;
            let end = e.offset + (n as u64) * 4;
            if e.offset != expected_offset || end > data.len() as u64 {
                return Err(corrupt(format!("tensor {} lies outside the data section", e.name)));
            }
            let raw = &data[e.offset as usize..end as usize];
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("sized above");
            if all.id(&e.name).is_some() {
                return Err(corrupt(format!("duplicate tensor {}", e.name)));
            }
            all.insert(e.name.clone(), t);
            expected_offset = end;
        }
        if expected_offset != data.len() as u64 {
            return Err(corrupt(format!(
                "{} trailing bytes after the last tensor",
                data.len() as u64 - expected_offset
            )));
        }
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in all.iter() {
            if let Some(base) = name.strip_prefix(MOMENT_M) {
                m.insert(base, t.clone());
            } else if let Some(base) = name.strip_prefix(MOMENT_V) {
                v.insert(base, t.clone());
            } else {
                params.insert(name, t.clone());
            }
        }
        let optimizer = match header.optimizer_steps {
            Some(steps) => {
                let consistent = steps.len() == params.len()
                    && m.names() == params.names()
                    && v.names() == params.names();
                if !consistent {
                    return Err(corrupt("optimizer moments do not match the parameters"));
                }
                let adam_cfg = header
                    .config
                    .get("adam")
                    .and_then(|a| serde_json::from_value::<AdamConfig>(a.clone()).ok())
                    .unwrap_or_default();
                Some(Adam {
                    config: adam_cfg,
                    m,
                    v,
                    steps,
                })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(corrupt("optimizer moments without step counters")),
        };
        Ok(Self {
            kind: header.kind,
            step: header.step,
            seed: header.seed,
            encoder: header.encoder,
            config: header.config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copy every tensor of `src` accepted by `select` into `dst`, which must already
/// hold a tensor of the same name and shape.
pub fn restore_tensors(
    dst: &mut ParamSet<f32>,
    src: &ParamSet<f32>,
    select: impl Fn(&str) -> bool,
) -> Result<Vec<String>> {
    let mut restored = Vec::new();
    for (name, t) in src.iter().filter(|(n, _)| select(n)) {
        let slot = dst.get_mut(name).ok_or_else(|| {
            Error::ShapeMismatch(format!("tensor {name} in checkpoint is not part of the model"))
        })?;
        if slot.dim() != t.dim() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: checkpoint has {:?}, model expects {:?}",
                t.dim(),
                slot.dim()
            )));
        }
        slot.assign(t);
        restored.push(name.to_string());
    }
    Ok(restored)
}

/// Every tensor the model expects must be present in `src`.
pub fn check_complete(model: &ParamSet<f32>, src: &ParamSet<f32>) -> Result<()> {
    match model.names().iter().find(|n| src.id(n).is_none()) {
        Some(n) => Err(Error::ShapeMismatch(format!("checkpoint lacks tensor {n}"))),
        None => Ok(()),
    }
}
