use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use walkdir::WalkDir;

use crate::frontend::{read_header, Waveform};
use crate::rng;
use crate::{Error, Result};

/// Utterances shorter than this are dropped when indexing.
pub const MIN_DURATION_S: f64 = 0.3;
/// Longer utterances are randomly cropped to this length each epoch.
pub const MAX_DURATION_S: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub path: PathBuf,
    pub duration_s: f64,
}

/// Indexed corpus, sorted by utterance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusIndex {
    pub entries: Vec<Utterance>,
    /// Files that could not be read while scanning.
    pub skipped: usize,
    /// Readable files dropped for being shorter than the minimum duration.
    pub too_short: usize,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.entries
            .binary_search_by(|u| u.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    fn from_entries(mut entries: Vec<Utterance>, skipped: usize, min_duration_s: f64) -> Self {
        let before = entries.len();
        entries.retain(|u| u.duration_s >= min_duration_s);
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            too_short: before - entries.len(),
            entries,
            skipped,
        }
    }

    /// Read an `id<TAB>path<TAB>duration_s` manifest. Relative paths resolve against
    /// the manifest's directory.
    pub fn read_manifest(path: impl AsRef<Path>, min_duration_s: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::InvalidArgument(format!("{}:{}: malformed line", path.display(), n + 1));
            let [id, p, d] = fields[..] else {
                return Err(bad());
            };
            let duration_s: f64 = d.trim().parse().map_err(|_| bad())?;
            entries.push(Utterance {
                id: id.to_string(),
                path: base.join(p),
                duration_s,
            });
        }
        Ok(Self::from_entries(entries, 0, min_duration_s))
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for u in &self.entries {
            writeln!(out, "{}\t{}\t{}", u.id, u.path.display(), u.duration_s)
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Recursively index every `.wav` file under `root`, reading durations from headers.
///
/// The utterance id is the path relative to `root` without its extension.
pub fn scan_corpus(root: impl AsRef<Path>, min_duration_s: f64) -> Result<CorpusIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut entries = Vec::new();
    let mut skipped = 0;
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warn!("skipping unreadable entry: {e}");
                skipped += 1;
                continue;
            }
        };
        let path = entry.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !entry.file_type().is_file() || !is_wav {
            continue;
        }
        match read_header(path) {
            Ok(h) => entries.push(Utterance {
                id: utterance_id(root, path),
                path: path.to_path_buf(),
                duration_s: h.duration_s(),
            }),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    Ok(CorpusIndex::from_entries(entries, skipped, min_duration_s))
}

fn utterance_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Identity for audio up to `max_s`; otherwise a `max_s` window whose offset is
/// drawn from a stream keyed by (seed, epoch, utterance id).
pub fn crop(w: &Waveform, max_s: f64, seed: u64, epoch: u64, utt: &str) -> Waveform {
    let max_len = (max_s * w.sample_rate as f64).round() as usize;
    if w.len() <= max_len {
        return w.clone();
    }
    let start = crop_offset(w.len(), w.sample_rate, max_s, seed, epoch, utt);
    Waveform {
        samples: w.samples[start..start + max_len].to_vec(),
        sample_rate: w.sample_rate,
    }
}

/// Start offset (in samples) that [`crop`] would pick.
pub fn crop_offset(len: usize, rate: u32, max_s: f64, seed: u64, epoch: u64, utt: &str) -> usize {
    let max_len = (max_s * rate as f64).round() as usize;
    if len <= max_len {
        return 0;
    }
    let mut r = rng::utterance_stream("datapipe.crop", seed, epoch, utt);
    r.random_range(0..=len - max_len)
}
