use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreUnit {
    Word,
    Char,
}

impl FromStr for ScoreUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(Error::InvalidArgument(format!("unknown unit {other:?} (word or char)"))),
        }
    }
}

impl fmt::Display for ScoreUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Word => "word",
            Self::Char => "char",
        })
    }
}

/// Minimum substitutions, insertions and deletions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(edits, reference length)` for one pair.
pub fn errors(reference: &str, hypothesis: &str, unit: ScoreUnit) -> (usize, usize) {
    match unit {
        ScoreUnit::Word => {
            let r: Vec<&str> = reference.split_whitespace().collect();
            let h: Vec<&str> = hypothesis.split_whitespace().collect();
            (edit_distance(&r, &h), r.len())
        }
        ScoreUnit::Char => {
            let r: Vec<char> = reference.chars().collect();
            let h: Vec<char> = hypothesis.chars().collect();
            (edit_distance(&r, &h), r.len())
        }
    }
}

/// Total edits over total reference length, in percent.
pub fn error_rate<S: AsRef<str>>(refs: &[S], hyps: &[S], unit: ScoreUnit) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let (edits, total) = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| errors(r.as_ref(), h.as_ref(), unit))
        .fold((0, 0), |(e, n), (de, dn)| (e + de, n + dn));
    if total == 0 {
        return Err(Error::InvalidArgument("references are empty".into()));
    }
    Ok(100.0 * edits as f64 / total as f64)
}
