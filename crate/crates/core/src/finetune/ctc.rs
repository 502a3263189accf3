use ndarray::{Array2, ArrayView2};

use super::tokenizer::BLANK;
use crate::{Error, Result};

pub(crate) fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(lp: &ArrayView2<f64>, target: &[u32]) -> Result<()> {
    let (t, v) = lp.dim();
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k as usize >= v) {
        return Err(Error::InvalidArgument(format!(
            "target id {bad} is the blank or outside the {v}-class output"
        )));
    }
    let need = min_frames(target);
    if t < need {
        return Err(Error::InfeasibleAlignment(format!(
            "{t} frames cannot emit {} labels ({need} frames needed)",
            target.len()
        )));
    }
    Ok(())
}

fn extended(target: &[u32]) -> Vec<u32> {
    let mut ext = vec![BLANK; 2 * target.len() + 1];
    for (i, &k) in target.iter().enumerate() {
        ext[2 * i + 1] = k;
    }
    ext
}

fn skip_allowed(ext: &[u32], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn forward(lp: &ArrayView2<f64>, ext: &[u32]) -> Array2<f64> {
    let (t_len, _) = lp.dim();
    let s_len = ext.len();
    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, ext[0] as usize]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1] as usize]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = lse(a, alpha[[t - 1, s - 1]]);
            }
            if skip_allowed(ext, s) {
                a = lse(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + lp[[t, ext[s] as usize]];
        }
    }
    alpha
}

fn total(alpha: &Array2<f64>) -> f64 {
    let (t_len, s_len) = alpha.dim();
    let last = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        lse(last, alpha[[t_len - 1, s_len - 2]])
    } else {
        last
    }
}

/// Negative log probability of `target` summed over all CTC alignments.
///
/// `logprobs` is `T x V` with log-normalized rows; the blank is id 0. An empty
/// target is the all-blank path.
pub fn ctc_loss(logprobs: ArrayView2<f64>, target: &[u32]) -> Result<f64> {
    if logprobs.nrows() == 0 {
        return Err(Error::InfeasibleAlignment("no frames".into()));
    }
    check(&logprobs, target)?;
    let alpha = forward(&logprobs, &extended(target));
    Ok(-total(&alpha))
}

/// Loss and its gradient with respect to the logits whose log-softmax is `logprobs`:
/// `softmax - posterior occupancy`.
pub fn ctc_loss_and_grad(logprobs: ArrayView2<f64>, target: &[u32]) -> Result<(f64, Array2<f64>)> {
    if logprobs.nrows() == 0 {
        return Err(Error::InfeasibleAlignment("no frames".into()));
    }
    check(&logprobs, target)?;
    let ext = extended(target);
    let alpha = forward(&logprobs, &ext);
    let log_z = total(&alpha);
    let (t_len, v) = logprobs.dim();
    let s_len = ext.len();
    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    beta[[t_len - 1, s_len - 1]] = logprobs[[t_len - 1, ext[s_len - 1] as usize]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = logprobs[[t_len - 1, ext[s_len - 2] as usize]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = lse(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && skip_allowed(&ext, s + 2) {
                b = lse(b, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = b + logprobs[[t, ext[s] as usize]];
        }
    }
    let mut grad = logprobs.mapv(f64::exp);
    for t in 0..t_len {
        let mut occ = vec![f64::NEG_INFINITY; v];
        for (s, &k) in ext.iter().enumerate() {
            let k = k as usize;
            occ[k] = lse(occ[k], alpha[[t, s]] + beta[[t, s]] - logprobs[[t, k]]);
        }
        for (k, o) in occ.into_iter().enumerate() {
            if o > f64::NEG_INFINITY {
                grad[[t, k]] -= (o - log_z).exp();
            }
        }
    }
    Ok((-log_z, grad))
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - z);
    }
    out
}

/// Collapse a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
