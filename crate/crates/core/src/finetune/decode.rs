use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView2;

use super::ctc::{collapse, ctc_loss, lse};
use super::tokenizer::BLANK;

/// A decoded label sequence and its total log probability under the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

fn exact_log_prob(logprobs: ArrayView2<f64>, tokens: &[u32]) -> f64 {
    ctc_loss(logprobs, tokens).map_or(f64::NEG_INFINITY, |l| -l)
}

/// Per-frame argmax, repeats merged, blanks dropped.
pub fn greedy_decode(logprobs: ArrayView2<f64>) -> Hypothesis {
    let path: Vec<u32> = logprobs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    let tokens = collapse(&path);
    Hypothesis {
        log_prob: exact_log_prob(logprobs, &tokens),
        tokens,
    }
}

/// Final prefixes of one CTC prefix beam search pass of width `width`.
///
/// Prefixes are tracked with separate blank-ending and label-ending probabilities
/// and merged by log-sum-exp.
fn prefix_beam(logprobs: ArrayView2<f64>, width: usize) -> Vec<Vec<u32>> {
    let ninf = f64::NEG_INFINITY;
    let mut beam: Vec<(Vec<u32>, f64, f64)> = vec![(Vec::new(), 0.0, ninf)];
    for row in logprobs.rows() {
        let mut next: BTreeMap<Vec<u32>, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beam {
            let all = lse(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = lse(e.0, all + row[BLANK as usize]);
            let last = prefix.last().copied();
            for (k, &p) in row.iter().enumerate().skip(1) {
                let k = k as u32;
                let mut ext = prefix.clone();
                ext.push(k);
                if last == Some(k) {
                    let same = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    same.1 = lse(same.1, pnb + p);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = lse(e.1, pb + p);
                } else {
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = lse(e.1, all + p);
                }
            }
        }
        let mut cands: Vec<(Vec<u32>, f64, f64)> =
            next.into_iter().map(|(k, (b, nb))| (k, b, nb)).collect();
        cands.sort_by(|a, b| lse(b.1, b.2).total_cmp(&lse(a.1, a.2)).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(width);
        beam = cands;
    }
    beam.into_iter().map(|(p, _, _)| p).collect()
}

/// CTC prefix beam search without a language model.
///
/// Searches at widths 1, 2, 4, ... up to `beam_width`, rescores every final prefix
/// of every pass with its exact forward probability and returns the most probable.
/// Pooling the passes makes the result monotone: doubling the width can only
/// raise the returned probability.
pub fn beam_decode(logprobs: ArrayView2<f64>, beam_width: usize) -> Hypothesis {
    let width = beam_width.max(1);
    let mut widths = Vec::new();
    let mut w = 1;
    while w < width {
        widths.push(w);
        w *= 2;
    }
    widths.push(width);
    let candidates: BTreeSet<Vec<u32>> = widths.into_iter().flat_map(|w| prefix_beam(logprobs, w)).collect();
    let mut best: Option<Hypothesis> = None;
    for tokens in candidates {
        let log_prob = exact_log_prob(logprobs, &tokens);
        if best.as_ref().is_none_or(|b| log_prob > b.log_prob) {
            best = Some(Hypothesis { tokens, log_prob });
        }
    }
    best.unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::ctc::log_softmax;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn peaked(path: &[u32], v: usize) -> Array2<f64> {
        let logits = Array2::from_shape_fn((path.len(), v), |(t, k)| if path[t] as usize == k { 5.0 } else { 0.0 });
        log_softmax(logits.view())
    }

    #[test]
    fn greedy_collapse_cases() {
        assert_eq!(greedy_decode(peaked(&[0, 1, 1, 0, 2], 3).view()).tokens, vec![1, 2]);
        assert!(greedy_decode(peaked(&[0, 0, 0], 3).view()).tokens.is_empty());
        assert_eq!(greedy_decode(peaked(&[1, 0, 1], 3).view()).tokens, vec![1, 1]);
    }

    #[test]
    fn greedy_ignores_positive_rescaling() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let lp = log_softmax(Array2::from_shape_simple_fn((9, 5), || r.random_range(-3.0..3.0)).view());
        let shifted = &lp + &Array2::from_shape_fn((9, 5), |(t, _)| t as f64 * 0.3 - 1.0);
        assert_eq!(greedy_decode(lp.view()).tokens, greedy_decode(shifted.view()).tokens);
    }

    #[test]
    fn width_one_matches_greedy_when_peaked() {
        let lp = peaked(&[0, 2, 2, 0, 1, 1, 0, 1, 3], 4);
        assert_eq!(beam_decode(lp.view(), 1).tokens, greedy_decode(lp.view()).tokens);
    }

    #[test]
    fn hypothesis_probability_is_a_probability() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let lp = log_softmax(Array2::from_shape_simple_fn((6, 3), || r.random_range(-2.0..2.0)).view());
        for w in [1, 3, 16] {
            let h = beam_decode(lp.view(), w);
            assert!(h.log_prob <= 0.0);
        }
    }
}
