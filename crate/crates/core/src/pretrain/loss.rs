use std::collections::HashSet;

use ndarray::{ArrayView1, ArrayView3, Axis};

use crate::quantizer::LabelTensor;
use crate::{Error, Real, Result};

/// One utterance's loss inputs: `L x N x V` logits, labels and the target mask.
pub type LossItem<'a, T> = (ArrayView3<'a, T>, &'a LabelTensor, &'a [bool]);

/// Mean of `-log softmax(logits)[label]` over every (target frame, codebook) pair
/// in the batch. `None` when no utterance has a target frame.
pub fn multi_softmax_loss<T: Real>(batch: &[LossItem<'_, T>]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (logits, labels, mask)) in batch.iter().enumerate() {
        let (l, n, v) = logits.dim();
        if labels.labels.dim() != (l, n) || mask.len() != l {
            return Err(Error::ShapeMismatch(format!(
                "utterance {i}: logits {:?}, labels {:?}, mask {}",
                logits.dim(),
                labels.labels.dim(),
                mask.len()
            )));
        }
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..n {
                let row = logits.index_axis(Axis(0), t);
                let row = row.index_axis(Axis(0), j);
                let label = labels.labels[[t, j]] as usize;
                if label >= v {
                    return Err(Error::ShapeMismatch(format!("label {label} outside vocabulary {v}")));
                }
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
                let lse = m + row.iter().map(|&x| (x.f64() - m).exp()).sum::<f64>().ln();
                total += lse - row[label].f64();
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Fraction of the `codebooks x vocab` (codebook, codeword) pairs that occur in
/// `rows`, each row holding one label per codebook.
pub fn codebook_utilization<'a>(
    rows: impl IntoIterator<Item = ArrayView1<'a, u32>>,
    codebooks: usize,
    vocab: usize,
) -> Result<f64> {
    let mut seen = HashSet::new();
    let mut any = false;
    for row in rows {
        any = true;
        for (j, &label) in row.iter().enumerate() {
            seen.insert((j, label));
        }
    }
    if !any {
        return Err(Error::InvalidArgument("utilization needs at least one label".into()));
    }
    Ok(seen.len() as f64 / (codebooks * vocab) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array3::<f32>::zeros((3, 32, 2048));
        let labels = LabelTensor {
            labels: Array2::from_shape_fn((3, 32), |(i, j)| ((i * 31 + j * 7) % 2048) as u32),
        };
        let mask = [true, false, true];
        let loss = multi_softmax_loss(&[(logits.view(), &labels, &mask[..])]).unwrap().unwrap();
        assert!((loss - 2048f64.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn saturated_logits_give_near_zero() {
        let labels = LabelTensor {
            labels: array![[1, 0], [2, 2]],
        };
        let mut logits = Array3::<f64>::zeros((2, 2, 3));
        for t in 0..2 {
            for j in 0..2 {
                logits[[t, j, labels.labels[[t, j]] as usize]] = 1e4;
            }
        }
        let loss = multi_softmax_loss(&[(logits.view(), &labels, &[true, true][..])]).unwrap().unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn hand_computed_case() {
        // L = 2, N = 2, V = 3; only frame 0 and frame 1 both targets.
        let logits = Array3::from_shape_vec(
            (2, 2, 3),
            vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, -1.0, 0.5, 0.25, 2.0, -2.0, 1.0],
        )
        .unwrap();
        let labels = LabelTensor {
            labels: array![[2, 1], [0, 2]],
        };
        let ce = |xs: [f64; 3], k: usize| {
            let z: f64 = xs.iter().map(|x| x.exp()).sum();
            -(xs[k].exp() / z).ln()
        };
        let expect = (ce([1.0, 2.0, 3.0], 2)
            + ce([0.0, 0.0, 0.0], 1)
            + ce([-1.0, 0.5, 0.25], 0)
            + ce([2.0, -2.0, 1.0], 2))
            / 4.0;
        let got = multi_softmax_loss(&[(logits.view(), &labels, &[true, true][..])]).unwrap().unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        let only_second = (ce([-1.0, 0.5, 0.25], 0) + ce([2.0, -2.0, 1.0], 2)) / 2.0;
        let got = multi_softmax_loss(&[(logits.view(), &labels, &[false, true][..])]).unwrap().unwrap();
        assert!((got - only_second).abs() < 1e-9);
    }

    #[test]
    fn no_targets_is_none_and_shapes_checked() {
        let logits = Array3::<f64>::zeros((2, 1, 4));
        let labels = LabelTensor {
            labels: Array2::zeros((2, 1)),
        };
        assert_eq!(multi_softmax_loss(&[(logits.view(), &labels, &[false, false][..])]).unwrap(), None);
        assert!(multi_softmax_loss(&[(logits.view(), &labels, &[true][..])]).is_err());
    }

    #[test]
    fn utilization_cases() {
        let same = Array2::from_elem((10, 1), 5u32);
        assert_eq!(codebook_utilization(same.rows(), 1, 64).unwrap(), 1.0 / 64.0);
        let all = Array2::from_shape_fn((8, 3), |(i, _)| i as u32);
        assert_eq!(codebook_utilization(all.rows(), 3, 8).unwrap(), 1.0);
        let none = Array2::<u32>::zeros((0, 2));
        assert!(codebook_utilization(none.rows(), 2, 8).is_err());
    }

    #[test]
    fn utilization_matches_coupon_expectation() {
        let expect = 1.0 - (15.0f64 / 16.0).powi(64);
        let mean: f64 = (0..200u64)
            .map(|s| {
                let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(s);
                let labels = Array2::from_shape_simple_fn((64, 1), || r.random_range(0..16u32));
                codebook_utilization(labels.rows(), 1, 16).unwrap()
            })
            .sum::<f64>()
            / 200.0;
        assert!((mean - expect).abs() < 0.02, "{mean} vs {expect}");
    }
}
