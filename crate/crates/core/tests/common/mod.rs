//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rqspeech::autodiff::{Graph, ParamSet};
use rqspeech::encoder::{forward_graph, init_linear, EncoderConfig};
use rqspeech::finetune::log_softmax;
use rqspeech::quantizer::{QuantizerState, StackedFeatures};

/// Row-normalized random log probabilities.
pub fn random_logprobs<R: Rng>(t: usize, v: usize, r: &mut R) -> Array2<f64> {
    let logits = Array2::from_shape_simple_fn((t, v), || r.random_range(-3.0..3.0));
    log_softmax(logits.view())
}

/// Merge repeats then drop blanks (id 0), written out independently of the library.
fn collapse_path(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, &k) in path.iter().enumerate() {
        if k != 0 && (i == 0 || path[i - 1] != k) {
            out.push(k);
        }
    }
    out
}

/// Total probability of every collapsed output, by enumerating all `V^T` frame paths.
pub fn output_distribution(lp: ArrayView2<f64>) -> BTreeMap<Vec<u32>, f64> {
    let (t, v) = lp.dim();
    let mut out = BTreeMap::new();
    let mut path = vec![0u32; t];
    loop {
        let logp: f64 = path.iter().enumerate().map(|(i, &k)| lp[[i, k as usize]]).sum();
        *out.entry(collapse_path(&path)).or_insert(0.0) += logp.exp();
        // odometer increment
        let mut i = 0;
        loop {
            if i == t {
                return out;
            }
            path[i] += 1;
            if (path[i] as usize) < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Every label sequence over `1..v` of length `1..=max_len`.
pub fn all_targets(v: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..v as u32 {
                let mut q = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Most probable collapsed output by exhaustive enumeration; ties go to the
/// lexicographically smallest sequence.
pub fn exhaustive_best(lp: ArrayView2<f64>) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    for (seq, p) in output_distribution(lp) {
        if best.as_ref().is_none_or(|(_, b)| p > *b) {
            best = Some((seq, p));
        }
    }
    let (s, p) = best.expect("at least one output");
    (s, p.ln())
}

/// Nearest codeword per codebook by a plain double-precision distance scan.
pub fn scan_labels(q: &QuantizerState, feats: &StackedFeatures) -> Array2<u32> {
    let cfg = q.config();
    let mut out = Array2::zeros((feats.frames.nrows(), cfg.codebooks));
    for (l, x) in feats.frames.rows().into_iter().enumerate() {
        for j in 0..cfg.codebooks {
            let a = q.projection(j);
            let y: Vec<f64> = (0..cfg.dim)
                .map(|c| x.iter().zip(a.column(c)).map(|(&xi, &w)| xi as f64 * w as f64).sum())
                .collect();
            let mut best = (f64::INFINITY, 0u32);
            for (k, cw) in q.codebook(j).rows().into_iter().enumerate() {
                let d: f64 = y.iter().zip(cw).map(|(&p, &c)| (p - c as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            out[[l, j]] = best.1;
        }
    }
    out
}

/// Result of a finite-difference sweep over every scalar parameter.
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    /// Tensors whose analytic gradient was identically zero.
    pub zero_tensors: Vec<String>,
}

/// Parameters of an encoder plus a multi-softmax loss head, in double precision.
pub fn gradcheck_params(cfg: &EncoderConfig, codebooks: usize, vocab: usize, seed: u64) -> ParamSet<f64> {
    let mut ps: ParamSet<f64> = cfg.init_params(seed);
    init_linear(&mut ps, seed, "head", cfg.hidden, codebooks * vocab);
    // non-zero layer-weight logits so the weighted sum is not symmetric
    let lw = ps.get_mut("layer_weights").expect("layer weights");
    for (i, v) in lw.iter_mut().enumerate() {
        *v = 0.3 * i as f64 - 0.2;
    }
    // non-trivial norms and biases
    let mut r = rqspeech::rng::stream("test.gradcheck", &[seed.into()]);
    for id in 0..ps.len() {
        let name = ps.name(id).to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            ps.tensor_mut(id).mapv_inplace(|v| v + r.random_range(-0.3..0.3));
        }
    }
    ps
}

/// Loss of the encoder, weighted layer sum, head and multi-softmax cross-entropy.
pub fn encoder_loss(
    g: &mut Graph<f64>,
    cfg: &EncoderConfig,
    mel: ArrayView2<f64>,
    targets: &[(usize, Vec<u32>)],
    vocab: usize,
) -> rqspeech::autodiff::Var {
    let vars = forward_graph(g, cfg, mel, None).expect("forward");
    let lw = g.param("layer_weights");
    let x = g.weighted_sum(&vars.states, lw);
    let w = g.param("head.weight");
    let b = g.param("head.bias");
    let y = g.matmul(x, w);
    let y = g.add_row(y, b);
    let n = targets[0].1.len();
    g.multi_softmax_xent(y, targets.to_vec(), vocab, 1.0 / (targets.len() * n) as f64)
}

/// Central differences with step `h` against backpropagation for every scalar.
/// Relative error is `|fd - analytic| / max(|fd|, |analytic|, floor)`.
pub fn grad_check(cfg: &EncoderConfig, frames: usize, seed: u64, h: f64, floor: f64) -> GradCheck {
    let (codebooks, vocab) = (2, 5);
    let params = Arc::new(gradcheck_params(cfg, codebooks, vocab, seed));
    let mut r = rqspeech::rng::stream("test.gradcheck.input", &[seed.into()]);
    let mel = Array2::from_shape_simple_fn((frames, 80), || r.random_range(-1.0..1.0));
    let l = frames / 4;
    let targets: Vec<(usize, Vec<u32>)> = (0..l)
        .filter(|i| i % 2 == 0)
        .map(|i| (i, (0..codebooks).map(|j| ((i + 3 * j) % vocab) as u32).collect()))
        .collect();
    let mut g = Graph::new(params.clone());
    let loss = encoder_loss(&mut g, cfg, mel.view(), &targets, vocab);
    let grads = g.backward(loss);
    let eval = |p: ParamSet<f64>| {
        let mut g = Graph::new(Arc::new(p));
        let loss = encoder_loss(&mut g, cfg, mel.view(), &targets, vocab);
        g.scalar(loss)
    };
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
        zero_tensors: Vec::new(),
    };
    for id in 0..params.len() {
        let t = params.tensor(id);
        let cols = t.ncols();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(t.raw_dim()));
        if analytic.iter().all(|&v| v == 0.0) {
            out.zero_tensors.push(params.name(id).to_string());
        }
        for idx in 0..t.len() {
            let at = [idx / cols, idx % cols];
            let mut plus = (*params).clone();
            plus.tensor_mut(id)[at] += h;
            let mut minus = (*params).clone();
            minus.tensor_mut(id)[at] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic[at];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            out.checked += 1;
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_name = format!("{}[{},{}] (fd {fd:.3e}, analytic {an:.3e})", params.name(id), at[0], at[1]);
            }
        }
    }
    out
}
