//! CNN feature extractor and Conformer stack with relative positional attention.
//!
//! The graph-level functions ([`extract_graph`], [`forward_graph`]) operate on one
//! utterance cut to its valid length, so padding never enters a computation. The
//! [`Encoder`] type wraps them for padded batches.

mod config;

pub use config::{init_linear, EncoderConfig, EXTRACTOR_KERNEL, EXTRACTOR_STRIDE};

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use crate::autodiff::{Gradients, Graph, ParamSet, Var};
use crate::frontend::N_MELS;
use crate::rng::Stream;
use crate::{Error, Real, Result};

/// Label frames produced by the extractor for `t` input frames.
pub fn output_len(t: usize) -> usize {
    t / EXTRACTOR_STRIDE / EXTRACTOR_STRIDE
}

/// Sinusoidal embeddings for offsets `L-1, L-2, ..., -(L-1)`, shape `(2L-1) x d`.
pub fn relative_positions<T: Real>(l: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((2 * l - 1, d), |(r, c)| {
        let pos = (l as f64 - 1.0) - r as f64;
        let i = (c / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * i / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.weight"));
    let b = g.param(&format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn norm<T: Real>(g: &mut Graph<T>, x: Var, prefix: &str) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut Option<&mut Stream>) -> Var {
    match rng {
        Some(r) if p > 0.0 => {
            let keep = T::of(1.0 / (1.0 - p));
            let mask = g
                .value(x)
                .mapv(|_| if r.random::<f64>() < p { T::zero() } else { keep });
            g.dropout(x, mask)
        }
        _ => x,
    }
}

/// Two stride-2 convolutions with ReLU, then a linear projection.
///
/// `mel` is one utterance, `T x 80`; the result has `floor(T/4)` rows.
pub fn extract_graph<T: Real>(g: &mut Graph<T>, mel: ArrayView2<T>) -> Result<Var> {
    let t = mel.nrows();
    if mel.ncols() != N_MELS {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects {N_MELS} channels, got {}",
            mel.ncols()
        )));
    }
    if output_len(t) == 0 {
        return Err(Error::TooShort(format!(
            "utterance too short for the feature extractor ({t} frames, need 4)"
        )));
    }
    let x = g.input(mel.to_owned());
    let x = g.frames(x, EXTRACTOR_KERNEL, EXTRACTOR_STRIDE);
    let x = linear(g, x, "extractor.conv1");
    let x = g.relu(x);
    let x = g.frames(x, EXTRACTOR_KERNEL, EXTRACTOR_STRIDE);
    let x = linear(g, x, "extractor.conv2");
    let x = g.relu(x);
    Ok(linear(g, x, "extractor.proj"))
}

fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    p: f64,
    rng: &mut Option<&mut Stream>,
) -> Var {
    let y = norm(g, x, &format!("{prefix}.norm"));
    let y = linear(g, y, &format!("{prefix}.up"));
    let y = g.swish(y);
    let y = dropout(g, y, p, rng);
    let y = linear(g, y, &format!("{prefix}.down"));
    let y = dropout(g, y, p, rng);
    let y = g.scale(y, T::of(0.5));
    g.add(x, y)
}

/// Relative-position multi-head self-attention; returns the block output and the
/// per-head attention matrices.
fn attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut Option<&mut Stream>,
) -> (Var, Vec<Var>) {
    let l = g.value(x).nrows();
    let dk = cfg.head_dim();
    let y = norm(g, x, &format!("{prefix}.norm"));
    let q = linear(g, y, &format!("{prefix}.query"));
    let k = linear(g, y, &format!("{prefix}.key"));
    let v = linear(g, y, &format!("{prefix}.value"));
    let rel = g.input(relative_positions(l, cfg.hidden));
    let wpos = g.param(&format!("{prefix}.pos.weight"));
    let pos = g.matmul(rel, wpos);
    let bias_u = g.param(&format!("{prefix}.pos_bias_u"));
    let bias_v = g.param(&format!("{prefix}.pos_bias_v"));
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(k, a, b);
        let vh = g.slice_cols(v, a, b);
        let ph = g.slice_cols(pos, a, b);
        let uh = g.slice_cols(bias_u, a, b);
        let wh = g.slice_cols(bias_v, a, b);
        let qu = g.add_row(qh, uh);
        let qv = g.add_row(qh, wh);
        let content = g.matmul_nt(qu, kh);
        let position = g.matmul_nt(qv, ph);
        let position = g.rel_shift(position);
        let scores = g.add(content, position);
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        maps.push(attn);
        heads.push(g.matmul(attn, vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let out = linear(g, merged, &format!("{prefix}.out"));
    let out = dropout(g, out, cfg.dropout, rng);
    (g.add(x, out), maps)
}

fn conv_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    p: f64,
    rng: &mut Option<&mut Stream>,
) -> Var {
    let y = norm(g, x, &format!("{prefix}.norm"));
    let y = linear(g, y, &format!("{prefix}.pointwise1"));
    let y = g.glu(y);
    let w = g.param(&format!("{prefix}.depthwise.weight"));
    let b = g.param(&format!("{prefix}.depthwise.bias"));
    let y = g.depthwise_conv(y, w);
    let y = g.add_row(y, b);
    let y = norm(g, y, &format!("{prefix}.depthwise_norm"));
    let y = g.swish(y);
    let y = linear(g, y, &format!("{prefix}.pointwise2"));
    let y = dropout(g, y, p, rng);
    g.add(x, y)
}

/// Variables of one utterance's forward pass.
#[derive(Debug, Clone)]
pub struct UtteranceVars {
    /// Extractor output followed by every Conformer layer output.
    pub states: Vec<Var>,
    /// `attention[layer][head]`, each `L x L`.
    pub attention: Vec<Vec<Var>>,
}

/// Full encoder forward for one utterance: extractor and the Conformer stack.
///
/// Passing a random stream enables dropout.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    mel: ArrayView2<T>,
    mut rng: Option<&mut Stream>,
) -> Result<UtteranceVars> {
    let mut x = extract_graph(g, mel)?;
    let mut states = vec![x];
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        x = feed_forward(g, x, &format!("{p}.ffn1"), cfg.dropout, &mut rng);
        let (y, maps) = attention_block(g, x, &format!("{p}.attn"), cfg, &mut rng);
        x = y;
        attention.push(maps);
        x = conv_block(g, x, &format!("{p}.conv"), cfg.dropout, &mut rng);
        x = feed_forward(g, x, &format!("{p}.ffn2"), cfg.dropout, &mut rng);
        x = norm(g, x, &format!("{p}.final_norm"));
        states.push(x);
    }
    Ok(UtteranceVars { states, attention })
}

fn attention_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut Option<&mut Stream>,
) -> (Var, Vec<Var>) {
    attention(g, x, prefix, cfg, rng)
}

/// Convex combination of layer states with softmax(`logits`) weights.
pub fn weighted_sum<T: Real>(states: &[Array2<T>], logits: &[T]) -> Result<Array2<T>> {
    if states.len() != logits.len() || states.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer states but {} logits",
            states.len(),
            logits.len()
        )));
    }
    let m = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    let mut out = Array2::zeros(states[0].raw_dim());
    for (s, w) in states.iter().zip(e) {
        if s.raw_dim() != out.raw_dim() {
            return Err(Error::ShapeMismatch("layer states differ in shape".into()));
        }
        out.scaled_add(w / z, s);
    }
    Ok(out)
}

/// Encoder parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Encoder<T: Real> {
    pub config: EncoderConfig,
    pub params: Arc<ParamSet<T>>,
}

/// Retained forward pass for one utterance.
pub struct RetainedPass<T: Real> {
    graph: Graph<T>,
    vars: UtteranceVars,
}

impl<T: Real> RetainedPass<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn vars(&self) -> &UtteranceVars {
        &self.vars
    }
}

/// Every layer state of every utterance in a batch.
pub struct EncoderOutput<T: Real> {
    /// `layer_states[u][k]` is the `L_u x hidden` state of layer `k` for utterance `u`;
    /// `k = 0` is the extractor output.
    pub layer_states: Vec<Vec<Array2<T>>>,
    /// Valid label frames per utterance.
    pub lengths: Vec<usize>,
    passes: Option<Vec<RetainedPass<T>>>,
}

impl<T: Real> EncoderOutput<T> {
    pub fn passes(&self) -> Option<&[RetainedPass<T>]> {
        self.passes.as_deref()
    }

    /// Weighted sum over layers for every utterance.
    pub fn weighted_sum(&self, logits: &[T]) -> Result<Vec<Array2<T>>> {
        self.layer_states
            .iter()
            .map(|s| weighted_sum(s, logits))
            .collect()
    }

    /// Parameter gradients given the loss gradient with respect to every layer state
    /// (`upstream[u][k]`, same shapes as `layer_states`).
    pub fn backward(&self, upstream: &[Vec<Array2<T>>]) -> Result<Gradients<T>> {
        let passes = self.passes.as_ref().ok_or(Error::NoForwardPass)?;
        if upstream.len() != passes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} upstream utterances for {} in the batch",
                upstream.len(),
                passes.len()
            )));
        }
        let mut total: Option<Gradients<T>> = None;
        for (pass, up) in passes.iter().zip(upstream) {
            if up.len() != pass.vars.states.len() {
                return Err(Error::ShapeMismatch("upstream layer count".into()));
            }
            let seeds: Vec<(Var, Array2<T>)> = pass
                .vars
                .states
                .iter()
                .zip(up)
                .map(|(&v, g)| (v, g.clone()))
                .collect();
            let grads = pass.graph.backward_from(&seeds);
            match &mut total {
                Some(t) => t.accumulate(grads),
                None => total = Some(grads),
            }
        }
        total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))
    }
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: Arc::new(config.init_params(seed)),
            config,
        })
    }

    /// Wrap existing parameters after checking every expected tensor is present.
    pub fn from_params(config: EncoderConfig, params: Arc<ParamSet<T>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor {name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::ShapeMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    fn check_batch(batch: &ArrayView3<T>, lengths: &[usize]) -> Result<()> {
        let (b, t, c) = batch.dim();
        if b != lengths.len() || c != N_MELS {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} with {} lengths",
                batch.dim(),
                lengths.len()
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > t) {
            return Err(Error::ShapeMismatch(format!("length {bad} exceeds padded {t}")));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input features".into()));
        }
        Ok(())
    }

    /// Feature-extractor output for every utterance (`floor(len/4) x hidden`).
    pub fn extract(&self, batch: ArrayView3<T>, lengths: &[usize]) -> Result<Vec<Array2<T>>> {
        Self::check_batch(&batch, lengths)?;
        lengths
            .iter()
            .enumerate()
            .map(|(u, &len)| {
                let mut g = Graph::new(self.params.clone());
                let v = extract_graph(&mut g, batch.slice(s![u, ..len, ..]))?;
                Ok(g.value(v).clone())
            })
            .collect()
    }

    fn run(
        &self,
        batch: ArrayView3<T>,
        lengths: &[usize],
        retain: bool,
    ) -> Result<EncoderOutput<T>> {
        Self::check_batch(&batch, lengths)?;
        let mut layer_states = Vec::with_capacity(lengths.len());
        let mut passes = Vec::new();
        for (u, &len) in lengths.iter().enumerate() {
            let mut graph = Graph::new(self.params.clone());
            let vars = forward_graph(&mut graph, &self.config, batch.slice(s![u, ..len, ..]), None)?;
            layer_states.push(vars.states.iter().map(|&v| graph.value(v).clone()).collect());
            if retain {
                passes.push(RetainedPass { graph, vars });
            }
        }
        Ok(EncoderOutput {
            layer_states,
            lengths: lengths.iter().map(|&l| output_len(l)).collect(),
            passes: retain.then_some(passes),
        })
    }

    /// Forward pass retaining intermediates for [`EncoderOutput::backward`].
    pub fn forward(&self, batch: ArrayView3<T>, lengths: &[usize]) -> Result<EncoderOutput<T>> {
        self.run(batch, lengths, true)
    }

    /// Forward pass without retained intermediates.
    pub fn infer(&self, batch: ArrayView3<T>, lengths: &[usize]) -> Result<EncoderOutput<T>> {
        self.run(batch, lengths, false)
    }
}

/// Stack per-utterance `T_u x 80` matrices into a zero-padded batch.
pub fn pad_batch<T: Real>(utts: &[Array2<T>]) -> (Array3<T>, Vec<usize>) {
    let t = utts.iter().map(|u| u.nrows()).max().unwrap_or(0);
    let mut out = Array3::zeros((utts.len(), t, N_MELS));
    for (i, u) in utts.iter().enumerate() {
        out.slice_mut(s![i, ..u.nrows(), ..]).assign(u);
    }
    (out, utts.iter().map(|u| u.nrows()).collect())
}
