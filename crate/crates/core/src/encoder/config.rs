use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::frontend::N_MELS;
use crate::{rng, Error, Real, Result};

/// Kernel and stride of each feature-extractor convolution.
pub const EXTRACTOR_KERNEL: usize = 3;
pub const EXTRACTOR_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale model.
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            ffn: 256,
            heads: 4,
            conv_kernel: 5,
            dropout: 0.0,
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Uniform(f64),
    Zeros,
    Ones,
}

impl EncoderConfig {
    /// 24 layers, hidden 1024, feed-forward 4096, 8 heads.
    pub fn full_scale() -> Self {
        Self {
            num_layers: 24,
            hidden: 1024,
            ffn: 4096,
            heads: 8,
            conv_kernel: 5,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.ffn == 0 || self.heads == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn specs(&self) -> Vec<(String, [usize; 2], Init)> {
        let h = self.hidden;
        let f = self.ffn;
        let k = EXTRACTOR_KERNEL;
        let mut out: Vec<(String, [usize; 2], Init)> = Vec::new();
        let mut add = |name: String, shape: [usize; 2], init: Init| out.push((name, shape, init));
        let linear = |add: &mut dyn FnMut(String, [usize; 2], Init), p: &str, i: usize, o: usize| {
            add(format!("{p}.weight"), [i, o], Init::Xavier);
            add(format!("{p}.bias"), [1, o], Init::Zeros);
        };
        let norm = |add: &mut dyn FnMut(String, [usize; 2], Init), p: &str, c: usize| {
            add(format!("{p}.gamma"), [1, c], Init::Ones);
            add(format!("{p}.beta"), [1, c], Init::Zeros);
        };
        linear(&mut add, "extractor.conv1", k * N_MELS, h);
        linear(&mut add, "extractor.conv2", k * h, h);
        linear(&mut add, "extractor.proj", h, h);
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for ffn in ["ffn1", "ffn2"] {
                norm(&mut add, &format!("{p}.{ffn}.norm"), h);
                linear(&mut add, &format!("{p}.{ffn}.up"), h, f);
                linear(&mut add, &format!("{p}.{ffn}.down"), f, h);
            }
            norm(&mut add, &format!("{p}.attn.norm"), h);
            for m in ["query", "key", "value", "out"] {
                linear(&mut add, &format!("{p}.attn.{m}"), h, h);
            }
            add(format!("{p}.attn.pos.weight"), [h, h], Init::Xavier);
            let b = (1.0 / self.head_dim() as f64).sqrt();
            add(format!("{p}.attn.pos_bias_u"), [1, h], Init::Uniform(b));
            add(format!("{p}.attn.pos_bias_v"), [1, h], Init::Uniform(b));
            norm(&mut add, &format!("{p}.conv.norm"), h);
            linear(&mut add, &format!("{p}.conv.pointwise1"), h, 2 * h);
            let b = (1.0 / self.conv_kernel as f64).sqrt();
            add(format!("{p}.conv.depthwise.weight"), [self.conv_kernel, h], Init::Uniform(b));
            add(format!("{p}.conv.depthwise.bias"), [1, h], Init::Zeros);
            norm(&mut add, &format!("{p}.conv.depthwise_norm"), h);
            linear(&mut add, &format!("{p}.conv.pointwise2"), h, h);
            norm(&mut add, &format!("{p}.final_norm"), h);
        }
        add("layer_weights".into(), [1, self.num_layers + 1], Init::Zeros);
        out
    }

    /// Names and shapes of every encoder tensor, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.specs().into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Total scalar parameter count of the encoder.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    /// Fresh parameters. Each tensor draws from its own stream keyed by (seed, name).
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        for (name, shape, init) in self.specs() {
            ps.insert(name.clone(), init_tensor(seed, &name, shape, init));
        }
        ps
    }
}

fn init_tensor<T: Real>(seed: u64, name: &str, shape: [usize; 2], init: Init) -> Array2<T> {
    let bound = match init {
        Init::Zeros => return Array2::zeros(shape),
        Init::Ones => return Array2::ones(shape),
        Init::Xavier => (6.0 / (shape[0] + shape[1]) as f64).sqrt(),
        Init::Uniform(b) => b,
    };
    let mut r = rng::stream("encoder.init", &[seed.into(), name.into()]);
    Array2::from_shape_simple_fn(shape, || T::of(r.random_range(-bound..=bound)))
}

/// Xavier-initialized linear layer appended to `ps` (used for task heads).
pub fn init_linear<T: Real>(ps: &mut ParamSet<T>, seed: u64, prefix: &str, i: usize, o: usize) {
    let w = format!("{prefix}.weight");
    ps.insert(w.clone(), init_tensor(seed, &w, [i, o], Init::Xavier));
    ps.insert(format!("{prefix}.bias"), Array2::zeros((1, o)));
}
