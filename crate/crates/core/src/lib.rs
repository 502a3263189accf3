//! Self-supervised speech pre-training with random-projection quantizer targets.
//!
//! The pipeline has four stages that map onto the modules below:
//!
//! - [`frontend`]: WAV decoding, windowed-sinc resampling and 80-bin log-Mel features.
//! - [`quantizer`] and [`masking`]: frozen random-projection labels and span masks
//!   with Gaussian noise substitution.
//! - [`encoder`] and [`pretrain`]: a Conformer encoder with relative positional
//!   attention trained with a multi-softmax masked prediction loss.
//! - [`finetune`]: CTC finetuning with phased freezing, SpecAugment and
//!   greedy/beam decoding.
//!
//! [`datapipe`] provides the length-bucketed batching used by both training loops,
//! and [`cli`] wires everything behind the `rqspeech` binary.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod frontend;
pub mod masking;
pub mod pretrain;
pub mod quantizer;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

/// Floating point type usable throughout the model code.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
