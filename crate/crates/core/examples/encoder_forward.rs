//! Run the Conformer encoder on a padded batch and combine its layers with a learned
//! weighted sum.
//!
//! ```text
//! cargo run --example encoder_forward
//! ```

use rqspeech::encoder::{pad_batch, Encoder, EncoderConfig};
use rqspeech::synth;

fn main() -> rqspeech::Result<()> {
    let config = EncoderConfig::default();
    let encoder: Encoder<f32> = Encoder::new(config, 0)?;
    println!("desk encoder: {} parameters", config.param_count());
    println!("full-size encoder: {} parameters", EncoderConfig::full_scale().param_count());

    let utts: Vec<_> = [120, 97, 64].iter().enumerate().map(|(i, &t)| synth::random_mel(t, i as u64).frames).collect();
    let (batch, lengths) = pad_batch(&utts);
    let out = encoder.infer(batch.view(), &lengths)?;
    for (u, states) in out.layer_states.iter().enumerate() {
        let shapes: Vec<_> = states.iter().map(|s| s.dim()).collect();
        println!("utterance {u}: {} frames -> {} outputs, layer shapes {shapes:?}", lengths[u], out.lengths[u]);
    }

    // uniform logits average the layers; a large logit selects one layer
    let n = config.num_layers + 1;
    let uniform = out.weighted_sum(&vec![0.0; n])?;
    let mut top = vec![0.0f32; n];
    top[n - 1] = 30.0;
    let picked = out.weighted_sum(&top)?;
    let diff = (&picked[0] - &out.layer_states[0][n - 1]).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
    println!("uniform mix norm {:.3}; top-layer selection max deviation {diff:.2e}", uniform[0].mapv(|v| v * v).sum().sqrt());
    Ok(())
}
