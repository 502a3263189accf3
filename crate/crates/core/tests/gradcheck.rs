mod common;

use rqspeech::encoder::EncoderConfig;

#[test]
fn one_layer_encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden: 4,
        ffn: 8,
        heads: 2,
        conv_kernel: 3,
        dropout: 0.0,
    };
    let r = common::grad_check(&cfg, 12, 3, 1e-5, 1e-6);
    assert!(r.checked > 1000);
    assert!(r.worst_rel < 1e-4, "{} at {}", r.worst_rel, r.worst_name);
    assert!(r.zero_tensors.is_empty(), "{:?}", r.zero_tensors);
}
