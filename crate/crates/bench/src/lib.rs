//! Benchmarks only; see `benches/`.

use bias_tracer::attribution::Cloze;
use bias_tracer::model::{Encoder, ModelConfig, TokenSequence};

/// A random toy-sized encoder and a five-token cloze, matching the fixture's
/// shapes.
pub fn toy_setup() -> (Encoder, Cloze) {
    let enc = Encoder::new(ModelConfig::toy(64)).expect("valid config");
    let cloze = Cloze {
        id: "bench#0".into(),
        seq: TokenSequence {
            tokens: vec![3, 17, 9, 1, 40],
            mask_position: Some(3),
        },
        answer: 12,
    };
    (enc, cloze)
}
