//! Fixtures shared by the benchmarks.

use dyrex_core::data::{generate_synthetic, make_instances};
use dyrex_core::{
    DyrexModel, EncoderConfig, HeadConfig, Instance, MaskStrategy, ModelConfig, Rng, SpanDistributions, SynthSpec,
};

pub const MAX_LEN: usize = 64;

pub fn synth_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        vocab_size: 200,
        num_keys: 4,
        value_alphabet: 64,
        passage_len: 40,
        value_len_range: (2, 4),
        seed,
    }
}

/// Frozen embedding-only encoder under a `layers`-deep head, sized like the
/// separation experiment.
pub fn model(layers: usize, strategy: MaskStrategy, d_model: usize) -> DyrexModel {
    DyrexModel::new(ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 200,
            d_model,
            num_layers: 0,
            num_heads: 8,
            max_len: MAX_LEN,
            use_segment_embeddings: true,
            trainable: false,
            embedding_init_std: 0.02,
        },
        head: HeadConfig { num_layers: layers, num_heads: 8, strategy, ..HeadConfig::default() },
        seed: 0,
    })
    .expect("valid benchmark config")
}

pub fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let spec = synth_spec(seed);
    let examples = generate_synthetic(&spec, n).expect("feasible spec");
    make_instances(&examples, &spec.vocab(), MAX_LEN).expect("fits max_len")
}

/// Softmax-normalized random distributions with every position allowed.
pub fn distributions(n: usize, seed: u64) -> SpanDistributions {
    let mut rng = Rng::new(seed);
    let mut draw = || {
        let w: Vec<f64> = (0..n).map(|_| rng.normal(1.0).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let start = draw();
    let end = draw();
    SpanDistributions { start, end, allowed: vec![true; n] }
}
