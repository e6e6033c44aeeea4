#![allow(dead_code)]

use dyrex_core::data::{generate_synthetic, make_instances};
use dyrex_core::encoder::{SEGMENT_PASSAGE, SEGMENT_QUESTION};
use dyrex_core::trainer::EvalSet;
use dyrex_core::{
    DyrexModel, EncoderConfig, HeadConfig, Instance, MaskStrategy, ModelConfig, QAExample, Rng, SynthSpec,
    TokenizedInput, TrainConfig, Vocab,
};

pub fn tokenized(token_ids: Vec<usize>, question_len: usize) -> TokenizedInput {
    let n = token_ids.len();
    TokenizedInput {
        segment_ids: (0..n)
            .map(|i| if i < question_len { SEGMENT_QUESTION } else { SEGMENT_PASSAGE })
            .collect(),
        padding_mask: vec![1; n],
        passage_span: (question_len, n - 1),
        token_ids,
    }
}

/// Random instance with a short question and a gold span inside the passage.
pub fn random_instance(rng: &mut Rng, vocab_size: usize, n: usize) -> Instance {
    let q = 3.min(n - 1);
    let ids = (0..n).map(|_| 2 + rng.below(vocab_size - 2)).collect();
    let start = rng.range_inclusive(q, n - 1);
    let end = rng.range_inclusive(start, (start + 3).min(n - 1));
    Instance {
        qid: format!("rand-{}", rng.below(1_000_000)),
        input: tokenized(ids, q),
        gold: (start, end),
        embeddings: None,
    }
}

pub fn small_model_config(d: usize, heads: usize, layers: usize, strategy: MaskStrategy, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 30,
            d_model: d,
            num_layers: 1,
            num_heads: heads,
            max_len: 32,
            use_segment_embeddings: true,
            trainable: true,
            embedding_init_std: 0.5,
        },
        head: HeadConfig { num_layers: layers, num_heads: heads, strategy, ..HeadConfig::default() },
        seed,
    }
}

pub const SYNTH_MAX_LEN: usize = 64;

pub fn separation_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        vocab_size: 200,
        num_keys: 4,
        value_alphabet: 64,
        passage_len: 40,
        value_len_range: (2, 4),
        seed,
    }
}

pub fn separation_model(layers: usize, strategy: MaskStrategy, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 200,
            d_model: 64,
            num_layers: 0,
            num_heads: 8,
            max_len: SYNTH_MAX_LEN,
            use_segment_embeddings: true,
            trainable: false,
            embedding_init_std: 0.02,
        },
        head: HeadConfig { num_layers: layers, num_heads: 8, strategy, ..HeadConfig::default() },
        seed,
    }
}

pub fn separation_train_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        batch_size: 12,
        max_epochs: 1000,
        max_steps: Some(steps),
        seed,
        ..TrainConfig::default()
    }
}

pub struct SynthData {
    pub vocab: Vocab,
    pub train: Vec<Instance>,
    pub train_examples: Vec<QAExample>,
    pub test: EvalSet,
}

pub fn synth_data(train_n: usize, test_n: usize) -> SynthData {
    let train_spec = separation_spec(11);
    let vocab = train_spec.vocab();
    let train_examples = generate_synthetic(&train_spec, train_n).unwrap();
    let test_examples = generate_synthetic(&separation_spec(12), test_n).unwrap();
    let train = make_instances(&train_examples, &vocab, SYNTH_MAX_LEN).unwrap();
    let test_instances = make_instances(&test_examples, &vocab, SYNTH_MAX_LEN).unwrap();
    SynthData {
        vocab,
        train,
        train_examples,
        test: EvalSet::new(test_instances, test_examples).unwrap(),
    }
}

/// Unit-scale initial queries, so the query self-attention path carries
/// gradients well above finite-difference resolution.
pub fn activate_queries(model: &mut DyrexModel, rng: &mut Rng) {
    let d = model.config.d_model();
    for id in [model.head.bank.start, model.head.bank.end] {
        model.store.set_value(id, rng.normal_matrix(1, d, 1.0)).unwrap();
    }
}
