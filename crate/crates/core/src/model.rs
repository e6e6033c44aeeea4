//! Encoder + span head bundled with their parameter store, and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::encoder::{encode, encode_backward, EncoderCache, EncoderConfig, EncoderParams, Vocab};
use crate::error::{DyrexError, Result};
use crate::numkit::{GradSet, Matrix, ParamStore, Rng};
use crate::qahead::{
    decode_span, head_backward, head_forward, span_nll, HeadCache, HeadConfig, HeadParams,
    SpanPrediction,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
const CHECKPOINT_FORMAT: &str = "dyrex-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate(self.encoder.d_model)
    }
}

#[derive(Debug, Clone)]
pub struct DyrexModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub tokens: Matrix,
    pub encoder: Option<EncoderCache>,
    pub head: HeadCache,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    num_layers: usize,
    num_heads: usize,
    d_model: usize,
    strategy: String,
    seed: u64,
    config: ModelConfig,
    parameters: Vec<String>,
    vocab_file: Option<String>,
}

fn param_file(name: &str) -> String {
    format!("{name}.mat")
}

impl DyrexModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder, &mut rng)?;
        let head = HeadParams::init(&mut store, config.d_model(), &config.head, &mut rng)?;
        Ok(Self { config, store, encoder, head })
    }

    fn token_representations(&self, instance: &Instance) -> Result<(Matrix, Option<EncoderCache>)> {
        match &instance.embeddings {
            Some(h) => {
                if h.shape() != (instance.input.len(), self.config.d_model()) {
                    return Err(DyrexError::dim(
                        "precomputed embeddings",
                        (instance.input.len(), self.config.d_model()),
                        h.shape(),
                    ));
                }
                Ok((h.clone(), None))
            }
            None => {
                let (h, cache) = encode(&self.store, &self.encoder, &instance.input)?;
                Ok((h, Some(cache)))
            }
        }
    }

    pub fn forward(&self, instance: &Instance) -> Result<ForwardPass> {
        let (tokens, encoder) = self.token_representations(instance)?;
        let head = head_forward(&self.store, &self.head, &tokens, &instance.input, &self.config.head)?;
        Ok(ForwardPass { tokens, encoder, head })
    }

    pub fn loss(&self, instance: &Instance) -> Result<f64> {
        let pass = self.forward(instance)?;
        span_nll(&pass.head.dists, instance.gold, &instance.qid)
    }

    /// Loss and the full gradient for one example, computed in a fresh
    /// gradient set. Frozen encoder parameters get no gradient.
    pub fn loss_and_grads(&self, instance: &Instance) -> Result<(f64, GradSet)> {
        let pass = self.forward(instance)?;
        let loss = span_nll(&pass.head.dists, instance.gold, &instance.qid)?;
        let mut grads = self.store.zeroed_grads();
        let d_tokens = head_backward(&self.store, &self.head, &pass.head, &pass.tokens, instance.gold, &mut grads)?;
        if let (Some(cache), true) = (&pass.encoder, self.config.encoder.trainable) {
            encode_backward(&self.store, &self.encoder, &instance.input, cache, &d_tokens, &mut grads)?;
        }
        Ok((loss, grads))
    }

    /// Most likely span in input coordinates (text left empty).
    pub fn predict(&self, instance: &Instance) -> Result<SpanPrediction> {
        let pass = self.forward(instance)?;
        decode_span(&pass.head.dists, self.config.head.max_answer_len)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, vocab: Option<&Vocab>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DyrexError::io(dir, e))?;
        let mut parameters = Vec::with_capacity(self.store.len());
        for (name, p) in self.store.iter() {
            p.value.save(dir.join(param_file(name)))?;
            parameters.push(name.to_string());
        }
        if let Some(v) = vocab {
            v.save(dir.join(VOCAB_FILE))?;
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            num_layers: self.config.head.num_layers,
            num_heads: self.config.head.num_heads,
            d_model: self.config.d_model(),
            strategy: self.config.head.strategy.to_string(),
            seed: self.config.seed,
            config: self.config.clone(),
            parameters,
            vocab_file: vocab.map(|_| VOCAB_FILE.to_string()),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| DyrexError::io(&path, e))
    }

    /// Rebuilds the model described by a checkpoint manifest and loads its
    /// parameters. Returns the vocabulary when one was saved.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Self, Option<Vocab>)> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut model = Self::new(manifest.config.clone())?;
        model.load_parameters(dir, &manifest.parameters)?;
        let vocab = match &manifest.vocab_file {
            Some(f) => Some(Vocab::load(dir.join(f))?),
            None => None,
        };
        Ok((model, vocab))
    }

    /// Overwrites this model's parameters with those stored in `dir`.
    pub fn restore_from(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.config.d_model() != self.config.d_model() {
            return Err(DyrexError::Config(format!(
                "checkpoint d_model {} does not match configured {}",
                manifest.config.d_model(),
                self.config.d_model()
            )));
        }
        self.load_parameters(dir, &manifest.parameters)
    }

    fn load_parameters(&mut self, dir: &Path, names: &[String]) -> Result<()> {
        if names.len() != self.store.len() {
            return Err(DyrexError::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                names.len(),
                self.store.len()
            )));
        }
        for name in names {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| DyrexError::Config(format!("unexpected parameter {name} in checkpoint")))?;
            let value = Matrix::load(dir.join(param_file(name)))?;
            self.store.set_value(id, value).map_err(|e| {
                DyrexError::Config(format!("parameter {name} has the wrong shape: {e}"))
            })?;
        }
        Ok(())
    }
}

/// Reads only the model configuration recorded in a checkpoint.
pub fn checkpoint_config(dir: impl AsRef<Path>) -> Result<ModelConfig> {
    Ok(read_manifest(dir.as_ref())?.config)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DyrexError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(DyrexError::Format {
            path,
            msg: format!("unsupported checkpoint format {:?}", manifest.format),
        });
    }
    Ok(manifest)
}
