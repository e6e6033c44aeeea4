//! Token representations for the concatenated question and passage.
//!
//! A small transformer encoder stands in for a pretrained language model:
//! token embedding + sinusoidal position + optional segment embedding,
//! followed by `num_layers` post-norm self-attention blocks. Representations
//! can also be read from precomputed `DYRXMAT1` files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{mha_backward, mha_forward, MhaCache, MhaParams};
use crate::error::{DyrexError, Result};
use crate::numkit::layers::{FeedForward, FeedForwardCache, LayerNorm};
use crate::numkit::{GradSet, LayerNormCache, Matrix, ParamId, ParamStore, Rng};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const SEGMENT_QUESTION: u8 = 0;
pub const SEGMENT_PASSAGE: u8 = 1;

fn default_true() -> bool {
    true
}

fn default_embedding_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// 0 returns the summed embeddings directly.
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub use_segment_embeddings: bool,
    #[serde(default = "default_true")]
    pub trainable: bool,
    /// Standard deviation of the normal embedding initialization.
    #[serde(default = "default_embedding_std")]
    pub embedding_init_std: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab_size < 2 || self.max_len == 0 {
            return Err(DyrexError::Config(
                "encoder needs d_model > 0, vocab_size >= 2 and max_len > 0".into(),
            ));
        }
        if self.num_layers > 0 && (self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads)) {
            return Err(DyrexError::Config(format!(
                "encoder d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Whitespace-token vocabulary; line number in the vocabulary file is the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding only the padding and unknown tokens.
    pub fn new() -> Self {
        Self::from_tokens([PAD_TOKEN, UNK_TOKEN].map(String::from))
            .expect("reserved tokens are distinct")
    }

    /// Builds a vocabulary from an explicit token list. The first two entries
    /// must be the padding and unknown tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(DyrexError::Config(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DyrexError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Adds tokens in order of first appearance.
    pub fn extend<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            if !self.index.contains_key(t) {
                self.index.insert(t.to_string(), self.tokens.len());
                self.tokens.push(t.to_string());
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| DyrexError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DyrexError::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from))
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// One `[question ; passage]` sequence, possibly right-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    /// 1 for real tokens, 0 for padding.
    pub padding_mask: Vec<u8>,
    /// Inclusive indices of the first and last passage token.
    pub passage_span: (usize, usize),
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn real_len(&self) -> usize {
        self.padding_mask.iter().filter(|&&p| p == 1).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if n == 0 {
            return Err(DyrexError::InvalidInput("empty token sequence".into()));
        }
        if self.segment_ids.len() != n || self.padding_mask.len() != n {
            return Err(DyrexError::InvalidInput(
                "token, segment and padding sequences differ in length".into(),
            ));
        }
        let (first, last) = self.passage_span;
        if first > last || last >= n {
            return Err(DyrexError::InvalidInput(format!(
                "passage span {:?} out of bounds for length {n}",
                self.passage_span
            )));
        }
        let real = self.real_len();
        if self.padding_mask[..real].iter().any(|&p| p != 1)
            || self.padding_mask[real..].iter().any(|&p| p != 0)
        {
            return Err(DyrexError::InvalidInput("padding must be at the tail".into()));
        }
        if last >= real {
            return Err(DyrexError::InvalidInput("passage span overlaps padding".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` on even columns,
/// `cos` on odd ones.
pub fn sinusoidal_positions(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MhaParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub segment_embedding: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = config.embedding_init_std;
        let train = config.trainable;
        let token_embedding = store.insert(
            "encoder.token_embedding",
            rng.normal_matrix(config.vocab_size, d, std),
            train,
        )?;
        let segment_embedding = if config.use_segment_embeddings {
            Some(store.insert("encoder.segment_embedding", rng.normal_matrix(2, d, std), train)?)
        } else {
            None
        };
        let blocks = (0..config.num_layers)
            .map(|i| {
                let name = format!("encoder.block{i}");
                Ok(EncoderBlock {
                    attention: MhaParams::init(store, &format!("{name}.attention"), d, config.num_heads, rng, train)?,
                    norm1: LayerNorm::init(store, &format!("{name}.norm1"), d, train)?,
                    ffn: FeedForward::init(store, &format!("{name}.ffn"), d, 4 * d, rng, train)?,
                    norm2: LayerNorm::init(store, &format!("{name}.norm2"), d, train)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            segment_embedding,
            blocks,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlockCache {
    attention: MhaCache,
    norm1: LayerNormCache,
    ffn: FeedForwardCache,
    norm2: LayerNormCache,
}

#[derive(Debug, Clone, Default)]
pub struct EncoderCache {
    blocks: Vec<EncoderBlockCache>,
}

fn check_input(config: &EncoderConfig, input: &TokenizedInput) -> Result<()> {
    input.validate()?;
    if input.len() > config.max_len {
        return Err(DyrexError::InvalidInput(format!(
            "sequence length {} exceeds max_len {}",
            input.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = input.token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(DyrexError::InvalidInput(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Summed token, position and segment embeddings.
pub fn embed(store: &ParamStore, params: &EncoderParams, input: &TokenizedInput) -> Result<Matrix> {
    check_input(&params.config, input)?;
    let d = params.config.d_model;
    let mut h = sinusoidal_positions(input.len(), d);
    let table = store.value(params.token_embedding);
    let segments = params.segment_embedding.map(|id| store.value(id));
    for (pos, &tok) in input.token_ids.iter().enumerate() {
        let row = h.row_mut(pos);
        for (v, e) in row.iter_mut().zip(table.row(tok)) {
            *v += e;
        }
        if let Some(seg) = segments {
            for (v, e) in row.iter_mut().zip(seg.row(input.segment_ids[pos] as usize)) {
                *v += e;
            }
        }
    }
    Ok(h)
}

/// Forward pass producing the `N x d` token representations.
pub fn encode(
    store: &ParamStore,
    params: &EncoderParams,
    input: &TokenizedInput,
) -> Result<(Matrix, EncoderCache)> {
    let mut x = embed(store, params, input)?;
    let mut cache = EncoderCache::default();
    for block in &params.blocks {
        let (x_next, block_cache) = encoder_block_forward(store, block, &x, &input.padding_mask)?;
        x = x_next;
        cache.blocks.push(block_cache);
    }
    Ok((x, cache))
}

/// One post-norm block: `x1 = LN(x + SelfAtt(x))`, `out = LN(x1 + FFN(x1))`.
pub fn encoder_block_forward(
    store: &ParamStore,
    block: &EncoderBlock,
    x: &Matrix,
    padding_mask: &[u8],
) -> Result<(Matrix, EncoderBlockCache)> {
    let (att, attention) = mha_forward(store, &block.attention, x, x, None, Some(padding_mask))?;
    let (x1, norm1) = block.norm1.forward(store, &x.add(&att)?)?;
    let (f, ffn) = block.ffn.forward(store, &x1)?;
    let (out, norm2) = block.norm2.forward(store, &x1.add(&f)?)?;
    Ok((out, EncoderBlockCache { attention, norm1, ffn, norm2 }))
}

fn encoder_block_backward(
    store: &ParamStore,
    block: &EncoderBlock,
    cache: &EncoderBlockCache,
    d_out: &Matrix,
    grads: &mut GradSet,
) -> Result<Matrix> {
    let d_r2 = block.norm2.backward(store, &cache.norm2, d_out, grads)?;
    let mut d_x1 = block.ffn.backward(store, &cache.ffn, &d_r2, grads)?;
    d_x1.add_assign(&d_r2)?;
    let d_r1 = block.norm1.backward(store, &cache.norm1, &d_x1, grads)?;
    let (dq, dkv) = mha_backward(store, &block.attention, &cache.attention, &d_r1, grads)?;
    let mut dx = d_r1;
    dx.add_assign(&dq)?;
    dx.add_assign(&dkv)?;
    Ok(dx)
}

/// Backpropagates `d_h` through the blocks into the embedding tables.
pub fn encode_backward(
    store: &ParamStore,
    params: &EncoderParams,
    input: &TokenizedInput,
    cache: &EncoderCache,
    d_h: &Matrix,
    grads: &mut GradSet,
) -> Result<()> {
    let mut d = d_h.clone();
    for (block, block_cache) in params.blocks.iter().zip(&cache.blocks).rev() {
        d = encoder_block_backward(store, block, block_cache, &d, grads)?;
    }
    let dim = params.config.d_model;
    let mut d_tok = Matrix::zeros(params.config.vocab_size, dim);
    let mut d_seg = Matrix::zeros(2, dim);
    for (pos, &tok) in input.token_ids.iter().enumerate() {
        for (g, v) in d_tok.row_mut(tok).iter_mut().zip(d.row(pos)) {
            *g += v;
        }
        let seg = input.segment_ids[pos] as usize;
        for (g, v) in d_seg.row_mut(seg).iter_mut().zip(d.row(pos)) {
            *g += v;
        }
    }
    grads.add(params.token_embedding, &d_tok)?;
    if let Some(id) = params.segment_embedding {
        grads.add(id, &d_seg)?;
    }
    Ok(())
}

/// Reads a `DYRXMAT1` file of precomputed token representations.
pub fn load_precomputed_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let m = Matrix::load(path)?;
    if m.rows() == 0 {
        return Err(DyrexError::Format {
            path: path.to_path_buf(),
            msg: "embedding file holds an empty sequence".into(),
        });
    }
    Ok(m)
}
