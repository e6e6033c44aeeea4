//! Span prediction head with dynamically refined start/end queries.
//!
//! The two learned queries `[q_start; q_end]` are passed through `num_layers`
//! post-norm decoder layers (query self-attention under a [`MaskStrategy`],
//! cross-attention over the token representations, feed-forward), then dotted
//! with every token representation and normalized into start and end
//! distributions. With `num_layers == 0` the queries are used as-is, which is
//! the static-query baseline.

use serde::{Deserialize, Serialize};

use crate::attention::{build_query_mask, mha_backward, mha_forward, AttnMask, MaskStrategy, MhaCache, MhaParams};
use crate::encoder::TokenizedInput;
use crate::error::{DyrexError, Result};
use crate::numkit::layers::{FeedForward, FeedForwardCache, LayerNorm};
use crate::numkit::{matmul, softmax_rows, GradSet, LayerNormCache, Matrix, ParamId, ParamStore, Rng};

/// Row of the start query in every `2 x d` query matrix.
pub const START_ROW: usize = 0;
/// Row of the end query.
pub const END_ROW: usize = 1;

pub const QUERY_INIT_STD: f64 = 0.02;
pub const LOG_CLAMP: f64 = 1e-12;

fn default_true() -> bool {
    true
}

fn default_max_answer_len() -> usize {
    30
}

fn default_heads() -> usize {
    8
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::Bidirectional
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Number of decoder layers; 0 is the static baseline.
    pub num_layers: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "default_true")]
    pub restrict_to_passage: bool,
    #[serde(default = "default_max_answer_len")]
    pub max_answer_len: usize,
    /// Only 0 is supported.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            num_heads: default_heads(),
            strategy: default_strategy(),
            restrict_to_passage: true,
            max_answer_len: default_max_answer_len(),
            dropout: 0.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.num_layers > 0 && (self.num_heads == 0 || !d_model.is_multiple_of(self.num_heads)) {
            return Err(DyrexError::Config(format!(
                "embedding dim {d_model} is not divisible by {} heads",
                self.num_heads
            )));
        }
        if self.max_answer_len == 0 {
            return Err(DyrexError::Config("max_answer_len must be positive".into()));
        }
        if self.dropout != 0.0 {
            return Err(DyrexError::Config("dropout is not supported; set it to 0".into()));
        }
        Ok(())
    }
}

/// The two learnable initial queries, each stored as a `1 x d` parameter.
#[derive(Debug, Clone, Copy)]
pub struct QueryBank {
    pub start: ParamId,
    pub end: ParamId,
}

impl QueryBank {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            start: store.insert("head.query_start", rng.normal_matrix(1, d, QUERY_INIT_STD), true)?,
            end: store.insert("head.query_end", rng.normal_matrix(1, d, QUERY_INIT_STD), true)?,
        })
    }

    /// `[q_start; q_end]` as a `2 x d` matrix.
    pub fn stacked(&self, store: &ParamStore) -> Result<Matrix> {
        let (s, e) = (store.value(self.start), store.value(self.end));
        let mut data = s.as_slice().to_vec();
        data.extend_from_slice(e.as_slice());
        Matrix::new(2, s.cols(), data)
    }

    fn backward(&self, d_q0: &Matrix, grads: &mut GradSet) -> Result<()> {
        grads.add(self.start, &d_q0.row_block(START_ROW, 1))?;
        grads.add(self.end, &d_q0.row_block(END_ROW, 1))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attention: MhaParams,
    pub self_norm: LayerNorm,
    pub cross_attention: MhaParams,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayerParams {
    /// Feed-forward width is `4 d`.
    pub fn init(
        store: &mut ParamStore,
        index: usize,
        d: usize,
        num_heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let name = format!("head.layer{index}");
        Ok(Self {
            self_attention: MhaParams::init(store, &format!("{name}.self_attention"), d, num_heads, rng, true)?,
            self_norm: LayerNorm::init(store, &format!("{name}.self_norm"), d, true)?,
            cross_attention: MhaParams::init(store, &format!("{name}.cross_attention"), d, num_heads, rng, true)?,
            cross_norm: LayerNorm::init(store, &format!("{name}.cross_norm"), d, true)?,
            ffn: FeedForward::init(store, &format!("{name}.ffn"), d, 4 * d, rng, true)?,
            ffn_norm: LayerNorm::init(store, &format!("{name}.ffn_norm"), d, true)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerCache {
    pub self_attention: MhaCache,
    self_norm: LayerNormCache,
    pub cross_attention: MhaCache,
    cross_norm: LayerNormCache,
    ffn: FeedForwardCache,
    ffn_norm: LayerNormCache,
}

/// One decoder layer over the `2 x d` queries:
///
/// ```text
/// Q~ = LN(Q + SelfAtt(Q, Q, Q; mask))
/// Q^ = LN(Q~ + CrossAtt(Q~, H, H; key_padding))
/// out = LN(Q^ + FFN(Q^))
/// ```
pub fn decoder_layer_forward(
    store: &ParamStore,
    params: &DecoderLayerParams,
    queries: &Matrix,
    tokens: &Matrix,
    mask: &AttnMask,
    key_padding: Option<&[u8]>,
) -> Result<(Matrix, DecoderLayerCache)> {
    let (sa, self_attention) = mha_forward(store, &params.self_attention, queries, queries, Some(mask), None)?;
    let (q_tilde, self_norm) = params.self_norm.forward(store, &queries.add(&sa)?)?;
    let (ca, cross_attention) = mha_forward(store, &params.cross_attention, &q_tilde, tokens, None, key_padding)?;
    let (q_hat, cross_norm) = params.cross_norm.forward(store, &q_tilde.add(&ca)?)?;
    let (f, ffn) = params.ffn.forward(store, &q_hat)?;
    let (out, ffn_norm) = params.ffn_norm.forward(store, &q_hat.add(&f)?)?;
    Ok((
        out,
        DecoderLayerCache {
            self_attention,
            self_norm,
            cross_attention,
            cross_norm,
            ffn,
            ffn_norm,
        },
    ))
}

/// Backward of [`decoder_layer_forward`]; returns `(d_queries, d_tokens)`.
pub fn decoder_layer_backward(
    store: &ParamStore,
    params: &DecoderLayerParams,
    cache: &DecoderLayerCache,
    d_out: &Matrix,
    grads: &mut GradSet,
) -> Result<(Matrix, Matrix)> {
    let d_r3 = params.ffn_norm.backward(store, &cache.ffn_norm, d_out, grads)?;
    let mut d_q_hat = params.ffn.backward(store, &cache.ffn, &d_r3, grads)?;
    d_q_hat.add_assign(&d_r3)?;

    let d_r2 = params.cross_norm.backward(store, &cache.cross_norm, &d_q_hat, grads)?;
    let (d_ca_q, d_tokens) = mha_backward(store, &params.cross_attention, &cache.cross_attention, &d_r2, grads)?;
    let mut d_q_tilde = d_r2;
    d_q_tilde.add_assign(&d_ca_q)?;

    let d_r1 = params.self_norm.backward(store, &cache.self_norm, &d_q_tilde, grads)?;
    let (d_sa_q, d_sa_kv) = mha_backward(store, &params.self_attention, &cache.self_attention, &d_r1, grads)?;
    let mut d_queries = d_r1;
    d_queries.add_assign(&d_sa_q)?;
    d_queries.add_assign(&d_sa_kv)?;
    Ok((d_queries, d_tokens))
}

/// Folds the decoder layers over the initial queries. Returns the refined
/// `2 x d` queries and one cache per layer.
pub fn decode_queries(
    store: &ParamStore,
    layers: &[DecoderLayerParams],
    bank: &QueryBank,
    tokens: &Matrix,
    config: &HeadConfig,
    key_padding: Option<&[u8]>,
) -> Result<(Matrix, Vec<DecoderLayerCache>)> {
    if layers.len() != config.num_layers {
        return Err(DyrexError::Config(format!(
            "head configured for {} decoder layers but {} were given",
            config.num_layers,
            layers.len()
        )));
    }
    let mask = build_query_mask(config.strategy);
    let mut q = bank.stacked(store)?;
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, cache) = decoder_layer_forward(store, layer, &q, tokens, &mask, key_padding)?;
        q = next;
        caches.push(cache);
    }
    Ok((q, caches))
}

/// Start and end probability vectors over the `N` input positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistributions {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Positions a span boundary may occupy.
    pub allowed: Vec<bool>,
}

impl SpanDistributions {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

/// Positions that are not padding and, when restricted, inside the passage.
pub fn allowed_positions(input: &TokenizedInput, restrict_to_passage: bool) -> Vec<bool> {
    let (first, last) = input.passage_span;
    input
        .padding_mask
        .iter()
        .enumerate()
        .map(|(i, &p)| p == 1 && (!restrict_to_passage || (first..=last).contains(&i)))
        .collect()
}

/// `softmax_i(q_start . h_i)` and `softmax_j(q_end . h_j)` over the allowed
/// positions; everything else gets exactly zero mass.
pub fn span_distributions(
    queries: &Matrix,
    tokens: &Matrix,
    input: &TokenizedInput,
    config: &HeadConfig,
) -> Result<SpanDistributions> {
    if queries.shape() != (2, tokens.cols()) {
        return Err(DyrexError::dim("span queries", (2, tokens.cols()), queries.shape()));
    }
    if input.len() != tokens.rows() {
        return Err(DyrexError::dim("span tokens", (input.len(), tokens.cols()), tokens.shape()));
    }
    let allowed = allowed_positions(input, config.restrict_to_passage);
    if !allowed.iter().any(|&a| a) {
        return Err(DyrexError::InvalidInput("no position is allowed as a span boundary".into()));
    }
    let logits = matmul(queries, &tokens.transpose())?;
    let row: Vec<f64> = allowed.iter().map(|&a| f64::from(u8::from(a))).collect();
    let mask = Matrix::from_parts(2, row.len(), [row.clone(), row].concat());
    let probs = softmax_rows(&logits, Some(&mask))?;
    Ok(SpanDistributions {
        start: probs.row(START_ROW).to_vec(),
        end: probs.row(END_ROW).to_vec(),
        allowed,
    })
}

/// The static-query estimator computed directly from the two query vectors,
/// without any decoder machinery.
pub fn vanilla_span_distributions(
    start_query: &[f64],
    end_query: &[f64],
    tokens: &Matrix,
    allowed: &[bool],
) -> Result<SpanDistributions> {
    if !allowed.iter().any(|&a| a) {
        return Err(DyrexError::InvalidInput("no position is allowed as a span boundary".into()));
    }
    let estimate = |q: &[f64]| -> Vec<f64> {
        let scores: Vec<f64> = (0..tokens.rows())
            .map(|i| q.iter().zip(tokens.row(i)).map(|(a, b)| a * b).sum())
            .collect();
        let max = scores
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores
            .iter()
            .zip(allowed)
            .map(|(&s, &a)| if a { (s - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    };
    Ok(SpanDistributions {
        start: estimate(start_query),
        end: estimate(end_query),
        allowed: allowed.to_vec(),
    })
}

/// `-log p_start[gold.0] - log p_end[gold.1]`, log arguments clamped at 1e-12.
pub fn span_nll(dists: &SpanDistributions, gold: (usize, usize), qid: &str) -> Result<f64> {
    let (i, j) = gold;
    let n = dists.len();
    if i >= n || j >= n || !dists.allowed[i] || !dists.allowed[j] {
        return Err(DyrexError::TrainingData {
            qid: qid.to_string(),
            msg: format!("gold span {gold:?} falls on a masked position"),
        });
    }
    Ok(-dists.start[i].max(LOG_CLAMP).ln() - dists.end[j].max(LOG_CLAMP).ln())
}

/// Gradient of [`span_nll`] with respect to the `2 x N` logits.
fn nll_logit_grad(dists: &SpanDistributions, gold: (usize, usize)) -> Matrix {
    let n = dists.len();
    let mut g = Matrix::zeros(2, n);
    for (row, (probs, target)) in [(&dists.start, gold.0), (&dists.end, gold.1)].into_iter().enumerate() {
        for k in 0..n {
            g.set(row, k, probs[k] - f64::from(u8::from(k == target)));
        }
    }
    g
}

/// Forward intermediates of the whole head for one example.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub refined: Matrix,
    pub layers: Vec<DecoderLayerCache>,
    pub dists: SpanDistributions,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub bank: QueryBank,
    pub layers: Vec<DecoderLayerParams>,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, d: usize, config: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(d)?;
        let bank = QueryBank::init(store, d, rng)?;
        let layers = (0..config.num_layers)
            .map(|i| DecoderLayerParams::init(store, i, d, config.num_heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { bank, layers })
    }
}

/// Runs the decoder and the span estimators.
pub fn head_forward(
    store: &ParamStore,
    head: &HeadParams,
    tokens: &Matrix,
    input: &TokenizedInput,
    config: &HeadConfig,
) -> Result<HeadCache> {
    let (refined, layers) = decode_queries(store, &head.layers, &head.bank, tokens, config, Some(&input.padding_mask))?;
    let dists = span_distributions(&refined, tokens, input, config)?;
    Ok(HeadCache { refined, layers, dists })
}

/// Backward of [`span_nll`] through the estimators and every decoder layer.
/// Parameter gradients go to `grads`; the token-representation gradient is
/// returned.
pub fn head_backward(
    store: &ParamStore,
    head: &HeadParams,
    cache: &HeadCache,
    tokens: &Matrix,
    gold: (usize, usize),
    grads: &mut GradSet,
) -> Result<Matrix> {
    let d_logits = nll_logit_grad(&cache.dists, gold);
    let mut d_q = matmul(&d_logits, tokens)?;
    let mut d_tokens = matmul(&d_logits.transpose(), &cache.refined)?;
    for (layer, layer_cache) in head.layers.iter().zip(&cache.layers).rev() {
        let (dq_prev, dt) = decoder_layer_backward(store, layer, layer_cache, &d_q, grads)?;
        d_tokens.add_assign(&dt)?;
        d_q = dq_prev;
    }
    head.bank.backward(&d_q, grads)?;
    Ok(d_tokens)
}

/// A decoded answer span in input coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    /// `p_start[start] * p_end[end]`.
    pub score: f64,
    #[serde(default)]
    pub text: String,
}

/// Best `(i, j)` with `i <= j`, `j - i + 1 <= max_answer_len` and both
/// positions allowed, by `p_start[i] * p_end[j]`. Ties go to the smaller `i`,
/// then the smaller `j`.
pub fn decode_span(dists: &SpanDistributions, max_answer_len: usize) -> Result<SpanPrediction> {
    let n = dists.len();
    let mut best: Option<SpanPrediction> = None;
    for i in (0..n).filter(|&i| dists.allowed[i]) {
        let last = (i + max_answer_len).min(n);
        for j in (i..last).filter(|&j| dists.allowed[j]) {
            let score = dists.start[i] * dists.end[j];
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(SpanPrediction { start: i, end: j, score, text: String::new() });
            }
        }
    }
    best.ok_or_else(|| DyrexError::InvalidInput("no valid span to decode".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SEGMENT_PASSAGE;
    use crate::numkit::{gelu, layer_norm, linear_forward, LAYER_NORM_EPS};

    fn plain_input(n: usize, question_len: usize) -> TokenizedInput {
        TokenizedInput {
            token_ids: vec![2; n],
            segment_ids: (0..n).map(|i| u8::from(i >= question_len)).collect(),
            padding_mask: vec![1; n],
            passage_span: (question_len, n - 1),
        }
    }

    fn unrestricted() -> HeadConfig {
        HeadConfig { num_layers: 0, restrict_to_passage: false, ..HeadConfig::default() }
    }

    fn dists(start: &[f64], end: &[f64]) -> SpanDistributions {
        SpanDistributions { start: start.to_vec(), end: end.to_vec(), allowed: vec![true; start.len()] }
    }

    fn setup(num_layers: usize, strategy: MaskStrategy, d: usize, seed: u64) -> (ParamStore, HeadParams, HeadConfig) {
        let cfg = HeadConfig { num_layers, num_heads: 2, strategy, ..HeadConfig::default() };
        let mut store = ParamStore::new();
        let head = HeadParams::init(&mut store, d, &cfg, &mut Rng::new(seed)).unwrap();
        (store, head, cfg)
    }

    #[test]
    fn zero_query_is_uniform_over_allowed() {
        let h = Rng::new(1).normal_matrix(6, 4, 1.0);
        let mut input = plain_input(6, 2);
        input.padding_mask = vec![1, 1, 1, 1, 1, 0];
        input.token_ids[5] = 0;
        input.segment_ids[5] = SEGMENT_PASSAGE;
        input.passage_span = (2, 4);
        let d = span_distributions(&Matrix::zeros(2, 4), &h, &input, &HeadConfig::default()).unwrap();
        assert_eq!(d.start[..2], [0.0, 0.0]);
        assert_eq!(d.start[5], 0.0);
        for p in &d.start[2..5] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_query_concentrates() {
        let h = Matrix::identity(4);
        let q = Matrix::from_rows(&[vec![0.0, 0.0, 50.0, 0.0], vec![0.0; 4]]).unwrap();
        let d = span_distributions(&q, &h, &plain_input(4, 0), &unrestricted()).unwrap();
        assert!(d.start[2] > 1.0 - 1e-9);
    }

    #[test]
    fn hand_logits_match_exponentiation() {
        // logits [1, 2, 3, 0] for the start query via one-hot token rows
        let h = Matrix::identity(4);
        let q = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 0.0], vec![0.0; 4]]).unwrap();
        let d = span_distributions(&q, &h, &plain_input(4, 0), &unrestricted()).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0, 0.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, ev) in d.start.iter().zip(&e) {
            assert!((p - ev / z).abs() < 1e-15);
        }
    }

    #[test]
    fn no_allowed_position_is_an_error() {
        let mut input = plain_input(3, 3);
        input.passage_span = (2, 2);
        input.padding_mask = vec![1, 1, 0];
        input.token_ids[2] = 0;
        let err = span_distributions(&Matrix::zeros(2, 2), &Matrix::zeros(3, 2), &input, &HeadConfig::default());
        assert!(matches!(err, Err(DyrexError::InvalidInput(_))));
    }

    #[test]
    fn nll_examples() {
        let u = dists(&[0.25; 4], &[0.25; 4]);
        assert!((span_nll(&u, (1, 2), "q").unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((span_nll(&u, (1, 2), "q").unwrap() - 2.772589).abs() < 1e-6);
        let p = dists(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]);
        assert_eq!(span_nll(&p, (1, 2), "q").unwrap(), 0.0);
        let h = dists(&[0.5, 0.5, 0.0, 0.0], &[0.25, 0.25, 0.25, 0.25]);
        assert!((span_nll(&h, (0, 3), "q").unwrap() - (2f64.ln() + 4f64.ln())).abs() < 1e-12);
        let mut masked = dists(&[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0]);
        masked.allowed[2] = false;
        let err = span_nll(&masked, (0, 2), "qid-7").unwrap_err();
        assert!(err.to_string().contains("qid-7"));
    }

    fn brute_force(d: &SpanDistributions, max_len: usize) -> Option<(usize, usize)> {
        let n = d.len();
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in 0..n {
                if i > j || j - i + 1 > max_len || !d.allowed[i] || !d.allowed[j] {
                    continue;
                }
                let s = d.start[i] * d.end[j];
                let better = match best {
                    None => true,
                    Some((bs, bi, bj)) => s > bs || (s == bs && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((s, i, j));
                }
            }
        }
        best.map(|(_, i, j)| (i, j))
    }

    #[test]
    fn decode_span_examples() {
        let mut s = vec![0.0; 8];
        let mut e = vec![0.0; 8];
        s[3] = 1.0;
        e[5] = 1.0;
        let p = decode_span(&dists(&s, &e), 3).unwrap();
        assert_eq!((p.start, p.end), (3, 5));

        let s = [0.05, 0.05, 0.1, 0.1, 0.1, 0.4, 0.1, 0.1];
        let e = [0.05, 0.1, 0.45, 0.1, 0.1, 0.05, 0.1, 0.05];
        let d = dists(&s, &e);
        let p = decode_span(&d, 30).unwrap();
        assert_eq!(Some((p.start, p.end)), brute_force(&d, 30));

        let mut u = dists(&[0.2; 5], &[0.2; 5]);
        u.allowed[0] = false;
        let p = decode_span(&u, 30).unwrap();
        assert_eq!((p.start, p.end), (1, 1));

        let none = SpanDistributions { start: vec![1.0], end: vec![1.0], allowed: vec![false] };
        assert!(decode_span(&none, 5).is_err());
    }

    #[test]
    fn decode_span_matches_brute_force_on_random_inputs() {
        let mut rng = Rng::new(99);
        for trial in 0..500 {
            let n = rng.range_inclusive(1, 50);
            // quantized values produce plenty of ties
            let draw = |rng: &mut Rng| (0..n).map(|_| rng.below(4) as f64 / 4.0).collect::<Vec<_>>();
            let start = draw(&mut rng);
            let end = draw(&mut rng);
            let mut allowed: Vec<bool> = (0..n).map(|_| rng.below(5) != 0).collect();
            allowed[rng.below(n)] = true;
            let max_len = rng.range_inclusive(1, 10);
            let d = SpanDistributions { start, end, allowed };
            let got = decode_span(&d, max_len).ok().map(|p| (p.start, p.end));
            assert_eq!(got, brute_force(&d, max_len), "trial {trial}");
        }
    }

    #[test]
    fn zero_weight_layer_is_three_layer_norms() {
        let (mut store, head, _) = setup(1, MaskStrategy::Bidirectional, 8, 1);
        let layer = &head.layers[0];
        for mha in [&layer.self_attention, &layer.cross_attention] {
            for lin in [mha.query, mha.key, mha.value, mha.output] {
                store.value_mut(lin.weight).zero();
            }
        }
        for lin in [layer.ffn.inner, layer.ffn.outer] {
            store.value_mut(lin.weight).zero();
        }
        let mut rng = Rng::new(2);
        let q = rng.normal_matrix(2, 8, 1.0);
        let h = rng.normal_matrix(5, 8, 1.0);
        let mask = build_query_mask(MaskStrategy::Bidirectional);
        let (out, _) = decoder_layer_forward(&store, layer, &q, &h, &mask, None).unwrap();
        let (one, zero) = (Matrix::filled(1, 8, 1.0), Matrix::zeros(1, 8));
        let ln = |x: &Matrix| layer_norm(x, &one, &zero, LAYER_NORM_EPS).unwrap().0;
        assert!(out.max_abs_diff(&ln(&ln(&ln(&q)))) < 1e-12);
    }

    /// Straight-line composition of the published ops, kept independent of
    /// `decoder_layer_forward`.
    fn layer_oracle(store: &ParamStore, layer: &DecoderLayerParams, q: &Matrix, h: &Matrix, mask: &AttnMask) -> Matrix {
        let v = |id| store.value(id);
        let ln = |x: &Matrix, n: &LayerNorm| layer_norm(x, v(n.gamma), v(n.beta), LAYER_NORM_EPS).unwrap().0;
        let (sa, _) = mha_forward(store, &layer.self_attention, q, q, Some(mask), None).unwrap();
        let qt = ln(&q.add(&sa).unwrap(), &layer.self_norm);
        let (ca, _) = mha_forward(store, &layer.cross_attention, &qt, h, None, None).unwrap();
        let qh = ln(&qt.add(&ca).unwrap(), &layer.cross_norm);
        let hidden = gelu(&linear_forward(&qh, v(layer.ffn.inner.weight), v(layer.ffn.inner.bias.unwrap())).unwrap());
        let f = linear_forward(&hidden, v(layer.ffn.outer.weight), v(layer.ffn.outer.bias.unwrap())).unwrap();
        ln(&qh.add(&f).unwrap(), &layer.ffn_norm)
    }

    #[test]
    fn layer_matches_op_composition() {
        let (store, head, _) = setup(1, MaskStrategy::Causal, 8, 3);
        let mut rng = Rng::new(4);
        let q = rng.normal_matrix(2, 8, 1.0);
        let h = rng.normal_matrix(6, 8, 1.0);
        let mask = build_query_mask(MaskStrategy::Causal);
        let (out, _) = decoder_layer_forward(&store, &head.layers[0], &q, &h, &mask, None).unwrap();
        assert!(out.max_abs_diff(&layer_oracle(&store, &head.layers[0], &q, &h, &mask)) < 1e-12);
    }

    #[test]
    fn independent_mask_isolates_start_row() {
        let (store, head, _) = setup(1, MaskStrategy::Independent, 8, 5);
        let mut rng = Rng::new(6);
        let q = rng.normal_matrix(2, 8, 1.0);
        let h = rng.normal_matrix(6, 8, 1.0);
        let mask = build_query_mask(MaskStrategy::Independent);
        let (out, _) = decoder_layer_forward(&store, &head.layers[0], &q, &h, &mask, None).unwrap();
        let mut q2 = q.clone();
        q2.row_mut(END_ROW).iter_mut().for_each(|v| *v -= 0.9);
        let (out2, _) = decoder_layer_forward(&store, &head.layers[0], &q2, &h, &mask, None).unwrap();
        assert_eq!(out.row(START_ROW), out2.row(START_ROW));
    }

    #[test]
    fn decode_queries_folds_layers() {
        let (store, head, cfg) = setup(3, MaskStrategy::Bidirectional, 8, 7);
        let h = Rng::new(8).normal_matrix(5, 8, 1.0);
        let mask = build_query_mask(cfg.strategy);
        let (out, _) = decode_queries(&store, &head.layers, &head.bank, &h, &cfg, None).unwrap();
        let mut q = head.bank.stacked(&store).unwrap();
        for layer in &head.layers {
            q = layer_oracle(&store, layer, &q, &h, &mask);
        }
        assert!(out.max_abs_diff(&q) < 1e-12);

        let one = HeadConfig { num_layers: 1, ..cfg.clone() };
        let (out1, _) = decode_queries(&store, &head.layers[..1], &head.bank, &h, &one, None).unwrap();
        let (direct, _) = decoder_layer_forward(&store, &head.layers[0], &head.bank.stacked(&store).unwrap(), &h, &mask, None).unwrap();
        assert_eq!(out1, direct);

        let zero = HeadConfig { num_layers: 0, ..cfg.clone() };
        let (out0, _) = decode_queries(&store, &[], &head.bank, &h, &zero, None).unwrap();
        assert_eq!(out0.row(START_ROW), store.value(head.bank.start).as_slice());
        assert_eq!(out0.row(END_ROW), store.value(head.bank.end).as_slice());

        let err = decode_queries(&store, &head.layers[..2], &head.bank, &h, &cfg, None).unwrap_err();
        assert!(matches!(err, DyrexError::Config(_)));
    }

    #[test]
    fn static_query_gradient_is_softmax_cross_entropy() {
        let (store, head, cfg) = setup(0, MaskStrategy::Bidirectional, 8, 9);
        let h = Rng::new(10).normal_matrix(10, 8, 1.0);
        let input = plain_input(10, 2);
        let cache = head_forward(&store, &head, &h, &input, &cfg).unwrap();
        let mut grads = store.zeroed_grads();
        let gold = (4, 6);
        head_backward(&store, &head, &cache, &h, gold, &mut grads).unwrap();
        let mut expected = vec![0.0; 8];
        for i in 0..10 {
            let coeff = cache.dists.start[i] - f64::from(u8::from(i == gold.0));
            for (e, hv) in expected.iter_mut().zip(h.row(i)) {
                *e += coeff * hv;
            }
        }
        for (g, e) in grads.get(head.bank.start).as_slice().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        let (mut store, head, cfg) = setup(0, MaskStrategy::Bidirectional, 4, 11);
        let h = Matrix::identity(4);
        store.set_value(head.bank.start, Matrix::row_vector(&[0.0, 60.0, 0.0, 0.0]).unwrap()).unwrap();
        store.set_value(head.bank.end, Matrix::row_vector(&[0.0, 0.0, 60.0, 0.0]).unwrap()).unwrap();
        let cfg = HeadConfig { restrict_to_passage: false, ..cfg };
        let input = plain_input(4, 0);
        let cache = head_forward(&store, &head, &h, &input, &cfg).unwrap();
        let loss = span_nll(&cache.dists, (1, 2), "q").unwrap();
        assert!(loss < 1e-20);
        let mut grads = store.zeroed_grads();
        let dh = head_backward(&store, &head, &cache, &h, (1, 2), &mut grads).unwrap();
        assert!(grads.iter().all(|(_, g)| g.as_slice().iter().all(|v| v.abs() < 1e-6)));
        assert!(dh.as_slice().iter().all(|v| v.abs() < 1e-6));
    }
}
