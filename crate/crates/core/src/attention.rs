//! Multi-head scaled dot-product attention with boolean masks, plus the
//! 2x2 interaction masks between the start and end queries.

use serde::{Deserialize, Serialize};

use crate::error::{DyrexError, Result};
use crate::numkit::layers::Linear;
use crate::numkit::{matmul, softmax_backward, softmax_rows, GradSet, Matrix, ParamStore, Rng};

/// How the start query and the end query may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Both queries attend to both.
    Bidirectional,
    /// The start query sees only itself; the end query sees both.
    Causal,
    /// Each query sees only itself.
    Independent,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [
        MaskStrategy::Bidirectional,
        MaskStrategy::Causal,
        MaskStrategy::Independent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Bidirectional => "bidirectional",
            MaskStrategy::Causal => "causal",
            MaskStrategy::Independent => "independent",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = DyrexError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bidirectional" => Ok(MaskStrategy::Bidirectional),
            "causal" => Ok(MaskStrategy::Causal),
            "independent" => Ok(MaskStrategy::Independent),
            other => Err(DyrexError::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `{0,1}` matrix of shape `queries x keys`; 1 means the key may be attended.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    allow: Matrix,
}

impl AttnMask {
    pub fn new(allow: Matrix) -> Result<Self> {
        if allow.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DyrexError::InvalidMask("entries must be 0 or 1".into()));
        }
        for r in 0..allow.rows() {
            if allow.row(r).iter().all(|&v| v == 0.0) {
                return Err(DyrexError::InvalidMask(format!("query row {r} allows no key")));
            }
        }
        Ok(Self { allow })
    }

    pub fn allow(&self) -> &Matrix {
        &self.allow
    }
}

/// Query-interaction mask with rows and columns ordered `[start, end]`.
pub fn build_query_mask(strategy: MaskStrategy) -> AttnMask {
    let allow = match strategy {
        MaskStrategy::Bidirectional => [[1.0, 1.0], [1.0, 1.0]],
        MaskStrategy::Causal => [[1.0, 0.0], [1.0, 1.0]],
        MaskStrategy::Independent => [[1.0, 0.0], [0.0, 1.0]],
    };
    AttnMask::new(Matrix::from_rows(&allow.map(|r| r.to_vec())).unwrap()).unwrap()
}

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub num_heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MhaParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        num_heads: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(DyrexError::Config(format!(
                "embedding dim {d_model} is not divisible by {num_heads} heads"
            )));
        }
        let query = Linear::init(store, &format!("{name}.query"), d_model, d_model, rng, trainable)?;
        // a key bias only shifts each score row by a constant, which softmax removes
        let key = Linear::init_without_bias(store, &format!("{name}.key"), d_model, d_model, rng, trainable)?;
        let value = Linear::init(store, &format!("{name}.value"), d_model, d_model, rng, trainable)?;
        let output = Linear::init(store, &format!("{name}.output"), d_model, d_model, rng, trainable)?;
        Ok(Self { num_heads, d_model, query, key, value, output })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Forward intermediates of [`mha_forward`].
#[derive(Debug, Clone)]
pub struct MhaCache {
    queries_in: Matrix,
    keys_values_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention weights, each `queries x keys`.
    pub weights: Vec<Matrix>,
    concat: Matrix,
}

fn combined_mask(
    m: usize,
    n: usize,
    mask: Option<&AttnMask>,
    key_padding: Option<&[u8]>,
) -> Result<Option<Matrix>> {
    if mask.is_none() && key_padding.is_none() {
        return Ok(None);
    }
    if let Some(mask) = mask {
        if mask.allow.shape() != (m, n) {
            return Err(DyrexError::dim("attention mask", (m, n), mask.allow.shape()));
        }
    }
    if let Some(pad) = key_padding {
        if pad.len() != n {
            return Err(DyrexError::dim("key padding", (1, n), (1, pad.len())));
        }
    }
    let mut allow = mask.map_or_else(|| Matrix::filled(m, n, 1.0), |mk| mk.allow.clone());
    if let Some(pad) = key_padding {
        for r in 0..m {
            for (a, &p) in allow.row_mut(r).iter_mut().zip(pad) {
                if p == 0 {
                    *a = 0.0;
                }
            }
        }
    }
    Ok(Some(allow))
}

/// Multi-head attention of `queries` (m x d) over `keys_values` (n x d).
///
/// `key_padding[j] == 0` marks key `j` as padding. Disallowed and padded keys
/// receive exactly zero weight.
pub fn mha_forward(
    store: &ParamStore,
    params: &MhaParams,
    queries: &Matrix,
    keys_values: &Matrix,
    mask: Option<&AttnMask>,
    key_padding: Option<&[u8]>,
) -> Result<(Matrix, MhaCache)> {
    let d = params.d_model;
    if queries.cols() != d || keys_values.cols() != d {
        return Err(DyrexError::dim("mha inputs", queries.shape(), keys_values.shape()));
    }
    let (m, n) = (queries.rows(), keys_values.rows());
    let allow = combined_mask(m, n, mask, key_padding)?;

    let q = params.query.forward(store, queries)?;
    let k = params.key.forward(store, keys_values)?;
    let v = params.value.forward(store, keys_values)?;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut concat = Matrix::zeros(m, d);
    let mut weights = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let scores = matmul(&qh, &kh.transpose())?.scale(scale);
        let p = softmax_rows(&scores, allow.as_ref())?;
        concat.set_col_block(h * dh, &matmul(&p, &vh)?);
        weights.push(p);
    }
    let out = params.output.forward(store, &concat)?;
    Ok((
        out,
        MhaCache {
            queries_in: queries.clone(),
            keys_values_in: keys_values.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

/// Backward of [`mha_forward`]. Returns gradients for the query input and the
/// key/value input; parameter gradients are accumulated into `grads`.
pub fn mha_backward(
    store: &ParamStore,
    params: &MhaParams,
    cache: &MhaCache,
    d_out: &Matrix,
    grads: &mut GradSet,
) -> Result<(Matrix, Matrix)> {
    let d_concat = params.output.backward(store, &cache.concat, d_out, grads)?;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (m, n) = (cache.q.rows(), cache.k.rows());
    let mut dq = Matrix::zeros(m, params.d_model);
    let mut dk = Matrix::zeros(n, params.d_model);
    let mut dv = Matrix::zeros(n, params.d_model);
    for (h, p) in cache.weights.iter().enumerate() {
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let d_head = d_concat.col_block(h * dh, dh);
        let dp = matmul(&d_head, &vh.transpose())?;
        dv.set_col_block(h * dh, &matmul(&p.transpose(), &d_head)?);
        let ds = softmax_backward(p, &dp)?.scale(scale);
        dq.set_col_block(h * dh, &matmul(&ds, &kh)?);
        dk.set_col_block(h * dh, &matmul(&ds.transpose(), &qh)?);
    }
    let d_queries = params.query.backward(store, &cache.queries_in, &dq, grads)?;
    let mut d_kv = params.key.backward(store, &cache.keys_values_in, &dk, grads)?;
    d_kv.add_assign(&params.value.backward(store, &cache.keys_values_in, &dv, grads)?)?;
    Ok((d_queries, d_kv))
}
