//! Parameter-bound wrappers around the elementary ops: each struct holds
//! [`ParamId`]s into a [`ParamStore`] and pairs a forward pass with a
//! backward pass that accumulates into a [`GradSet`].

use crate::error::Result;
use crate::numkit::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear_backward, linear_forward, matmul,
    GradSet, LayerNormCache, Matrix, ParamId, ParamStore, Rng, LAYER_NORM_EPS,
};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), rng.xavier_matrix(d_in, d_out), trainable)?,
            bias: Some(store.insert(format!("{name}.bias"), Matrix::zeros(1, d_out), trainable)?),
        })
    }

    /// Xavier-uniform weight and no bias.
    pub fn init_without_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), rng.xavier_matrix(d_in, d_out), trainable)?,
            bias: None,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        match self.bias {
            Some(b) => linear_forward(x, store.value(self.weight), store.value(b)),
            None => matmul(x, store.value(self.weight)),
        }
    }

    /// Returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Matrix,
        dy: &Matrix,
        grads: &mut GradSet,
    ) -> Result<Matrix> {
        let (dx, dw, db) = linear_backward(x, store.value(self.weight), dy)?;
        grads.add(self.weight, &dw)?;
        if let Some(b) = self.bias {
            grads.add(b, &db)?;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    /// Identity-initialized: gamma = 1, beta = 0.
    pub fn init(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Matrix::filled(1, d, 1.0), trainable)?,
            beta: store.insert(format!("{name}.beta"), Matrix::zeros(1, d), trainable)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        layer_norm(x, store.value(self.gamma), store.value(self.beta), LAYER_NORM_EPS)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Matrix,
        grads: &mut GradSet,
    ) -> Result<Matrix> {
        let (dx, dg, db) = layer_norm_backward(cache, store.value(self.gamma), dy)?;
        grads.add(self.gamma, &dg)?;
        grads.add(self.beta, &db)?;
        Ok(dx)
    }
}

/// Two-layer point-wise network `W2 GeLU(W1 x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    input: Matrix,
    pre_activation: Matrix,
    activation: Matrix,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::init(store, &format!("{name}.inner"), d, d_ff, rng, trainable)?,
            outer: Linear::init(store, &format!("{name}.outer"), d_ff, d, rng, trainable)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, FeedForwardCache)> {
        let pre_activation = self.inner.forward(store, x)?;
        let activation = gelu(&pre_activation);
        let out = self.outer.forward(store, &activation)?;
        Ok((
            out,
            FeedForwardCache {
                input: x.clone(),
                pre_activation,
                activation,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &FeedForwardCache,
        dy: &Matrix,
        grads: &mut GradSet,
    ) -> Result<Matrix> {
        let d_act = self.outer.backward(store, &cache.activation, dy, grads)?;
        let d_pre = gelu_backward(&cache.pre_activation, &d_act)?;
        self.inner.backward(store, &cache.input, &d_pre, grads)
    }
}
