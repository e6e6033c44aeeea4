//! Dense matrices, the elementary differentiable operators and parameter storage.

mod matrix;
mod ops;
mod params;
mod rng;

pub use matrix::{Matrix, MATRIX_MAGIC};
pub use ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear_backward, linear_forward, matmul,
    matmul_backward, softmax_backward, softmax_rows, LayerNormCache, LAYER_NORM_EPS, MASK_NEG,
};
pub use params::{GradSet, Param, ParamId, ParamStore};
pub use rng::Rng;

pub mod layers;
