//! Extractive question answering with dynamically refined span queries.
//!
//! Token representations of a question/passage pair are scored against a
//! start query and an end query. In the static baseline the two queries are
//! learned constants; here they are first passed through a stack of
//! transformer decoder layers that attend to each other and to the tokens.
//! With zero decoder layers the two models coincide.
//!
//! Everything runs on a small hand-differentiated `f64` numerical core so that
//! gradients can be checked against finite differences.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod qahead;
pub mod trainer;

pub use attention::{AttnMask, MaskStrategy, MhaParams};
pub use data::{Batch, Instance, QAExample, SynthSpec};
pub use encoder::{EncoderConfig, TokenizedInput, Vocab};
pub use error::{DyrexError, Result};
pub use metrics::EvalResult;
pub use model::{DyrexModel, ModelConfig};
pub use numkit::{GradSet, Matrix, ParamId, ParamStore, Rng};
pub use qahead::{HeadConfig, QueryBank, SpanDistributions, SpanPrediction};
pub use trainer::{TrainConfig, TrainLogRecord};
