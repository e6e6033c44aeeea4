//! Run configuration: one JSON file plus `dotted.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dyrex_core::trainer::{AblationConfig, GradCheckConfig};
use dyrex_core::{EncoderConfig, HeadConfig, ModelConfig, TrainConfig};

/// A configuration problem detected by the CLI itself (exit status 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// MRQA file used for training (and for the gradient check).
    pub train: Option<PathBuf>,
    /// MRQA file scored after training and by the ablation.
    pub eval: Option<PathBuf>,
    /// Vocabulary file, one token per line. Built from `train` when absent.
    pub vocab: Option<PathBuf>,
    /// Directory of `<qid>.mat` files replacing the encoder output.
    pub embeddings_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub h: f64,
    pub tol: f64,
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Redraw both initial queries from N(0, query_std^2) before checking.
    /// At the default init scale the query self-attention gradients can sit
    /// below finite-difference resolution.
    pub query_std: Option<f64>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        Self { h: c.h, tol: c.tol, max_coords_per_tensor: c.max_coords_per_tensor, seed: c.seed, query_std: None }
    }
}

impl GradcheckSection {
    pub fn check_config(&self) -> GradCheckConfig {
        GradCheckConfig { h: self.h, tol: self.tol, max_coords_per_tensor: self.max_coords_per_tensor, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Model initialization seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Sequence cap for batching; defaults to `encoder.max_len`.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let cfg: Self = load_json(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), head: self.head.clone(), seed: self.seed }
    }

    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or(self.encoder.max_len)
    }

    pub fn output_dir(&self) -> anyhow::Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| usage("output_dir is not set"))
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        if self.max_len() == 0 || self.max_len() > self.encoder.max_len {
            bail!(usage(format!(
                "max_len {} must lie in 1..={} (encoder.max_len)",
                self.max_len(),
                self.encoder.max_len
            )));
        }
        let d = &self.data;
        for (key, p) in [("data.train", &d.train), ("data.eval", &d.eval), ("data.vocab", &d.vocab), ("data.embeddings_dir", &d.embeddings_dir)] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!(usage(format!("{key}: path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Reads a JSON object (or `{}` without a file), applies the overrides and
/// deserializes the result. Unknown keys are rejected by the target type.
pub fn load_json<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<T> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    serde_json::from_value(root).map_err(|e| usage(format!("invalid configuration: {e}")))
}

/// `a.b.c=v` sets `root["a"]["b"]["c"]`. `v` is read as JSON when it parses
/// and as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(usage(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override {key:?}: {part:?} is inside a non-object value")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| usage(format!("override {key:?} targets a non-object value")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
