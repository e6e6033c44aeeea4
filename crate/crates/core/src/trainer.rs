//! Adam with linear warmup/decay, the training loop, finite-difference
//! gradient checking and the layer-count x mask-strategy ablation runner.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::MaskStrategy;
use crate::data::{answer_text, Instance, QAExample};
use crate::encoder::Vocab;
use crate::error::{DyrexError, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{DyrexModel, ModelConfig};
use crate::numkit::{GradSet, Matrix, ParamStore, Rng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const THREADS_ENV: &str = "DYREX_THREADS";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Number of updates taken so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
/// Frozen entries are skipped; gradients are left in place.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(DyrexError::Internal(format!(
            "optimizer state holds {} buffers for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((name, p), m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(DyrexError::Internal(format!("optimizer buffer shape drift for {name}")));
        }
        if !p.trainable {
            continue;
        }
        let g = p.grad.as_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (k, theta) in p.value.as_mut_slice().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over the first `ceil(warmup_frac * total)`
/// steps, then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total: usize) -> Self {
        let x = warmup_frac * total as f64;
        // 0.1 * 70 is 7.000000000000001 in binary; don't let that round up
        let warmup = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() } as usize;
        Self { peak, warmup: warmup.min(total), total }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step >= self.total {
            0.0
        } else if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

pub fn lr_at(step: usize, config: &TrainConfig, total: usize) -> f64 {
    LrSchedule::new(config.peak_lr, config.warmup_frac, total).at(step)
}

// ---------------------------------------------------------------------------
// Training loop

fn default_peak_lr() -> f64 {
    3e-5
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    12
}
fn default_max_epochs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many updates (0 disables periodic evaluation).
    #[serde(default)]
    pub eval_every: usize,
    /// L2 coefficient added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm cap.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: default_peak_lr(),
            warmup_frac: default_warmup_frac(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            max_steps: None,
            seed: 0,
            eval_every: 0,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DyrexError::Config(m));
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac must lie in (0, 1), got {}", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return fail(format!("peak_lr must be finite and non-negative, got {}", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return fail("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// `min(max_steps, epochs * ceil(n / batch_size))`.
    pub fn total_steps(&self, num_examples: usize) -> usize {
        let per_epoch = num_examples.div_ceil(self.batch_size.max(1));
        let by_epochs = per_epoch * self.max_epochs;
        self.max_steps.map_or(by_epochs, |s| s.min(by_epochs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// 0-based index of the update.
    pub step: usize,
    pub lr: f64,
    /// Batch-mean loss before the update.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_f1: Option<f64>,
}

/// Held-out examples and their model inputs, index-aligned.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub instances: Vec<Instance>,
    pub examples: Vec<QAExample>,
}

impl EvalSet {
    pub fn new(instances: Vec<Instance>, examples: Vec<QAExample>) -> Result<Self> {
        if instances.len() != examples.len() || instances.iter().zip(&examples).any(|(i, e)| i.qid != e.qid) {
            return Err(DyrexError::Internal("evaluation instances and examples are not aligned".into()));
        }
        Ok(Self { instances, examples })
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Where a training run writes its log and final checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
    pub vocab: Option<&'a Vocab>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    pub total_steps: usize,
    pub final_eval: Option<EvalResult>,
}

/// Worker count from `DYREX_THREADS`, default 1.
pub fn configured_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(DyrexError::Config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| DyrexError::Internal(format!("thread pool: {e}")))
}

/// Greedy predictions (with answer text) for every evaluation example.
pub fn predict_all(model: &DyrexModel, eval: &EvalSet, pool: &rayon::ThreadPool) -> Result<HashMap<String, String>> {
    let texts: Vec<Result<(String, String)>> = pool.install(|| {
        eval.instances
            .par_iter()
            .zip(&eval.examples)
            .map(|(inst, ex)| {
                let p = model.predict(inst)?;
                Ok((inst.qid.clone(), answer_text(ex, inst, p.start, p.end)))
            })
            .collect()
    });
    texts.into_iter().collect()
}

/// [`predict_all`] on a pool sized by `DYREX_THREADS`.
pub fn predictions(model: &DyrexModel, eval: &EvalSet) -> Result<HashMap<String, String>> {
    predict_all(model, eval, &thread_pool(configured_threads()?)?)
}

pub fn evaluate_model(model: &DyrexModel, eval: &EvalSet) -> Result<EvalResult> {
    Ok(evaluate(&predictions(model, eval)?, &eval.examples))
}

fn global_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.as_slice().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn apply_regularizers(store: &mut ParamStore, cfg: &TrainConfig) {
    if cfg.weight_decay > 0.0 {
        for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let theta = p.value.as_slice().to_vec();
            for (g, t) in p.grad.as_mut_slice().iter_mut().zip(theta) {
                *g += cfg.weight_decay * t;
            }
        }
    }
    if let Some(cap) = cfg.grad_clip {
        let norm = global_norm(store);
        if norm > cap {
            let s = cap / norm;
            for (_, p) in store.iter_mut() {
                p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
}

/// Trains `model` in place. Every update uses the mean loss gradient of one
/// shuffled batch; per-example work may run on several threads but the
/// reduction order is fixed, so results do not depend on the thread count.
pub fn train(
    model: &mut DyrexModel,
    train_set: &[Instance],
    eval: Option<&EvalSet>,
    cfg: &TrainConfig,
    outputs: Option<TrainOutputs<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let total = cfg.total_steps(train_set.len());
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_frac, total);
    let pool = thread_pool(configured_threads()?)?;
    let mut rng = Rng::new(cfg.seed);
    let mut state = OptimState::new(&model.store);
    let mut log = Vec::with_capacity(total);
    let mut log_writer = match outputs {
        Some(o) => {
            fs::create_dir_all(o.dir).map_err(|e| DyrexError::io(o.dir, e))?;
            let path = o.dir.join(LOG_FILE);
            let f = File::create(&path).map_err(|e| DyrexError::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    let eval = eval.filter(|e| !e.is_empty());
    let mut final_eval = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    'epochs: while step < total {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let qids = || batch.iter().map(|i| i.qid.clone()).collect::<Vec<_>>();
            let model_ref = &*model;
            let results: Vec<Result<(f64, GradSet)>> =
                pool.install(|| batch.par_iter().map(|inst| model_ref.loss_and_grads(inst)).collect());
            let mut loss_sum = 0.0;
            let mut grads = model.store.zeroed_grads();
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    DyrexError::NonFinite(what) => {
                        DyrexError::Numerical { step, msg: format!("non-finite value in {what}"), qids: qids() }
                    }
                    e => e,
                })?;
                loss_sum += l;
                grads.add_set(&g)?;
            }
            let inv = 1.0 / batch.len() as f64;
            let loss = loss_sum * inv;
            if !loss.is_finite() {
                return Err(DyrexError::Numerical { step, msg: format!("loss is {loss}"), qids: qids() });
            }
            grads.scale(inv);
            if grads.iter().any(|(_, g)| g.as_slice().iter().any(|v| !v.is_finite())) {
                return Err(DyrexError::Numerical { step, msg: "non-finite gradient".into(), qids: qids() });
            }
            model.store.zero_grads();
            model.store.accumulate(&grads)?;
            apply_regularizers(&mut model.store, cfg);
            let lr = schedule.at(step);
            adam_step(&mut model.store, &mut state, lr)?;
            step += 1;

            let mut record = TrainLogRecord { step: step - 1, lr, loss, eval_em: None, eval_f1: None };
            let due = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == total;
            if let (Some(e), true) = (eval, due) {
                let r = evaluate(&predict_all(model, e, &pool)?, &e.examples);
                record.eval_em = Some(r.em);
                record.eval_f1 = Some(r.f1);
                if step == total {
                    final_eval = Some(r);
                }
            }
            if let Some((w, path)) = log_writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| DyrexError::io(&*path, e))?;
            }
            log.push(record);
        }
        if train_set.is_empty() {
            break;
        }
    }
    if let (None, Some(e)) = (&final_eval, eval) {
        final_eval = Some(evaluate(&predict_all(model, e, &pool)?, &e.examples));
    }
    if let Some((mut w, path)) = log_writer {
        w.flush().map_err(|e| DyrexError::io(&path, e))?;
    }
    if let Some(o) = outputs {
        model.store.zero_grads();
        model.save_checkpoint(o.dir.join(CHECKPOINT_DIR), o.vocab)?;
    }
    Ok(TrainOutcome { log, total_steps: total, final_eval })
}

// ---------------------------------------------------------------------------
// Gradient checking

/// A scalar objective over a parameter store with an analytic gradient.
pub trait Differentiable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, instance: &Instance) -> Result<f64>;
    fn loss_and_grads(&self, instance: &Instance) -> Result<(f64, GradSet)>;
}

impl Differentiable for DyrexModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, instance: &Instance) -> Result<f64> {
        DyrexModel::loss(self, instance)
    }
    fn loss_and_grads(&self, instance: &Instance) -> Result<(f64, GradSet)> {
        DyrexModel::loss_and_grads(self, instance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Tensors with more coordinates than this are subsampled to this many.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, max_coords_per_tensor: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of every trainable parameter with central
/// differences. Parameter values are restored exactly afterwards.
pub fn grad_check<M: Differentiable>(model: &mut M, instance: &Instance, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(instance)?;
    let mut rng = Rng::new(cfg.seed);
    let ids: Vec<_> = model.store().ids().filter(|&id| model.store().param(id).trainable).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let len = model.store().value(id).len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > cfg.max_coords_per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(cfg.max_coords_per_tensor);
            coords.sort_unstable();
        }
        let mut check = ParamCheck {
            name: model.store().name(id).to_string(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in coords {
            let orig = model.store().value(id).as_slice()[k];
            model.store_mut().value_mut(id).as_mut_slice()[k] = orig + cfg.h;
            let plus = model.loss(instance);
            model.store_mut().value_mut(id).as_mut_slice()[k] = orig - cfg.h;
            let minus = model.loss(instance);
            model.store_mut().value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.h);
            let analytic = grads.get(id).as_slice()[k];
            let err = relative_error(analytic, numeric);
            if !(err <= check.max_rel_error) {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let any_nan = params.iter().any(|p| p.max_rel_error.is_nan());
    Ok(GradCheckReport {
        max_rel_error: if any_nan { f64::NAN } else { max_rel_error },
        tol: cfg.tol,
        passed: !any_nan && max_rel_error < cfg.tol,
        params,
    })
}

// ---------------------------------------------------------------------------
// Ablation

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layers: usize,
    pub strategy: MaskStrategy,
    /// Seeds that completed.
    pub seed_count: usize,
    /// Percentages.
    pub f1_mean: f64,
    pub f1_std: f64,
    pub em_mean: f64,
    pub em_std: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "layers,strategy,seed_count,f1_mean,f1_std,em_mean,em_std";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2},{:.2},{:.2}\n",
                r.layers, r.strategy, r.seed_count, r.f1_mean, r.f1_std, r.em_mean, r.em_std
            ));
        }
        out
    }

    pub fn row(&self, layers: usize, strategy: MaskStrategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.layers == layers && r.strategy == strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub layers: Vec<usize>,
    pub strategies: Vec<MaskStrategy>,
    pub num_seeds: usize,
    pub base_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            layers: (0..=5).collect(),
            strategies: MaskStrategy::ALL.to_vec(),
            num_seeds: 3,
            base_seed: 0,
        }
    }
}

/// Trains and evaluates one model per (layers, strategy, seed). Run `r` of a
/// cell uses seed `base_seed + r` for both initialization and shuffling.
/// A failing run is recorded in its row and the sweep continues.
pub fn run_ablation(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    ablation: &AblationConfig,
    train_set: &[Instance],
    eval: &EvalSet,
) -> Result<AblationTable> {
    if ablation.num_seeds == 0 {
        return Err(DyrexError::Config("ablation needs at least one seed".into()));
    }
    let mut table = AblationTable::default();
    for &layers in &ablation.layers {
        for &strategy in &ablation.strategies {
            let mut ems = Vec::new();
            let mut f1s = Vec::new();
            let mut failures = Vec::new();
            for run in 0..ablation.num_seeds {
                let seed = ablation.base_seed + run as u64;
                let mut cfg = model.clone();
                cfg.head.num_layers = layers;
                cfg.head.strategy = strategy;
                cfg.seed = seed;
                let tcfg = TrainConfig { seed, ..train_cfg.clone() };
                let outcome = DyrexModel::new(cfg).and_then(|mut m| {
                    train(&mut m, train_set, None, &tcfg, None)?;
                    evaluate_model(&m, eval)
                });
                match outcome {
                    Ok(r) => {
                        ems.push(100.0 * r.em);
                        f1s.push(100.0 * r.f1);
                    }
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
            }
            let (f1_mean, f1_std) = mean_std(&f1s);
            let (em_mean, em_std) = mean_std(&ems);
            table.rows.push(AblationRow {
                layers,
                strategy,
                seed_count: ems.len(),
                f1_mean,
                f1_std,
                em_mean,
                em_std,
                failures,
            });
        }
    }
    Ok(table)
}
