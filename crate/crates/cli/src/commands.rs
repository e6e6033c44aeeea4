use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use dyrex_core::data::{generate_synthetic, make_instances, read_mrqa_jsonl, write_mrqa_jsonl};
use dyrex_core::encoder::load_precomputed_embeddings;
use dyrex_core::metrics::evaluate;
use dyrex_core::model::VOCAB_FILE;
use dyrex_core::trainer::{self, grad_check, run_ablation, EvalSet, TrainOutputs, LOG_FILE};
use dyrex_core::{DyrexModel, Instance, QAExample, Rng, SynthSpec, Vocab};

use crate::config::{load_json, usage, RunConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// The gradient check ran but did not meet its tolerance (exit status 3).
#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: max relative error {max:.3e} >= {tol:.0e}")]
pub struct CheckFailed {
    max: f64,
    tol: f64,
}

struct Dataset {
    name: String,
    examples: Vec<QAExample>,
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let read = read_mrqa_jsonl(path)?;
    if read.skipped() > 0 {
        eprintln!(
            "{}: skipped {} questions without a detected span and {} with mismatched spans",
            path.display(),
            read.skipped_missing_span,
            read.skipped_mismatch
        );
    }
    let name = match read.header.get("dataset").and_then(|v| v.as_str()) {
        Some(s) => s.to_string(),
        None => path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    };
    Ok(Dataset { name, examples: read.examples })
}

fn required<'a>(value: &'a Option<std::path::PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("{key} is not set")))
}

/// Vocabulary file if configured, else the one saved with a checkpoint,
/// else every token of `examples` in order of first appearance.
fn resolve_vocab(cfg: &RunConfig, saved: Option<Vocab>, examples: &[QAExample]) -> anyhow::Result<Vocab> {
    let vocab = match (&cfg.data.vocab, saved) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Some(v)) => v,
        (None, None) => {
            let mut v = Vocab::new();
            for ex in examples {
                v.extend(ex.question_tokens.iter().chain(&ex.passage_tokens).map(String::as_str));
            }
            v
        }
    };
    if vocab.len() > cfg.encoder.vocab_size {
        bail!(usage(format!(
            "vocabulary has {} tokens but encoder.vocab_size is {}",
            vocab.len(),
            cfg.encoder.vocab_size
        )));
    }
    Ok(vocab)
}

fn saved_vocab(checkpoint: &Path) -> anyhow::Result<Option<Vocab>> {
    let path = checkpoint.join(VOCAB_FILE);
    Ok(if path.exists() { Some(Vocab::load(path)?) } else { None })
}

fn build_instances(
    examples: &[QAExample],
    vocab: &Vocab,
    max_len: usize,
    embeddings_dir: Option<&Path>,
) -> anyhow::Result<Vec<Instance>> {
    let mut instances = make_instances(examples, vocab, max_len)?;
    if let Some(dir) = embeddings_dir {
        for inst in &mut instances {
            let path = dir.join(format!("{}.mat", inst.qid));
            let m = load_precomputed_embeddings(&path)?;
            let n = inst.input.len();
            if m.rows() < n {
                bail!(dyrex_core::DyrexError::Format {
                    path,
                    msg: format!("{} rows of embeddings for a {n}-token input", m.rows()),
                });
            }
            inst.embeddings = Some(m.row_block(0, n));
        }
    }
    Ok(instances)
}

fn eval_set(examples: Vec<QAExample>, vocab: &Vocab, max_len: usize, emb: Option<&Path>) -> anyhow::Result<EvalSet> {
    let instances = build_instances(&examples, vocab, max_len, emb)?;
    Ok(EvalSet::new(instances, examples)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report_json(result: &dyrex_core::EvalResult, dataset: &str) -> serde_json::Value {
    let mut report = result.report(dataset);
    report["per_example"] = serde_json::to_value(&result.per_example).unwrap_or_default();
    report
}

pub fn train(config: &Path, resume: Option<&Path>, overrides: &[String]) -> anyhow::Result<()> {
    let cfg = RunConfig::load(Some(config), overrides)?;
    let out = cfg.output_dir()?;
    let train_data = read_dataset(required(&cfg.data.train, "data.train")?)?;
    let mut model = DyrexModel::new(cfg.model())?;
    let mut saved = None;
    if let Some(dir) = resume {
        model
            .restore_from(dir)
            .with_context(|| format!("resuming from {}", dir.display()))?;
        saved = saved_vocab(dir)?;
    }
    let vocab = resolve_vocab(&cfg, saved, &train_data.examples)?;
    let emb = cfg.data.embeddings_dir.as_deref();
    let train_set = build_instances(&train_data.examples, &vocab, cfg.max_len(), emb)?;
    let eval = match &cfg.data.eval {
        Some(p) => {
            let d = read_dataset(p)?;
            Some((d.name, eval_set(d.examples, &vocab, cfg.max_len(), emb)?))
        }
        None => None,
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;
    let outcome = trainer::train(
        &mut model,
        &train_set,
        eval.as_ref().map(|(_, e)| e),
        &cfg.train,
        Some(TrainOutputs { dir: out, vocab: Some(&vocab) }),
    )?;

    println!(
        "trained {} steps on {} examples ({} layers, {}); log {}",
        outcome.total_steps,
        train_set.len(),
        cfg.head.num_layers,
        cfg.head.strategy,
        out.join(LOG_FILE).display()
    );
    if let Some(last) = outcome.log.last() {
        println!("final batch loss {:.4}", last.loss);
    }
    if let (Some(r), Some((name, _))) = (&outcome.final_eval, &eval) {
        write_json(&out.join(REPORT_FILE), &report_json(r, name))?;
        println!("{name}: EM {:.2} F1 {:.2} on {} examples", 100.0 * r.em, 100.0 * r.f1, r.per_example.len());
    }
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let (model, vocab, max_len, emb, default_out) = match config {
        Some(c) => {
            let cfg = RunConfig::load(Some(c), overrides)?;
            let mut model = DyrexModel::new(cfg.model())?;
            model.restore_from(checkpoint)?;
            let vocab = match saved_vocab(checkpoint)? {
                Some(v) => v,
                None => Vocab::load(required(&cfg.data.vocab, "data.vocab")?)?,
            };
            let max_len = cfg.max_len();
            (model, vocab, max_len, cfg.data.embeddings_dir.clone(), cfg.output_dir.clone())
        }
        None => {
            if !overrides.is_empty() {
                bail!(usage("overrides require --config"));
            }
            let (model, vocab) = DyrexModel::load_checkpoint(checkpoint)?;
            let vocab = vocab.ok_or_else(|| usage("checkpoint has no vocabulary; pass --config with data.vocab"))?;
            let max_len = model.config.encoder.max_len;
            (model, vocab, max_len, None, None)
        }
    };
    let out = out
        .map(Path::to_path_buf)
        .or(default_out)
        .unwrap_or_else(|| checkpoint.to_path_buf());
    let dataset = read_dataset(data)?;
    let set = eval_set(dataset.examples, &vocab, max_len, emb.as_deref())?;
    let predictions = trainer::predictions(&model, &set)?;
    let result = evaluate(&predictions, &set.examples);

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let sorted: BTreeMap<_, _> = predictions.into_iter().collect();
    write_json(&out.join(PREDICTIONS_FILE), &sorted)?;
    write_json(&out.join(REPORT_FILE), &report_json(&result, &dataset.name))?;
    println!(
        "{}: EM {:.2} F1 {:.2} on {} examples; report {}",
        dataset.name,
        100.0 * result.em,
        100.0 * result.f1,
        result.per_example.len(),
        out.join(REPORT_FILE).display()
    );
    Ok(())
}

pub fn gradcheck(config: &Path, example: usize, overrides: &[String]) -> anyhow::Result<()> {
    let cfg = RunConfig::load(Some(config), overrides)?;
    let data = read_dataset(required(&cfg.data.train, "data.train")?)?;
    let ex = data
        .examples
        .get(example)
        .ok_or_else(|| usage(format!("example {example} is out of range ({} examples)", data.examples.len())))?;
    let vocab = resolve_vocab(&cfg, None, &data.examples)?;
    let instance = build_instances(
        std::slice::from_ref(ex),
        &vocab,
        cfg.max_len(),
        cfg.data.embeddings_dir.as_deref(),
    )?
    .remove(0);
    let mut model = DyrexModel::new(cfg.model())?;
    if let Some(std) = cfg.gradcheck.query_std {
        let mut rng = Rng::new(cfg.gradcheck.seed);
        let d = cfg.encoder.d_model;
        for id in [model.head.bank.start, model.head.bank.end] {
            model.store.set_value(id, rng.normal_matrix(1, d, std))?;
        }
    }
    let report = grad_check(&mut model, &instance, &cfg.gradcheck.check_config())?;

    for p in &report.params {
        println!("{:<48} {:>5} coords  max rel err {:.3e}", p.name, p.checked, p.max_rel_error);
    }
    if let Some(out) = &cfg.output_dir {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join(GRADCHECK_FILE), &report)?;
    }
    if !report.passed {
        if let Some(w) = report.worst() {
            eprintln!("worst: {} index {} analytic {:.6e} numeric {:.6e}", w.name, w.worst_index, w.analytic, w.numeric);
        }
        bail!(CheckFailed { max: report.max_rel_error, tol: report.tol });
    }
    println!("PASS: max relative error {:.3e} < {:.0e} on {}", report.max_rel_error, report.tol, instance.qid);
    Ok(())
}

pub fn ablate(config: &Path, overrides: &[String]) -> anyhow::Result<()> {
    let cfg = RunConfig::load(Some(config), overrides)?;
    let out = cfg.output_dir()?;
    let train_data = read_dataset(required(&cfg.data.train, "data.train")?)?;
    let eval_data = read_dataset(required(&cfg.data.eval, "data.eval")?)?;
    let vocab = resolve_vocab(&cfg, None, &train_data.examples)?;
    let emb = cfg.data.embeddings_dir.as_deref();
    let train_set = build_instances(&train_data.examples, &vocab, cfg.max_len(), emb)?;
    let eval = eval_set(eval_data.examples, &vocab, cfg.max_len(), emb)?;

    let table = run_ablation(&cfg.model(), &cfg.train, &cfg.ablation, &train_set, &eval)?;
    for row in &table.rows {
        for f in &row.failures {
            eprintln!("L={} {}: {f}", row.layers, row.strategy);
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = table.to_csv();
    let path = out.join(ABLATION_FILE);
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

pub fn synth(
    spec: Option<&Path>,
    n: usize,
    out: &Path,
    vocab_out: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<()> {
    let spec: SynthSpec = load_json(spec, overrides)?;
    let examples = generate_synthetic(&spec, n)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_mrqa_jsonl(out, "synthetic", &examples)?;
    if let Some(p) = vocab_out {
        spec.vocab().save(p)?;
    }
    println!("wrote {} synthetic examples (seed {}) to {}", examples.len(), spec.seed, out.display());
    Ok(())
}
