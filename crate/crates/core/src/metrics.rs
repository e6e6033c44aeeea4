//! Exact match and token-level F1 over normalized answer strings, following
//! the official SQuAD evaluator that the MRQA scripts reuse.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::QAExample;

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// Lowercase, drop ASCII punctuation, drop the articles "a", "an", "the",
/// and collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1.0 iff the normalized prediction equals some normalized gold answer.
pub fn em_score(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    f64::from(u8::from(golds.iter().any(|g| normalize_answer(g) == p)))
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return f64::from(u8::from(pt.is_empty() && gt.is_empty()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset token F1, maximized over the gold answers.
pub fn f1_score(pred: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub qid: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub em: f64,
    pub f1: f64,
    pub per_example: Vec<ExampleScore>,
    /// Examples with no prediction (scored 0).
    pub missing: usize,
}

impl EvalResult {
    /// Summary report: fractions plus percentages, counts.
    pub fn report(&self, dataset: &str) -> serde_json::Value {
        serde_json::json!({
            "dataset": dataset,
            "em": self.em,
            "f1": self.f1,
            "em_pct": 100.0 * self.em,
            "f1_pct": 100.0 * self.f1,
            "count": self.per_example.len(),
            "missing": self.missing,
        })
    }
}

pub fn evaluate(predictions: &HashMap<String, String>, examples: &[QAExample]) -> EvalResult {
    let mut missing = 0;
    let per_example: Vec<ExampleScore> = examples
        .iter()
        .map(|ex| match predictions.get(&ex.qid) {
            Some(pred) => ExampleScore {
                qid: ex.qid.clone(),
                em: em_score(pred, &ex.gold_answers),
                f1: f1_score(pred, &ex.gold_answers),
            },
            None => {
                missing += 1;
                ExampleScore { qid: ex.qid.clone(), em: 0.0, f1: 0.0 }
            }
        })
        .collect();
    let n = per_example.len().max(1) as f64;
    EvalResult {
        em: per_example.iter().map(|s| s.em).sum::<f64>() / n,
        f1: per_example.iter().map(|s| s.f1).sum::<f64>() / n,
        per_example,
        missing,
    }
}
