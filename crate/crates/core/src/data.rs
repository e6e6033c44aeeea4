//! MRQA line-delimited JSON ingestion, the synthetic key/value retrieval
//! task, and conversion of examples into model inputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenizedInput, Vocab, PAD_ID, SEGMENT_PASSAGE, SEGMENT_QUESTION};
use crate::error::{DyrexError, Result};
use crate::metrics::normalize_answer;
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub qid: String,
    pub question_tokens: Vec<String>,
    pub passage_tokens: Vec<String>,
    pub gold_answers: Vec<String>,
    /// Inclusive token span of the training target inside the passage.
    pub gold_token_span: (usize, usize),
}

impl QAExample {
    /// Whitespace-tokenizes the three strings and locates the first
    /// occurrence of the answer tokens in the passage.
    pub fn from_text(qid: &str, question: &str, passage: &str, answer: &str) -> Result<Self> {
        let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        let passage_tokens = toks(passage);
        let answer_tokens = toks(answer);
        let found = if answer_tokens.is_empty() {
            None
        } else {
            passage_tokens.windows(answer_tokens.len()).position(|w| w == answer_tokens.as_slice())
        };
        let start = found
            .ok_or_else(|| DyrexError::InvalidInput(format!("answer {answer:?} not found in passage of {qid}")))?;
        Ok(Self {
            qid: qid.to_string(),
            question_tokens: toks(question),
            passage_tokens,
            gold_answers: vec![answer.to_string()],
            gold_token_span: (start, start + answer_tokens.len() - 1),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (i, j) = self.gold_token_span;
        if i > j || j >= self.passage_tokens.len() {
            return Err(DyrexError::TrainingData {
                qid: self.qid.clone(),
                msg: format!("gold span {:?} outside passage of {} tokens", self.gold_token_span, self.passage_tokens.len()),
            });
        }
        if self.gold_answers.is_empty() || self.gold_answers.iter().any(String::is_empty) {
            return Err(DyrexError::TrainingData {
                qid: self.qid.clone(),
                msg: "gold answers must be non-empty".into(),
            });
        }
        Ok(())
    }

    /// Passage text of an inclusive passage-token span.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.passage_tokens[start..=end].join(" ")
    }
}

// ---------------------------------------------------------------------------
// MRQA format

#[derive(Debug, Serialize, Deserialize)]
struct MrqaToken(String, usize);

#[derive(Debug, Serialize, Deserialize)]
struct MrqaDetectedAnswer {
    text: String,
    #[serde(default)]
    char_spans: Vec<(usize, usize)>,
    #[serde(default)]
    token_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MrqaQuestion {
    qid: String,
    question: String,
    question_tokens: Vec<MrqaToken>,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    detected_answers: Vec<MrqaDetectedAnswer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MrqaContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    context: String,
    context_tokens: Vec<MrqaToken>,
    qas: Vec<MrqaQuestion>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MrqaRead {
    pub examples: Vec<QAExample>,
    pub header: serde_json::Value,
    /// Questions without any detected token span.
    pub skipped_missing_span: usize,
    /// Questions whose detected span text disagrees with the context tokens.
    pub skipped_mismatch: usize,
}

impl MrqaRead {
    pub fn skipped(&self) -> usize {
        self.skipped_missing_span + self.skipped_mismatch
    }
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| DyrexError::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| DyrexError::io(path, e))?;
    let file = File::open(path).map_err(|e| DyrexError::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn compact(s: &str) -> String {
    normalize_answer(s).split_whitespace().collect()
}

/// Reads an MRQA shared-task file (optionally gzipped). The first line must
/// be a header object; each further line is a context with its questions.
pub fn read_mrqa_jsonl(path: impl AsRef<Path>) -> Result<MrqaRead> {
    let path = path.as_ref();
    let reader = open_maybe_gzip(path)?;
    let mut out = MrqaRead::default();
    let parse_err = |line: usize, msg: String| DyrexError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DyrexError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            out.header = value
                .get("header")
                .cloned()
                .ok_or_else(|| parse_err(lineno, "first line is not a header object".into()))?;
            saw_header = true;
            continue;
        }
        let ctx: MrqaContext = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let passage: Vec<String> = ctx.context_tokens.into_iter().map(|t| t.0).collect();
        for qa in ctx.qas {
            let Some(&(start, end)) = qa.detected_answers.first().and_then(|d| d.token_spans.first()) else {
                out.skipped_missing_span += 1;
                continue;
            };
            let detected = &qa.detected_answers[0].text;
            if start > end || end >= passage.len() || compact(&passage[start..=end].join(" ")) != compact(detected) {
                out.skipped_mismatch += 1;
                continue;
            }
            let mut gold_answers: Vec<String> = qa.answers.into_iter().filter(|a| !a.is_empty()).collect();
            if gold_answers.is_empty() {
                gold_answers.push(detected.clone());
            }
            out.examples.push(QAExample {
                qid: qa.qid,
                question_tokens: qa.question_tokens.into_iter().map(|t| t.0).collect(),
                passage_tokens: passage.clone(),
                gold_answers,
                gold_token_span: (start, end),
            });
        }
    }
    if !saw_header {
        return Err(parse_err(1, "missing header line".into()));
    }
    Ok(out)
}

fn with_offsets(tokens: &[String]) -> (String, Vec<MrqaToken>) {
    let mut text = String::new();
    let mut out = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        out.push(MrqaToken(t.clone(), text.len()));
        text.push_str(t);
    }
    (text, out)
}

/// Writes examples in MRQA format, one context line per example.
pub fn write_mrqa_jsonl(path: impl AsRef<Path>, dataset: &str, examples: &[QAExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DyrexError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write_line = |value: String| writeln!(w, "{value}").map_err(|e| DyrexError::io(path, e));
    write_line(serde_json::to_string(&serde_json::json!({ "header": { "dataset": dataset } }))?)?;
    for ex in examples {
        let (context, context_tokens) = with_offsets(&ex.passage_tokens);
        let (question, question_tokens) = with_offsets(&ex.question_tokens);
        let (s, e) = ex.gold_token_span;
        let char_start = context_tokens[s].1;
        let char_end = context_tokens[e].1 + ex.passage_tokens[e].len() - 1;
        let ctx = MrqaContext {
            id: Some(ex.qid.clone()),
            context,
            context_tokens,
            qas: vec![MrqaQuestion {
                qid: ex.qid.clone(),
                question,
                question_tokens,
                answers: ex.gold_answers.clone(),
                detected_answers: vec![MrqaDetectedAnswer {
                    text: ex.span_text(s, e),
                    char_spans: vec![(char_start, char_end)],
                    token_spans: vec![(s, e)],
                }],
            }],
        };
        write_line(serde_json::to_string(&ctx)?)?;
    }
    w.flush().map_err(|e| DyrexError::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic key/value retrieval task

fn default_value_alphabet() -> usize {
    64
}

/// Passages are key/value records separated by filler; the question is one
/// key and the answer is that key's value.
///
/// Vocabulary layout: `[PAD]`, `[UNK]`, `num_keys` key tokens `k*`,
/// `value_alphabet` value tokens `v*`, and every remaining id as filler `f*`.
/// Every passage holds each key exactly once, in random order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    /// Records per passage, also the size of the key alphabet.
    pub num_keys: usize,
    #[serde(default = "default_value_alphabet")]
    pub value_alphabet: usize,
    pub passage_len: usize,
    /// Inclusive bounds on value length.
    pub value_len_range: (usize, usize),
    pub seed: u64,
}

impl SynthSpec {
    fn filler_alphabet(&self) -> usize {
        self.vocab_size.saturating_sub(2 + self.num_keys + self.value_alphabet)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.value_len_range;
        let fail = |msg: String| Err(DyrexError::Config(msg));
        if self.num_keys == 0 {
            return fail("num_keys must be positive".into());
        }
        if lo == 0 || lo > hi {
            return fail(format!("value_len_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if self.value_alphabet == 0 {
            return fail("value_alphabet must be positive".into());
        }
        if self.num_keys * (1 + hi) > self.passage_len {
            return fail(format!(
                "num_keys * (1 + max value length) = {} exceeds passage_len {}",
                self.num_keys * (1 + hi),
                self.passage_len
            ));
        }
        if self.filler_alphabet() == 0 {
            return fail(format!(
                "vocab_size ({}) must exceed num_keys + value_alphabet + 2 reserved ids ({})",
                self.vocab_size,
                2 + self.num_keys + self.value_alphabet
            ));
        }
        Ok(())
    }

    /// The full vocabulary of the task, ids in layout order.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        let keys = (0..self.num_keys).map(|i| format!("k{i}"));
        let values = (0..self.value_alphabet).map(|i| format!("v{i}"));
        let fillers = (0..self.filler_alphabet()).map(|i| format!("f{i}"));
        let all: Vec<String> = keys.chain(values).chain(fillers).collect();
        v.extend(all.iter().map(String::as_str));
        v
    }
}

/// Deterministic synthetic dataset of `n` examples.
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<QAExample>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut keys: Vec<usize> = (0..spec.num_keys).collect();
    let fillers = spec.filler_alphabet();
    let (lo, hi) = spec.value_len_range;
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        rng.shuffle(&mut keys);
        let records: Vec<Vec<String>> = keys
            .iter()
            .map(|&k| {
                let len = rng.range_inclusive(lo, hi);
                std::iter::once(format!("k{k}"))
                    .chain((0..len).map(|_| format!("v{}", rng.below(spec.value_alphabet))))
                    .collect()
            })
            .collect();
        let used: usize = records.iter().map(Vec::len).sum();
        let mut gaps = vec![0usize; spec.num_keys + 1];
        for _ in 0..spec.passage_len - used {
            let slot = rng.below(gaps.len());
            gaps[slot] += 1;
        }
        let target = rng.below(spec.num_keys);
        let mut passage = Vec::with_capacity(spec.passage_len);
        let mut span = (0, 0);
        for (r, record) in records.iter().enumerate() {
            passage.extend((0..gaps[r]).map(|_| format!("f{}", rng.below(fillers))));
            if r == target {
                span = (passage.len() + 1, passage.len() + record.len() - 1);
            }
            passage.extend(record.iter().cloned());
        }
        passage.extend((0..gaps[spec.num_keys]).map(|_| format!("f{}", rng.below(fillers))));
        let answer = passage[span.0..=span.1].join(" ");
        out.push(QAExample {
            qid: format!("synth-{}-{index}", spec.seed),
            question_tokens: vec![records[target][0].clone()],
            passage_tokens: passage,
            gold_answers: vec![answer],
            gold_token_span: span,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model inputs

/// One example ready for the model: tokenized `[question ; passage]`, gold
/// span in input coordinates, and optionally precomputed representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub qid: String,
    pub input: TokenizedInput,
    pub gold: (usize, usize),
    pub embeddings: Option<Matrix>,
}

impl Instance {
    /// Offset of the passage inside the input sequence.
    pub fn question_len(&self) -> usize {
        self.input.passage_span.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub instances: Vec<Instance>,
}

/// Tokenizes, truncates the passage tail to fit `max_len`, and right-pads
/// every sequence to the longest one in the batch.
pub fn make_batch(examples: &[QAExample], vocab: &Vocab, max_len: usize) -> Result<Batch> {
    let mut instances = Vec::with_capacity(examples.len());
    for ex in examples {
        let q_len = ex.question_tokens.len();
        if q_len + 1 > max_len {
            return Err(DyrexError::InvalidInput(format!(
                "question of {} leaves no room for the passage within {max_len} tokens",
                ex.qid
            )));
        }
        if ex.passage_tokens.is_empty() {
            return Err(DyrexError::InvalidInput(format!("empty passage in {}", ex.qid)));
        }
        let kept = ex.passage_tokens.len().min(max_len - q_len);
        if ex.gold_token_span.1 >= kept {
            return Err(DyrexError::GoldTruncated { qid: ex.qid.clone(), max_len });
        }
        let token_ids: Vec<usize> = ex
            .question_tokens
            .iter()
            .chain(&ex.passage_tokens[..kept])
            .map(|t| vocab.id(t))
            .collect();
        let n = token_ids.len();
        instances.push(Instance {
            qid: ex.qid.clone(),
            input: TokenizedInput {
                token_ids,
                segment_ids: (0..n).map(|i| if i < q_len { SEGMENT_QUESTION } else { SEGMENT_PASSAGE }).collect(),
                padding_mask: vec![1; n],
                passage_span: (q_len, n - 1),
            },
            gold: (ex.gold_token_span.0 + q_len, ex.gold_token_span.1 + q_len),
            embeddings: None,
        });
    }
    let width = instances.iter().map(|i| i.input.len()).max().unwrap_or(0);
    for inst in &mut instances {
        let pad = width - inst.input.len();
        inst.input.token_ids.extend(std::iter::repeat_n(PAD_ID, pad));
        inst.input.segment_ids.extend(std::iter::repeat_n(SEGMENT_PASSAGE, pad));
        inst.input.padding_mask.extend(std::iter::repeat_n(0, pad));
    }
    Ok(Batch { instances })
}

/// Each example as its own unpadded instance.
pub fn make_instances(examples: &[QAExample], vocab: &Vocab, max_len: usize) -> Result<Vec<Instance>> {
    examples
        .iter()
        .map(|ex| Ok(make_batch(std::slice::from_ref(ex), vocab, max_len)?.instances.remove(0)))
        .collect()
}

/// Answer text for an input-coordinate span of the example's instance.
pub fn answer_text(example: &QAExample, instance: &Instance, start: usize, end: usize) -> String {
    let q = instance.question_len();
    example.span_text(start - q, end - q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            vocab_size: 200,
            num_keys: 3,
            value_alphabet: 64,
            passage_len: 40,
            value_len_range: (2, 2),
            seed: 7,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const HEADER: &str = r#"{"header": {"dataset": "SQuAD", "split": "dev"}}"#;
    const CONTEXT: &str = r#"{"context": "The cat sat on the mat .", "context_tokens": [["The", 0], ["cat", 4], ["sat", 8], ["on", 12], ["the", 15], ["mat", 19], [".", 23]], "qas": [{"qid": "q1", "question": "Who sat ?", "question_tokens": [["Who", 0], ["sat", 4], ["?", 8]], "answers": ["The cat", "cat"], "detected_answers": [{"text": "The cat", "char_spans": [[0, 6]], "token_spans": [[0, 1]]}]}, {"qid": "q2", "question": "Where ?", "question_tokens": [["Where", 0], ["?", 6]], "answers": ["on the mat"], "detected_answers": [{"text": "on the mat", "char_spans": [[12, 21]], "token_spans": [[3, 5]]}]}]}"#;

    #[test]
    fn reads_header_only_and_fixture() {
        let f = write_lines(&[HEADER]);
        let r = read_mrqa_jsonl(f.path()).unwrap();
        assert!(r.examples.is_empty());
        assert_eq!(r.header["dataset"], "SQuAD");

        let f = write_lines(&[HEADER, CONTEXT]);
        let r = read_mrqa_jsonl(f.path()).unwrap();
        assert_eq!(r.examples.len(), 2);
        assert_eq!(r.examples[0].gold_token_span, (0, 1));
        assert_eq!(r.examples[0].question_tokens, ["Who", "sat", "?"]);
        assert_eq!(r.examples[1].gold_token_span, (3, 5));
        assert_eq!(r.examples[1].span_text(3, 5), "on the mat");
        assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn skips_mismatched_and_missing_spans() {
        let corrupted = CONTEXT.replace(r#""token_spans": [[3, 5]]"#, r#""token_spans": [[2, 4]]"#);
        let missing = CONTEXT.replace(r#", "token_spans": [[0, 1]]"#, "");
        let f = write_lines(&[HEADER, &corrupted]);
        let r = read_mrqa_jsonl(f.path()).unwrap();
        assert_eq!((r.examples.len(), r.skipped_mismatch), (1, 1));
        let f = write_lines(&[HEADER, &missing]);
        let r = read_mrqa_jsonl(f.path()).unwrap();
        assert_eq!((r.examples.len(), r.skipped_missing_span), (1, 1));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[HEADER, CONTEXT, "{not json"]);
        match read_mrqa_jsonl(f.path()) {
            Err(DyrexError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_lines(&[CONTEXT]);
        assert!(matches!(read_mrqa_jsonl(f.path()), Err(DyrexError::Parse { line: 1, .. })));
    }

    #[test]
    fn reads_gzip() {
        use flate2::write::GzEncoder;
        let f = tempfile::NamedTempFile::new().unwrap();
        let mut enc = GzEncoder::new(File::create(f.path()).unwrap(), flate2::Compression::default());
        writeln!(enc, "{HEADER}\n{CONTEXT}").unwrap();
        enc.finish().unwrap();
        assert_eq!(read_mrqa_jsonl(f.path()).unwrap().examples.len(), 2);
    }

    #[test]
    fn synthetic_structure() {
        assert!(generate_synthetic(&spec(), 0).unwrap().is_empty());
        let a = generate_synthetic(&spec(), 1000).unwrap();
        assert_eq!(a, generate_synthetic(&spec(), 1000).unwrap());
        for ex in &a {
            ex.validate().unwrap();
            assert_eq!(ex.passage_tokens.len(), 40);
            let (s, e) = ex.gold_token_span;
            assert_eq!(e - s + 1, 2);
            let key = &ex.question_tokens[0];
            assert_eq!(&ex.passage_tokens[s - 1], key);
            assert_eq!(ex.passage_tokens.iter().filter(|t| *t == key).count(), 1);
            assert!(ex.passage_tokens[s..=e].iter().all(|t| t.starts_with('v')));
            assert_eq!(ex.gold_answers, [ex.span_text(s, e)]);
        }
    }

    #[test]
    fn infeasible_spec_names_the_constraint() {
        let bad = SynthSpec { passage_len: 8, ..spec() };
        let err = generate_synthetic(&bad, 1).unwrap_err().to_string();
        assert!(err.contains("passage_len"), "{err}");
        let bad = SynthSpec { vocab_size: 69, ..spec() };
        assert!(generate_synthetic(&bad, 1).unwrap_err().to_string().contains("vocab_size"));
    }

    #[test]
    fn synthetic_round_trips_through_mrqa() {
        let examples = generate_synthetic(&SynthSpec { value_len_range: (2, 4), ..spec() }, 50).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_mrqa_jsonl(f.path(), "synthetic", &examples).unwrap();
        let back = read_mrqa_jsonl(f.path()).unwrap();
        assert_eq!(back.skipped(), 0);
        assert_eq!(back.examples, examples);
    }

    #[test]
    fn batching_pads_and_shifts() {
        let vocab = spec().vocab();
        let a = QAExample::from_text("a", "k1", "f0 k1 v3 v4 f2", "v3 v4").unwrap();
        let b = QAExample::from_text("b", "k2 k3", "k2 v5 f1", "v5").unwrap();
        let single = make_batch(std::slice::from_ref(&a), &vocab, 64).unwrap();
        let inst = &single.instances[0];
        assert_eq!(inst.input.padding_mask, vec![1; 6]);
        assert_eq!(inst.gold, (3, 4));
        assert_eq!(inst.input.passage_span, (1, 5));

        let batch = make_batch(&[a, b.clone()], &vocab, 64).unwrap();
        let ib = &batch.instances[1];
        assert_eq!(ib.input.len(), 6);
        assert_eq!(ib.input.padding_mask, vec![1, 1, 1, 1, 1, 0]);
        assert_eq!(ib.input.token_ids[5], PAD_ID);
        assert_eq!(ib.gold, (3, 3));
        assert_eq!(ib.input.segment_ids[..3], [0, 0, 1]);
        ib.input.validate().unwrap();

        let err = make_batch(&[b], &vocab, 3).unwrap_err();
        assert!(matches!(err, DyrexError::GoldTruncated { .. }));
    }
}
