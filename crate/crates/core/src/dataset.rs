//! GSM8K-format corpus loading, gold-answer parsing, and seeded subsampling.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction;

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub prompt: String,
    /// Exact decimal gold answer, present iff `gold_raw` carries a
    /// parseable `#### ` marker.
    pub gold_answer: Option<Decimal>,
    /// Original answer text as shipped in the corpus.
    pub gold_raw: Option<String>,
}

impl Task {
    /// Builds a task from raw corpus fields, parsing the gold marker when
    /// the answer text carries one.
    pub fn from_fields(task_id: impl Into<String>, prompt: impl Into<String>, answer: Option<String>) -> Self {
        let gold_answer = answer.as_deref().and_then(|a| parse_gold(a).ok());
        Self {
            task_id: task_id.into(),
            prompt: prompt.into(),
            gold_answer,
            gold_raw: answer,
        }
    }
}

/// Uniform-without-replacement subsample description.
///
/// The sampling procedure is pinned: a ChaCha8 stream seeded with `seed`
/// drives a Fisher-Yates shuffle over task indices, and the first `size`
/// indices (restored to corpus order) form the subset. Same corpus, size
/// and seed always select the same items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("corpus directory {0} contains no .jsonl shards")]
    EmptyDirectory(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GoldParseError {
    #[error("no `#### ` marker in answer text")]
    NoMarker,
    #[error("text after `#### ` marker is not a number: {0:?}")]
    UnparseableNumber(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("sample size {requested} exceeds corpus size {available}")]
    SizeExceedsCorpus { requested: usize, available: usize },
}

#[derive(Deserialize)]
struct RawRecord {
    question: Option<String>,
    answer: Option<String>,
}

/// Loads a GSM8K-format JSONL corpus from a file or a directory of
/// `.jsonl` shards (shards are read in lexicographic name order).
///
/// Task ids are assigned positionally as `t00000`, `t00001`, … so that a
/// (corpus, id) pair is stable across runs.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Task>, CorpusError> {
    let path = path.as_ref();
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(CorpusError::EmptyDirectory(path.display().to_string()));
        }
    } else {
        files.push(path.to_path_buf());
    }

    let mut tasks = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        for (line_no, line) in text.lines().enumerate() {
            let line_no = line_no + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let question = raw.question.ok_or_else(|| CorpusError::MissingField {
                line: line_no,
                field: "question".into(),
            })?;
            let task_id = format!("t{:05}", tasks.len());
            tasks.push(Task::from_fields(task_id, question, raw.answer));
        }
    }
    Ok(tasks)
}

/// Parses the gold number after the final `#### ` marker.
///
/// Thousands separators (commas) are removed and a Unicode minus is
/// normalized to ASCII before decimal parsing.
pub fn parse_gold(answer_text: &str) -> Result<Decimal, GoldParseError> {
    let payload = extraction::last_marker_payload(answer_text).ok_or(GoldParseError::NoMarker)?;
    extraction::parse_anchored_number(payload).ok_or_else(|| {
        let snippet: String = payload.trim().chars().take(32).collect();
        GoldParseError::UnparseableNumber(snippet)
    })
}

/// Draws the deterministic subset described by `plan`, in corpus order.
pub fn sample_subset(corpus: &[Task], plan: &SamplePlan) -> Result<Vec<Task>, SampleError> {
    let indices = sample_indices(corpus.len(), plan)?;
    Ok(indices.into_iter().map(|i| corpus[i].clone()).collect())
}

/// Index-level sampler behind [`sample_subset`], exposed so other
/// frontends can reproduce the exact same selection.
pub fn sample_indices(corpus_len: usize, plan: &SamplePlan) -> Result<Vec<usize>, SampleError> {
    if plan.size > corpus_len {
        return Err(SampleError::SizeExceedsCorpus {
            requested: plan.size,
            available: corpus_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut indices: Vec<usize> = (0..corpus_len).collect();
    // Fisher-Yates, spelled out so the index stream is pinned to the
    // ChaCha8 next_u64 sequence rather than to a library shuffle.
    for i in (1..corpus_len).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
    let mut selected: Vec<usize> = indices.into_iter().take(plan.size).collect();
    selected.sort_unstable();
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;
    use std::str::FromStr;

    fn dec(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn fixture_corpus(n: usize) -> Vec<Task> {
        (0..n)
            .map(|i| Task::from_fields(format!("t{i:05}"), format!("q{i}"), Some(format!("#### {i}"))))
            .collect()
    }

    #[test]
    fn parse_gold_basic_and_normalized() {
        assert_eq!(parse_gold("some steps\n#### 18").unwrap(), dec("18"));
        assert_eq!(parse_gold("… #### 1,234").unwrap(), dec("1234"));
        assert_eq!(parse_gold("… #### \u{2212}3").unwrap(), dec("-3"));
        assert_eq!(parse_gold("no marker here"), Err(GoldParseError::NoMarker));
        assert!(matches!(
            parse_gold("#### forty-two"),
            Err(GoldParseError::UnparseableNumber(_))
        ));
    }

    #[test]
    fn parse_gold_matches_loaded_gold() {
        let corpus = fixture_corpus(20);
        for task in &corpus {
            let raw = task.gold_raw.as_ref().unwrap();
            assert_eq!(parse_gold(raw).ok(), task.gold_answer);
        }
    }

    #[test]
    fn load_corpus_parses_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::json!({"question": "How many?", "answer": "steps #### 18"})).unwrap();
        writeln!(f, "{}", serde_json::json!({"question": "No gold here"})).unwrap();
        let tasks = load_corpus(f.path()).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].task_id, "t00000");
        assert_eq!(tasks[0].gold_answer, Some(dec("18")));
        assert_eq!(tasks[1].gold_answer, None);
        assert!(tasks[1].gold_raw.is_none());
    }

    #[test]
    fn load_corpus_reports_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::json!({"question": "ok", "answer": "#### 1"})).unwrap();
        writeln!(f, "not json").unwrap();
        match load_corpus(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_missing_question() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::json!({"answer": "#### 1"})).unwrap();
        match load_corpus(f.path()) {
            Err(CorpusError::MissingField { line, field }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "question");
            }
            other => panic!("expected missing-field error, got {other:?}"),
        }
    }

    #[test]
    fn sample_full_corpus_is_identity() {
        let corpus = fixture_corpus(10);
        let plan = SamplePlan { size: 10, seed: 17 };
        let sampled = sample_subset(&corpus, &plan).unwrap();
        assert_eq!(sampled, corpus);
    }

    #[test]
    fn sample_zero_is_empty() {
        let corpus = fixture_corpus(10);
        let plan = SamplePlan { size: 0, seed: 17 };
        assert!(sample_subset(&corpus, &plan).unwrap().is_empty());
    }

    #[test]
    fn sample_too_large_errors() {
        let corpus = fixture_corpus(3);
        let plan = SamplePlan { size: 4, seed: 0 };
        assert_eq!(
            sample_subset(&corpus, &plan).unwrap_err(),
            SampleError::SizeExceedsCorpus { requested: 4, available: 3 }
        );
    }

    #[test]
    fn sample_is_deterministic_across_calls() {
        let corpus = fixture_corpus(10);
        let plan = SamplePlan { size: 5, seed: 17 };
        let first: Vec<String> = sample_subset(&corpus, &plan)
            .unwrap()
            .into_iter()
            .map(|t| t.task_id)
            .collect();
        for _ in 0..100 {
            let again: Vec<String> = sample_subset(&corpus, &plan)
                .unwrap()
                .into_iter()
                .map(|t| t.task_id)
                .collect();
            assert_eq!(again, first);
        }
    }

    #[test]
    fn sample_has_no_duplicates_and_respects_size() {
        let corpus = fixture_corpus(50);
        for seed in 0..20 {
            let plan = SamplePlan { size: 23, seed };
            let ids: Vec<usize> = sample_indices(corpus.len(), &plan).unwrap();
            let set: HashSet<_> = ids.iter().collect();
            assert_eq!(set.len(), 23);
            assert!(ids.iter().all(|&i| i < 50));
        }
    }

    #[test]
    fn sample_inclusion_frequency_is_uniform() {
        // k of n uniform sampling: inclusion probability is k/n. Over many
        // seeds the per-item frequency must sit within 3 sigma.
        let n = 10usize;
        let k = 5usize;
        let trials = 2000u64;
        let mut counts = vec![0u64; n];
        for seed in 0..trials {
            let plan = SamplePlan { size: k, seed };
            for i in sample_indices(n, &plan).unwrap() {
                counts[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "item {i}: frequency {freq:.4} outside 3 sigma of {p}"
            );
        }
    }
}
