//! Mention-level scoring with conlleval semantics.
//!
//! Chunks follow the reference script, including its handling of malformed
//! sequences: `I-X` after `O` or after another type opens a new chunk. A
//! predicted chunk is correct only on an exact span and type match.

mod tagged;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Prefix, SentenceKey};

pub use tagged::{TaggedCorpus, TaggedParseError, TaggedSentence};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("gold has {gold} sentences, prediction has {pred}")]
    SentenceCount { gold: usize, pred: usize },
    #[error("{sentence}: gold has {gold} tokens, prediction has {pred}")]
    Length { sentence: SentenceKey, gold: usize, pred: usize },
    #[error("no reports to summarize")]
    NoReports,
}

/// A chunk within one sentence; `end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

/// A chunk placed in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub sentence: SentenceKey,
    #[serde(flatten)]
    pub chunk: Chunk,
}

fn ends_chunk(prev: &Label, cur: &Label) -> bool {
    match (prev.prefix(), cur.prefix()) {
        (Prefix::O, _) => false,
        (_, Prefix::B | Prefix::O) => true,
        _ => prev.entity_type() != cur.entity_type(),
    }
}

fn starts_chunk(prev: &Label, cur: &Label) -> bool {
    match (prev.prefix(), cur.prefix()) {
        (_, Prefix::O) => false,
        (_, Prefix::B) | (Prefix::O, _) => true,
        _ => prev.entity_type() != cur.entity_type(),
    }
}

/// Chunks of a label sequence. Total over arbitrary input; chunks never overlap.
pub fn extract_chunks(labels: &[Label]) -> Vec<Chunk> {
    let outside = Label::outside();
    let mut chunks = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let mut prev = &outside;
    for (i, label) in labels.iter().enumerate() {
        if ends_chunk(prev, label) {
            if let Some((start, ty)) = open.take() {
                chunks.push(Chunk { entity_type: ty.to_string(), start, end: i - 1 });
            }
        }
        if starts_chunk(prev, label) {
            open = Some((i, label.entity_type().unwrap_or_default()));
        }
        prev = label;
    }
    if let Some((start, ty)) = open {
        chunks.push(Chunk { entity_type: ty.to_string(), start, end: labels.len() - 1 });
    }
    chunks
}

/// Counts and percentages for one entity type or overall.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_count: usize,
    pub pred_count: usize,
    pub correct_count: usize,
}

impl Scores {
    pub fn from_counts(gold_count: usize, pred_count: usize, correct_count: usize) -> Scores {
        let pct = |num: usize, den: usize| if den > 0 { 100.0 * num as f64 / den as f64 } else { 0.0 };
        let precision = pct(correct_count, pred_count);
        let recall = pct(correct_count, gold_count);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Scores { precision, recall, f1, gold_count, pred_count, correct_count }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scores,
    pub per_type: BTreeMap<String, Scores>,
    pub token_accuracy: f64,
    pub token_count: usize,
    pub correct_tokens: usize,
}

#[derive(Default)]
struct Tally {
    gold: usize,
    pred: usize,
    correct: usize,
}

/// Score aligned `(gold, pred)` label sequences, one pair per sentence.
pub fn score_sequences<'a, I>(pairs: I) -> EvalReport
where
    I: IntoIterator<Item = (&'a [Label], &'a [Label])>,
{
    let mut overall = Tally::default();
    let mut per_type: BTreeMap<String, Tally> = BTreeMap::new();
    let (mut token_count, mut correct_tokens) = (0, 0);
    for (gold, pred) in pairs {
        debug_assert_eq!(gold.len(), pred.len());
        token_count += gold.len();
        correct_tokens += gold.iter().zip(pred).filter(|(g, p)| g == p).count();
        let gold_chunks = extract_chunks(gold);
        let pred_chunks = extract_chunks(pred);
        for c in &gold_chunks {
            overall.gold += 1;
            per_type.entry(c.entity_type.clone()).or_default().gold += 1;
        }
        for c in &pred_chunks {
            overall.pred += 1;
            let t = per_type.entry(c.entity_type.clone()).or_default();
            t.pred += 1;
            // both lists are sorted by start and non-overlapping
            if gold_chunks.binary_search_by(|g| g.start.cmp(&c.start)).is_ok_and(|i| gold_chunks[i] == *c) {
                overall.correct += 1;
                t.correct += 1;
            }
        }
    }
    let scores = |t: &Tally| Scores::from_counts(t.gold, t.pred, t.correct);
    EvalReport {
        overall: scores(&overall),
        per_type: per_type.iter().map(|(k, t)| (k.clone(), scores(t))).collect(),
        token_accuracy: if token_count > 0 { 100.0 * correct_tokens as f64 / token_count as f64 } else { 0.0 },
        token_count,
        correct_tokens,
    }
}

/// Score a predicted corpus against a token-parallel gold corpus.
pub fn evaluate(gold: &Corpus, pred: &Corpus) -> Result<EvalReport, EvalError> {
    let (g, p) = (gold.sentence_count(), pred.sentence_count());
    if g != p {
        return Err(EvalError::SentenceCount { gold: g, pred: p });
    }
    let mut pairs = Vec::with_capacity(g);
    for (gs, ps) in gold.sentences().zip(pred.sentences()) {
        if gs.len() != ps.len() {
            return Err(EvalError::Length { sentence: gs.key(), gold: gs.len(), pred: ps.len() });
        }
        pairs.push((gs.labels(), ps.labels()));
    }
    Ok(score_sequences(pairs.iter().map(|(g, p)| (g.as_slice(), p.as_slice()))))
}

/// Plain-text report in the layout of the reference conlleval script.
pub fn conlleval_text(report: &EvalReport) -> String {
    let o = &report.overall;
    let mut s = format!(
        "processed {} tokens with {} phrases; found: {} phrases; correct: {}.\n",
        report.token_count, o.gold_count, o.pred_count, o.correct_count
    );
    if report.token_count > 0 {
        let _ = writeln!(
            s,
            "accuracy: {:6.2}%; precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}",
            report.token_accuracy, o.precision, o.recall, o.f1
        );
    }
    for (ty, t) in &report.per_type {
        let _ = writeln!(
            s,
            "{ty:>17}: precision: {:6.2}%; recall: {:6.2}%; FB1: {:6.2}  {}",
            t.precision, t.recall, t.f1, t.pred_count
        );
    }
    s
}

/// Mean and sample standard deviation of one metric over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

/// `None` for an empty slice; stddev uses the `n - 1` denominator and is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stddev = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, stddev, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub token_accuracy: MeanStd,
}

/// Aggregate overall scores of repeated runs. Values are averaged unrounded.
pub fn summarize_runs(reports: &[EvalReport]) -> Result<RunSummary, EvalError> {
    let metric = |f: fn(&EvalReport) -> f64| {
        let values: Vec<f64> = reports.iter().map(f).collect();
        mean_std(&values).ok_or(EvalError::NoReports)
    };
    Ok(RunSummary {
        precision: metric(|r| r.overall.precision)?,
        recall: metric(|r| r.overall.recall)?,
        f1: metric(|r| r.overall.f1)?,
        token_accuracy: metric(|r| r.token_accuracy)?,
    })
}
