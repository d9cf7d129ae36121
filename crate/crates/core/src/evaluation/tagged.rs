use serde::{Deserialize, Serialize};

use super::{score_sequences, EvalReport};
use crate::corpus::Label;

/// A sentence with gold and predicted labels side by side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub doc_index: usize,
    pub sent_index: usize,
    pub tokens: Vec<String>,
    pub gold: Vec<Label>,
    pub pred: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaggedCorpus {
    pub sentences: Vec<TaggedSentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct TaggedParseError {
    pub line: usize,
    pub message: String,
}

impl TaggedCorpus {
    pub fn evaluate(&self) -> EvalReport {
        score_sequences(self.sentences.iter().map(|s| (s.gold.as_slice(), s.pred.as_slice())))
    }

    /// `token gold pred` lines, sentences separated by a blank line.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for ((t, g), p) in s.tokens.iter().zip(&s.gold).zip(&s.pred) {
                out.push_str(&format!("{t} {g} {p}\n"));
            }
        }
        out
    }

    /// Reads the `to_conll` format; extra leading columns are ignored and
    /// the last two are gold and predicted labels. Document indices are 0.
    pub fn parse(text: &str) -> Result<TaggedCorpus, TaggedParseError> {
        let mut sentences = Vec::new();
        let mut current = TaggedSentence { doc_index: 0, sent_index: 0, tokens: vec![], gold: vec![], pred: vec![] };
        let flush = |current: &mut TaggedSentence, sentences: &mut Vec<TaggedSentence>| {
            if !current.tokens.is_empty() {
                let sent_index = sentences.len();
                let mut s = std::mem::replace(
                    current,
                    TaggedSentence { doc_index: 0, sent_index: 0, tokens: vec![], gold: vec![], pred: vec![] },
                );
                s.sent_index = sent_index;
                sentences.push(s);
            }
        };
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                flush(&mut current, &mut sentences);
                continue;
            }
            let err = |message: String| TaggedParseError { line: i + 1, message };
            if fields.len() < 3 {
                return Err(err(format!("expected token, gold and predicted columns, found {}", fields.len())));
            }
            let label = |s: &str| s.parse::<Label>().map_err(|e| err(e.to_string()));
            let n = fields.len();
            current.tokens.push(fields[0].to_string());
            current.gold.push(label(fields[n - 2])?);
            current.pred.push(label(fields[n - 1])?);
        }
        flush(&mut current, &mut sentences);
        Ok(TaggedCorpus { sentences })
    }
}
