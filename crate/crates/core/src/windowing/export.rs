//! Line-delimited JSON exchange format for windows.
//!
//! One object per line with the ids fed to a model plus enough provenance to
//! rebuild the [`InputExample`]. Training exports additionally carry a gold
//! label id and a loss weight per position (`[CLS]` and `[PAD]` weigh 0).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{InputExample, SentenceSpan, WindowItem};
use crate::corpus::{Corpus, Label, LabelSet, SentenceKey, TokenKey};
use crate::tokenizer::{ContinuationLabel, Vocab, WordPiece};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(Label),
    #[error("no gold label for token {0:?}")]
    MissingGold(TokenKey),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ItemKind {
    Cls,
    Sep,
    Pad,
    Piece,
}

impl ItemKind {
    pub fn of(item: &WindowItem) -> ItemKind {
        match item {
            WindowItem::Cls => ItemKind::Cls,
            WindowItem::Sep => ItemKind::Sep,
            WindowItem::Pad => ItemKind::Pad,
            WindowItem::Piece(_) => ItemKind::Piece,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub focus: SentenceKey,
    pub focus_start: usize,
    pub piece_ids: Vec<u32>,
    pub item_kinds: Vec<ItemKind>,
    /// Token index within its sentence, -1 for special items.
    pub token_index: Vec<i64>,
    pub continuation: Vec<bool>,
    pub spans: Vec<SentenceSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<u8>>,
}

/// Gold labels of every token of a corpus.
#[derive(Debug, Clone, Default)]
pub struct GoldIndex(HashMap<TokenKey, Label>);

impl GoldIndex {
    pub fn new(corpus: &Corpus) -> GoldIndex {
        let mut map = HashMap::new();
        for s in corpus.sentences() {
            let sentence = s.key();
            for (token, t) in s.tokens.iter().enumerate() {
                map.insert(TokenKey { sentence, token }, t.gold_label.clone());
            }
        }
        GoldIndex(map)
    }

    pub fn get(&self, key: &TokenKey) -> Option<&Label> {
        self.0.get(key)
    }
}

impl ExampleRecord {
    pub fn from_example(example: &InputExample, vocab: &Vocab) -> ExampleRecord {
        let piece = |f: fn(&WordPiece) -> i64| -> Vec<i64> {
            example.items.iter().map(|i| i.piece().map_or(-1, f)).collect()
        };
        ExampleRecord {
            focus: example.focus,
            focus_start: example.focus_start,
            piece_ids: example.piece_ids(vocab),
            item_kinds: example.item_kinds(),
            token_index: piece(|p| p.origin.token as i64),
            continuation: example.items.iter().map(|i| i.piece().is_some_and(|p| p.is_continuation)).collect(),
            spans: example.sentence_spans.clone(),
            label_ids: None,
            weights: None,
        }
    }

    /// Attach per-position training targets. Special items get the `O` id;
    /// `[CLS]` and `[PAD]` weigh 0, everything else 1.
    pub fn with_targets(
        mut self,
        example: &InputExample,
        gold: &GoldIndex,
        labels: &LabelSet,
        policy: ContinuationLabel,
    ) -> Result<ExampleRecord, ExportError> {
        let outside = labels.outside_id();
        let mut ids = Vec::with_capacity(example.items.len());
        let mut weights = Vec::with_capacity(example.items.len());
        for item in &example.items {
            match item {
                WindowItem::Cls | WindowItem::Pad => {
                    ids.push(outside);
                    weights.push(0);
                }
                WindowItem::Sep => {
                    ids.push(outside);
                    weights.push(1);
                }
                WindowItem::Piece(p) => {
                    let label = gold.get(&p.origin).ok_or(ExportError::MissingGold(p.origin))?;
                    let label = match (p.is_continuation, policy) {
                        (true, ContinuationLabel::Inside) => label.to_inside(),
                        _ => label.clone(),
                    };
                    ids.push(labels.id_of(&label).ok_or(ExportError::UnknownLabel(label))?);
                    weights.push(1);
                }
            }
        }
        self.label_ids = Some(ids);
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn to_example(&self) -> Result<InputExample, String> {
        let n = self.item_kinds.len();
        if self.piece_ids.len() != n || self.token_index.len() != n || self.continuation.len() != n {
            return Err("per-position arrays differ in length".into());
        }
        let mut owner: Vec<Option<SentenceKey>> = vec![None; n];
        for span in &self.spans {
            if span.first_item > span.last_item || span.last_item >= n {
                return Err(format!("span {}..={} out of range", span.first_item, span.last_item));
            }
            for slot in &mut owner[span.first_item..=span.last_item] {
                *slot = Some(span.sentence);
            }
        }
        let items = (0..n)
            .map(|i| match self.item_kinds[i] {
                ItemKind::Cls => Ok(WindowItem::Cls),
                ItemKind::Sep => Ok(WindowItem::Sep),
                ItemKind::Pad => Ok(WindowItem::Pad),
                ItemKind::Piece => {
                    let sentence = owner[i].ok_or_else(|| format!("position {i} is not covered by a span"))?;
                    let token = usize::try_from(self.token_index[i])
                        .map_err(|_| format!("position {i} has no token index"))?;
                    Ok(WindowItem::Piece(WordPiece {
                        piece_id: self.piece_ids[i],
                        is_continuation: self.continuation[i],
                        origin: TokenKey { sentence, token },
                    }))
                }
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(InputExample {
            items,
            focus: self.focus,
            focus_start: self.focus_start,
            sentence_spans: self.spans.clone(),
        })
    }
}

pub fn write_jsonl<'a, W, I>(mut out: W, records: I) -> Result<(), ExportError>
where
    W: Write,
    I: IntoIterator<Item = &'a ExampleRecord>,
{
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ExampleRecord>, ExportError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| ExportError::Format { line: i + 1, message: e.to_string() })?;
        record.to_example().map_err(|message| ExportError::Format { line: i + 1, message })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, ParseConfig};
    use crate::windowing::{build_first, WindowConfig, WrapMode};

    #[test]
    fn records_round_trip_and_carry_targets() {
        let vocab = Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\nJo\n##hn\nruns\nhome\n").unwrap();
        let corpus = parse_conll("John B-PER\nruns O\n\nhome O\n", &ParseConfig::default()).unwrap();
        let cfg = WindowConfig { max_seq_len: 10, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let examples = build_first(&corpus, &cfg, &vocab).unwrap();

        let labels = corpus.label_set();
        let gold = GoldIndex::new(&corpus);
        let records: Vec<ExampleRecord> = examples
            .iter()
            .map(|e| {
                ExampleRecord::from_example(e, &vocab).with_targets(e, &gold, &labels, ContinuationLabel::Inside)
            })
            .collect::<Result<_, _>>()
            .unwrap();

        let r = &records[0];
        assert_eq!(r.piece_ids, vec![2, 4, 5, 6, 3, 7, 3, 0, 0, 0]);
        // O, B-PER, I-PER
        assert_eq!(r.label_ids.as_ref().unwrap(), &vec![0, 1, 2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(r.weights.as_ref().unwrap(), &vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0]);

        let mut buf = Vec::new();
        write_jsonl(&mut buf, &records).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, records);
        for (r, e) in back.iter().zip(&examples) {
            assert_eq!(&r.to_example().unwrap(), e);
        }
    }

    #[test]
    fn malformed_lines_are_reported() {
        let err = read_jsonl("\n{\"focus\": 3}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, ExportError::Format { line: 2, .. }));
    }
}
