//! Document / sentence / token model for CoNLL-style column data.
//!
//! Input is one token per line, blank lines between sentences, and
//! `-DOCSTART-` lines opening documents. Corpora without any document marker
//! are wrapped in a single synthetic document, so downstream code only ever
//! deals with documents.

mod label;
mod scheme;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

pub use label::{Label, LabelParseError, LabelSet, LabelSetError, Prefix};
pub use scheme::{detect_scheme, to_iob2, validate_iob2, TagScheme, Violation};

pub const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: input is not valid UTF-8")]
    Encoding { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub gold_label: Label,
}

/// Identifies a sentence; `part` is set on pieces of a split long sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceKey {
    pub doc: usize,
    pub sent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<usize>,
}

impl fmt::Display for SentenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.part {
            Some(p) => write!(f, "doc {} sentence {} part {}", self.doc, self.sent, p),
            None => write!(f, "doc {} sentence {}", self.doc, self.sent),
        }
    }
}

/// A token occurrence: sentence plus token index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenKey {
    pub sentence: SentenceKey,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub doc_index: usize,
    pub sent_index: usize,
    pub split_part: Option<usize>,
}

impl Sentence {
    pub fn key(&self) -> SentenceKey {
        SentenceKey { doc: self.doc_index, sent: self.sent_index, part: self.split_part }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.tokens.iter().map(|t| t.gold_label.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub sentences: Vec<Sentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub type_set: BTreeSet<String>,
    pub has_doc_boundaries: bool,
}

impl Corpus {
    /// Build a corpus from per-document sentence token lists, assigning indices.
    pub fn from_documents(docs: Vec<Vec<Vec<Token>>>, has_doc_boundaries: bool) -> Corpus {
        let mut type_set = BTreeSet::new();
        let documents = docs
            .into_iter()
            .filter(|d| !d.is_empty())
            .enumerate()
            .map(|(doc_index, sents)| Document {
                sentences: sents
                    .into_iter()
                    .filter(|s| !s.is_empty())
                    .enumerate()
                    .map(|(sent_index, tokens)| {
                        for t in &tokens {
                            if let Some(ty) = t.gold_label.entity_type() {
                                type_set.insert(ty.to_string());
                            }
                        }
                        Sentence { tokens, doc_index, sent_index, split_part: None }
                    })
                    .collect(),
            })
            .collect();
        Corpus { documents, type_set, has_doc_boundaries }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn token_count(&self) -> usize {
        self.sentences().map(Sentence::len).sum()
    }

    /// Label set `O, B-T, I-T, ...` over the sorted type set.
    pub fn label_set(&self) -> LabelSet {
        LabelSet::from_types(&self.type_set)
    }

    pub fn scheme(&self) -> TagScheme {
        let labels: Vec<Vec<Label>> = self.sentences().map(Sentence::labels).collect();
        detect_scheme(labels.iter().map(Vec::as_slice))
    }

    /// Copy of the corpus with every sentence converted to IOB2.
    pub fn to_iob2(&self) -> Corpus {
        let mut out = self.clone();
        for sentence in out.documents.iter_mut().flat_map(|d| d.sentences.iter_mut()) {
            let converted = to_iob2(&sentence.labels());
            for (tok, label) in sentence.tokens.iter_mut().zip(converted) {
                tok.gold_label = label;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delimiter {
    #[default]
    Whitespace,
    Tab,
}

impl Delimiter {
    fn as_str(self) -> &'static str {
        match self {
            Delimiter::Whitespace => " ",
            Delimiter::Tab => "\t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    #[default]
    #[serde(alias = "utf-8")]
    Utf8,
    #[serde(alias = "latin-1", alias = "iso-8859-1")]
    Latin1,
}

/// Transcode raw file bytes to UTF-8 text.
pub fn decode(bytes: &[u8], encoding: Encoding) -> Result<String, CorpusError> {
    match encoding {
        Encoding::Latin1 => Ok(bytes.iter().map(|&b| b as char).collect()),
        Encoding::Utf8 => String::from_utf8(bytes.to_vec()).map_err(|e| {
            let valid = e.utf8_error().valid_up_to();
            let line = bytes[..valid].iter().filter(|&&b| b == b'\n').count() + 1;
            CorpusError::Encoding { line }
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseConfig {
    pub token_column: usize,
    /// `None` selects the last column.
    pub label_column: Option<usize>,
    pub delimiter: Delimiter,
    /// Restrict entity types; labels with other types are rejected.
    pub declared_types: Option<BTreeSet<String>>,
}

impl Default for ParseConfig {
    fn default() -> Self {
        ParseConfig { token_column: 0, label_column: None, delimiter: Delimiter::Whitespace, declared_types: None }
    }
}

pub fn parse_conll(text: &str, config: &ParseConfig) -> Result<Corpus, CorpusError> {
    let mut docs: Vec<Vec<Vec<Token>>> = vec![Vec::new()];
    let mut current: Vec<Token> = Vec::new();
    let mut has_boundaries = false;

    let flush = |current: &mut Vec<Token>, docs: &mut Vec<Vec<Vec<Token>>>| {
        if !current.is_empty() {
            docs.last_mut().expect("at least one document").push(std::mem::take(current));
        }
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
            continue;
        }
        let fields: Vec<&str> = match config.delimiter {
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Tab => line.split('\t').collect(),
        };
        if fields.first() == Some(&DOCSTART) {
            flush(&mut current, &mut docs);
            if has_boundaries || !docs[0].is_empty() {
                docs.push(Vec::new());
            }
            has_boundaries = true;
            continue;
        }
        let label_column = config.label_column.unwrap_or(fields.len().saturating_sub(1));
        let needed = config.token_column.max(label_column) + 1;
        if fields.len() < needed || (config.label_column.is_none() && fields.len() < 2) {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("expected at least {} columns, found {}", needed.max(2), fields.len()),
            });
        }
        let text = fields[config.token_column];
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("invalid token `{text}`"),
            });
        }
        let raw_label = fields[label_column];
        let gold_label: Label = raw_label
            .parse()
            .map_err(|_| CorpusError::UnknownLabel { line: line_no, label: raw_label.to_string() })?;
        if let (Some(declared), Some(ty)) = (&config.declared_types, gold_label.entity_type()) {
            if !declared.contains(ty) {
                return Err(CorpusError::UnknownLabel { line: line_no, label: raw_label.to_string() });
            }
        }
        current.push(Token { text: text.to_string(), gold_label });
    }
    flush(&mut current, &mut docs);

    // Documents opened by a marker but holding no sentence are dropped.
    let mut corpus = Corpus::from_documents(docs, has_boundaries);
    if let Some(declared) = &config.declared_types {
        corpus.type_set = declared.clone();
    }
    Ok(corpus)
}

/// Two-column output (`token label`); document markers are emitted when the
/// corpus has document boundaries.
/// Read, transcode and parse a column file.
pub fn read_conll(
    path: impl AsRef<std::path::Path>,
    encoding: Encoding,
    config: &ParseConfig,
) -> Result<Corpus, CorpusError> {
    let bytes = std::fs::read(path)?;
    parse_conll(&decode(&bytes, encoding)?, config)
}

pub fn serialize_conll(corpus: &Corpus, delimiter: Delimiter) -> String {
    let sep = delimiter.as_str();
    let mut out = String::new();
    for doc in &corpus.documents {
        if corpus.has_doc_boundaries {
            let _ = writeln!(out, "{DOCSTART}{sep}O\n");
        }
        for sentence in &doc.sentences {
            for tok in &sentence.tokens {
                let _ = writeln!(out, "{}{sep}{}", tok.text, tok.gold_label);
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub token_count: usize,
    pub entity_count: usize,
    pub per_type_counts: BTreeMap<String, usize>,
    pub sentence_count: usize,
    pub document_count: usize,
}

/// Entity counts are `B-` labels, so the corpus must already be IOB2.
pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut per_type_counts = BTreeMap::new();
    for tok in corpus.sentences().flat_map(|s| s.tokens.iter()) {
        if tok.gold_label.prefix() == Prefix::B {
            let ty = tok.gold_label.entity_type().expect("B- label has a type");
            *per_type_counts.entry(ty.to_string()).or_insert(0) += 1;
        }
    }
    CorpusStats {
        token_count: corpus.token_count(),
        entity_count: per_type_counts.values().sum(),
        per_type_counts,
        sentence_count: corpus.sentence_count(),
        document_count: corpus.documents.len(),
    }
}
