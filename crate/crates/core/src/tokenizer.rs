//! WordPiece tokenization against a BERT-style vocabulary file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sentence, TokenKey};

pub const CONTINUATION_PREFIX: &str = "##";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

/// Tokens longer than this many characters map to `[UNK]`.
pub const DEFAULT_MAX_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("missing special marker {}", .0.join(", "))]
    MissingSpecial(Vec<&'static str>),
    #[error("duplicate piece `{piece}` at line {line}")]
    Duplicate { piece: String, line: usize },
    #[error("empty piece at line {line}")]
    EmptyPiece { line: usize },
    #[error("cannot read vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    piece_to_id: HashMap<String, u32>,
    special: SpecialIds,
}

impl Vocab {
    /// One piece per line; the zero-based line number is the piece id.
    pub fn parse(text: &str) -> Result<Vocab, VocabError> {
        Vocab::from_pieces(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn from_pieces<I>(pieces: I) -> Result<Vocab, VocabError>
    where
        I: IntoIterator<Item = String>,
    {
        let pieces: Vec<String> = pieces.into_iter().collect();
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(VocabError::EmptyPiece { line: i + 1 });
            }
            if piece_to_id.insert(piece.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate { piece: piece.clone(), line: i + 1 });
            }
        }
        let missing: Vec<&'static str> =
            [PAD, UNK, CLS, SEP].into_iter().filter(|m| !piece_to_id.contains_key(*m)).collect();
        if !missing.is_empty() {
            return Err(VocabError::MissingSpecial(missing));
        }
        let special = SpecialIds {
            cls: piece_to_id[CLS],
            sep: piece_to_id[SEP],
            pad: piece_to_id[PAD],
            unk: piece_to_id[UNK],
        };
        Ok(Vocab { pieces, piece_to_id, special })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.piece_to_id.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab, VocabError> {
    Vocab::parse(&fs::read_to_string(path)?)
}

/// One wordpiece of a single token, before provenance is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subword {
    pub piece_id: u32,
    pub is_continuation: bool,
}

/// Greedy longest-match-first WordPiece. A token with any unmatchable
/// remainder, or longer than `max_chars`, becomes a single `[UNK]`.
pub fn wordpiece_tokenize(token_text: &str, vocab: &Vocab, max_chars: usize) -> Vec<Subword> {
    let unk = vec![Subword { piece_id: vocab.special.unk, is_continuation: false }];
    let chars: Vec<(usize, char)> = token_text.char_indices().collect();
    if chars.is_empty() || chars.len() > max_chars {
        return unk;
    }
    let byte_at = |i: usize| chars.get(i).map_or(token_text.len(), |&(b, _)| b);

    let mut out = Vec::new();
    let mut candidate = String::new();
    let mut start = 0;
    while start < chars.len() {
        let mut found = None;
        let mut end = chars.len();
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.push_str(&token_text[byte_at(start)..byte_at(end)]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece_id) => out.push(Subword { piece_id, is_continuation: start > 0 }),
            None => return unk,
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordPiece {
    pub piece_id: u32,
    pub is_continuation: bool,
    pub origin: TokenKey,
}

/// Pieces for all tokens of a sentence, in order, with provenance.
pub fn tokenize_sentence(sentence: &Sentence, vocab: &Vocab, max_chars: usize) -> Vec<WordPiece> {
    let key = sentence.key();
    sentence
        .tokens
        .iter()
        .enumerate()
        .flat_map(|(token, tok)| {
            wordpiece_tokenize(&tok.text, vocab, max_chars).into_iter().map(move |sw| WordPiece {
                piece_id: sw.piece_id,
                is_continuation: sw.is_continuation,
                origin: TokenKey { sentence: key, token },
            })
        })
        .collect()
}

/// How continuation pieces are labelled for training export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuationLabel {
    /// `B-X` becomes `I-X` on continuations; `O` stays `O`.
    #[default]
    Inside,
    /// Continuations repeat the token's label.
    Copy,
}

#[derive(Debug, thiserror::Error)]
#[error("piece {index}: {message}")]
pub struct AlignError {
    pub index: usize,
    pub message: String,
}

/// Per-piece gold labels and loss weights for one sentence.
pub fn align_labels(
    sentence: &Sentence,
    pieces: &[WordPiece],
    policy: ContinuationLabel,
) -> Result<(Vec<Label>, Vec<u8>), AlignError> {
    let key = sentence.key();
    let mut labels = Vec::with_capacity(pieces.len());
    let mut expected = 0usize;
    for (index, piece) in pieces.iter().enumerate() {
        let err = |message: String| AlignError { index, message };
        if piece.origin.sentence != key {
            return Err(err(format!("belongs to {}, not {}", piece.origin.sentence, key)));
        }
        let token = piece.origin.token;
        if piece.is_continuation {
            if index == 0 || token + 1 != expected {
                return Err(err(format!("continuation of token {token} does not follow its first piece")));
            }
        } else if token != expected {
            return Err(err(format!("expected first piece of token {expected}, found token {token}")));
        } else {
            expected += 1;
        }
        let gold = &sentence
            .tokens
            .get(token)
            .ok_or_else(|| err(format!("token {token} out of range")))?
            .gold_label;
        labels.push(match (piece.is_continuation, policy) {
            (true, ContinuationLabel::Inside) => gold.to_inside(),
            _ => gold.clone(),
        });
    }
    if expected != sentence.tokens.len() {
        return Err(AlignError {
            index: pieces.len(),
            message: format!("{} of {} tokens covered", expected, sentence.tokens.len()),
        });
    }
    let weights = vec![1; labels.len()];
    Ok((labels, weights))
}
