//! Model input windows.
//!
//! Three layouts are supported:
//!
//! * `Single`: `[CLS] S [SEP] [PAD]...`, one sentence per window.
//! * `First`: the sentence of interest at index 1, followed by the next
//!   sentences. In corpus wrap mode the window is filled to capacity (the last
//!   sentence may be cut) and the fill order wraps from the corpus end to its
//!   start. In document mode only whole sentences of the same document are
//!   added, wrapping to the document start, and the rest is padding.
//! * `Positioned`: the sentence of interest starts at a requested index
//!   (moved left when it would not fit) with preceding sentences to its left
//!   and following sentences to its right.
//!
//! Every window records which source sentences it holds and whether each is
//! complete, so that only predictions for whole sentences are used later.

mod export;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Sentence, SentenceKey};
use crate::tokenizer::{tokenize_sentence, wordpiece_tokenize, Vocab, WordPiece, DEFAULT_MAX_CHARS};

pub use export::{read_jsonl, write_jsonl, ExampleRecord, ExportError, GoldIndex, ItemKind};

#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
    #[error("{sentence} has {pieces} wordpieces, more than the {limit} that fit a window")]
    SentenceTooLong { sentence: SentenceKey, pieces: usize, limit: usize },
    #[error("token {token} of {sentence} has {pieces} wordpieces, more than the {limit} that fit a window")]
    TokenTooLong { sentence: SentenceKey, token: usize, pieces: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowStrategy {
    Single,
    #[default]
    First,
    Positioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrapMode {
    Corpus,
    #[default]
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub max_seq_len: usize,
    pub strategy: WindowStrategy,
    pub wrap_mode: WrapMode,
    /// Requested first-piece index of the sentence of interest (positioned only).
    pub start_pos: usize,
    pub position_interval: usize,
    /// Allow a cut sentence at the left edge in positioned windows.
    pub partial_left: bool,
    /// Split sentences that exceed a window instead of failing.
    pub split_long_sentences: bool,
    pub max_chars: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            max_seq_len: 512,
            strategy: WindowStrategy::First,
            wrap_mode: WrapMode::Document,
            start_pos: 1,
            position_interval: 32,
            partial_left: true,
            split_long_sentences: true,
            max_chars: DEFAULT_MAX_CHARS,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), WindowError> {
        let bad = |m: String| Err(WindowError::InvalidConfig(m));
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len must be at least 3, got {}", self.max_seq_len));
        }
        if self.start_pos < 1 || self.start_pos >= self.max_seq_len {
            return bad(format!("start_pos must be in [1, {}), got {}", self.max_seq_len, self.start_pos));
        }
        if self.position_interval == 0 {
            return bad("position_interval must be positive".into());
        }
        Ok(())
    }

    /// Maximum number of wordpieces of one sentence (room for `[CLS]` and `[SEP]`).
    pub fn sentence_capacity(&self) -> usize {
        self.max_seq_len - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowItem {
    Cls,
    Sep,
    Pad,
    Piece(WordPiece),
}

impl WindowItem {
    pub fn piece(&self) -> Option<&WordPiece> {
        match self {
            WindowItem::Piece(p) => Some(p),
            _ => None,
        }
    }
}

/// Items `first_item..=last_item` hold pieces of `sentence`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub sentence: SentenceKey,
    pub first_item: usize,
    pub last_item: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputExample {
    pub items: Vec<WindowItem>,
    pub focus: SentenceKey,
    pub focus_start: usize,
    pub sentence_spans: Vec<SentenceSpan>,
}

impl InputExample {
    pub fn max_seq_len(&self) -> usize {
        self.items.len()
    }

    pub fn focus_span(&self) -> Option<&SentenceSpan> {
        self.sentence_spans.iter().find(|s| s.sentence == self.focus)
    }

    /// Vocabulary ids for every position, special items included.
    pub fn piece_ids(&self, vocab: &Vocab) -> Vec<u32> {
        let special = vocab.special();
        self.items
            .iter()
            .map(|item| match item {
                WindowItem::Cls => special.cls,
                WindowItem::Sep => special.sep,
                WindowItem::Pad => special.pad,
                WindowItem::Piece(p) => p.piece_id,
            })
            .collect()
    }

    pub fn item_kinds(&self) -> Vec<ItemKind> {
        self.items.iter().map(ItemKind::of).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub key: SentenceKey,
    pub document: usize,
    pub pieces: Vec<WordPiece>,
}

/// A corpus tokenized once, with document ranges over the flat sentence list.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    sentences: Vec<EncodedSentence>,
    documents: Vec<Range<usize>>,
    has_doc_boundaries: bool,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, vocab: &Vocab, max_chars: usize) -> EncodedCorpus {
        let mut sentences = Vec::with_capacity(corpus.sentence_count());
        let mut documents = Vec::with_capacity(corpus.documents.len());
        for (d, doc) in corpus.documents.iter().enumerate() {
            let start = sentences.len();
            for s in &doc.sentences {
                sentences.push(EncodedSentence {
                    key: s.key(),
                    document: d,
                    pieces: tokenize_sentence(s, vocab, max_chars),
                });
            }
            documents.push(start..sentences.len());
        }
        EncodedCorpus { sentences, documents, has_doc_boundaries: corpus.has_doc_boundaries }
    }

    pub fn sentences(&self) -> &[EncodedSentence] {
        &self.sentences
    }

    pub fn has_doc_boundaries(&self) -> bool {
        self.has_doc_boundaries
    }

    fn bounds(&self, index: usize, mode: WrapMode) -> Range<usize> {
        match mode {
            WrapMode::Corpus => 0..self.sentences.len(),
            WrapMode::Document => self.documents[self.sentences[index].document].clone(),
        }
    }

    /// Sentences after `index`, wrapping to the start of its range, ending before `index`.
    fn following(&self, index: usize, mode: WrapMode) -> impl Iterator<Item = usize> {
        let range = self.bounds(index, mode);
        (index + 1..range.end).chain(range.start..index)
    }

    /// Sentences before `index`, nearest first, without wrapping.
    fn preceding(&self, index: usize, mode: WrapMode) -> impl Iterator<Item = usize> {
        let range = self.bounds(index, mode);
        (range.start..index).rev()
    }
}

/// Window under construction.
struct Layout<'a> {
    corpus: &'a EncodedCorpus,
    max: usize,
    items: Vec<WindowItem>,
    spans: Vec<SentenceSpan>,
}

impl<'a> Layout<'a> {
    fn new(corpus: &'a EncodedCorpus, max: usize) -> Self {
        let mut items = Vec::with_capacity(max);
        items.push(WindowItem::Cls);
        Layout { corpus, max, items, spans: Vec::new() }
    }

    fn remaining(&self) -> usize {
        self.max - self.items.len()
    }

    /// Append `pieces[range]` of sentence `index`.
    fn push_pieces(&mut self, index: usize, range: Range<usize>) {
        let sentence = &self.corpus.sentences[index];
        let complete = range.start == 0 && range.end == sentence.pieces.len();
        let first_item = self.items.len();
        self.items.extend(sentence.pieces[range].iter().copied().map(WindowItem::Piece));
        self.spans.push(SentenceSpan {
            sentence: sentence.key,
            first_item,
            last_item: self.items.len() - 1,
            complete,
        });
    }

    fn push(&mut self, item: WindowItem) {
        self.items.push(item);
    }

    /// Fill after the focus: whole sentences only in document mode, cut at
    /// capacity in corpus mode. Stops at any sentence for which `stop` holds.
    fn fill_following(&mut self, focus: usize, mode: WrapMode, stop: impl Fn(usize) -> bool) {
        for j in self.corpus.following(focus, mode) {
            let remaining = self.remaining();
            if remaining == 0 || stop(j) {
                break;
            }
            let n = self.corpus.sentences[j].pieces.len();
            match mode {
                WrapMode::Document => {
                    if n + 1 > remaining {
                        break;
                    }
                    self.push_pieces(j, 0..n);
                    self.push(WindowItem::Sep);
                }
                WrapMode::Corpus => {
                    if n > remaining {
                        self.push_pieces(j, 0..remaining);
                        break;
                    }
                    self.push_pieces(j, 0..n);
                    if self.remaining() > 0 {
                        self.push(WindowItem::Sep);
                    }
                }
            }
        }
    }

    fn finish(mut self, focus: usize, focus_start: usize) -> InputExample {
        self.items.resize(self.max, WindowItem::Pad);
        InputExample {
            items: self.items,
            focus: self.corpus.sentences[focus].key,
            focus_start,
            sentence_spans: self.spans,
        }
    }
}

fn effective_mode(corpus: &EncodedCorpus, cfg: &WindowConfig) -> WrapMode {
    match cfg.wrap_mode {
        WrapMode::Document if corpus.has_doc_boundaries => WrapMode::Document,
        _ => WrapMode::Corpus,
    }
}

fn check_lengths(corpus: &EncodedCorpus, cfg: &WindowConfig) -> Result<(), WindowError> {
    cfg.validate()?;
    let limit = cfg.sentence_capacity();
    match corpus.sentences.iter().find(|s| s.pieces.len() > limit) {
        Some(s) => Err(WindowError::SentenceTooLong { sentence: s.key, pieces: s.pieces.len(), limit }),
        None => Ok(()),
    }
}

fn single_window(corpus: &EncodedCorpus, cfg: &WindowConfig, focus: usize) -> InputExample {
    let mut layout = Layout::new(corpus, cfg.max_seq_len);
    layout.push_pieces(focus, 0..corpus.sentences[focus].pieces.len());
    layout.push(WindowItem::Sep);
    layout.finish(focus, 1)
}

fn first_window(corpus: &EncodedCorpus, cfg: &WindowConfig, focus: usize) -> InputExample {
    let mode = effective_mode(corpus, cfg);
    let mut layout = Layout::new(corpus, cfg.max_seq_len);
    layout.push_pieces(focus, 0..corpus.sentences[focus].pieces.len());
    layout.push(WindowItem::Sep);
    layout.fill_following(focus, mode, |_| false);
    layout.finish(focus, 1)
}

fn positioned_window(corpus: &EncodedCorpus, cfg: &WindowConfig, focus: usize) -> InputExample {
    let mode = effective_mode(corpus, cfg);
    let n = corpus.sentences[focus].pieces.len();
    let focus_start = cfg.start_pos.min(cfg.max_seq_len - n - 1);

    // Walk left from the focus: each sentence needs its pieces plus the SEP
    // that follows it, all at indices >= 1.
    let mut pos = focus_start;
    let mut left: Vec<(usize, Range<usize>)> = Vec::new();
    for j in corpus.preceding(focus, mode) {
        let avail = pos.saturating_sub(2);
        let len = corpus.sentences[j].pieces.len();
        if len <= avail {
            left.push((j, 0..len));
            pos -= len + 1;
        } else {
            if cfg.partial_left && avail > 0 {
                left.push((j, len - avail..len));
                pos = 1;
            }
            break;
        }
    }

    let mut layout = Layout::new(corpus, cfg.max_seq_len);
    layout.items.resize(pos, WindowItem::Pad);
    for (j, range) in left.iter().rev() {
        layout.push_pieces(*j, range.clone());
        layout.push(WindowItem::Sep);
    }
    debug_assert_eq!(layout.items.len(), focus_start);
    layout.push_pieces(focus, 0..n);
    layout.push(WindowItem::Sep);
    let stop = |j: usize| left.iter().any(|(k, _)| *k == j);
    layout.fill_following(focus, mode, stop);
    layout.finish(focus, focus_start)
}

/// Windows for every sentence of an already-encoded corpus under `cfg.strategy`.
pub fn build_examples(corpus: &EncodedCorpus, cfg: &WindowConfig) -> Result<Vec<InputExample>, WindowError> {
    check_lengths(corpus, cfg)?;
    let build = match cfg.strategy {
        WindowStrategy::Single => single_window,
        WindowStrategy::First => first_window,
        WindowStrategy::Positioned => positioned_window,
    };
    Ok((0..corpus.sentences.len()).map(|i| build(corpus, cfg, i)).collect())
}

fn build_with(
    corpus: &Corpus,
    cfg: &WindowConfig,
    vocab: &Vocab,
    strategy: WindowStrategy,
) -> Result<Vec<InputExample>, WindowError> {
    let cfg = WindowConfig { strategy, ..cfg.clone() };
    build_examples(&EncodedCorpus::new(corpus, vocab, cfg.max_chars), &cfg)
}

pub fn build_single(corpus: &Corpus, cfg: &WindowConfig, vocab: &Vocab) -> Result<Vec<InputExample>, WindowError> {
    build_with(corpus, cfg, vocab, WindowStrategy::Single)
}

pub fn build_first(corpus: &Corpus, cfg: &WindowConfig, vocab: &Vocab) -> Result<Vec<InputExample>, WindowError> {
    build_with(corpus, cfg, vocab, WindowStrategy::First)
}

pub fn build_positioned(
    corpus: &Corpus,
    cfg: &WindowConfig,
    vocab: &Vocab,
) -> Result<Vec<InputExample>, WindowError> {
    build_with(corpus, cfg, vocab, WindowStrategy::Positioned)
}

/// Split sentences longer than `max_seq_len - 2` wordpieces at token
/// boundaries, filling each part greedily. Parts carry `split_part` indices.
pub fn split_long_sentences(corpus: &Corpus, cfg: &WindowConfig, vocab: &Vocab) -> Result<Corpus, WindowError> {
    cfg.validate()?;
    let limit = cfg.sentence_capacity();
    let mut out = corpus.clone();
    for doc in &mut out.documents {
        let mut sentences = Vec::with_capacity(doc.sentences.len());
        for sentence in std::mem::take(&mut doc.sentences) {
            let counts: Vec<usize> =
                sentence.tokens.iter().map(|t| wordpiece_tokenize(&t.text, vocab, cfg.max_chars).len()).collect();
            let total: usize = counts.iter().sum();
            if total <= limit {
                sentences.push(sentence);
                continue;
            }
            if !cfg.split_long_sentences {
                return Err(WindowError::SentenceTooLong { sentence: sentence.key(), pieces: total, limit });
            }
            if let Some((token, &pieces)) = counts.iter().enumerate().find(|(_, &c)| c > limit) {
                return Err(WindowError::TokenTooLong { sentence: sentence.key(), token, pieces, limit });
            }
            let mut part = Vec::new();
            let mut used = 0;
            let mut parts = Vec::new();
            for (tok, count) in sentence.tokens.iter().zip(&counts) {
                if used + count > limit {
                    parts.push(std::mem::take(&mut part));
                    used = 0;
                }
                part.push(tok.clone());
                used += count;
            }
            parts.push(part);
            for (i, tokens) in parts.into_iter().enumerate() {
                sentences.push(Sentence {
                    tokens,
                    doc_index: sentence.doc_index,
                    sent_index: sentence.sent_index,
                    split_part: Some(i),
                });
            }
        }
        *doc = Document { sentences };
    }
    Ok(out)
}

/// Start positions for a placement sweep: 1, then every multiple of the
/// interval below `max_seq_len`.
pub fn position_sweep(cfg: &WindowConfig) -> Vec<usize> {
    let mut out = vec![1];
    let step = cfg.position_interval.max(1);
    out.extend((step..cfg.max_seq_len).step_by(step).filter(|&p| p != 1));
    out
}
