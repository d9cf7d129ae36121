//! Deterministic, context-sensitive stand-in for a fine-tuned tagger.
//!
//! Each piece gets logits from three sources: a gazetteer entry for its token
//! (type and strength), a bonus when the same token text also occurs in
//! another complete sentence of the window, and Gaussian noise seeded by
//! `(seed, focus sentence, window position)`. The output is a pure function of
//! configuration and example.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_batch, Backend, BackendError, LabelDistribution, LabelSet, Predictions};
use crate::corpus::{Label, TokenKey};
use crate::tokenizer::{Vocab, CONTINUATION_PREFIX};
use crate::windowing::{InputExample, WindowItem};

pub const DEFAULT_STRENGTH: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub entity_type: String,
    pub strength: f64,
}

#[derive(Debug, thiserror::Error)]
#[error("gazetteer line {line}: {message}")]
pub struct GazetteerError {
    pub line: usize,
    pub message: String,
}

/// Token text to entity type, with a per-entry evidence strength.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gazetteer {
    entries: HashMap<String, GazetteerEntry>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Gazetteer::default()
    }

    pub fn insert(&mut self, token: impl Into<String>, entity_type: impl Into<String>, strength: f64) {
        self.entries.insert(token.into(), GazetteerEntry { entity_type: entity_type.into(), strength });
    }

    pub fn get(&self, token: &str) -> Option<&GazetteerEntry> {
        self.entries.get(token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tab-separated `token TYPE [strength]`, one entry per line.
    pub fn parse(text: &str) -> Result<Gazetteer, GazetteerError> {
        let mut g = Gazetteer::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| GazetteerError { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let strength = match fields.as_slice() {
                [_, _] => DEFAULT_STRENGTH,
                [_, _, s] => s.parse().map_err(|_| err(format!("invalid strength `{s}`")))?,
                _ => return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len()))),
            };
            g.insert(fields[0], fields[1], strength);
        }
        Ok(g)
    }

    /// Entries sorted by token, so output is reproducible.
    pub fn to_tsv(&self) -> String {
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| {
                let e = &self.entries[k];
                format!("{k}\t{}\t{}\n", e.entity_type, e.strength)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub gazetteer: Gazetteer,
    /// Added to the entity logit when the token recurs in another complete sentence.
    pub context_bonus: f64,
    /// Standard deviation of the per-position logit noise.
    pub noise: f64,
    pub seed: u64,
    /// Logit of `O` at every position.
    pub outside_logit: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig { gazetteer: Gazetteer::new(), context_bonus: 1.5, noise: 0.0, seed: 0, outside_logit: 1.0 }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derivation from a base seed and a sequence of integers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub struct MockLexiconBackend {
    labels: LabelSet,
    vocab: Arc<Vocab>,
    config: MockConfig,
}

impl MockLexiconBackend {
    pub fn new(labels: LabelSet, vocab: Arc<Vocab>, config: MockConfig) -> Self {
        MockLexiconBackend { labels, vocab, config }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn token_texts(&self, example: &InputExample) -> HashMap<TokenKey, String> {
        let mut texts: HashMap<TokenKey, String> = HashMap::new();
        for piece in example.items.iter().filter_map(WindowItem::piece) {
            let s = self.vocab.piece(piece.piece_id).unwrap_or_default();
            let s = if piece.is_continuation { s.strip_prefix(CONTINUATION_PREFIX).unwrap_or(s) } else { s };
            texts.entry(piece.origin).or_default().push_str(s);
        }
        texts
    }

    fn predict_one(&self, example: &InputExample) -> Vec<LabelDistribution> {
        let n_labels = self.labels.len();
        let outside = self.labels.outside_id();
        let texts = self.token_texts(example);

        // Number of complete sentences in which each token text occurs.
        let mut occurrences: HashMap<&str, usize> = HashMap::new();
        for span in example.sentence_spans.iter().filter(|s| s.complete) {
            let mut seen: Vec<&str> = example.items[span.first_item..=span.last_item]
                .iter()
                .filter_map(WindowItem::piece)
                .filter(|p| !p.is_continuation)
                .filter_map(|p| texts.get(&p.origin).map(String::as_str))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *occurrences.entry(t).or_default() += 1;
            }
        }
        let complete_of = |key: &TokenKey| {
            example.sentence_spans.iter().any(|s| s.complete && s.sentence == key.sentence)
        };

        let noise = (self.config.noise > 0.0).then(|| Normal::new(0.0, self.config.noise).expect("finite noise"));
        let focus = example.focus;
        let focus_seed = derive_seed(
            self.config.seed,
            &[focus.doc as u64, focus.sent as u64, focus.part.map_or(0, |p| p as u64 + 1)],
        );

        example
            .items
            .iter()
            .enumerate()
            .map(|(position, item)| {
                let mut logits = vec![0.0; n_labels];
                logits[outside] = self.config.outside_logit;
                let WindowItem::Piece(piece) = item else {
                    return LabelDistribution::from_logits(&logits);
                };
                let text = texts.get(&piece.origin).map_or("", String::as_str);
                if let Some(entry) = self.config.gazetteer.get(text) {
                    let prev_same_type = piece.origin.token > 0 && {
                        let prev = TokenKey { token: piece.origin.token - 1, ..piece.origin };
                        texts
                            .get(&prev)
                            .and_then(|t| self.config.gazetteer.get(t))
                            .is_some_and(|e| e.entity_type == entry.entity_type)
                    };
                    let label = if piece.is_continuation || prev_same_type {
                        Label::inside(entry.entity_type.clone())
                    } else {
                        Label::begin(entry.entity_type.clone())
                    };
                    if let Some(id) = self.labels.id_of(&label) {
                        let own = usize::from(complete_of(&piece.origin));
                        let recurs = occurrences.get(text).copied().unwrap_or(0) > own;
                        logits[id] = entry.strength + if recurs { self.config.context_bonus } else { 0.0 };
                    }
                }
                if let Some(normal) = &noise {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(focus_seed, &[position as u64]));
                    for l in &mut logits {
                        *l += normal.sample(&mut rng);
                    }
                }
                LabelDistribution::from_logits(&logits)
            })
            .collect()
    }
}

impl Backend for MockLexiconBackend {
    fn label_set(&self) -> &LabelSet {
        &self.labels
    }

    fn predict(&self, batch: &[InputExample]) -> Result<Predictions, BackendError> {
        check_batch(batch)?;
        Ok(batch.par_iter().map(|e| self.predict_one(e)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::check_response_shape;
    use crate::corpus::{parse_conll, ParseConfig};
    use crate::windowing::{build_first, build_positioned, build_single, WindowConfig, WrapMode};

    fn setup() -> (crate::corpus::Corpus, Arc<Vocab>, LabelSet) {
        let vocab = Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\nAnna\nKor\n##ven\nsaw\nmet\nhim\n.\n").unwrap();
        let corpus = parse_conll(
            "Anna B-PER\nsaw O\nhim O\n.\n\nKorven B-PER\nmet O\nAnna B-PER\n.\n",
            &ParseConfig { label_column: Some(1), ..ParseConfig::default() },
        );
        // the "." lines have no label column
        assert!(corpus.is_err());
        let corpus = parse_conll(
            "Anna B-PER\nsaw O\nhim O\n. O\n\nKorven B-PER\nmet O\nAnna B-PER\n. O\n",
            &ParseConfig::default(),
        )
        .unwrap();
        let labels = corpus.label_set();
        (corpus, Arc::new(vocab), labels)
    }

    fn gazetteer(strength: f64) -> Gazetteer {
        let mut g = Gazetteer::new();
        g.insert("Anna", "PER", strength);
        g.insert("Korven", "PER", strength);
        g
    }

    #[test]
    fn pure_gazetteer_lookup() {
        let (corpus, vocab, labels) = setup();
        let cfg = MockConfig { gazetteer: gazetteer(3.0), context_bonus: 0.0, ..MockConfig::default() };
        let mock = MockLexiconBackend::new(labels.clone(), vocab.clone(), cfg);
        let wcfg = WindowConfig { max_seq_len: 16, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let single = build_single(&corpus, &wcfg, &vocab).unwrap();
        let out = mock.predict(&single).unwrap();
        check_response_shape(0, &single, &out, labels.len()).unwrap();
        let b_per = labels.id_of(&Label::begin("PER")).unwrap();
        let i_per = labels.id_of(&Label::inside("PER")).unwrap();
        assert_eq!(out[0][1].argmax(), b_per);
        assert_eq!(out[0][2].argmax(), 0);
        // Korven = Kor ##ven
        assert_eq!(out[1][1].argmax(), b_per);
        assert_eq!(out[1][2].argmax(), i_per);

        // without noise or bonus, a token looks the same in every context
        let first = build_first(&corpus, &wcfg, &vocab).unwrap();
        let out_first = mock.predict(&first).unwrap();
        assert_eq!(out_first[0][1], out[0][1]);
    }

    #[test]
    fn recurrence_bonus_needs_a_complete_other_sentence() {
        let (corpus, vocab, labels) = setup();
        let cfg = MockConfig { gazetteer: gazetteer(0.5), context_bonus: 1.5, ..MockConfig::default() };
        let mock = MockLexiconBackend::new(labels.clone(), vocab.clone(), cfg);
        let b_per = labels.id_of(&Label::begin("PER")).unwrap();

        let wcfg = WindowConfig { max_seq_len: 16, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let single = mock.predict(&build_single(&corpus, &wcfg, &vocab).unwrap()).unwrap();
        assert_eq!(single[0][1].argmax(), 0, "weak entry alone loses to O");
        let first = mock.predict(&build_first(&corpus, &wcfg, &vocab).unwrap()).unwrap();
        assert_eq!(first[0][1].argmax(), b_per, "Anna recurs in the second sentence");
        // Korven does not recur
        assert_eq!(first[1][1].argmax(), 0);

        // cut the second sentence: no complete recurrence, no bonus
        let wcfg = WindowConfig { max_seq_len: 10, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let first = mock.predict(&build_first(&corpus, &wcfg, &vocab).unwrap()).unwrap();
        assert_eq!(first[0][1].argmax(), 0);
    }

    #[test]
    fn deterministic_and_position_dependent() {
        let (corpus, vocab, labels) = setup();
        let cfg = MockConfig { gazetteer: gazetteer(3.0), noise: 1.0, seed: 7, ..MockConfig::default() };
        let mock = MockLexiconBackend::new(labels.clone(), vocab.clone(), cfg.clone());
        let wcfg = WindowConfig { max_seq_len: 16, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let ex = build_first(&corpus, &wcfg, &vocab).unwrap();
        let a = mock.predict(&ex).unwrap();
        let b = MockLexiconBackend::new(labels.clone(), vocab.clone(), cfg.clone()).predict(&ex).unwrap();
        assert_eq!(a, b);
        let twice = mock.predict(&[ex[0].clone(), ex[0].clone()]).unwrap();
        assert_eq!(twice[0], twice[1]);

        let moved = build_positioned(&corpus, &WindowConfig { start_pos: 6, ..wcfg }, &vocab).unwrap();
        let c = mock.predict(&moved).unwrap();
        let at = moved[0].focus_start;
        assert_ne!(a[0][1], c[0][at]);

        let other_seed = MockLexiconBackend::new(labels, vocab, MockConfig { seed: 8, ..cfg }).predict(&ex).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn empty_batch_and_mixed_lengths() {
        let (corpus, vocab, labels) = setup();
        let mock = MockLexiconBackend::new(labels, vocab.clone(), MockConfig::default());
        assert!(mock.predict(&[]).unwrap().is_empty());
        let a = build_single(&corpus, &WindowConfig { max_seq_len: 16, ..WindowConfig::default() }, &vocab).unwrap();
        let b = build_single(&corpus, &WindowConfig { max_seq_len: 12, ..WindowConfig::default() }, &vocab).unwrap();
        let err = mock.predict(&[a[0].clone(), b[0].clone()]).unwrap_err();
        assert!(matches!(err, BackendError::InvalidBatch { example: 1, .. }));
    }

    #[test]
    fn gazetteer_tsv() {
        let g = Gazetteer::parse("Anna\tPER\t0.5\nParis\tLOC\n\n").unwrap();
        assert_eq!(g.get("Paris").unwrap().strength, DEFAULT_STRENGTH);
        assert_eq!(Gazetteer::parse(&g.to_tsv()).unwrap(), g);
        assert_eq!(Gazetteer::parse("x\n").unwrap_err().line, 1);
        assert!(Gazetteer::parse("x\tPER\tstrong\n").is_err());
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[]), derive_seed(2, &[]));
    }
}
