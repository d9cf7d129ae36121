//! Synthetic gazetteer corpus for desk-scale experiments.
//!
//! Sentences are filler words with non-adjacent entity mentions. Entity names
//! are built from three-letter syllables so they split into several
//! wordpieces. A fixed share of mentions repeat an entity from one of the
//! previous few sentences of the same document. Half of the entities are
//! "weak" in the gazetteer: the mock backend usually misses them unless the
//! window also shows another sentence mentioning them.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Gazetteer, MockConfig};
use crate::corpus::{Corpus, Label, Token};
use crate::tokenizer::{Vocab, CLS, CONTINUATION_PREFIX, PAD, SEP, UNK};

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "said", "on", "was", "for", "with", "by", "at", "from", "that", "his",
    "her", "their", "new", "after", "before", "talks", "met", "visited", "left", "joined", "announced", "reported",
    "team", "city", "group", "game", "week", "year", "minister", "official", "club", "market", "season", "deal",
    "plan", "meeting", "today", "later", "also", "not", "has", "had", "will", "would", "two", "three", "first",
    "last", "over", "under", "against", "near", "about", "into",
];

const SYLLABLES: &[&str] = &[
    "kar", "vel", "tor", "min", "sad", "lok", "ren", "dak", "bor", "fin", "gul", "hem", "jas", "kol", "mur", "nev",
    "pal", "ros", "sut", "tam", "vik", "wen", "yul", "zor",
];

pub const TYPES: [&str; 4] = ["LOC", "MISC", "ORG", "PER"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub documents: usize,
    pub sentences_per_document: usize,
    /// Share of mentions that repeat an entity from a recent sentence.
    pub recurrence: f64,
    /// How many previous sentences a repeat may reach back.
    pub recurrence_window: usize,
    pub weak_fraction: f64,
    pub multi_token_fraction: f64,
    pub strong_strength: f64,
    pub weak_strength: f64,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub max_mentions: usize,
    pub seed: u64,
    // suggested mock settings
    pub outside_logit: f64,
    pub context_bonus: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            documents: 25,
            sentences_per_document: 20,
            recurrence: 0.3,
            recurrence_window: 3,
            weak_fraction: 0.5,
            multi_token_fraction: 0.2,
            strong_strength: 4.0,
            weak_strength: 1.0,
            min_sentence_len: 6,
            max_sentence_len: 14,
            max_mentions: 3,
            seed: 13,
            outside_logit: 2.0,
            context_bonus: 2.0,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// One piece per line, ids by position.
    pub vocab_lines: Vec<String>,
    pub gazetteer: Gazetteer,
    pub mention_count: usize,
    pub repeated_mentions: usize,
    pub config: SynthConfig,
}

impl SynthCorpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::from_pieces(self.vocab_lines.iter().cloned()).expect("generated vocabulary is valid")
    }

    pub fn recurrence_fraction(&self) -> f64 {
        if self.mention_count == 0 {
            0.0
        } else {
            self.repeated_mentions as f64 / self.mention_count as f64
        }
    }

    /// Mock settings matched to the gazetteer strengths.
    pub fn mock_config(&self, seed: u64) -> MockConfig {
        MockConfig {
            gazetteer: self.gazetteer.clone(),
            context_bonus: self.config.context_bonus,
            noise: self.config.noise,
            seed,
            outside_logit: self.config.outside_logit,
        }
    }
}

struct Entity {
    tokens: Vec<String>,
    entity_type: &'static str,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
}

pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut entities: Vec<Entity> = Vec::new();
    let mut gazetteer = Gazetteer::new();

    let mut fresh_name = |rng: &mut ChaCha8Rng| loop {
        let n = rng.random_range(2..=3);
        let name: String =
            capitalize(SYLLABLES.choose(rng).unwrap()) + &(1..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect::<String>();
        if used.insert(name.clone()) {
            return name;
        }
    };

    let mut new_entity = |rng: &mut ChaCha8Rng, entities: &mut Vec<Entity>| -> usize {
        let entity_type = *TYPES.choose(rng).unwrap();
        let len = if rng.random_bool(cfg.multi_token_fraction) { 2 } else { 1 };
        let tokens: Vec<String> = (0..len).map(|_| fresh_name(rng)).collect();
        let strength = if rng.random_bool(cfg.weak_fraction) { cfg.weak_strength } else { cfg.strong_strength };
        for t in &tokens {
            gazetteer.insert(t.clone(), entity_type, strength);
        }
        entities.push(Entity { tokens, entity_type });
        entities.len() - 1
    };

    let (mut mentions, mut repeats) = (0usize, 0usize);
    let mut docs = Vec::with_capacity(cfg.documents);
    for _ in 0..cfg.documents {
        // entity ids mentioned per sentence of this document
        let mut history: Vec<Vec<usize>> = Vec::new();
        let mut sentences = Vec::with_capacity(cfg.sentences_per_document);
        for _ in 0..cfg.sentences_per_document {
            let len = rng.random_range(cfg.min_sentence_len..=cfg.max_sentence_len);
            // mentions need a gap of at least one filler word between them
            let k = rng.random_range(1..=cfg.max_mentions.min(len / 3).max(1));
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            for _ in 0..k {
                let recent: Vec<usize> = history
                    .iter()
                    .rev()
                    .take(cfg.recurrence_window)
                    .flatten()
                    .copied()
                    .filter(|e| !chosen.contains(e))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let want_repeat = (repeats as f64) < cfg.recurrence * (mentions + 1) as f64;
                let id = match recent.choose(&mut rng) {
                    Some(&e) if want_repeat => {
                        repeats += 1;
                        e
                    }
                    _ => new_entity(&mut rng, &mut entities),
                };
                mentions += 1;
                chosen.push(id);
            }
            history.push(chosen.clone());

            // lay out: filler slots with mentions at non-adjacent positions
            let slots = len.max(2 * k);
            let mut positions: Vec<usize> = (0..slots).step_by(2).collect();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let i = rng.random_range(0..positions.len());
                picked.push(positions.remove(i));
            }
            picked.sort_unstable();
            let mut tokens = Vec::new();
            let mut m = 0;
            for slot in 0..slots {
                if m < k && picked[m] == slot {
                    let e = &entities[chosen[m]];
                    for (j, t) in e.tokens.iter().enumerate() {
                        let label = if j == 0 { Label::begin(e.entity_type) } else { Label::inside(e.entity_type) };
                        tokens.push(Token { text: t.clone(), gold_label: label });
                    }
                    m += 1;
                } else {
                    let w = FILLER.choose(&mut rng).unwrap();
                    tokens.push(Token { text: w.to_string(), gold_label: Label::outside() });
                }
            }
            tokens.push(Token { text: ".".into(), gold_label: Label::outside() });
            sentences.push(tokens);
        }
        docs.push(sentences);
    }

    let mut vocab_lines: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    vocab_lines.push(".".into());
    vocab_lines.extend(FILLER.iter().map(|s| s.to_string()));
    vocab_lines.extend(SYLLABLES.iter().map(|s| capitalize(s)));
    vocab_lines.extend(SYLLABLES.iter().map(|s| format!("{CONTINUATION_PREFIX}{s}")));

    SynthCorpus {
        corpus: Corpus::from_documents(docs, true),
        vocab_lines,
        gazetteer,
        mention_count: mentions,
        repeated_mentions: repeats,
        config: cfg.clone(),
    }
}
