//! Per-token decisions from the windows that contain each token.
//!
//! Predictions are read at a token's first wordpiece, and only from windows
//! in which the token's sentence is complete. `First` trusts the focus window
//! alone; the two CMV deciders combine every context.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{argmax, LabelDistribution, Predictions};
use crate::corpus::{Corpus, Label, LabelSet, SentenceKey, TokenKey};
use crate::evaluation::{TaggedCorpus, TaggedSentence};
use crate::windowing::{InputExample, WindowItem};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregationError {
    #[error("{examples} examples but {responses} responses")]
    ResponseCount { examples: usize, responses: usize },
    #[error("example {example}: {positions} distributions for {items} positions")]
    ResponseShape { example: usize, items: usize, positions: usize },
    #[error("example {example}: focus sentence {focus} is not complete in its own window")]
    IncompleteFocus { example: usize, focus: SentenceKey },
    #[error("no prediction for token {} of {}", .0.token, .0.sentence)]
    NoPrediction(TokenKey),
    #[error("no focus-window prediction for token {} of {}", .0.token, .0.sentence)]
    MissingFocus(TokenKey),
    #[error("label id {0} is outside the label set")]
    UnknownLabelId(usize),
    #[error("{sentence}: no label for token {token}")]
    MissingLabel { sentence: SentenceKey, token: usize },
    #[error("{sentence}: {found} labels for {expected} tokens")]
    LabelCount { sentence: SentenceKey, expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPrediction {
    pub token: TokenKey,
    pub example_id: usize,
    /// Index of the token's first piece in the window.
    pub window_position: usize,
    pub is_focus: bool,
    pub dist: LabelDistribution,
}

/// Every recorded prediction per token, each list ordered by example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionStore {
    map: BTreeMap<TokenKey, Vec<ContextPrediction>>,
}

impl PredictionStore {
    pub fn new() -> Self {
        PredictionStore::default()
    }

    /// Append a prediction; callers insert in example order.
    pub fn insert(&mut self, p: ContextPrediction) {
        self.map.entry(p.token).or_default().push(p);
    }

    pub fn get(&self, token: &TokenKey) -> Option<&[ContextPrediction]> {
        self.map.get(token).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenKey, &[ContextPrediction])> {
        self.map.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn prediction_count(&self) -> usize {
        self.map.values().map(Vec::len).sum()
    }
}

/// Gather predictions from complete sentence spans of every example.
pub fn collect(examples: &[InputExample], responses: &Predictions) -> Result<PredictionStore, AggregationError> {
    let mut store = PredictionStore::new();
    store.absorb(0, examples, responses)?;
    Ok(store)
}

impl PredictionStore {
    /// Add one chunk of a larger example sequence; `first_id` is the example
    /// id of `examples[0]`. Chunks must arrive in order.
    pub fn absorb(
        &mut self,
        first_id: usize,
        examples: &[InputExample],
        responses: &Predictions,
    ) -> Result<(), AggregationError> {
        if examples.len() != responses.len() {
            return Err(AggregationError::ResponseCount { examples: examples.len(), responses: responses.len() });
        }
        for (i, (ex, row)) in examples.iter().zip(responses).enumerate() {
            let example_id = first_id + i;
            if row.len() != ex.items.len() {
                return Err(AggregationError::ResponseShape {
                    example: example_id,
                    items: ex.items.len(),
                    positions: row.len(),
                });
            }
            if !ex.sentence_spans.iter().any(|s| s.sentence == ex.focus && s.complete) {
                return Err(AggregationError::IncompleteFocus { example: example_id, focus: ex.focus });
            }
            for span in ex.sentence_spans.iter().filter(|s| s.complete) {
                let range = span.first_item..=span.last_item;
                for (pos, (item, dist)) in ex.items[range.clone()].iter().zip(&row[range]).enumerate() {
                    let pos = span.first_item + pos;
                    if let WindowItem::Piece(p) = item {
                        if !p.is_continuation {
                            self.insert(ContextPrediction {
                                token: p.origin,
                                example_id,
                                window_position: pos,
                                is_focus: span.sentence == ex.focus,
                                dist: dist.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Highest summed probability among the tied labels.
    #[default]
    SumProb,
    /// The tied label that won the earliest context.
    FirstOccurrence,
}

/// Modal argmax label; ties resolved by `tie`, then by lowest label id.
pub fn vote(preds: &[ContextPrediction], tie: TieBreak) -> usize {
    let Some(first) = preds.first() else { return 0 };
    let n = first.dist.len();
    let winners: Vec<usize> = preds.iter().map(|p| p.dist.argmax()).collect();
    let mut counts = vec![0usize; n];
    for &w in &winners {
        counts[w] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    let tied: Vec<usize> = (0..n).filter(|&l| counts[l] == best).collect();
    if tied.len() == 1 {
        return tied[0];
    }
    match tie {
        TieBreak::SumProb => {
            let sums = summed(preds);
            let mut pick = tied[0];
            for &l in &tied[1..] {
                if sums[l] > sums[pick] {
                    pick = l;
                }
            }
            pick
        }
        TieBreak::FirstOccurrence => {
            let mut order: Vec<(usize, usize)> = preds.iter().zip(&winners).map(|(p, &w)| (p.example_id, w)).collect();
            order.sort_by_key(|&(id, _)| id);
            order.into_iter().map(|(_, w)| w).find(|w| tied.contains(w)).unwrap_or(tied[0])
        }
    }
}

fn summed(preds: &[ContextPrediction]) -> Vec<f64> {
    let mut sums = vec![0.0; preds.first().map_or(0, |p| p.dist.len())];
    for p in preds {
        for (s, v) in sums.iter_mut().zip(p.dist.probs()) {
            *s += v;
        }
    }
    sums
}

/// Argmax of the elementwise sum of all distributions; lowest id wins ties.
pub fn sum_argmax(preds: &[ContextPrediction]) -> usize {
    argmax(&summed(preds))
}

/// How a token's final label is chosen from its predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decider", content = "tie_break")]
pub enum Decider {
    First,
    LabelVote(TieBreak),
    SoftmaxSum,
}

/// Label id per token.
pub type Decisions = BTreeMap<TokenKey, usize>;

impl Decider {
    pub fn decide_token(&self, token: &TokenKey, preds: &[ContextPrediction]) -> Result<usize, AggregationError> {
        if preds.is_empty() {
            return Err(AggregationError::NoPrediction(*token));
        }
        Ok(match self {
            Decider::First => {
                preds.iter().find(|p| p.is_focus).ok_or(AggregationError::MissingFocus(*token))?.dist.argmax()
            }
            Decider::LabelVote(tie) => vote(preds, *tie),
            Decider::SoftmaxSum => sum_argmax(preds),
        })
    }

    pub fn decide(&self, store: &PredictionStore) -> Result<Decisions, AggregationError> {
        store.map.par_iter().map(|(k, preds)| Ok((*k, self.decide_token(k, preds)?))).collect()
    }
}

pub fn decide_first(store: &PredictionStore) -> Result<Decisions, AggregationError> {
    Decider::First.decide(store)
}

pub fn cmv_label_vote(store: &PredictionStore, tie: TieBreak) -> Result<Decisions, AggregationError> {
    Decider::LabelVote(tie).decide(store)
}

pub fn cmv_softmax_sum(store: &PredictionStore) -> Result<Decisions, AggregationError> {
    Decider::SoftmaxSum.decide(store)
}

/// Attach decisions to `corpus` (the one the windows were built from) and
/// re-join split sentences, giving output token-parallel to the unsplit input.
pub fn finalize(decisions: &Decisions, corpus: &Corpus, labels: &LabelSet) -> Result<TaggedCorpus, AggregationError> {
    let mut out: Vec<TaggedSentence> = Vec::with_capacity(corpus.sentence_count());
    for s in corpus.sentences() {
        let key = s.key();
        let lo = TokenKey { sentence: key, token: 0 };
        let hi = TokenKey { sentence: key, token: usize::MAX };
        let found = decisions.range(lo..=hi).count();
        if found != s.len() {
            if let Some(token) = (0..s.len()).find(|&token| !decisions.contains_key(&TokenKey { sentence: key, token })) {
                return Err(AggregationError::MissingLabel { sentence: key, token });
            }
            return Err(AggregationError::LabelCount { sentence: key, expected: s.len(), found });
        }
        let pred = decisions
            .range(lo..=hi)
            .map(|(_, &id)| labels.get(id).cloned().ok_or(AggregationError::UnknownLabelId(id)))
            .collect::<Result<Vec<Label>, _>>()?;
        let continues = s.split_part.is_some_and(|p| p > 0)
            && out.last().is_some_and(|l| l.doc_index == s.doc_index && l.sent_index == s.sent_index);
        if continues {
            let last = out.last_mut().expect("checked above");
            last.tokens.extend(s.tokens.iter().map(|t| t.text.clone()));
            last.gold.extend(s.tokens.iter().map(|t| t.gold_label.clone()));
            last.pred.extend(pred);
        } else {
            out.push(TaggedSentence {
                doc_index: s.doc_index,
                sent_index: s.sent_index,
                tokens: s.tokens.iter().map(|t| t.text.clone()).collect(),
                gold: s.labels(),
                pred,
            });
        }
    }
    Ok(TaggedCorpus { sentences: out })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::{Backend, MockConfig, MockLexiconBackend};
    use crate::corpus::{parse_conll, ParseConfig};
    use crate::tokenizer::Vocab;
    use crate::windowing::{build_first, build_single, split_long_sentences, WindowConfig, WrapMode};

    fn key(sent: usize, token: usize) -> TokenKey {
        TokenKey { sentence: SentenceKey { doc: 0, sent, part: None }, token }
    }

    fn pred(example_id: usize, is_focus: bool, probs: &[f64]) -> ContextPrediction {
        ContextPrediction {
            token: key(0, 0),
            example_id,
            window_position: 1,
            is_focus,
            dist: LabelDistribution::new(probs.to_vec()).unwrap(),
        }
    }

    // labels: O, B-PER, I-PER
    #[test]
    fn vote_examples() {
        let p = [pred(0, true, &[0.2, 0.7, 0.1]), pred(1, false, &[0.2, 0.7, 0.1]), pred(2, false, &[0.8, 0.1, 0.1])];
        assert_eq!(vote(&p, TieBreak::SumProb), 1);

        let p = [pred(0, true, &[0.4, 0.6, 0.0]), pred(1, false, &[0.55, 0.2, 0.25])];
        assert_eq!(vote(&p, TieBreak::SumProb), 0);
        assert_eq!(vote(&p, TieBreak::FirstOccurrence), 1);
        assert_eq!(vote(&p[..1], TieBreak::SumProb), 1);
    }

    #[test]
    fn sum_examples() {
        let p = [pred(0, true, &[0.6, 0.4]), pred(1, false, &[0.3, 0.7])];
        assert_eq!(sum_argmax(&p), 1);

        // two weak B-PER wins against one confident O
        let p = [pred(0, true, &[0.45, 0.55]), pred(1, false, &[0.45, 0.55]), pred(2, false, &[0.99, 0.01])];
        assert_eq!(vote(&p, TieBreak::SumProb), 1);
        assert_eq!(sum_argmax(&p), 0);
    }

    #[test]
    fn first_ignores_other_contexts() {
        let mut store = PredictionStore::new();
        store.insert(pred(0, false, &[0.1, 0.9]));
        store.insert(pred(1, true, &[0.9, 0.1]));
        store.insert(pred(2, false, &[0.1, 0.9]));
        assert_eq!(decide_first(&store).unwrap()[&key(0, 0)], 0);
        assert_eq!(cmv_label_vote(&store, TieBreak::SumProb).unwrap()[&key(0, 0)], 1);

        let mut store = PredictionStore::new();
        store.insert(pred(0, false, &[0.1, 0.9]));
        assert_eq!(decide_first(&store).unwrap_err(), AggregationError::MissingFocus(key(0, 0)));
    }

    fn fixture() -> (Corpus, Vocab) {
        let vocab = Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\nAnna\nsaw\nKor\n##ven\n.\n").unwrap();
        let corpus =
            parse_conll("Anna B-PER\nsaw O\n\nKorven B-PER\n. O\n\nsaw O\nAnna B-PER\n", &ParseConfig::default())
                .unwrap();
        (corpus, vocab)
    }

    fn uniform(examples: &[InputExample], n: usize) -> Predictions {
        examples.iter().map(|e| vec![LabelDistribution::uniform(n); e.items.len()]).collect()
    }

    #[test]
    fn collect_counts_contexts() {
        let (corpus, vocab) = fixture();
        let single = build_single(&corpus, &WindowConfig { max_seq_len: 8, ..WindowConfig::default() }, &vocab).unwrap();
        let store = collect(&single, &uniform(&single, 3)).unwrap();
        assert_eq!(store.len(), 6);
        assert!(store.iter().all(|(_, p)| p.len() == 1 && p[0].is_focus));

        // everything fits: every token is seen from all three windows
        let cfg = WindowConfig { max_seq_len: 16, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let first = build_first(&corpus, &cfg, &vocab).unwrap();
        let store = collect(&first, &uniform(&first, 3)).unwrap();
        assert!(store.iter().all(|(_, p)| p.len() == 3));
        // Korven is read at its first piece only
        let korven = store.get(&key(1, 0)).unwrap();
        assert!(korven.iter().all(|p| matches!(first[p.example_id].items[p.window_position], WindowItem::Piece(w) if !w.is_continuation)));

        // a partial trailing sentence contributes nothing
        let cfg = WindowConfig { max_seq_len: 9, wrap_mode: WrapMode::Corpus, ..WindowConfig::default() };
        let first = build_first(&corpus, &cfg, &vocab).unwrap();
        let store = collect(&first, &uniform(&first, 3)).unwrap();
        for (k, preds) in store.iter() {
            for p in preds {
                let span = first[p.example_id].sentence_spans.iter().find(|s| s.sentence == k.sentence).unwrap();
                assert!(span.complete);
            }
        }
        assert!(store.iter().all(|(_, p)| p.len() == 2));
    }

    #[test]
    fn collect_rejects_bad_shapes() {
        let (corpus, vocab) = fixture();
        let single = build_single(&corpus, &WindowConfig { max_seq_len: 8, ..WindowConfig::default() }, &vocab).unwrap();
        let mut resp = uniform(&single, 3);
        resp[1].pop();
        assert!(matches!(collect(&single, &resp), Err(AggregationError::ResponseShape { example: 1, .. })));
        assert!(matches!(collect(&single, &resp[..2].to_vec()), Err(AggregationError::ResponseCount { .. })));
    }

    #[test]
    fn end_to_end_with_split_sentence() {
        let (corpus, vocab) = fixture();
        let labels = corpus.label_set();
        // "Korven ." is 3 pieces; with max 4 it is split in two parts
        let cfg = WindowConfig { max_seq_len: 4, ..WindowConfig::default() };
        let split = split_long_sentences(&corpus, &cfg, &vocab).unwrap();
        assert_eq!(split.sentence_count(), 4);
        let mut g = crate::backend::Gazetteer::new();
        g.insert("Anna", "PER", 3.0);
        g.insert("Korven", "PER", 3.0);
        let mock = MockLexiconBackend::new(labels.clone(), Arc::new(vocab.clone()), MockConfig { gazetteer: g, ..MockConfig::default() });
        let examples = build_single(&split, &cfg, &vocab).unwrap();
        let store = collect(&examples, &mock.predict(&examples).unwrap()).unwrap();
        let tagged = finalize(&decide_first(&store).unwrap(), &split, &labels).unwrap();
        assert_eq!(tagged.sentences.len(), 3);
        assert_eq!(tagged.sentences[1].tokens, vec!["Korven", "."]);
        assert_eq!(tagged.evaluate().overall.f1, 100.0);

        let mut missing = decide_first(&store).unwrap();
        missing.remove(&key(2, 1));
        assert_eq!(
            finalize(&missing, &split, &labels).unwrap_err().to_string(),
            "doc 0 sentence 2: no label for token 1"
        );
        let mut extra = decide_first(&store).unwrap();
        extra.insert(key(2, 5), 0);
        assert_eq!(
            finalize(&extra, &split, &labels).unwrap_err(),
            AggregationError::LabelCount { sentence: key(2, 0).sentence, expected: 2, found: 3 }
        );
    }

    #[test]
    fn deciders_agree_on_single_contexts() {
        let (corpus, vocab) = fixture();
        let labels = corpus.label_set();
        let mock = MockLexiconBackend::new(labels, Arc::new(vocab.clone()), MockConfig { noise: 1.0, ..MockConfig::default() });
        let single = build_single(&corpus, &WindowConfig { max_seq_len: 8, ..WindowConfig::default() }, &vocab).unwrap();
        let store = collect(&single, &mock.predict(&single).unwrap()).unwrap();
        let first = decide_first(&store).unwrap();
        assert_eq!(cmv_label_vote(&store, TieBreak::SumProb).unwrap(), first);
        assert_eq!(cmv_label_vote(&store, TieBreak::FirstOccurrence).unwrap(), first);
        assert_eq!(cmv_softmax_sum(&store).unwrap(), first);
    }
}
