//! Cross-sentence context for wordpiece-based named entity recognition.
//!
//! The pipeline runs corpus → tokenizer → windowing → backend → aggregation
//! → evaluation. Each stage lives in its own module; the most used types are
//! re-exported here.

pub mod aggregation;
pub mod backend;
pub mod corpus;
pub mod evaluation;
pub mod synth;
pub mod tokenizer;
pub mod windowing;

pub use aggregation::{
    collect, cmv_label_vote, cmv_softmax_sum, decide_first, finalize, AggregationError, ContextPrediction, Decider,
    Decisions, PredictionStore, TieBreak,
};
pub use backend::{
    Backend, BackendError, Gazetteer, LabelDistribution, MockConfig, MockLexiconBackend, Predictions, RemoteBackend,
    RemoteConfig,
};
pub use corpus::{
    corpus_stats, parse_conll, read_conll, serialize_conll, to_iob2, Corpus, CorpusError, CorpusStats, Label, LabelSet,
    ParseConfig, Sentence, SentenceKey, TagScheme, Token, TokenKey,
};
pub use evaluation::{
    conlleval_text, evaluate, extract_chunks, summarize_runs, EvalError, EvalReport, Scores, TaggedCorpus,
};
pub use tokenizer::{load_vocab, Vocab, VocabError};
pub use windowing::{
    build_examples, position_sweep, split_long_sentences, EncodedCorpus, InputExample, WindowConfig, WindowError,
    WindowStrategy, WrapMode,
};
