//! Argument parsing and subcommand dispatch.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ctxner::aggregation::TieBreak;
use ctxner::corpus::{Delimiter, Encoding};
use ctxner::evaluation::extract_chunks;
use ctxner::synth::{generate, SynthConfig};
use ctxner::tokenizer::ContinuationLabel;
use ctxner::windowing::{read_jsonl, write_jsonl, ExampleRecord, GoldIndex, WrapMode};
use ctxner::{
    build_examples, conlleval_text, corpus_stats, finalize, serialize_conll, split_long_sentences, Backend, Corpus,
    CorpusStats, Decider, EncodedCorpus, InputExample, LabelDistribution, LabelSet, MockConfig, MockLexiconBackend,
    PredictionStore, RemoteBackend, RemoteConfig, TagScheme, TaggedCorpus, WindowConfig, WindowStrategy,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{BackendConfig, ExperimentConfig, RunStrategy};
use crate::error::UsageError;
use crate::pipeline::{self, load_corpus, load_gazetteer, load_vocab_file};

/// Parse a kebab-case enum value through its serde form.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ctxner", version, about = "Cross-sentence context NER experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Re-encode a column file as UTF-8 IOB2.
    Convert(ConvertArgs),
    /// Token, sentence and entity counts as JSON.
    Stats(StatsArgs),
    /// Build input windows and write them as JSONL.
    Windows(WindowsArgs),
    /// Run a backend over exported windows.
    Predict(PredictArgs),
    /// Combine per-window predictions into one label per token.
    Aggregate(AggregateArgs),
    /// Score a `token gold pred` file like conlleval.
    Eval(EvalArgs),
    /// Evaluate each strategy over repeated seeds.
    Run(ExperimentArgs),
    /// Fine-tune and evaluate over the hyperparameter grid (remote backend).
    Sweep(ExperimentArgs),
    /// F1 as a function of the sentence's start position in the window.
    Positions(ExperimentArgs),
    /// Generate a synthetic corpus, vocabulary, gazetteer and config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long, value_parser = kebab::<Encoding>, default_value = "utf8")]
    pub encoding: Encoding,
    #[arg(long, value_parser = kebab::<Delimiter>, default_value = "whitespace")]
    pub delimiter: Delimiter,
    /// Comma-separated entity types; other types are rejected.
    #[arg(long, value_delimiter = ',')]
    pub types: Option<Vec<String>>,
}

impl InputArgs {
    fn parse_config(&self) -> ctxner::ParseConfig {
        ctxner::ParseConfig {
            delimiter: self.delimiter,
            declared_types: self.types.as_ref().map(|t| t.iter().cloned().collect()),
            ..Default::default()
        }
    }

    /// Read without scheme conversion.
    fn read(&self, path: &Path) -> anyhow::Result<Corpus> {
        ctxner::read_conll(path, self.encoding, &self.parse_config()).with_context(|| format!("reading {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputScheme {
    Auto,
    Iob1,
    Iob2,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[command(flatten)]
    pub input_args: InputArgs,
    /// Scheme of the input; `iob2` rejects files that open chunks with `I-`.
    #[arg(long, value_parser = kebab::<InputScheme>, default_value = "auto")]
    pub scheme: InputScheme,
    #[arg(long, value_parser = kebab::<Delimiter>, default_value = "whitespace")]
    pub output_delimiter: Delimiter,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub input_args: InputArgs,
}

#[derive(Debug, Serialize)]
pub struct StatsOutput {
    pub input_scheme: TagScheme,
    #[serde(flatten)]
    pub stats: CorpusStats,
    /// Chunks by the conlleval reading of the input labels.
    pub chunk_count: usize,
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,
    #[arg(long, value_parser = kebab::<WindowStrategy>, default_value = "first")]
    pub strategy: WindowStrategy,
    #[arg(long, value_parser = kebab::<WrapMode>, default_value = "document")]
    pub wrap_mode: WrapMode,
    #[arg(long, default_value_t = 1)]
    pub start_pos: usize,
    #[arg(long, default_value_t = 32)]
    pub position_interval: usize,
    /// Fail on sentences longer than a window instead of splitting them.
    #[arg(long)]
    pub no_split: bool,
}

impl WindowArgs {
    fn config(&self) -> Result<WindowConfig, UsageError> {
        let cfg = WindowConfig {
            max_seq_len: self.max_seq_len,
            strategy: self.strategy,
            wrap_mode: self.wrap_mode,
            start_pos: self.start_pos,
            position_interval: self.position_interval,
            split_long_sentences: !self.no_split,
            ..WindowConfig::default()
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct WindowsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub input_args: InputArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Attach gold label ids and loss weights for training.
    #[arg(long)]
    pub targets: bool,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Mock backend gazetteer (TSV: token, type, optional strength).
    #[arg(long, conflicts_with = "endpoint", required_unless_present = "endpoint")]
    pub gazetteer: Option<PathBuf>,
    /// Sidecar base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.5)]
    pub context_bonus: f64,
    #[arg(long, default_value_t = 1.0)]
    pub outside_logit: f64,
    #[arg(long, default_value_t = 32)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

impl BackendArgs {
    fn build(&self, labels: &LabelSet, vocab: &Arc<ctxner::Vocab>) -> anyhow::Result<Box<dyn Backend>> {
        if let Some(endpoint) = &self.endpoint {
            let cfg = RemoteConfig {
                endpoint: endpoint.clone(),
                max_batch: self.max_batch,
                max_in_flight: self.max_in_flight,
                checkpoint: self.checkpoint.clone(),
                ..RemoteConfig::default()
            };
            let backend = RemoteBackend::connect(labels.clone(), vocab.clone(), cfg)
                .map_err(anyhow::Error::from)
                .with_context(|| format!("connecting to {endpoint}"))?;
            return Ok(Box::new(backend));
        }
        let path = self.gazetteer.as_ref().expect("clap requires a gazetteer or an endpoint");
        let config = MockConfig {
            gazetteer: load_gazetteer(path)?,
            context_bonus: self.context_bonus,
            noise: self.noise,
            seed: self.seed,
            outside_logit: self.outside_logit,
        };
        Ok(Box::new(MockLexiconBackend::new(labels.clone(), vocab.clone(), config)))
    }
}

const DEFAULT_TYPES: &str = "LOC,MISC,ORG,PER";

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_TYPES)]
    pub types: Vec<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub example: usize,
    pub probabilities: Vec<LabelDistribution>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// The corpus the windows were built from.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = kebab::<Encoding>, default_value = "utf8")]
    pub encoding: Encoding,
    #[arg(long, value_parser = kebab::<Delimiter>, default_value = "whitespace")]
    pub delimiter: Delimiter,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_TYPES)]
    pub types: Vec<String>,
    /// Window length used when the examples were built.
    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,
    /// first, cmv-vote or cmv-sum.
    #[arg(long, default_value = "cmv-vote")]
    pub decider: RunStrategy,
    #[arg(long, value_parser = kebab::<TieBreak>, default_value = "sum-prob")]
    pub tie_break: TieBreak,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Lines of `token ... gold pred`, blank lines between sentences.
    pub input: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Ignore an existing manifest and recompute everything.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<RunStrategy>>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long, value_parser = kebab::<WindowStrategy>)]
    pub window_strategy: Option<WindowStrategy>,
    #[arg(long, value_parser = kebab::<TieBreak>)]
    pub tie_break: Option<TieBreak>,
}

impl ExperimentArgs {
    pub fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        if let Some(s) = &self.strategies {
            cfg.strategies = s.clone();
        }
        if let Some(m) = self.max_seq_len {
            cfg.window.max_seq_len = m;
        }
        if let Some(w) = self.window_strategy {
            cfg.window.strategy = w;
        }
        if let Some(t) = self.tie_break {
            cfg.tie_break = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML generator settings; flags below override it.
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub documents: Option<usize>,
    #[arg(long)]
    pub sentences_per_document: Option<usize>,
    #[arg(long)]
    pub recurrence: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra documents written to train.conll.
    #[arg(long, default_value_t = 0)]
    pub train_documents: usize,
    /// Window length in the generated experiment config.
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Convert(a) => convert(&a),
        Command::Stats(a) => stats(&a),
        Command::Windows(a) => windows(&a),
        Command::Predict(a) => predict(&a),
        Command::Aggregate(a) => aggregate(&a),
        Command::Eval(a) => eval(&a),
        Command::Run(a) => {
            let cfg = a.load()?;
            let reports = pipeline::cmd_run(&cfg, &a.out, a.fresh)?;
            for r in reports {
                println!("{:<9} F1 {:6.2} +/- {:.2} (n={})", r.strategy, r.summary.f1.mean, r.summary.f1.stddev, r.summary.f1.n);
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = a.load()?;
            let report = pipeline::cmd_sweep(&cfg, &a.out, a.fresh)?;
            println!("{} runs", report.requested_runs);
            for (s, b) in report.best {
                let p = b.point;
                println!(
                    "{s:<9} best lr {:e} batch {} epochs {}: mean F1 {:.2}",
                    p.learning_rate, p.batch_size, p.epochs, b.mean_f1
                );
            }
            Ok(())
        }
        Command::Positions(a) => {
            let cfg = a.load()?;
            let rows = pipeline::cmd_positions(&cfg, &a.out, a.fresh)?;
            print!("{}", pipeline::positions_csv(&rows));
            Ok(())
        }
        Command::Synth(a) => synth(&a),
    }
}

fn convert(a: &ConvertArgs) -> anyhow::Result<()> {
    let corpus = a.input_args.read(&a.input)?;
    if a.scheme == InputScheme::Iob2 {
        for s in corpus.sentences() {
            if let Some(v) = ctxner::corpus::validate_iob2(&s.labels()).first() {
                anyhow::bail!("{}: token {} opens a chunk with {} but the input was declared IOB2", s.key(), v.index, v.label);
            }
        }
    }
    // IOB2 input passes through the conversion unchanged.
    let out = serialize_conll(&corpus.to_iob2(), a.output_delimiter);
    fs::write(&a.output, out).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn stats(a: &StatsArgs) -> anyhow::Result<()> {
    let corpus = a.input_args.read(&a.input)?;
    let chunk_count = corpus.sentences().map(|s| extract_chunks(&s.labels()).len()).sum();
    let out = StatsOutput { input_scheme: corpus.scheme(), stats: corpus_stats(&corpus.to_iob2()), chunk_count };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn windows(a: &WindowsArgs) -> anyhow::Result<()> {
    let window = a.window.config()?;
    let vocab = load_vocab_file(&a.vocab)?;
    let corpus = a.input_args.read(&a.corpus)?.to_iob2();
    let split = split_long_sentences(&corpus, &window, &vocab)?;
    let examples = build_examples(&EncodedCorpus::new(&split, &vocab, window.max_chars), &window)?;
    let mut records: Vec<ExampleRecord> = examples.iter().map(|e| ExampleRecord::from_example(e, &vocab)).collect();
    if a.targets {
        let labels = pipeline::label_set(a.input_args.types.as_deref(), &[&corpus]);
        let gold = GoldIndex::new(&split);
        records = records
            .into_iter()
            .zip(&examples)
            .map(|(r, e)| r.with_targets(e, &gold, &labels, ContinuationLabel::Inside))
            .collect::<Result<_, _>>()?;
    }
    write_jsonl(create(&a.out)?, &records)?;
    eprintln!("{} windows of {} positions", records.len(), window.max_seq_len);
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?))
}

fn read_examples(path: &Path) -> anyhow::Result<Vec<InputExample>> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let records = read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_example().map_err(|m| anyhow::anyhow!("{}: line {}: {m}", path.display(), i + 1)))
        .collect()
}

fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    let vocab = load_vocab_file(&a.vocab)?;
    let labels = LabelSet::from_types(&a.types);
    let examples = read_examples(&a.examples)?;
    let backend = a.backend.build(&labels, &vocab)?;
    let mut out = create(&a.out)?;
    for (i, chunk) in examples.chunks(pipeline::PREDICT_CHUNK).enumerate() {
        let first = i * pipeline::PREDICT_CHUNK;
        let rows = backend.predict(chunk)?;
        for (j, probabilities) in rows.into_iter().enumerate() {
            serde_json::to_writer(&mut out, &PredictionLine { example: first + j, probabilities })?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_predictions(path: &Path, labels: usize) -> anyhow::Result<Vec<Vec<LabelDistribution>>> {
    let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}: line {}", path.display(), i + 1);
        let p: PredictionLine = serde_json::from_str(&line).with_context(at)?;
        if p.example != rows.len() {
            anyhow::bail!("{}: expected example {}, found {}", at(), rows.len(), p.example);
        }
        let row = p
            .probabilities
            .into_iter()
            .map(|d| {
                if d.len() != labels {
                    return Err(anyhow::anyhow!("{}: distribution over {} labels, expected {labels}", at(), d.len()));
                }
                LabelDistribution::new(d.probs().to_vec()).map_err(|m| anyhow::anyhow!("{}: {m}", at()))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn aggregate(a: &AggregateArgs) -> anyhow::Result<()> {
    let decider: Decider = match a.decider {
        RunStrategy::Single => return Err(UsageError("aggregate takes first, cmv-vote or cmv-sum".into()).into()),
        s => s.decider(a.tie_break),
    };
    let vocab = load_vocab_file(&a.vocab)?;
    let labels = LabelSet::from_types(&a.types);
    let data = crate::config::DataConfig {
        train: None,
        dev: a.corpus.clone(),
        test: None,
        encoding: a.encoding,
        delimiter: a.delimiter,
    };
    let corpus = load_corpus(&a.corpus, &data, Some(&a.types))?;
    let window = WindowConfig { max_seq_len: a.max_seq_len, ..WindowConfig::default() };
    let split = split_long_sentences(&corpus, &window, &vocab)?;
    let examples = read_examples(&a.examples)?;
    let predictions = read_predictions(&a.predictions, labels.len())?;
    let mut store = PredictionStore::new();
    store.absorb(0, &examples, &predictions)?;
    let tagged = finalize(&decider.decide(&store)?, &split, &labels)?;
    fs::write(&a.out, tagged.to_conll()).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let tagged = TaggedCorpus::parse(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let report = tagged.evaluate();
    print!("{}", conlleval_text(&report));
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.settings {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| UsageError(format!("invalid settings {}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(d) = a.documents {
        cfg.documents = d;
    }
    if let Some(s) = a.sentences_per_document {
        cfg.sentences_per_document = s;
    }
    if let Some(r) = a.recurrence {
        cfg.recurrence = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dev_documents = cfg.documents;
    cfg.documents += a.train_documents;
    let synth = generate(&cfg);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let write = |name: &str, text: String| {
        let path = a.out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    let mut dev = synth.corpus.clone();
    let train = Corpus {
        documents: dev.documents.split_off(dev_documents.min(dev.documents.len())),
        ..dev.clone()
    };
    write("dev.conll", serialize_conll(&dev, Delimiter::Whitespace))?;
    if a.train_documents > 0 {
        write("train.conll", serialize_conll(&train, Delimiter::Whitespace))?;
    }
    write("vocab.txt", synth.vocab_lines.join("\n") + "\n")?;
    write("gazetteer.tsv", synth.gazetteer.to_tsv())?;

    let experiment = ExperimentConfig {
        data: crate::config::DataConfig {
            train: (a.train_documents > 0).then(|| "train.conll".into()),
            dev: "dev.conll".into(),
            test: None,
            encoding: Encoding::default(),
            delimiter: Delimiter::default(),
        },
        vocab: "vocab.txt".into(),
        backend: BackendConfig::Mock(crate::config::MockBackendConfig {
            gazetteer: "gazetteer.tsv".into(),
            context_bonus: cfg.context_bonus,
            noise: cfg.noise,
            outside_logit: cfg.outside_logit,
        }),
        window: WindowConfig { max_seq_len: a.max_seq_len, ..WindowConfig::default() },
        strategies: RunStrategy::ALL.to_vec(),
        tie_break: TieBreak::default(),
        repetitions: 5,
        grid: Default::default(),
        eval_split: Default::default(),
        types: None,
        seed: 0,
    };
    write("experiment.toml", toml::to_string_pretty(&experiment)?)?;
    eprintln!(
        "{} sentences, {} mentions ({:.1}% recurring)",
        synth.corpus.sentence_count(),
        synth.mention_count,
        100.0 * synth.recurrence_fraction()
    );
    Ok(())
}
