//! Experiment drivers: windows -> predict -> aggregate -> evaluate, repeated
//! over seeds, start positions or a fine-tuning grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use anyhow::Context;
use ctxner::backend::{derive_seed, FinetuneParams};
use ctxner::evaluation::{mean_std, MeanStd, RunSummary, Scores};
use ctxner::tokenizer::ContinuationLabel;
use ctxner::windowing::{write_jsonl, ExampleRecord, GoldIndex};
use ctxner::{
    build_examples, conlleval_text, finalize, load_vocab, position_sweep, read_conll, split_long_sentences,
    summarize_runs, Backend, Corpus, Decider, EncodedCorpus, EvalReport, Gazetteer, InputExample, LabelSet,
    MockConfig, MockLexiconBackend, ParseConfig, PredictionStore, RemoteBackend, TaggedCorpus, TieBreak,
    Vocab, WindowConfig, WindowStrategy,
};
use serde::{Deserialize, Serialize};

use crate::config::{check_strategy, BackendConfig, DataConfig, ExperimentConfig, RunStrategy};
use crate::error::UsageError;
use crate::manifest::{CellRecord, Manifest, RepetitionSeed};

/// Examples sent to a backend per call.
pub const PREDICT_CHUNK: usize = 256;

pub fn load_corpus(path: &Path, data: &DataConfig, types: Option<&[String]>) -> anyhow::Result<Corpus> {
    let parse = ParseConfig {
        delimiter: data.delimiter,
        declared_types: types.map(|t| t.iter().cloned().collect()),
        ..ParseConfig::default()
    };
    let corpus = read_conll(path, data.encoding, &parse).with_context(|| format!("reading {}", path.display()))?;
    Ok(corpus.to_iob2())
}

pub fn load_vocab_file(path: &Path) -> anyhow::Result<Arc<Vocab>> {
    Ok(Arc::new(load_vocab(path).with_context(|| format!("reading vocabulary {}", path.display()))?))
}

pub fn load_gazetteer(path: &Path) -> anyhow::Result<Gazetteer> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Gazetteer::parse(&text).with_context(|| format!("parsing gazetteer {}", path.display()))
}

/// Configured types, or the union of types seen in `corpora`.
pub fn label_set(types: Option<&[String]>, corpora: &[&Corpus]) -> LabelSet {
    match types {
        Some(t) => LabelSet::from_types(t),
        None => LabelSet::from_types(corpora.iter().flat_map(|c| c.type_set.iter()).collect::<BTreeSet<_>>()),
    }
}

pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &[rep as u64])
}

pub fn make_backend(
    cfg: &BackendConfig,
    labels: &LabelSet,
    vocab: &Arc<Vocab>,
    seed: u64,
) -> anyhow::Result<Box<dyn Backend>> {
    Ok(match cfg {
        BackendConfig::Mock(m) => {
            let config = MockConfig {
                gazetteer: load_gazetteer(&m.gazetteer)?,
                context_bonus: m.context_bonus,
                noise: m.noise,
                seed,
                outside_logit: m.outside_logit,
            };
            Box::new(MockLexiconBackend::new(labels.clone(), vocab.clone(), config))
        }
        BackendConfig::Remote(r) => Box::new(connect(r, labels, vocab)?),
    })
}

fn connect(r: &ctxner::RemoteConfig, labels: &LabelSet, vocab: &Arc<Vocab>) -> anyhow::Result<RemoteBackend> {
    RemoteBackend::connect(labels.clone(), vocab.clone(), r.clone())
        .map_err(anyhow::Error::from)
        .with_context(|| format!("connecting to {}", r.endpoint))
}

/// Predict in chunks, folding each response into the store as it arrives.
pub fn predict_store(backend: &dyn Backend, examples: &[InputExample]) -> anyhow::Result<PredictionStore> {
    let mut store = PredictionStore::new();
    for (i, chunk) in examples.chunks(PREDICT_CHUNK).enumerate() {
        let first = i * PREDICT_CHUNK;
        let responses = backend.predict(chunk).map_err(anyhow::Error::from).with_context(|| {
            format!("predicting examples {}..{}", first, first + chunk.len())
        })?;
        store.absorb(first, chunk, &responses)?;
    }
    Ok(store)
}

/// Tag `split` (already cut to fit windows) with every strategy. Strategies
/// reading the same windows share one round of predictions.
pub fn tag_strategies(
    backend: &dyn Backend,
    split: &Corpus,
    vocab: &Vocab,
    window: &WindowConfig,
    strategies: &[RunStrategy],
    tie: TieBreak,
) -> anyhow::Result<Vec<(RunStrategy, TaggedCorpus)>> {
    let encoded = EncodedCorpus::new(split, vocab, window.max_chars);
    let mut groups: Vec<(WindowStrategy, Vec<RunStrategy>)> = Vec::new();
    for &s in strategies {
        let w = s.windows(window.strategy);
        match groups.iter_mut().find(|(g, _)| *g == w) {
            Some((_, members)) => members.push(s),
            None => groups.push((w, vec![s])),
        }
    }
    let mut tagged = BTreeMap::new();
    for (w, members) in groups {
        let cfg = WindowConfig { strategy: w, ..window.clone() };
        let examples = build_examples(&encoded, &cfg)?;
        let store = predict_store(backend, &examples)?;
        for s in members {
            let decisions = s.decider(tie).decide(&store)?;
            tagged.insert(s, finalize(&decisions, split, backend.label_set())?);
        }
    }
    Ok(strategies.iter().map(|s| (*s, tagged[s].clone())).collect())
}

/// Write `contents` to `out/rel`, creating parent directories; returns `rel`.
pub fn write_output(out: &Path, rel: &str, contents: &str) -> anyhow::Result<String> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(rel.to_string())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn read_report(out: &Path, rel: &str) -> anyhow::Result<EvalReport> {
    let path = out.join(rel);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn seeds(cfg: &ExperimentConfig) -> Vec<RepetitionSeed> {
    (0..cfg.repetitions).map(|repetition| RepetitionSeed { repetition, seed: rep_seed(cfg.seed, repetition) }).collect()
}

struct Prepared {
    labels: LabelSet,
    vocab: Arc<Vocab>,
    split: Corpus,
}

fn prepare(cfg: &ExperimentConfig, extra: Option<&Corpus>) -> anyhow::Result<Prepared> {
    let vocab = load_vocab_file(&cfg.vocab)?;
    let eval = load_corpus(cfg.eval_path(), &cfg.data, cfg.types.as_deref())?;
    let mut corpora = vec![&eval];
    corpora.extend(extra);
    let labels = label_set(cfg.types.as_deref(), &corpora);
    let split = split_long_sentences(&eval, &cfg.window, &vocab)?;
    Ok(Prepared { labels, vocab, split })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: RunStrategy,
    pub decider: Decider,
    pub windows: WindowStrategy,
    pub repetitions: usize,
    pub summary: RunSummary,
    pub runs: Vec<Scores>,
}

fn summary_csv(reports: &[StrategyReport]) -> String {
    let mut out = String::from("strategy,f1_mean,f1_stddev,precision_mean,recall_mean,n\n");
    for r in reports {
        let s = &r.summary;
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{}\n",
            r.strategy, s.f1.mean, s.f1.stddev, s.precision.mean, s.recall.mean, s.f1.n
        ));
    }
    out
}

/// Evaluate every configured strategy `repetitions` times. Writes per-run
/// tagged output, conlleval text and JSON scores, a report per strategy and
/// `summary.csv`; completed runs recorded in the manifest are reused.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, fresh: bool) -> anyhow::Result<Vec<StrategyReport>> {
    for &s in &cfg.strategies {
        check_strategy(s, s.windows(cfg.window.strategy))?;
    }
    let p = prepare(cfg, None)?;
    let mut manifest = Manifest::open(out, "run", &cfg.hash(), seeds(cfg), fresh)?;
    let cell = |s: RunStrategy, rep: usize| format!("{s}/rep{rep}");

    for rep in 0..cfg.repetitions {
        let pending: Vec<RunStrategy> =
            cfg.strategies.iter().copied().filter(|&s| !manifest.is_complete(&cell(s, rep))).collect();
        if pending.is_empty() {
            continue;
        }
        let backend = make_backend(&cfg.backend, &p.labels, &p.vocab, rep_seed(cfg.seed, rep))?;
        let tagged = tag_strategies(backend.as_ref(), &p.split, &p.vocab, &cfg.window, &pending, cfg.tie_break)?;
        for (s, t) in tagged {
            let report = t.evaluate();
            let base = cell(s, rep);
            let files = vec![
                write_output(out, &format!("{base}.conll"), &t.to_conll())?,
                write_output(out, &format!("{base}.txt"), &conlleval_text(&report))?,
                write_output(out, &format!("{base}.json"), &to_json(&report))?,
            ];
            manifest.record(&base, CellRecord { files, checkpoint: None })?;
        }
    }

    let mut reports = Vec::with_capacity(cfg.strategies.len());
    for &s in &cfg.strategies {
        let runs =
            (0..cfg.repetitions).map(|rep| read_report(out, &format!("{}.json", cell(s, rep)))).collect::<Result<Vec<_>, _>>()?;
        let report = StrategyReport {
            strategy: s,
            decider: s.decider(cfg.tie_break),
            windows: s.windows(cfg.window.strategy),
            repetitions: cfg.repetitions,
            summary: summarize_runs(&runs)?,
            runs: runs.iter().map(|r| r.overall).collect(),
        };
        let rel = write_output(out, &format!("{s}/report.json"), &to_json(&report))?;
        manifest.add_file(&rel)?;
        reports.push(report);
    }
    let rel = write_output(out, "summary.csv", &summary_csv(&reports))?;
    manifest.add_file(&rel)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: usize,
    pub f1: MeanStd,
}

pub fn positions_csv(rows: &[PositionRow]) -> String {
    let mut out = String::from("position,mean_f1,stddev,n\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4},{}\n", r.position, r.f1.mean, r.f1.stddev, r.f1.n));
    }
    out
}

/// Place the sentence of interest at each start position of the sweep and
/// score it from that window alone. Writes `positions.csv`.
pub fn cmd_positions(cfg: &ExperimentConfig, out: &Path, fresh: bool) -> anyhow::Result<Vec<PositionRow>> {
    let p = prepare(cfg, None)?;
    let mut manifest = Manifest::open(out, "positions", &cfg.hash(), seeds(cfg), fresh)?;
    let cell = |pos: usize, rep: usize| format!("positions/p{pos}/rep{rep}");
    let encoded = EncodedCorpus::new(&p.split, &p.vocab, cfg.window.max_chars);
    let sweep = position_sweep(&cfg.window);

    for rep in 0..cfg.repetitions {
        let pending: Vec<usize> = sweep.iter().copied().filter(|&pos| !manifest.is_complete(&cell(pos, rep))).collect();
        if pending.is_empty() {
            continue;
        }
        let backend = make_backend(&cfg.backend, &p.labels, &p.vocab, rep_seed(cfg.seed, rep))?;
        for pos in pending {
            let window = WindowConfig { strategy: WindowStrategy::Positioned, start_pos: pos, ..cfg.window.clone() };
            let examples = build_examples(&encoded, &window)?;
            let store = predict_store(backend.as_ref(), &examples)?;
            let decisions = Decider::First.decide(&store)?;
            let report = finalize(&decisions, &p.split, &p.labels)?.evaluate();
            let rel = write_output(out, &format!("{}.json", cell(pos, rep)), &to_json(&report))?;
            manifest.record(&cell(pos, rep), CellRecord { files: vec![rel], checkpoint: None })?;
        }
    }

    let mut rows = Vec::with_capacity(sweep.len());
    for pos in sweep {
        let f1s = (0..cfg.repetitions)
            .map(|rep| read_report(out, &format!("{}.json", cell(pos, rep))).map(|r| r.overall.f1))
            .collect::<anyhow::Result<Vec<f64>>>()?;
        rows.push(PositionRow { position: pos, f1: mean_std(&f1s).expect("at least one repetition") });
    }
    let rel = write_output(out, "positions.csv", &positions_csv(&rows))?;
    manifest.add_file(&rel)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl GridPoint {
    pub fn id(&self) -> String {
        format!("lr{:e}_bs{}_ep{}", self.learning_rate, self.batch_size, self.epochs)
    }

    fn order(&self, other: &GridPoint) -> std::cmp::Ordering {
        self.learning_rate
            .total_cmp(&other.learning_rate)
            .then(self.batch_size.cmp(&other.batch_size))
            .then(self.epochs.cmp(&other.epochs))
    }
}

/// Highest mean F1; equal means go to the lowest learning rate, then the
/// smallest batch, then the fewest epochs.
pub fn select_best(results: &[(GridPoint, f64)]) -> Option<(GridPoint, f64)> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.0.order(&b.0));
    sorted.into_iter().fold(None, |best, (p, f1)| match best {
        Some((_, b)) if f1 <= b => best,
        _ => Some((p, f1)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub point: GridPoint,
    pub f1: BTreeMap<RunStrategy, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub point: GridPoint,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub requested_runs: usize,
    pub cells: Vec<CellSummary>,
    pub best: BTreeMap<RunStrategy, BestCell>,
}

fn grid_points(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let g = &cfg.grid;
    let mut points = Vec::new();
    for &learning_rate in &g.learning_rates {
        for &batch_size in &g.batch_sizes {
            for &epochs in &g.epochs {
                points.push(GridPoint { learning_rate, batch_size, epochs });
            }
        }
    }
    points
}

/// Fine-tune and evaluate every grid cell `repetitions` times through the
/// sidecar, then pick the best cell per strategy by mean F1. Cells already
/// in the manifest are skipped, so a failed sweep resumes where it stopped.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, fresh: bool) -> anyhow::Result<SweepReport> {
    let BackendConfig::Remote(remote) = &cfg.backend else {
        return Err(UsageError("sweep needs a remote backend: fine-tuning runs in the sidecar".into()).into());
    };
    let Some(train_path) = &cfg.data.train else {
        return Err(UsageError("sweep needs data.train".into()).into());
    };
    for &s in &cfg.strategies {
        check_strategy(s, s.windows(cfg.window.strategy))?;
    }
    let train = load_corpus(train_path, &cfg.data, cfg.types.as_deref())?;
    let p = prepare(cfg, Some(&train))?;
    let mut manifest = Manifest::open(out, "sweep", &cfg.hash(), seeds(cfg), fresh)?;

    let train_rel = "sweep/train.jsonl";
    let train_split = split_long_sentences(&train, &cfg.window, &p.vocab)?;
    let train_examples = build_examples(&EncodedCorpus::new(&train_split, &p.vocab, cfg.window.max_chars), &cfg.window)?;
    let gold = GoldIndex::new(&train_split);
    let records = train_examples
        .iter()
        .map(|e| ExampleRecord::from_example(e, &p.vocab).with_targets(e, &gold, &p.labels, ContinuationLabel::Inside))
        .collect::<Result<Vec<_>, _>>()?;
    let train_file = out.join(train_rel);
    fs::create_dir_all(train_file.parent().expect("has parent"))?;
    let writer = BufWriter::new(fs::File::create(&train_file).with_context(|| format!("writing {}", train_file.display()))?);
    write_jsonl(writer, &records)?;
    manifest.add_file(train_rel)?;
    let train_file = fs::canonicalize(&train_file)?;

    let base = connect(remote, &p.labels, &p.vocab)?;
    let points = grid_points(cfg);
    let cell = |pt: &GridPoint, rep: usize| format!("sweep/{}/rep{rep}", pt.id());
    let pending: Vec<(GridPoint, usize)> = points
        .iter()
        .flat_map(|pt| (0..cfg.repetitions).map(move |rep| (*pt, rep)))
        .filter(|(pt, rep)| !manifest.is_complete(&cell(pt, *rep)))
        .collect();

    let manifest = Mutex::new(manifest);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failures: Mutex<Vec<(usize, anyhow::Error)>> = Mutex::new(Vec::new());
    let run_cell = |pt: &GridPoint, rep: usize| -> anyhow::Result<()> {
        let params = FinetuneParams {
            learning_rate: pt.learning_rate,
            batch_size: pt.batch_size,
            epochs: pt.epochs,
            seed: rep_seed(cfg.seed, rep),
        };
        let checkpoint = base
            .finetune(&train_file, cfg.window.max_seq_len, params)
            .map_err(anyhow::Error::from)
            .with_context(|| format!("fine-tuning {}", cell(pt, rep)))?;
        let backend = base.clone().with_checkpoint(Some(checkpoint.clone()));
        let tagged = tag_strategies(&backend, &p.split, &p.vocab, &cfg.window, &cfg.strategies, cfg.tie_break)?;
        let mut files = Vec::new();
        for (s, t) in tagged {
            files.push(write_output(out, &format!("{}/{s}.json", cell(pt, rep)), &to_json(&t.evaluate()))?);
        }
        manifest.lock().expect("manifest lock").record(&cell(pt, rep), CellRecord { files, checkpoint: Some(checkpoint) })
    };
    thread::scope(|scope| {
        for _ in 0..cfg.grid.parallelism.min(pending.len()) {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((pt, rep)) = pending.get(i) else { break };
                if let Err(e) = run_cell(pt, *rep) {
                    stop.store(true, Ordering::SeqCst);
                    failures.lock().expect("failure lock").push((i, e));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure lock");
    failures.sort_by_key(|(i, _)| *i);
    if let Some((_, e)) = failures.into_iter().next() {
        return Err(e.context("sweep stopped; rerun to resume from the manifest"));
    }
    let mut manifest = manifest.into_inner().expect("manifest lock");

    let mut cells = Vec::with_capacity(points.len());
    for pt in &points {
        let mut f1 = BTreeMap::new();
        for &s in &cfg.strategies {
            let values = (0..cfg.repetitions)
                .map(|rep| read_report(out, &format!("{}/{s}.json", cell(pt, rep))).map(|r| r.overall.f1))
                .collect::<anyhow::Result<Vec<f64>>>()?;
            f1.insert(s, mean_std(&values).expect("at least one repetition"));
        }
        cells.push(CellSummary { point: *pt, f1 });
    }
    let best = cfg
        .strategies
        .iter()
        .map(|&s| {
            let results: Vec<(GridPoint, f64)> = cells.iter().map(|c| (c.point, c.f1[&s].mean)).collect();
            let (point, mean_f1) = select_best(&results).expect("grid is not empty");
            (s, BestCell { point, mean_f1 })
        })
        .collect();
    let report = SweepReport { requested_runs: points.len() * cfg.repetitions, cells, best };
    let rel = write_output(out, "sweep.json", &to_json(&report))?;
    manifest.add_file(&rel)?;
    Ok(report)
}
