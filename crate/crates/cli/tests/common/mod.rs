#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use ctxner::backend::wire::{
    ErrorResponse, FinetuneRequest, FinetuneResponse, InfoResponse, PredictRequest, PredictResponse, PROTOCOL_VERSION,
};
use ctxner::windowing::ItemKind;
use ctxner::Label;

pub fn ctxner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxner")).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub const DEV: &str = "\
-DOCSTART- O

Anna B-PER
Berg I-PER
visited O
Oslo B-LOC
. O

Then O
Anna B-PER
left O
for O
Acme B-ORG
Corp I-ORG
. O

-DOCSTART- O

The O
Acme B-ORG
office O
in O
Oslo B-LOC
opened O
. O

Berg B-PER
spoke O
. O

";

pub const GAZETTEER: &str = "Anna\tPER\t3.0\nBerg\tPER\t0.5\nOslo\tLOC\t3.0\nAcme\tORG\t0.5\nCorp\tORG\t0.5\n";

/// Whole words plus a few pieces so some tokens split.
pub const VOCAB: &str = "[PAD]\n[UNK]\n[CLS]\n[SEP]\nAnna\nBerg\nvisited\nOslo\n.\nThen\nleft\nfor\nAc\n##me\nCorp\nThe\noffice\nin\nopened\nspoke\n";

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("dev.conll"), DEV).unwrap();
        fs::write(dir.path().join("train.conll"), DEV).unwrap();
        fs::write(dir.path().join("vocab.txt"), VOCAB).unwrap();
        fs::write(dir.path().join("gazetteer.tsv"), GAZETTEER).unwrap();
        Fixture { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Config with a mock backend; `extra` is appended verbatim.
    pub fn mock_config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            "seed = 11\nvocab = \"vocab.txt\"\nrepetitions = 3\n{extra}\n\n[data]\ndev = \"dev.conll\"\n\n\
             [backend]\nkind = \"mock\"\ngazetteer = \"gazetteer.tsv\"\nnoise = 0.8\ncontext_bonus = 2.0\n\n\
             [window]\nmax_seq_len = 16\n"
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    pub fn remote_config(&self, name: &str, endpoint: &str, top: &str, grid: &str) -> PathBuf {
        let text = format!(
            "seed = 5\nvocab = \"vocab.txt\"\n{top}\n\n[data]\ntrain = \"train.conll\"\ndev = \"dev.conll\"\n\n\
             [backend]\nkind = \"remote\"\nendpoint = \"{endpoint}\"\ntimeout = 10\n\n\
             [window]\nmax_seq_len = 16\n\n[grid]\n{grid}\n"
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }
}

/// Relative paths of all files below `dir`.
pub fn files_under(dir: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out);
    out
}

/// In-process stand-in for the inference sidecar. Checkpoints whose id
/// starts with `good_prefix` tag every first wordpiece `B-PER`; all other
/// predictions are `O`.
pub struct FakeSidecar {
    pub endpoint: String,
    pub finetunes: Arc<AtomicUsize>,
    pub predicts: Arc<AtomicUsize>,
    /// Successful fine-tunes allowed before every further one fails.
    pub fail_after: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<FinetuneRequest>>>,
}

impl FakeSidecar {
    pub fn start(good_prefix: Option<&'static str>) -> FakeSidecar {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let port = server.server_addr().to_ip().unwrap().port();
        let sidecar = FakeSidecar {
            endpoint: format!("http://127.0.0.1:{port}"),
            finetunes: Arc::new(AtomicUsize::new(0)),
            predicts: Arc::new(AtomicUsize::new(0)),
            fail_after: Arc::new(AtomicUsize::new(usize::MAX)),
            requests: Arc::new(Mutex::new(Vec::new())),
        };
        let (finetunes, predicts, fail_after, requests) = (
            sidecar.finetunes.clone(),
            sidecar.predicts.clone(),
            sidecar.fail_after.clone(),
            sidecar.requests.clone(),
        );
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let path = req.url().trim_start_matches('/').to_string();
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let (finetunes, predicts, fail_after, requests) =
                    (finetunes.clone(), predicts.clone(), fail_after.clone(), requests.clone());
                thread::spawn(move || {
                    let (status, reply) = match path.as_str() {
                        "info" => (200, serde_json::to_string(&InfoResponse { protocol_version: PROTOCOL_VERSION.into() }).unwrap()),
                        "finetune" => {
                            let r: FinetuneRequest = serde_json::from_str(&body).unwrap();
                            let exported = fs::read_to_string(&r.train_examples).unwrap();
                            assert!(exported.lines().all(|l| l.contains("\"label_ids\"")));
                            if finetunes.load(Ordering::SeqCst) >= fail_after.load(Ordering::SeqCst) {
                                (500, serde_json::to_string(&ErrorResponse::new("trainer_crashed", "out of memory")).unwrap())
                            } else {
                                finetunes.fetch_add(1, Ordering::SeqCst);
                                let id = format!(
                                    "lr{:e}_bs{}_ep{}_seed{}",
                                    r.learning_rate, r.batch_size, r.epochs, r.seed
                                );
                                requests.lock().unwrap().push(r);
                                (200, serde_json::to_string(&FinetuneResponse { checkpoint: id }).unwrap())
                            }
                        }
                        "predict" => {
                            predicts.fetch_add(1, Ordering::SeqCst);
                            let r: PredictRequest = serde_json::from_str(&body).unwrap();
                            let n = r.label_set.len();
                            let good = match (good_prefix, &r.checkpoint) {
                                (Some(p), Some(c)) => c.starts_with(p),
                                _ => false,
                            };
                            let hot = if good {
                                r.label_set.id_of(&Label::begin("PER")).unwrap()
                            } else {
                                r.label_set.outside_id()
                            };
                            let probabilities = r
                                .examples
                                .iter()
                                .map(|e| {
                                    e.item_kinds
                                        .iter()
                                        .map(|k| {
                                            let mut d = vec![0.0; n];
                                            d[if *k == ItemKind::Piece { hot } else { r.label_set.outside_id() }] = 1.0;
                                            d
                                        })
                                        .collect()
                                })
                                .collect();
                            (200, serde_json::to_string(&PredictResponse { probabilities }).unwrap())
                        }
                        _ => (404, serde_json::to_string(&ErrorResponse::new("not_found", path.clone())).unwrap()),
                    };
                    let _ = req.respond(tiny_http::Response::from_string(reply).with_status_code(status));
                });
            }
        });
        sidecar
    }
}
