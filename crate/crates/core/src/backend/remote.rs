//! HTTP client for an inference sidecar speaking `ctxner/1`.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::wire::{
    FinetuneRequest, FinetuneResponse, InfoResponse, PredictRequest, PredictResponse, Reply, WireExample,
    PROTOCOL_VERSION,
};
use super::{check_batch, check_response_shape, Backend, BackendError, LabelDistribution, LabelSet, Predictions};
use crate::tokenizer::Vocab;
use crate::windowing::InputExample;

/// Responses carry `examples × 512 × labels` floats; the transport default is far smaller.
const BODY_LIMIT: u64 = 1 << 34;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Examples per request.
    pub max_batch: usize,
    /// Requests outstanding at once.
    pub max_in_flight: usize,
    #[serde(with = "seconds")]
    pub timeout: Duration,
    pub checkpoint: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8765".into(),
            max_batch: 32,
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
            checkpoint: None,
        }
    }
}

mod seconds {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Hyperparameters forwarded to the sidecar's trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone)]
pub struct RemoteBackend {
    labels: LabelSet,
    vocab: Arc<Vocab>,
    config: RemoteConfig,
    agent: Agent,
}

fn transport_error(batch: usize, e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout { batch },
        ureq::Error::Json(e) => BackendError::Shape { batch, example: 0, message: format!("malformed body: {e}") },
        other => BackendError::Unavailable { batch, message: other.to_string() },
    }
}

impl RemoteBackend {
    /// Connects and checks the server's protocol version.
    pub fn connect(labels: LabelSet, vocab: Arc<Vocab>, config: RemoteConfig) -> Result<Self, BackendError> {
        if config.max_batch == 0 || config.max_in_flight == 0 {
            return Err(BackendError::InvalidBatch {
                example: 0,
                message: "max_batch and max_in_flight must be at least 1".into(),
            });
        }
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let backend = RemoteBackend { labels, vocab, config, agent };
        let info: InfoResponse = backend
            .agent
            .get(backend.url("info"))
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| transport_error(0, e))?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(BackendError::ProtocolVersion {
                batch: 0,
                expected: PROTOCOL_VERSION.into(),
                found: info.protocol_version,
            });
        }
        Ok(backend)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Use `checkpoint` for subsequent predictions.
    pub fn with_checkpoint(mut self, checkpoint: Option<String>) -> Self {
        self.config.checkpoint = checkpoint;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        agent: &Agent,
        batch: usize,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let reply: Reply<Resp> = agent
            .post(self.url(path))
            .send_json(body)
            .and_then(|mut r| r.body_mut().with_config().limit(BODY_LIMIT).read_json())
            .map_err(|e| transport_error(batch, e))?;
        match reply {
            Reply::Ok(r) => Ok(r),
            Reply::Error(e) => Err(BackendError::Remote { batch, code: e.error.code, message: e.error.message }),
        }
    }

    /// Train on an exported example file and return the new checkpoint id.
    /// Runs without a request timeout.
    pub fn finetune(
        &self,
        train_examples: &Path,
        max_seq_len: usize,
        params: FinetuneParams,
    ) -> Result<String, BackendError> {
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        let request = FinetuneRequest {
            protocol_version: PROTOCOL_VERSION.into(),
            train_examples: train_examples.to_string_lossy().into_owned(),
            label_set: self.labels.clone(),
            max_seq_len,
            learning_rate: params.learning_rate,
            batch_size: params.batch_size,
            epochs: params.epochs,
            seed: params.seed,
        };
        let resp: FinetuneResponse = self.post(&agent, 0, "finetune", &request)?;
        Ok(resp.checkpoint)
    }

    fn predict_chunk(&self, index: usize, chunk: &[InputExample], max_seq_len: usize) -> Result<Predictions, BackendError> {
        let request = PredictRequest {
            protocol_version: PROTOCOL_VERSION.into(),
            label_set: self.labels.clone(),
            max_seq_len,
            examples: chunk.iter().map(|e| WireExample::from_example(e, &self.vocab)).collect(),
            checkpoint: self.config.checkpoint.clone(),
        };
        let resp: PredictResponse = self.post(&self.agent, index, "predict", &request)?;
        let predictions: Predictions = resp
            .probabilities
            .into_iter()
            .map(|row| row.into_iter().map(LabelDistribution::from_raw).collect())
            .collect();
        check_response_shape(index, chunk, &predictions, self.labels.len())?;
        Ok(predictions)
    }
}

impl Backend for RemoteBackend {
    fn label_set(&self) -> &LabelSet {
        &self.labels
    }

    /// Sends `max_batch`-sized requests, at most `max_in_flight` at a time,
    /// and reassembles responses in input order. Any failing request fails
    /// the whole call.
    fn predict(&self, batch: &[InputExample]) -> Result<Predictions, BackendError> {
        let max_seq_len = check_batch(batch)?;
        let chunks: Vec<&[InputExample]> = batch.chunks(self.config.max_batch).collect();
        let mut out = Vec::with_capacity(batch.len());
        for (w, wave) in chunks.chunks(self.config.max_in_flight).enumerate() {
            let first = w * self.config.max_in_flight;
            let results: Vec<Result<Predictions, BackendError>> = thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .enumerate()
                    .map(|(j, chunk)| s.spawn(move || self.predict_chunk(first + j, chunk, max_seq_len)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}
