//! JSON bodies of the `ctxner/1` protocol.
//!
//! `GET /info` returns [`InfoResponse`]; `POST /predict` takes a
//! [`PredictRequest`] and `POST /finetune` a [`FinetuneRequest`]. Any endpoint
//! may answer with an [`ErrorResponse`] instead.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::tokenizer::Vocab;
use crate::windowing::{InputExample, ItemKind};

pub const PROTOCOL_VERSION: &str = "ctxner/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub protocol_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireExample {
    pub piece_ids: Vec<u32>,
    pub item_kinds: Vec<ItemKind>,
}

impl WireExample {
    pub fn from_example(example: &InputExample, vocab: &Vocab) -> WireExample {
        WireExample { piece_ids: example.piece_ids(vocab), item_kinds: example.item_kinds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub protocol_version: String,
    pub label_set: LabelSet,
    pub max_seq_len: usize,
    pub examples: Vec<WireExample>,
    /// Checkpoint returned by an earlier fine-tuning call; server default if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// `[example][position][label]`
    pub probabilities: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

impl ErrorResponse {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorResponse { error: ErrorBody { code: code.into(), message: message.into() } }
    }
}

/// Training run on an exported example file (path as seen by the server).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRequest {
    pub protocol_version: String,
    pub train_examples: String,
    pub label_set: LabelSet,
    pub max_seq_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub checkpoint: String,
}

/// A successful body or an error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply<T> {
    Error(ErrorResponse),
    Ok(T),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bodies_have_the_documented_shape() {
        let req = PredictRequest {
            protocol_version: PROTOCOL_VERSION.into(),
            label_set: LabelSet::from_types(["PER"]),
            max_seq_len: 4,
            examples: vec![WireExample {
                piece_ids: vec![2, 5, 3, 0],
                item_kinds: vec![ItemKind::Cls, ItemKind::Piece, ItemKind::Sep, ItemKind::Pad],
            }],
            checkpoint: None,
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "protocol_version": "ctxner/1",
                "label_set": ["O", "B-PER", "I-PER"],
                "max_seq_len": 4,
                "examples": [{"piece_ids": [2, 5, 3, 0], "item_kinds": ["CLS", "PIECE", "SEP", "PAD"]}]
            })
        );
        assert_eq!(serde_json::from_value::<PredictRequest>(v).unwrap(), req);
    }

    #[test]
    fn replies_distinguish_errors() {
        let ok: Reply<PredictResponse> = serde_json::from_str(r#"{"probabilities": [[[1.0]]]}"#).unwrap();
        assert!(matches!(ok, Reply::Ok(_)));
        let err: Reply<PredictResponse> =
            serde_json::from_str(r#"{"error": {"code": "bad_request", "message": "no"}}"#).unwrap();
        assert_eq!(err, Reply::Error(ErrorResponse::new("bad_request", "no")));
    }
}
