//! Messages exchanged between clients, the proxy and edge servers, and the
//! header names that carry them over HTTP.

use serde::{Deserialize, Serialize};

use crate::edge::ResultValue;
use crate::error::{Error, Result};
use crate::lsh::{FeatureVector, LshSignature};
use crate::slices::ServerId;
use crate::stats::PiggybackFields;

pub const HEADER_TASK_ID: &str = "x-task-id";
pub const HEADER_CLIENT_ID: &str = "x-client-id";
pub const HEADER_THRESHOLD: &str = "x-sim-threshold";
pub const HEADER_LSH: &str = "x-lsh";
pub const HEADER_BUCKET: &str = "x-bucket";
pub const HEADER_EPOCH: &str = "x-epoch";
pub const HEADER_REUSED: &str = "x-reused";
pub const HEADER_SIMILARITY: &str = "x-similarity";
pub const HEADER_SERVED_BY: &str = "x-served-by";

/// An offloaded task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub task_id: String,
    pub service: String,
    pub threshold: f64,
    /// Set in user-assisted mode, where the client hashes its own input.
    pub signature: Option<LshSignature>,
    pub payload: FeatureVector,
    pub client_id: String,
}

impl TaskRequest {
    pub fn check_threshold(threshold: f64) -> Result<f64> {
        if (0.0..=1.0).contains(&threshold) {
            Ok(threshold)
        } else {
            Err(Error::input(format!("threshold {threshold} outside [0, 1]")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResponse {
    pub task_id: String,
    pub result: ResultValue,
    pub reused: bool,
    /// Similarity to the reused entry; present iff `reused`.
    pub similarity: Option<f64>,
    pub server: ServerId,
    /// Usage statistics for the proxy; never shown to clients.
    pub piggyback: PiggybackFields,
}

/// JSON body of a task response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBody {
    pub task_id: String,
    pub label: u32,
    pub reused: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl From<&TaskResponse> for ResponseBody {
    fn from(r: &TaskResponse) -> Self {
        Self {
            task_id: r.task_id.clone(),
            label: r.result.label,
            reused: r.reused,
            similarity: r.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationMessage {
    pub server: ServerId,
    pub address: String,
}

/// Request body: a JSON array of reals, optionally followed by whitespace
/// padding.
pub fn encode_payload(payload: &FeatureVector, padding: usize) -> Vec<u8> {
    let mut body = serde_json::to_vec(payload).expect("finite floats serialise");
    body.resize(body.len() + padding, b' ');
    body
}

pub fn decode_payload(body: &[u8]) -> Result<FeatureVector> {
    let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<FeatureVector>();
    let payload = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(Error::input(format!("malformed payload: {e}"))),
        None => return Err(Error::input("empty payload")),
    };
    if !is_blank(&body[stream.byte_offset()..]) {
        return Err(Error::input("trailing data after payload"));
    }
    Ok(payload)
}

// Padding can run to megabytes; compare eight spaces at a time.
fn is_blank(bytes: &[u8]) -> bool {
    const SPACES: u64 = u64::from_ne_bytes([b' '; 8]);
    let (chunks, tail) = bytes.as_chunks::<8>();
    chunks
        .iter()
        .all(|c| u64::from_ne_bytes(*c) == SPACES || c.iter().all(u8::is_ascii_whitespace))
        && tail.iter().all(u8::is_ascii_whitespace)
}
