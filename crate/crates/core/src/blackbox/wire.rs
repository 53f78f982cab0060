//! Wire protocol for external predictors.
//!
//! One request per mask, JSON-encoded:
//!
//! ```text
//! -> {"id":7,"mask":[1,0,1,1]}
//! <- {"id":7,"output":[0.42,0.58]}
//! ```
//!
//! The endpoint owns the raw instance and baselines; it applies the masking,
//! runs the model, and replies with the raw output vector. Responses may
//! arrive out of order; they are matched by `id` and reassembled in request
//! order.
//!
//! Two transports: newline-delimited JSON over a subprocess's standard
//! streams, and HTTP POST (one request per call).

use super::{BlackBoxError, Predictor};
use crate::space::MaskVector;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

#[derive(Debug, Serialize, Deserialize)]
struct WireRequest {
    id: u64,
    mask: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    id: u64,
    output: Vec<f64>,
}

/// How many requests are written before waiting for their responses.
/// Bounded so neither side's pipe buffer fills up.
const DEFAULT_CHUNK: usize = 64;

/// NDJSON endpoint over a child process's stdin/stdout.
pub struct SubprocessEndpoint {
    inner: Mutex<SubprocessInner>,
    chunk_size: usize,
}

struct SubprocessInner {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

impl SubprocessEndpoint {
    /// Spawns `program args...` and keeps its pipes open for the session.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, BlackBoxError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| BlackBoxError::EndpointUnreachable(format!("spawn {program}: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| BlackBoxError::EndpointUnreachable("no stdin pipe".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| BlackBoxError::EndpointUnreachable("no stdout pipe".into()))?;
        Ok(Self {
            inner: Mutex::new(SubprocessInner {
                child,
                stdin,
                stdout: BufReader::new(stdout),
                next_id: 0,
            }),
            chunk_size: DEFAULT_CHUNK,
        })
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }
}

impl Predictor for SubprocessEndpoint {
    fn predict(&self, masks: &[MaskVector]) -> Result<Vec<Vec<f64>>, BlackBoxError> {
        let mut inner = self.inner.lock().expect("endpoint mutex poisoned");
        let mut results: Vec<Option<Vec<f64>>> = vec![None; masks.len()];
        for (chunk_index, chunk) in masks.chunks(self.chunk_size).enumerate() {
            let base = chunk_index * self.chunk_size;
            let first_id = inner.next_id;
            for (offset, mask) in chunk.iter().enumerate() {
                let request = WireRequest {
                    id: first_id + offset as u64,
                    mask: mask.bits().to_vec(),
                };
                let line = serde_json::to_string(&request)
                    .map_err(|e| BlackBoxError::MalformedResponse(e.to_string()))?;
                writeln!(inner.stdin, "{line}")
                    .map_err(|e| BlackBoxError::EndpointUnreachable(format!("write: {e}")))?;
            }
            inner
                .stdin
                .flush()
                .map_err(|e| BlackBoxError::EndpointUnreachable(format!("flush: {e}")))?;
            inner.next_id = first_id + chunk.len() as u64;

            let mut pending = chunk.len();
            while pending > 0 {
                let mut line = String::new();
                let n = inner
                    .stdout
                    .read_line(&mut line)
                    .map_err(|e| BlackBoxError::EndpointUnreachable(format!("read: {e}")))?;
                if n == 0 {
                    return Err(BlackBoxError::EndpointUnreachable(
                        "endpoint closed its stdout".into(),
                    ));
                }
                if line.trim().is_empty() {
                    continue;
                }
                let response: WireResponse = serde_json::from_str(line.trim())
                    .map_err(|e| BlackBoxError::MalformedResponse(format!("{e}: {line:?}")))?;
                if response.id < first_id || response.id >= first_id + chunk.len() as u64 {
                    return Err(BlackBoxError::MalformedResponse(format!(
                        "unexpected response id {}",
                        response.id
                    )));
                }
                let slot = base + (response.id - first_id) as usize;
                if results[slot].is_some() {
                    return Err(BlackBoxError::MalformedResponse(format!(
                        "duplicate response id {}",
                        response.id
                    )));
                }
                results[slot] = Some(response.output);
                pending -= 1;
            }
        }
        Ok(results.into_iter().map(|r| r.expect("all ids matched")).collect())
    }
}

impl Drop for SubprocessEndpoint {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.inner.lock() {
            let _ = inner.child.kill();
            let _ = inner.child.wait();
        }
    }
}

/// HTTP endpoint: one POST per mask, same JSON bodies as the NDJSON form.
pub struct HttpEndpoint {
    url: String,
    next_id: Mutex<u64>,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            next_id: Mutex::new(0),
        }
    }
}

impl Predictor for HttpEndpoint {
    fn predict(&self, masks: &[MaskVector]) -> Result<Vec<Vec<f64>>, BlackBoxError> {
        let first_id = {
            let mut guard = self.next_id.lock().expect("id mutex poisoned");
            let id = *guard;
            *guard += masks.len() as u64;
            id
        };
        let mut outputs = Vec::with_capacity(masks.len());
        for (offset, mask) in masks.iter().enumerate() {
            let request = WireRequest {
                id: first_id + offset as u64,
                mask: mask.bits().to_vec(),
            };
            let response = ureq::post(&self.url)
                .send_json(
                    serde_json::to_value(&request)
                        .map_err(|e| BlackBoxError::MalformedResponse(e.to_string()))?,
                )
                .map_err(|e| BlackBoxError::EndpointUnreachable(e.to_string()))?;
            let response: WireResponse = response
                .into_json()
                .map_err(|e| BlackBoxError::MalformedResponse(e.to_string()))?;
            if response.id != request.id {
                return Err(BlackBoxError::MalformedResponse(format!(
                    "response id {} does not match request id {}",
                    response.id, request.id
                )));
            }
            outputs.push(response.output);
        }
        Ok(outputs)
    }
}
