//! Uniform interface for querying predictors on masked inputs.
//!
//! The engine never sees raw pixels or tokens: a predictor receives a binary
//! mask, applies baseline substitution on its side, runs the model, and
//! returns a raw output vector. A [`TargetSelector`] then picks (and
//! optionally transforms) the scalar being explained.
//!
//! Every forward call is counted in a [`QueryLedger`], split between calls
//! spent generating the explanation and calls spent computing metrics.

mod synthetic;
mod wire;

pub use synthetic::{Synthetic, SyntheticConfig};
pub use wire::{HttpEndpoint, SubprocessEndpoint};

use crate::space::MaskVector;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Clamp bound for the logit transform.
pub const LOGIT_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum BlackBoxError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("predictor output has length {output_len}, cannot select index {index}")]
    DimensionMismatch { output_len: usize, index: usize },
    #[error("bad synthetic oracle parameters: {0}")]
    BadParams(String),
}

/// Which ledger bucket a batch of forward calls belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Explanation,
    Metric,
}

/// Counts forward calls, split by purpose. Monotone; safe to share.
#[derive(Debug, Default)]
pub struct QueryLedger {
    explanation_calls: AtomicU64,
    metric_calls: AtomicU64,
}

impl QueryLedger {
    fn record(&self, kind: CallKind, n: u64) {
        match kind {
            CallKind::Explanation => self.explanation_calls.fetch_add(n, Ordering::Relaxed),
            CallKind::Metric => self.metric_calls.fetch_add(n, Ordering::Relaxed),
        };
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            explanation_calls: self.explanation_calls.load(Ordering::Relaxed),
            metric_calls: self.metric_calls.load(Ordering::Relaxed),
        }
    }
}

/// Point-in-time ledger reading, as written into reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub explanation_calls: u64,
    pub metric_calls: u64,
}

/// Transform applied to the selected output component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// log(p / (1-p)); the input is clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
    Logit,
}

/// Selects the explained scalar from the predictor's output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TargetSelector {
    #[serde(default)]
    pub output_index: usize,
    #[serde(default)]
    pub transform: Transform,
}

impl TargetSelector {
    pub fn identity(output_index: usize) -> Self {
        Self {
            output_index,
            transform: Transform::Identity,
        }
    }

    pub fn logit(output_index: usize) -> Self {
        Self {
            output_index,
            transform: Transform::Logit,
        }
    }

    pub fn apply(&self, output: &[f64]) -> Result<f64, BlackBoxError> {
        let value = *output
            .get(self.output_index)
            .ok_or(BlackBoxError::DimensionMismatch {
                output_len: output.len(),
                index: self.output_index,
            })?;
        Ok(match self.transform {
            Transform::Identity => value,
            Transform::Logit => {
                let p = value.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                (p / (1.0 - p)).ln()
            }
        })
    }
}

/// A black-box predictor: masks in, raw output vectors out, order preserved.
pub trait Predictor: Send + Sync {
    fn predict(&self, masks: &[MaskVector]) -> Result<Vec<Vec<f64>>, BlackBoxError>;
}

/// A predictor plus its forward-call ledger.
pub struct BlackBoxSession {
    predictor: Box<dyn Predictor>,
    ledger: QueryLedger,
}

impl BlackBoxSession {
    pub fn new(predictor: Box<dyn Predictor>) -> Self {
        Self {
            predictor,
            ledger: QueryLedger::default(),
        }
    }

    /// Queries the predictor once per mask and applies `selector` to each
    /// output. The ledger bucket for `kind` grows by `masks.len()` on
    /// success; response order matches request order.
    pub fn query_batch(
        &self,
        masks: &[MaskVector],
        selector: &TargetSelector,
        kind: CallKind,
    ) -> Result<Vec<f64>, BlackBoxError> {
        let outputs = self.predictor.predict(masks)?;
        if outputs.len() != masks.len() {
            return Err(BlackBoxError::MalformedResponse(format!(
                "expected {} outputs, got {}",
                masks.len(),
                outputs.len()
            )));
        }
        let targets = outputs
            .iter()
            .map(|out| selector.apply(out))
            .collect::<Result<Vec<f64>, _>>()?;
        self.ledger.record(kind, masks.len() as u64);
        Ok(targets)
    }

    pub fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }
}
