//! Session-based query encoders.
//!
//! The single-query encoder (SSQE) reads a query character by character with
//! a stacked LSTM and projects the top layer's last hidden state to a
//! `d`-dimensional representation. The multiple-query encoder (SMQE) feeds the
//! SSQE's last top-layer hidden state of each query into a session-level LSTM
//! and projects its final state. Both are trained by next-query prediction:
//! cosine similarity between the context and candidate next queries, a
//! softmax with inverse temperature over one positive and sampled negatives,
//! and cross-entropy on the positive.

mod checkpoint;
mod eval;
mod smqe;
mod ssqe;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelKind, CHECKPOINT_VERSION};
pub use eval::{eval_items_from_pairs, eval_items_from_sessions, next_query_accuracy, EvalItem, NextQueryModel};
pub use smqe::{SessionHead, SmqeConfig, SmqeParams};
pub use ssqe::{SsqeConfig, SsqeParams, SsqeTape};
pub use train::{pair_loss_and_grad, session_loss_and_grad, train_smqe, train_ssqe, write_metrics, TrainConfig, TrainMetric, Trained};

use std::collections::HashMap;
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::CharVocab;
use crate::numerics::{cosine_similarity, NumericsError, Parameters};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty query")]
    EmptyQuery,
    #[error("empty query sequence")]
    EmptySequence,
    #[error("sequence of {got} queries exceeds the maximum of {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("only {available} candidates available, need {needed}")]
    NotEnoughCandidates { available: usize, needed: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint vocabulary hash {found} does not match expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A `d`-dimensional query or session representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation(pub Vec<f64>);

impl Representation {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Frozen encoder with a per-query memo of SSQE outputs. Safe to share
/// across threads.
pub struct QueryEncoder<'a> {
    ssqe: &'a SsqeParams,
    head: Option<&'a SessionHead>,
    vocab: &'a CharVocab,
    max_session_len: usize,
    memo: Mutex<HashMap<String, (Vec<f64>, Vec<f64>)>>,
}

impl<'a> QueryEncoder<'a> {
    pub fn single(ssqe: &'a SsqeParams, vocab: &'a CharVocab) -> Self {
        Self {
            ssqe,
            head: None,
            vocab,
            max_session_len: 10,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn multiple(smqe: &'a SmqeParams, vocab: &'a CharVocab) -> Self {
        Self {
            ssqe: &smqe.ssqe,
            head: Some(&smqe.head),
            vocab,
            max_session_len: 10,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn is_multiple(&self) -> bool {
        self.head.is_some()
    }

    pub fn dim(&self) -> usize {
        self.ssqe.config.output_dim
    }

    /// SHA-256 over every parameter block (name, shape, little-endian data)
    /// and the vocabulary hash.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.hash().as_bytes());
        let mut blocks = self.ssqe.blocks();
        if let Some(head) = self.head {
            blocks.extend(head.blocks());
        }
        for (name, t) in blocks {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `(top-layer last hidden state, representation)` for one query.
    fn query_state(&self, query: &str) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        if let Some(hit) = self.memo.lock().expect("memo poisoned").get(query) {
            return Ok(hit.clone());
        }
        let tape = self.ssqe.forward(self.vocab, query)?;
        let out = (tape.top_last().to_vec(), tape.z.clone());
        self.memo
            .lock()
            .expect("memo poisoned")
            .insert(query.to_string(), out.clone());
        Ok(out)
    }

    pub fn encode_query(&self, query: &str) -> Result<Representation, EncoderError> {
        Ok(Representation(self.query_state(query)?.1))
    }

    /// SMQE representation of an ordered query list.
    pub fn encode_session(&self, queries: &[String]) -> Result<Representation, EncoderError> {
        let head = self
            .head
            .ok_or_else(|| EncoderError::ModelMismatch("session encoding needs an SMQE model".into()))?;
        if queries.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if queries.len() > self.max_session_len {
            return Err(EncoderError::SequenceTooLong {
                got: queries.len(),
                max: self.max_session_len,
            });
        }
        let mut inputs = Vec::with_capacity(queries.len() * self.ssqe.config.hidden_dim);
        for q in queries {
            inputs.extend(self.query_state(q)?.0);
        }
        let ctx = head.forward(&inputs, queries.len())?;
        Ok(Representation(ctx.outputs.last().expect("non-empty").clone()))
    }

    /// Cosine similarity between two queries' SSQE representations.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, EncoderError> {
        let za = self.encode_query(a)?;
        let zb = self.encode_query(b)?;
        Ok(cosine_similarity(za.as_slice(), zb.as_slice())?)
    }
}

impl NextQueryModel for QueryEncoder<'_> {
    fn context(&self, history: &[String]) -> Result<Vec<f64>, EncoderError> {
        if self.is_multiple() {
            let start = history.len().saturating_sub(self.max_session_len);
            Ok(self.encode_session(&history[start..])?.0)
        } else {
            let last = history.last().ok_or(EncoderError::EmptySequence)?;
            Ok(self.encode_query(last)?.0)
        }
    }

    fn target(&self, query: &str) -> Result<Vec<f64>, EncoderError> {
        Ok(self.encode_query(query)?.0)
    }
}

/// Cosine similarity of two queries under a trained SSQE.
pub fn similarity(params: &SsqeParams, vocab: &CharVocab, a: &str, b: &str) -> Result<f64, EncoderError> {
    QueryEncoder::single(params, vocab).similarity(a, b)
}

#[cfg(test)]
mod tests;
