use std::collections::HashMap;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    eval_items_from_pairs, eval_items_from_sessions, next_query_accuracy, EncoderError, QueryEncoder, SmqeConfig,
    SmqeParams, SsqeParams, SsqeTape,
};
use crate::corpus::{CharVocab, QueryPair, Session};
use crate::numerics::{
    adam_step, axpy, candidate_softmax_loss, clip_global_norm, cosine_with_grad, AdamConfig, AdamState,
    Parameters,
};
use crate::util::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Negatives per positive; the softmax runs over `negatives + 1` choices.
    pub negatives: usize,
    pub beta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validation cadence in steps; the best-scoring parameters are kept.
    pub eval_every: usize,
    /// Update the SSQE stage while training the SMQE.
    pub joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 2000,
            negatives: 4,
            beta: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
            clip_norm: Some(5.0),
            eval_every: 250,
            joint: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self, len: usize) -> Result<(), EncoderError> {
        if len == 0 {
            return Err(EncoderError::EmptyDataset);
        }
        if self.batch_size > len {
            return Err(EncoderError::BatchTooLarge {
                batch: self.batch_size,
                len,
            });
        }
        if self.negatives == 0 {
            return Err(EncoderError::Config("at least one negative sample is required".into()));
        }
        if !(self.beta > 0.0) {
            return Err(EncoderError::Config("beta must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(EncoderError::Config("batch size and eval cadence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetric {
    pub step: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    pub metrics: Vec<TrainMetric>,
    pub best_step: usize,
    pub best_val_accuracy: Option<f64>,
}

pub fn write_metrics<W: Write>(mut w: W, metrics: &[TrainMetric]) -> std::io::Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Draws `k` distinct pool indices whose strings differ from the positive.
fn sample_negatives(
    rng: &mut ChaCha8Rng,
    pool: &[&str],
    positive: usize,
    k: usize,
) -> Result<Vec<usize>, EncoderError> {
    let eligible: Vec<usize> = (0..pool.len())
        .filter(|&j| j != positive && pool[j] != pool[positive])
        .collect();
    if eligible.len() < k {
        return Err(EncoderError::NotEnoughCandidates {
            available: eligible.len(),
            needed: k,
        });
    }
    Ok(index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect())
}

/// Scores one context against its candidates (positive first) and pushes the
/// cosine gradients back to the context and candidate vectors.
fn score_candidates(
    ctx: &[f64],
    cands: &[&[f64]],
    beta: f64,
    weight: f64,
    d_ctx: &mut [f64],
    d_cands: &mut [Vec<f64>],
) -> Result<f64, EncoderError> {
    let mut sims = Vec::with_capacity(cands.len());
    let mut partials = Vec::with_capacity(cands.len());
    for c in cands {
        let (r, dc, dk) = cosine_with_grad(ctx, c)?;
        sims.push(r);
        partials.push((dc, dk));
    }
    let out = candidate_softmax_loss(&sims, beta)?;
    for (k, (dc, dk)) in partials.iter().enumerate() {
        let g = out.d_sims[k] * weight;
        axpy(g, dc, d_ctx);
        axpy(g, dk, &mut d_cands[k]);
    }
    Ok(out.loss)
}

/// Mean candidate-softmax loss over a batch of query pairs and its gradient.
/// `negatives[i]` indexes into the batch's next queries.
pub fn pair_loss_and_grad(
    params: &SsqeParams,
    vocab: &CharVocab,
    batch: &[(&str, &str)],
    negatives: &[Vec<usize>],
    beta: f64,
    grads: &mut SsqeParams,
) -> Result<f64, EncoderError> {
    let n = batch.len();
    let q_tapes: Vec<SsqeTape> = batch.iter().map(|(q, _)| params.forward(vocab, q)).collect::<Result<_, _>>()?;
    let d_tapes: Vec<SsqeTape> = batch.iter().map(|(_, d)| params.forward(vocab, d)).collect::<Result<_, _>>()?;
    let dim = params.config.output_dim;
    let mut dz_q = vec![vec![0.0; dim]; n];
    let mut dz_d = vec![vec![0.0; dim]; n];
    let weight = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let idx: Vec<usize> = std::iter::once(i).chain(negatives[i].iter().copied()).collect();
        let cands: Vec<&[f64]> = idx.iter().map(|&j| d_tapes[j].z.as_slice()).collect();
        let mut d_cands = vec![vec![0.0; dim]; idx.len()];
        total += score_candidates(&q_tapes[i].z, &cands, beta, weight, &mut dz_q[i], &mut d_cands)?;
        for (k, &j) in idx.iter().enumerate() {
            axpy(1.0, &d_cands[k], &mut dz_d[j]);
        }
    }
    for (tape, dz) in q_tapes.iter().zip(&dz_q).chain(d_tapes.iter().zip(&dz_d)) {
        params.backward(tape, Some(dz), None, grads);
    }
    Ok(total / n as f64)
}

/// Per-query SSQE outputs used by the session trainer.
struct QueryState {
    top_last: Vec<f64>,
    z: Vec<f64>,
    tape: Option<SsqeTape>,
}

/// Mean loss over every next-query term of a batch of sessions (positions
/// `1..n`, each context scored against the SSQE representation of the next
/// query) and its gradient. With `joint`, gradients also flow into the SSQE
/// stage; otherwise only the session head receives gradients.
/// `negatives[k]` indexes into the batch's prediction terms.
pub fn session_loss_and_grad(
    params: &SmqeParams,
    vocab: &CharVocab,
    sessions: &[&[String]],
    negatives: &[Vec<usize>],
    beta: f64,
    joint: bool,
    frozen_cache: Option<&HashMap<String, (Vec<f64>, Vec<f64>)>>,
    grads: &mut SmqeParams,
) -> Result<f64, EncoderError> {
    let mut states: HashMap<&str, QueryState> = HashMap::new();
    for s in sessions {
        for q in s.iter() {
            if states.contains_key(q.as_str()) {
                continue;
            }
            let st = match (joint, frozen_cache.and_then(|c| c.get(q))) {
                (false, Some((h, z))) => QueryState {
                    top_last: h.clone(),
                    z: z.clone(),
                    tape: None,
                },
                _ => {
                    let tape = params.ssqe.forward(vocab, q)?;
                    QueryState {
                        top_last: tape.top_last().to_vec(),
                        z: tape.z.clone(),
                        tape: joint.then_some(tape),
                        }
                }
            };
            states.insert(q.as_str(), st);
        }
    }
    let hidden = params.ssqe.config.hidden_dim;
    let dim = params.ssqe.config.output_dim;
    // (session index, position t) -> context after queries[..=t], target queries[t+1]
    let terms: Vec<(usize, usize)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.len().saturating_sub(1)).map(move |t| (si, t)))
        .collect();
    if terms.is_empty() {
        return Ok(0.0);
    }
    let tapes = sessions
        .iter()
        .map(|s| {
            let steps = s.len().saturating_sub(1);
            if steps == 0 {
                return Ok(None);
            }
            let mut inputs = Vec::with_capacity(steps * hidden);
            for q in &s[..steps] {
                inputs.extend_from_slice(&states[q.as_str()].top_last);
            }
            params.head.forward(&inputs, steps).map(Some)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut d_outputs: Vec<Vec<Option<Vec<f64>>>> = sessions
        .iter()
        .map(|s| vec![None; s.len().saturating_sub(1)])
        .collect();
    let mut dz_target: HashMap<&str, Vec<f64>> = HashMap::new();
    let weight = 1.0 / terms.len() as f64;
    let mut total = 0.0;
    for (k, &(si, t)) in terms.iter().enumerate() {
        let tape = tapes[si].as_ref().expect("session with terms has a tape");
        let ctx = &tape.outputs[t];
        let cand_queries: Vec<&str> = std::iter::once(k)
            .chain(negatives[k].iter().copied())
            .map(|j| {
                let (sj, tj) = terms[j];
                sessions[sj][tj + 1].as_str()
            })
            .collect();
        let cands: Vec<&[f64]> = cand_queries.iter().map(|q| states[q].z.as_slice()).collect();
        let mut d_ctx = vec![0.0; dim];
        let mut d_cands = vec![vec![0.0; dim]; cands.len()];
        total += score_candidates(ctx, &cands, beta, weight, &mut d_ctx, &mut d_cands)?;
        d_outputs[si][t] = Some(d_ctx);
        if joint {
            for (q, d) in cand_queries.iter().zip(&d_cands) {
                axpy(1.0, d, dz_target.entry(q).or_insert_with(|| vec![0.0; dim]));
            }
        }
    }
    let mut dh_query: HashMap<&str, Vec<f64>> = HashMap::new();
    for (si, s) in sessions.iter().enumerate() {
        let Some(tape) = tapes[si].as_ref() else { continue };
        let d_inputs = params.head.backward(tape, &d_outputs[si], &mut grads.head);
        if joint {
            for (t, q) in s[..s.len() - 1].iter().enumerate() {
                axpy(
                    1.0,
                    &d_inputs[t * hidden..(t + 1) * hidden],
                    dh_query.entry(q.as_str()).or_insert_with(|| vec![0.0; hidden]),
                );
            }
        }
    }
    if joint {
        let mut keys: Vec<&str> = states.keys().copied().collect();
        keys.sort_unstable();
        for q in keys {
            let st = &states[q];
            let tape = st.tape.as_ref().expect("joint mode keeps tapes");
            let dz = dz_target.get(q).map(Vec::as_slice);
            let dh = dh_query.get(q).map(Vec::as_slice);
            if dz.is_some() || dh.is_some() {
                params.ssqe.backward(tape, dz, dh, &mut grads.ssqe);
            }
        }
    }
    Ok(total / terms.len() as f64)
}

/// Cycles through a seeded permutation of `0..len` in fixed-size batches,
/// reshuffling after each pass.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchCursor {
    fn new(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0, batch }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}

fn maybe_clip<P: Parameters>(grads: &mut P, clip: Option<f64>) {
    if let Some(max) = clip {
        clip_global_norm(grads, max);
    }
}

fn record(
    metrics: &mut Vec<TrainMetric>,
    step: usize,
    loss_acc: &mut (f64, usize),
    val_accuracy: Option<f64>,
) {
    let loss = if loss_acc.1 > 0 { loss_acc.0 / loss_acc.1 as f64 } else { f64::NAN };
    log::info!(
        "{}",
        serde_json::json!({"event": "train_step", "step": step, "loss": loss, "val_accuracy": val_accuracy})
    );
    metrics.push(TrainMetric {
        step,
        loss,
        val_accuracy,
    });
    *loss_acc = (0.0, 0);
}

/// Trains an SSQE on query pairs by next-query prediction. When validation
/// pairs are given, the parameters with the best validation accuracy are
/// returned.
pub fn train_ssqe(
    init: SsqeParams,
    vocab: &CharVocab,
    train: &[QueryPair],
    validation: &[QueryPair],
    cfg: &TrainConfig,
) -> Result<Trained<SsqeParams>, EncoderError> {
    cfg.validate(train.len())?;
    init.check_shapes()?;
    if vocab.len() != init.config.vocab_size {
        return Err(EncoderError::ModelMismatch("vocabulary size differs from model".into()));
    }
    let val_items = eval_items_from_pairs(validation);
    let eval_seed = derive_seed(cfg.seed, "ssqe-eval");
    let mut rng = rng_from(derive_seed(cfg.seed, "ssqe-train"));
    let mut cursor = BatchCursor::new(train.len(), cfg.batch_size, &mut rng);
    let mut params = init;
    let mut state = AdamState::new(&params, cfg.adam);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, SsqeParams)> = None;
    let mut loss_acc = (0.0, 0usize);
    for step in 1..=cfg.iterations {
        let idx = cursor.next(&mut rng).to_vec();
        let batch: Vec<(&str, &str)> = idx
            .iter()
            .map(|&i| (train[i].query_q.as_str(), train[i].query_d.as_str()))
            .collect();
        let pool: Vec<&str> = batch.iter().map(|b| b.1).collect();
        let negatives = (0..batch.len())
            .map(|i| sample_negatives(&mut rng, &pool, i, cfg.negatives))
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = params.zeros_like();
        let loss = pair_loss_and_grad(&params, vocab, &batch, &negatives, cfg.beta, &mut grads)?;
        loss_acc.0 += loss;
        loss_acc.1 += 1;
        maybe_clip(&mut grads, cfg.clip_norm);
        adam_step(&mut params, &grads, &mut state)?;
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let acc = if val_items.is_empty() {
                None
            } else {
                let enc = QueryEncoder::single(&params, vocab);
                Some(next_query_accuracy(&enc, &val_items, cfg.negatives + 1, eval_seed)?)
            };
            record(&mut metrics, step, &mut loss_acc, acc);
            if let Some(a) = acc {
                if best.as_ref().map_or(true, |b| a > b.0) {
                    best = Some((a, step, params.clone()));
                }
            }
        }
    }
    Ok(match best {
        Some((acc, step, p)) => Trained {
            params: p,
            metrics,
            best_step: step,
            best_val_accuracy: Some(acc),
        },
        None => Trained {
            params,
            metrics,
            best_step: cfg.iterations,
            best_val_accuracy: None,
        },
    })
}

/// Trains the session head of an SMQE on top of a trained SSQE. The SSQE is
/// left untouched unless `cfg.joint` is set.
pub fn train_smqe(
    ssqe: SsqeParams,
    smqe_config: SmqeConfig,
    vocab: &CharVocab,
    train: &[Session],
    validation: &[Session],
    cfg: &TrainConfig,
) -> Result<Trained<SmqeParams>, EncoderError> {
    let train: Vec<&Session> = train.iter().filter(|s| s.len() >= 2).collect();
    cfg.validate(train.len())?;
    if vocab.len() != ssqe.config.vocab_size {
        return Err(EncoderError::ModelMismatch("vocabulary size differs from SSQE".into()));
    }
    let mut rng = rng_from(derive_seed(cfg.seed, "smqe-train"));
    let mut params = SmqeParams::init(ssqe, smqe_config, &mut rng)?;
    let val_items = eval_items_from_sessions(validation);
    let eval_seed = derive_seed(cfg.seed, "smqe-eval");

    let mut frozen_cache: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    if !cfg.joint {
        for s in &train {
            for q in &s.queries {
                if !frozen_cache.contains_key(q) {
                    let tape = params.ssqe.forward(vocab, q)?;
                    frozen_cache.insert(q.clone(), (tape.top_last().to_vec(), tape.z));
                }
            }
        }
    }

    let mut cursor = BatchCursor::new(train.len(), cfg.batch_size, &mut rng);
    let mut head_state = AdamState::new(&params.head, cfg.adam);
    let mut full_state = cfg.joint.then(|| AdamState::new(&params, cfg.adam));
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, SmqeParams)> = None;
    let mut loss_acc = (0.0, 0usize);
    for step in 1..=cfg.iterations {
        let idx = cursor.next(&mut rng).to_vec();
        let sessions: Vec<&[String]> = idx.iter().map(|&i| train[i].queries.as_slice()).collect();
        let pool: Vec<&str> = sessions
            .iter()
            .flat_map(|s| s[1..].iter().map(String::as_str))
            .collect();
        let negatives = (0..pool.len())
            .map(|k| sample_negatives(&mut rng, &pool, k, cfg.negatives))
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = params.zeros_like();
        let loss = session_loss_and_grad(
            &params,
            vocab,
            &sessions,
            &negatives,
            cfg.beta,
            cfg.joint,
            Some(&frozen_cache),
            &mut grads,
        )?;
        loss_acc.0 += loss;
        loss_acc.1 += 1;
        match full_state.as_mut() {
            Some(state) => {
                maybe_clip(&mut grads, cfg.clip_norm);
                adam_step(&mut params, &grads, state)?;
            }
            None => {
                maybe_clip(&mut grads.head, cfg.clip_norm);
                adam_step(&mut params.head, &grads.head, &mut head_state)?;
            }
        }
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let acc = if val_items.is_empty() {
                None
            } else {
                let enc = QueryEncoder::multiple(&params, vocab);
                Some(next_query_accuracy(&enc, &val_items, cfg.negatives + 1, eval_seed)?)
            };
            record(&mut metrics, step, &mut loss_acc, acc);
            if let Some(a) = acc {
                if best.as_ref().map_or(true, |b| a > b.0) {
                    best = Some((a, step, params.clone()));
                }
            }
        }
    }
    Ok(match best {
        Some((acc, step, p)) => Trained {
            params: p,
            metrics,
            best_step: step,
            best_val_accuracy: Some(acc),
        },
        None => Trained {
            params,
            metrics,
            best_step: cfg.iterations,
            best_val_accuracy: None,
        },
    })
}
