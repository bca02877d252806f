use std::collections::{BTreeSet, HashMap};

use rand::seq::index;

use super::EncoderError;
use crate::corpus::{QueryPair, Session};
use crate::numerics::cosine_similarity;
use crate::util::rng_from;

/// One next-query prediction: the queries seen so far and the true next one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub context: Vec<String>,
    pub next: String,
}

pub fn eval_items_from_pairs(pairs: &[QueryPair]) -> Vec<EvalItem> {
    pairs
        .iter()
        .map(|p| EvalItem {
            context: vec![p.query_q.clone()],
            next: p.query_d.clone(),
        })
        .collect()
}

/// Every prefix of every session paired with the query that follows it.
pub fn eval_items_from_sessions(sessions: &[Session]) -> Vec<EvalItem> {
    sessions
        .iter()
        .flat_map(|s| {
            (1..s.len()).map(move |t| EvalItem {
                context: s.queries[..t].to_vec(),
                next: s.queries[t].clone(),
            })
        })
        .collect()
}

/// Anything that maps a query history to a context vector and a candidate
/// query to a vector in the same space.
pub trait NextQueryModel {
    fn context(&self, history: &[String]) -> Result<Vec<f64>, EncoderError>;
    fn target(&self, query: &str) -> Result<Vec<f64>, EncoderError>;
}

/// Fraction of items whose true next query scores strictly above
/// `n_choices - 1` seeded negatives drawn from the distinct next queries of
/// the evaluation set.
pub fn next_query_accuracy(
    model: &dyn NextQueryModel,
    items: &[EvalItem],
    n_choices: usize,
    seed: u64,
) -> Result<f64, EncoderError> {
    if items.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    if n_choices < 2 {
        return Err(EncoderError::Config("need at least 2 choices".into()));
    }
    let pool: Vec<&str> = items
        .iter()
        .map(|it| it.next.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.len() < n_choices {
        return Err(EncoderError::NotEnoughCandidates {
            available: pool.len(),
            needed: n_choices,
        });
    }
    let position: HashMap<&str, usize> = pool.iter().enumerate().map(|(i, &q)| (q, i)).collect();
    let mut targets: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut rng = rng_from(seed);
    let mut correct = 0usize;
    for item in items {
        let pos_idx = position[item.next.as_str()];
        let negatives: Vec<&str> = index::sample(&mut rng, pool.len() - 1, n_choices - 1)
            .into_iter()
            .map(|k| pool[if k >= pos_idx { k + 1 } else { k }])
            .collect();
        let ctx = model.context(&item.context)?;
        for q in std::iter::once(item.next.as_str()).chain(negatives.iter().copied()) {
            if !targets.contains_key(q) {
                targets.insert(q, model.target(q)?);
            }
        }
        let positive = cosine_similarity(&ctx, &targets[item.next.as_str()])?;
        let mut best_negative = f64::NEG_INFINITY;
        for q in &negatives {
            best_negative = best_negative.max(cosine_similarity(&ctx, &targets[q])?);
        }
        if positive > best_negative {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
