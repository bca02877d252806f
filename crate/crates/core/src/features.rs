//! Per-user feature vectors from pre-alert queries.
//!
//! A method picks one or up to ten queries per user (most recent, or highest
//! tf-idf) and turns them into a vector, either a one-hot / bag-of-queries
//! over a query vocabulary or an encoder representation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QueryRecord;
use crate::encoders::{EncoderError, QueryEncoder};
use crate::util::{fmt_f64, sha256_hex};

pub const MAX_MULTIPLE: usize = 10;
pub const DEFAULT_ONEHOT_CAP: usize = 5000;
pub const TFIDF_DEFINITION: &str = "doc=user; term=whole query; tf=count; idf=ln(N/(1+df))+1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("method id must be 1..=8, got {0}")]
    BadMethodId(u8),
    #[error("multiple-query arity must be 2..={MAX_MULTIPLE}, got {0}")]
    BadArity(usize),
    #[error("query at {timestamp} for user {user} is not before the alert time {t_d}")]
    Leakage { user: String, timestamp: i64, t_d: i64 },
    #[error("{0} features need an encoder")]
    MissingEncoder(&'static str),
    #[error("single-query features need an SSQE and multiple-query features an SMQE")]
    ArityModelMismatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Single,
    Multiple(usize),
}

impl Arity {
    pub fn k(&self) -> usize {
        match self {
            Arity::Single => 1,
            Arity::Multiple(k) => *k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Recent,
    Tfidf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    OneHot,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodSpec {
    pub arity: Arity,
    pub selector: Selector,
    pub generator: Generator,
}

impl MethodSpec {
    pub fn new(arity: Arity, selector: Selector, generator: Generator) -> Result<Self, FeatureError> {
        if let Arity::Multiple(k) = arity {
            if !(2..=MAX_MULTIPLE).contains(&k) {
                return Err(FeatureError::BadArity(k));
            }
        }
        Ok(Self {
            arity,
            selector,
            generator,
        })
    }

    /// Method ids 1..=8 in the order single/multiple, then recent/tf-idf,
    /// then one-hot/encoder. Multiple arity uses up to 10 queries.
    pub fn from_id(id: u8) -> Result<Self, FeatureError> {
        if !(1..=8).contains(&id) {
            return Err(FeatureError::BadMethodId(id));
        }
        let b = id - 1;
        Ok(Self {
            arity: if b & 4 == 0 { Arity::Single } else { Arity::Multiple(MAX_MULTIPLE) },
            selector: if b & 2 == 0 { Selector::Recent } else { Selector::Tfidf },
            generator: if b & 1 == 0 { Generator::OneHot } else { Generator::Encoder },
        })
    }

    pub fn id(&self) -> u8 {
        let m = matches!(self.arity, Arity::Multiple(_)) as u8;
        let t = (self.selector == Selector::Tfidf) as u8;
        let e = (self.generator == Generator::Encoder) as u8;
        1 + 4 * m + 2 * t + e
    }

    pub fn all() -> Vec<Self> {
        (1..=8).map(|i| Self::from_id(i).expect("valid id")).collect()
    }

    /// `Single / Recent / One-hot` style label.
    pub fn describe(&self) -> String {
        let a = match self.arity {
            Arity::Single => "Single",
            Arity::Multiple(_) => "Multiple",
        };
        let s = match self.selector {
            Selector::Recent => "Recent",
            Selector::Tfidf => "tf-idf",
        };
        let g = match (self.generator, self.arity) {
            (Generator::OneHot, _) => "One-hot",
            (Generator::Encoder, Arity::Single) => "SSQE",
            (Generator::Encoder, Arity::Multiple(_)) => "SMQE",
        };
        format!("{a} / {s} / {g}")
    }
}

/// Per-user query documents and document frequencies.
#[derive(Debug, Clone, Default)]
pub struct TfidfTable {
    n_docs: usize,
    df: HashMap<String, usize>,
    tf: HashMap<String, HashMap<String, usize>>,
}

impl TfidfTable {
    /// Every record is one occurrence of its query in its user's document.
    pub fn build(records: &[QueryRecord]) -> Self {
        let mut tf: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for r in records {
            *tf.entry(r.user_id.clone()).or_default().entry(r.text.clone()).or_default() += 1;
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in tf.values() {
            for q in doc.keys() {
                *df.entry(q.clone()).or_default() += 1;
            }
        }
        Self {
            n_docs: tf.len(),
            df,
            tf,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn idf(&self, query: &str) -> f64 {
        let df = self.df.get(query).copied().unwrap_or(0);
        (self.n_docs as f64 / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn score(&self, user: &str, query: &str) -> f64 {
        let tf = self.tf.get(user).and_then(|d| d.get(query)).copied().unwrap_or(0);
        tf as f64 * self.idf(query)
    }

}

/// Picks the feature queries of one user from their chronologically sorted
/// pre-alert records, returned in chronological order.
pub fn select_queries(records: &[&QueryRecord], spec: &MethodSpec, tfidf: &TfidfTable) -> Vec<String> {
    let k = spec.arity.k();
    match spec.selector {
        Selector::Recent => {
            let start = records.len().saturating_sub(k);
            records[start..].iter().map(|r| r.text.clone()).collect()
        }
        Selector::Tfidf => {
            // last occurrence position of each distinct query
            // tf comes from the user's own records; the table only
            // supplies document frequencies
            let mut last: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                let e = last.entry(r.text.as_str()).or_default();
                *e = (i, e.1 + 1);
            }
            let mut ranked: Vec<(&str, usize, f64)> =
                last.into_iter().map(|(q, (i, tf))| (q, i, tf as f64 * tfidf.idf(q))).collect();
            ranked.sort_by(|a, b| {
                b.2.total_cmp(&a.2)
                    .then(b.1.cmp(&a.1))
                    .then(a.0.cmp(b.0))
            });
            ranked.truncate(k);
            ranked.sort_by_key(|r| r.1);
            ranked.into_iter().map(|r| r.0.to_string()).collect()
        }
    }
}

/// Whole-query vocabulary for one-hot features.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVocab {
    queries: Vec<String>,
    index: HashMap<String, usize>,
}

impl QueryVocab {
    /// The `cap` most frequent queries (ties by string order), indexed in
    /// that order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(queries: I, cap: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for q in queries {
            *counts.entry(q).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(cap);
        Self::from_queries(ranked.into_iter().map(|(q, _)| q.to_string()).collect())
    }

    pub fn from_queries(queries: Vec<String>) -> Self {
        let index = queries.iter().enumerate().map(|(i, q)| (q.clone(), i)).collect();
        Self { queries, index }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, query: &str) -> Option<usize> {
        self.index.get(query).copied()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.queries.join("\n").as_bytes())
    }
}

/// One-hot of a single query, or the bag-of-queries sum for several.
/// Out-of-vocabulary queries contribute nothing.
pub fn onehot_features(selected: &[String], vocab: &QueryVocab) -> Vec<f64> {
    let mut v = vec![0.0; vocab.len()];
    for q in selected {
        if let Some(i) = vocab.get(q) {
            v[i] += 1.0;
        }
    }
    v
}

/// SSQE representation of a single query or SMQE representation of the
/// selected queries in order.
pub fn encoder_features(selected: &[String], encoder: &QueryEncoder, arity: Arity) -> Result<Vec<f64>, FeatureError> {
    match arity {
        Arity::Single => {
            let q = selected.last().ok_or(EncoderError::EmptySequence)?;
            Ok(encoder.encode_query(q)?.0)
        }
        Arity::Multiple(_) => {
            if !encoder.is_multiple() {
                return Err(FeatureError::ArityModelMismatch);
            }
            Ok(encoder.encode_session(selected)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method_id: u8,
    pub method: String,
    pub spec: MethodSpec,
    pub t_d: i64,
    pub tfidf: String,
    pub model_hash: Option<String>,
    pub vocab_hash: Option<String>,
    pub onehot_cap: Option<usize>,
    pub excluded_no_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub user_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dim: usize,
    pub provenance: Provenance,
}

impl FeatureMatrix {
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        writeln!(w, "user\t{}", header.join("\t"))?;
        for (u, row) in self.user_ids.iter().zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{u}\t{}", vals.join("\t"))?;
        }
        Ok(())
    }

    pub fn write_sidecar<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, &self.provenance)
    }
}

/// Errors if any record is at or after `t_d`.
pub fn check_no_leakage(records: &[QueryRecord], t_d: i64) -> Result<(), FeatureError> {
    match records.iter().find(|r| r.timestamp >= t_d) {
        Some(r) => Err(FeatureError::Leakage {
            user: r.user_id.clone(),
            timestamp: r.timestamp,
            t_d,
        }),
        None => Ok(()),
    }
}

/// Records strictly before `t_d`.
pub fn restrict_before(records: &[QueryRecord], t_d: i64) -> Vec<QueryRecord> {
    records.iter().filter(|r| r.timestamp < t_d).cloned().collect()
}

/// Selected queries for each requested user, computed once per method.
/// Users without any pre-alert query are reported separately.
#[derive(Debug, Clone)]
pub struct Selection {
    pub spec: MethodSpec,
    pub t_d: i64,
    pub user_ids: Vec<String>,
    pub queries: Vec<Vec<String>>,
    pub excluded: Vec<String>,
    /// Each selected user's records, sorted by time.
    docs: Vec<Vec<QueryRecord>>,
}

/// `records` must all precede `t_d`; tf-idf is computed over every user in
/// `records`, labelled or not.
pub fn select_for_users(
    users: &[String],
    records: &[QueryRecord],
    spec: &MethodSpec,
    t_d: i64,
) -> Result<Selection, FeatureError> {
    check_no_leakage(records, t_d)?;
    let tfidf = TfidfTable::build(records);
    let mut by_user: HashMap<&str, Vec<&QueryRecord>> = HashMap::new();
    for r in records {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    for v in by_user.values_mut() {
        v.sort_by_key(|r| r.timestamp);
    }
    let mut sel = Selection {
        spec: *spec,
        t_d,
        user_ids: Vec::new(),
        queries: Vec::new(),
        excluded: Vec::new(),
        docs: Vec::new(),
    };
    for u in users {
        match by_user.get(u.as_str()) {
            Some(recs) if !recs.is_empty() => {
                sel.user_ids.push(u.clone());
                sel.queries.push(select_queries(recs, spec, &tfidf));
                sel.docs.push(recs.iter().map(|r| (*r).clone()).collect());
            }
            _ => sel.excluded.push(u.clone()),
        }
    }
    Ok(sel)
}

impl Selection {
    fn provenance(&self) -> Provenance {
        Provenance {
            method_id: self.spec.id(),
            method: self.spec.describe(),
            spec: self.spec,
            t_d: self.t_d,
            tfidf: TFIDF_DEFINITION.to_string(),
            model_hash: None,
            vocab_hash: None,
            onehot_cap: None,
            excluded_no_queries: self.excluded.clone(),
        }
    }

    /// The same selection with tf-idf document frequencies taken from the
    /// `train_rows` users only, so held-out users cannot influence which
    /// queries a training user contributes. Recency selection is unchanged.
    pub fn refit(&self, train_rows: &[usize]) -> Selection {
        if self.spec.selector != Selector::Tfidf {
            return self.clone();
        }
        let train: Vec<QueryRecord> = train_rows.iter().flat_map(|&i| self.docs[i].iter().cloned()).collect();
        let table = TfidfTable::build(&train);
        let queries = self
            .docs
            .iter()
            .map(|doc| {
                let recs: Vec<&QueryRecord> = doc.iter().collect();
                select_queries(&recs, &self.spec, &table)
            })
            .collect();
        Selection { queries, ..self.clone() }
    }

    /// One-hot matrix over `rows` (indices into this selection) with a
    /// vocabulary built from the selected queries of `vocab_rows` only.
    pub fn onehot_matrix(&self, vocab_rows: &[usize], rows: &[usize], cap: usize) -> FeatureMatrix {
        let vocab = QueryVocab::build(
            vocab_rows.iter().flat_map(|&i| self.queries[i].iter().map(String::as_str)),
            cap,
        );
        let mut prov = self.provenance();
        prov.vocab_hash = Some(vocab.hash());
        prov.onehot_cap = Some(cap);
        FeatureMatrix {
            user_ids: rows.iter().map(|&i| self.user_ids[i].clone()).collect(),
            rows: rows.iter().map(|&i| onehot_features(&self.queries[i], &vocab)).collect(),
            dim: vocab.len(),
            provenance: prov,
        }
    }

    pub fn encoder_matrix(&self, encoder: &QueryEncoder) -> Result<FeatureMatrix, FeatureError> {
        let want_multiple = matches!(self.spec.arity, Arity::Multiple(_));
        if encoder.is_multiple() != want_multiple {
            return Err(FeatureError::ArityModelMismatch);
        }
        let rows = self
            .queries
            .iter()
            .map(|q| encoder_features(q, encoder, self.spec.arity))
            .collect::<Result<Vec<_>, _>>()?;
        let mut prov = self.provenance();
        prov.model_hash = Some(encoder.model_hash());
        Ok(FeatureMatrix {
            user_ids: self.user_ids.clone(),
            rows,
            dim: encoder.dim(),
            provenance: prov,
        })
    }
}

/// Feature matrix for `users` under `spec`. One-hot vocabularies are built
/// from these same users; use [`Selection::onehot_matrix`] to build them
/// from training folds only.
pub fn build_feature_matrix(
    users: &[String],
    records: &[QueryRecord],
    spec: &MethodSpec,
    encoder: Option<&QueryEncoder>,
    onehot_cap: usize,
    t_d: i64,
) -> Result<FeatureMatrix, FeatureError> {
    let sel = select_for_users(users, records, spec, t_d)?;
    match spec.generator {
        Generator::OneHot => {
            let all: Vec<usize> = (0..sel.user_ids.len()).collect();
            Ok(sel.onehot_matrix(&all, &all, onehot_cap))
        }
        Generator::Encoder => {
            let enc = encoder.ok_or(FeatureError::MissingEncoder("encoder"))?;
            sel.encoder_matrix(enc)
        }
    }
}
