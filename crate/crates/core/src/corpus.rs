//! Query log ingestion, sessionization, query-pair extraction, the character
//! vocabulary, dataset splits and cohort search statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::util::{rng_from, sha256_hex};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("character vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("split counts {counts:?} exceed corpus size {len}")]
    CountsExceed { counts: [usize; 3], len: usize },
    #[error("split counts {counts:?} do not cover corpus size {len}")]
    CountsShort { counts: [usize; 3], len: usize },
    #[error("cohorts overlap on user {0}")]
    OverlappingCohorts(String),
    #[error("bucket width must be positive")]
    BadBucket,
}

/// Lowercased, NFKC-normalized, trimmed query text. `None` when nothing is left.
pub fn normalize_query(raw: &str) -> Option<String> {
    let nfkc: String = raw.nfkc().collect();
    let text = nfkc.trim().to_lowercase();
    if text.is_empty() {
        None
    } else {
        Some(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub user_id: String,
    pub text: String,
    pub timestamp: i64,
}

impl QueryRecord {
    /// Builds a record, normalizing the text. Returns `None` for empty text
    /// or a negative timestamp.
    pub fn new(user_id: impl Into<String>, timestamp: i64, text: &str) -> Option<Self> {
        if timestamp < 0 {
            return None;
        }
        Some(Self {
            user_id: user_id.into(),
            text: normalize_query(text)?,
            timestamp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Jsonl,
    Tsv,
}

impl LogFormat {
    /// Guesses the format from a file name, defaulting to JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => LogFormat::Tsv,
            _ => LogFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnError {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    pub skipped: Vec<LineError>,
}

impl<T> Default for Ingested<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            skipped: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct JsonQuery {
    user: String,
    ts: i64,
    q: String,
}

fn parse_query_line(line: &str, format: LogFormat) -> Result<QueryRecord, String> {
    let (user, ts, q) = match format {
        LogFormat::Jsonl => {
            let rec: JsonQuery = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (rec.user, rec.ts, rec.q)
        }
        LogFormat::Tsv => {
            let mut parts = line.splitn(3, '\t');
            let user = parts.next().unwrap_or_default().to_string();
            let ts = parts.next().ok_or("missing timestamp field")?;
            let q = parts.next().ok_or("missing query field")?;
            let ts = ts
                .trim()
                .parse::<i64>()
                .map_err(|e| format!("bad timestamp {ts:?}: {e}"))?;
            (user, ts, q.to_string())
        }
    };
    if user.is_empty() {
        return Err("empty user id".into());
    }
    if ts < 0 {
        return Err(format!("negative timestamp {ts}"));
    }
    QueryRecord::new(user, ts, &q).ok_or_else(|| "query text is empty after normalization".into())
}

/// Reads a line-delimited query log and returns normalized records sorted by
/// `(user_id, timestamp)`; records sharing a timestamp keep input order.
pub fn ingest_query_log<R: BufRead>(
    reader: R,
    format: LogFormat,
    on_error: OnError,
) -> Result<Ingested<QueryRecord>, CorpusError> {
    let mut out = Ingested::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_query_line(&line, format) {
            Ok(rec) => out.records.push(rec),
            Err(message) => {
                let err = LineError {
                    line: idx + 1,
                    message,
                };
                match on_error {
                    OnError::Abort => {
                        return Err(CorpusError::Malformed {
                            line: err.line,
                            message: err.message,
                        })
                    }
                    OnError::Skip => out.skipped.push(err),
                }
            }
        }
    }
    out.records
        .sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    Ok(out)
}

pub fn write_query_log<W: Write>(mut w: W, records: &[QueryRecord]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({"user": r.user_id, "ts": r.timestamp, "q": r.text});
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub timeout_s: i64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            timeout_s: 120,
            min_len: 2,
            max_len: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub queries: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Groups records by user (users in ascending id order, each user's records
/// stably sorted by timestamp).
pub fn group_by_user(records: &[QueryRecord]) -> BTreeMap<&str, Vec<&QueryRecord>> {
    let mut by_user: BTreeMap<&str, Vec<&QueryRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    for recs in by_user.values_mut() {
        recs.sort_by_key(|r| r.timestamp);
    }
    by_user
}

/// Splits each user's query stream wherever the gap to the previous query is
/// strictly greater than the timeout. Short sessions are dropped and long
/// ones keep only their first `max_len` queries.
pub fn sessionize(records: &[QueryRecord], cfg: &SessionConfig) -> Vec<Session> {
    let mut sessions = Vec::new();
    for (user, recs) in group_by_user(records) {
        let mut current: Vec<&QueryRecord> = Vec::new();
        let mut flush = |current: &mut Vec<&QueryRecord>| {
            if current.len() >= cfg.min_len {
                let kept = &current[..current.len().min(cfg.max_len)];
                sessions.push(Session {
                    user_id: user.to_string(),
                    queries: kept.iter().map(|r| r.text.clone()).collect(),
                    timestamps: kept.iter().map(|r| r.timestamp).collect(),
                });
            }
            current.clear();
        };
        for r in recs {
            if let Some(prev) = current.last() {
                if r.timestamp - prev.timestamp > cfg.timeout_s {
                    flush(&mut current);
                }
            }
            current.push(r);
        }
        flush(&mut current);
    }
    sessions
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPair {
    pub user_id: String,
    pub query_q: String,
    pub query_d: String,
}

/// Consecutive `(Q, D)` pairs; a session of length n yields n - 1 pairs.
pub fn build_pairs(sessions: &[Session]) -> Vec<QueryPair> {
    sessions
        .iter()
        .flat_map(|s| {
            s.queries.windows(2).map(move |w| QueryPair {
                user_id: s.user_id.clone(),
                query_q: w[0].clone(),
                query_d: w[1].clone(),
            })
        })
        .collect()
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<T>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Character vocabulary. Regular characters occupy `0..len-2`, followed by
/// the out-of-vocabulary index and the end-of-query index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn oov(&self) -> usize {
        self.chars.len()
    }

    pub fn eoq(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.oov())
    }

    /// Character indices of `query` followed by the end-of-query marker.
    pub fn encode(&self, query: &str) -> Vec<usize> {
        query
            .chars()
            .map(|c| self.index_of(c))
            .chain(std::iter::once(self.eoq()))
            .collect()
    }

    pub fn hash(&self) -> String {
        let s: String = self.chars.iter().collect();
        sha256_hex(s.as_bytes())
    }
}

/// Keeps the `size - 2` most frequent characters, ties broken by ascending
/// code point.
pub fn build_char_vocab<'a, I>(queries: I, size: usize) -> Result<CharVocab, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    if size < 2 {
        return Err(CorpusError::VocabTooSmall(size));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for q in queries {
        for c in q.chars() {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(size - 2);
    Ok(CharVocab::from_chars(ranked.into_iter().map(|(c, _)| c).collect()))
}

pub fn session_queries(sessions: &[Session]) -> impl Iterator<Item = &str> {
    sessions.iter().flat_map(|s| s.queries.iter().map(String::as_str))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Train, validation and test fractions.
    Fractions([f64; 3]),
    /// Exact train, validation and test counts.
    Counts([usize; 3]),
}

impl SplitSpec {
    /// Fixed-size validation and test sets with the remainder for training.
    pub fn holdout(len: usize, validation: usize, test: usize) -> Self {
        SplitSpec::Counts([len.saturating_sub(validation + test), validation, test])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Seeded shuffle followed by a contiguous train/validation/test partition.
pub fn split_dataset<T: Clone>(
    items: &[T],
    spec: SplitSpec,
    seed: u64,
) -> Result<DatasetSplit<T>, CorpusError> {
    let n = items.len();
    let counts = match spec {
        SplitSpec::Fractions(f) => {
            if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(CorpusError::BadFractions(f));
            }
            let val = (f[1] * n as f64).floor() as usize;
            let test = ((f[2] * n as f64).floor() as usize).min(n - val);
            [n - val - test, val, test]
        }
        SplitSpec::Counts(c) => {
            let total: usize = c.iter().sum();
            if total > n {
                return Err(CorpusError::CountsExceed { counts: c, len: n });
            }
            if total < n {
                return Err(CorpusError::CountsShort { counts: c, len: n });
            }
            c
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| items[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(0..counts[0]),
        validation: pick(counts[0]..counts[0] + counts[1]),
        test: pick(counts[0] + counts[1]..n),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CohortRow {
    pub bucket_start: i64,
    pub cohort: String,
    pub category: String,
    pub count: u64,
}

/// Per-bucket, per-cohort, per-category query counts. The `total` category
/// counts every query of the cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    pub rows: Vec<CohortRow>,
    pub cohort_sizes: [usize; 2],
}

pub const TOTAL_CATEGORY: &str = "total";
pub const COHORT_NAMES: [&str; 2] = ["a", "b"];

impl CohortStats {
    pub fn total(&self, cohort: &str, category: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.cohort == cohort && r.category == category)
            .map(|r| r.count)
            .sum()
    }

    /// Matching queries per cohort member.
    pub fn per_user_rate(&self, cohort: &str, category: &str) -> f64 {
        let size = match cohort {
            "a" => self.cohort_sizes[0],
            _ => self.cohort_sizes[1],
        };
        self.total(cohort, category) as f64 / size.max(1) as f64
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bucket_start\tcohort\tcategory\tcount")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{}\t{}", r.bucket_start, r.cohort, r.category, r.count)?;
        }
        Ok(())
    }
}

pub fn cohort_query_stats(
    records: &[QueryRecord],
    cohort_a: &HashSet<String>,
    cohort_b: &HashSet<String>,
    categories: &[(String, Vec<String>)],
    bucket_s: i64,
) -> Result<CohortStats, CorpusError> {
    if bucket_s <= 0 {
        return Err(CorpusError::BadBucket);
    }
    if let Some(u) = cohort_a.intersection(cohort_b).min() {
        return Err(CorpusError::OverlappingCohorts(u.clone()));
    }
    let mut counts: BTreeMap<(i64, usize, usize), u64> = BTreeMap::new();
    // category index 0 is the total
    for r in records {
        let cohort = if cohort_a.contains(&r.user_id) {
            0
        } else if cohort_b.contains(&r.user_id) {
            1
        } else {
            continue;
        };
        let bucket = r.timestamp.div_euclid(bucket_s) * bucket_s;
        *counts.entry((bucket, cohort, 0)).or_default() += 1;
        for (ci, (_, keywords)) in categories.iter().enumerate() {
            if keywords.iter().any(|k| r.text.contains(k.as_str())) {
                *counts.entry((bucket, cohort, ci + 1)).or_default() += 1;
            }
        }
    }
    // Emit every (bucket, cohort, category) cell so zero counts are explicit.
    let buckets: Vec<i64> = counts.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut rows = Vec::new();
    for &b in &buckets {
        for (cohort, name) in COHORT_NAMES.iter().enumerate() {
            for ci in 0..=categories.len() {
                let category = if ci == 0 {
                    TOTAL_CATEGORY.to_string()
                } else {
                    categories[ci - 1].0.clone()
                };
                rows.push(CohortRow {
                    bucket_start: b,
                    cohort: name.to_string(),
                    category,
                    count: counts.get(&(b, cohort, ci)).copied().unwrap_or(0),
                });
            }
        }
    }
    Ok(CohortStats {
        rows,
        cohort_sizes: [cohort_a.len(), cohort_b.len()],
    })
}
