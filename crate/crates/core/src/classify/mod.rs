//! Random forest, stratified cross-validation and ranking metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::{derive_indexed, derive_seed, fmt_f64, rng_from};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifyError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("row width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall { class: u8, count: usize, k: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("feature construction failed: {0}")]
    Features(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    /// Features tried per split; `None` means ⌊√D⌋ (at least 1).
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.n_trees == 0 {
            return Err(ClassifyError::BadConfig("n_trees must be ≥ 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(ClassifyError::BadConfig("max_features must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn features_per_split(&self, dim: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| ((dim as f64).sqrt().floor() as usize).max(1))
            .min(dim.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// `[P(class 0), P(class 1)]`
    Leaf { proba: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_proba(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { proba } => return proba[1],
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfModel {
    pub dim: usize,
    pub trees: Vec<Tree>,
}

impl RfModel {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for t in &self.trees {
            h.update((t.nodes.len() as u64).to_le_bytes());
            for n in &t.nodes {
                match n {
                    Node::Leaf { proba } => {
                        h.update([0u8]);
                        h.update(proba[0].to_le_bytes());
                        h.update(proba[1].to_le_bytes());
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        h.update([1u8]);
                        h.update((*feature as u64).to_le_bytes());
                        h.update(threshold.to_le_bytes());
                        h.update((*left as u64).to_le_bytes());
                        h.update((*right as u64).to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn check_xy(x: &[Vec<f64>], y: &[bool]) -> Result<usize, ClassifyError> {
    if x.len() != y.len() {
        return Err(ClassifyError::LengthMismatch {
            rows: x.len(),
            labels: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(ClassifyError::TooFewSamples(x.len()));
    }
    let pos = y.iter().filter(|&&b| b).count();
    if pos == 0 || pos == y.len() {
        return Err(ClassifyError::SingleClass);
    }
    let dim = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != dim) {
        return Err(ClassifyError::WidthMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    Ok(dim)
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    mtry: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let p1 = pos as f64 / idx.len() as f64;
        self.nodes.push(Node::Leaf { proba: [1.0 - p1, p1] });
        self.nodes.len() - 1
    }

    /// Best (weighted gini, threshold) over one feature, if it has two
    /// distinct values.
    fn best_on(&self, idx: &[usize], f: usize, total_pos: usize) -> Option<(f64, f64)> {
        let mut vals: Vec<(f64, bool)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        if vals[0].0 == vals[vals.len() - 1].0 {
            return None;
        }
        let n = vals.len();
        let mut best: Option<(f64, f64)> = None;
        let mut left_pos = 0;
        for i in 0..n - 1 {
            left_pos += vals[i].1 as usize;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            let g = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(total_pos - left_pos, nr)) / n as f64;
            if best.map_or(true, |b| g < b.0) {
                let mut thr = 0.5 * (vals[i].0 + vals[i + 1].0);
                // midpoint can round onto the upper value
                if thr >= vals[i + 1].0 {
                    thr = vals[i].0;
                }
                best = Some((g, thr));
            }
        }
        best
    }

    fn grow<R: Rng>(&mut self, idx: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let at_cap = self.max_depth.is_some_and(|d| depth >= d);
        if idx.len() < 2 || pos == 0 || pos == idx.len() || at_cap {
            return self.leaf(&idx);
        }
        let dim = self.x[0].len();
        let mut order: Vec<usize> = (0..dim).collect();
        order.shuffle(rng);
        // keep drawing features past mtry until one admits a split
        let mut best: Option<(f64, usize, f64)> = None;
        for (tried, &f) in order.iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some((g, thr)) = self.best_on(&idx, f, pos) {
                if best.map_or(true, |b| g < b.0) {
                    best = Some((g, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(&idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { proba: [0.0, 0.0] });
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }
}

fn grow_tree(x: &[Vec<f64>], y: &[bool], sample: Vec<usize>, cfg: &RfConfig, seed: u64) -> Tree {
    let mut rng = rng_from(seed);
    let mut g = Grower {
        x,
        y,
        mtry: cfg.features_per_split(x[0].len()),
        max_depth: cfg.max_depth,
        nodes: Vec::new(),
    };
    g.grow(sample, 0, &mut rng);
    Tree { nodes: g.nodes }
}

fn bootstrap_sample(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Bootstrap indices each tree of `train_rf` sees.
pub fn tree_sample(n: usize, cfg: &RfConfig, tree: usize) -> Vec<usize> {
    if cfg.bootstrap {
        bootstrap_sample(n, derive_seed(derive_indexed(cfg.seed, tree as u64), "bootstrap"))
    } else {
        (0..n).collect()
    }
}

pub fn train_rf(x: &[Vec<f64>], y: &[bool], cfg: &RfConfig) -> Result<RfModel, ClassifyError> {
    cfg.validate()?;
    let dim = check_xy(x, y)?;
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let sample = tree_sample(x.len(), cfg, t);
            grow_tree(x, y, sample, cfg, derive_seed(derive_indexed(cfg.seed, t as u64), "split"))
        })
        .collect();
    Ok(RfModel { dim, trees })
}

/// Mean positive-class leaf probability over trees.
pub fn predict_proba(model: &RfModel, x: &[Vec<f64>]) -> Result<Vec<f64>, ClassifyError> {
    if let Some(r) = x.iter().find(|r| r.len() != model.dim) {
        return Err(ClassifyError::WidthMismatch {
            expected: model.dim,
            got: r.len(),
        });
    }
    Ok(x.par_iter()
        .map(|row| model.trees.iter().map(|t| t.leaf_proba(row)).sum::<f64>() / model.trees.len() as f64)
        .collect())
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, ClassifyError> {
    if scores.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch {
            rows: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ClassifyError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction correct with the hard label `score > 0.5`.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s > 0.5) == **l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fold index per sample; each class is shuffled and dealt round-robin so
/// per-fold class counts differ by at most one.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>, ClassifyError> {
    if k < 2 {
        return Err(ClassifyError::BadConfig(format!("k must be ≥ 2, got {k}")));
    }
    let mut folds = vec![0; labels.len()];
    let mut offset = 0;
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(ClassifyError::ClassTooSmall {
                class: class as u8,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng_from(derive_seed(seed, if class { "folds-1" } else { "folds-0" })));
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (j + offset) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(folds)
}

pub fn fold_hash(folds: &[usize]) -> String {
    let bytes: Vec<u8> = folds.iter().flat_map(|&f| (f as u32).to_le_bytes()).collect();
    crate::util::sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_id: Option<u8>,
    pub seed: u64,
    pub k: usize,
    pub n_samples: usize,
    pub n_positive: usize,
    pub n_trees: usize,
    pub features_per_split: String,
    pub bootstrap: bool,
    pub fold_assignment_hash: String,
    pub fold_accuracy: Vec<f64>,
    pub fold_auc: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_auc: f64,
    pub fold_model_hashes: Vec<String>,
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }
}

/// Train/test matrices for one fold, built from the given row indices.
pub type FoldMatrices = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// k-fold CV where `build(train_rows, test_rows)` produces the fold's
/// matrices, so fold-dependent features see training rows only.
pub fn cross_validate_with<F>(
    labels: &[bool],
    k: usize,
    cfg: &RfConfig,
    mut build: F,
) -> Result<EvalReport, ClassifyError>
where
    F: FnMut(&[usize], &[usize]) -> Result<FoldMatrices, ClassifyError>,
{
    cfg.validate()?;
    let folds = stratified_folds(labels, k, cfg.seed)?;
    let mut report = EvalReport {
        method_id: None,
        seed: cfg.seed,
        k,
        n_samples: labels.len(),
        n_positive: labels.iter().filter(|&&b| b).count(),
        n_trees: cfg.n_trees,
        features_per_split: cfg.max_features.map_or("sqrt".to_string(), |m| m.to_string()),
        bootstrap: cfg.bootstrap,
        fold_assignment_hash: fold_hash(&folds),
        fold_accuracy: Vec::new(),
        fold_auc: Vec::new(),
        mean_accuracy: 0.0,
        mean_auc: 0.0,
        fold_model_hashes: Vec::new(),
    };
    for f in 0..k {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
        let (xtr, xte) = build(&train, &test)?;
        let ytr: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let yte: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let fold_cfg = RfConfig {
            seed: derive_indexed(derive_seed(cfg.seed, "fold"), f as u64),
            ..cfg.clone()
        };
        let model = train_rf(&xtr, &ytr, &fold_cfg)?;
        let scores = predict_proba(&model, &xte)?;
        report.fold_accuracy.push(accuracy(&scores, &yte));
        report.fold_auc.push(auc(&scores, &yte)?);
        report.fold_model_hashes.push(model.hash());
    }
    report.mean_accuracy = report.fold_accuracy.iter().sum::<f64>() / k as f64;
    report.mean_auc = report.fold_auc.iter().sum::<f64>() / k as f64;
    Ok(report)
}

/// k-fold CV over a fixed feature matrix.
pub fn cross_validate(x: &[Vec<f64>], y: &[bool], k: usize, cfg: &RfConfig) -> Result<EvalReport, ClassifyError> {
    check_xy(x, y)?;
    cross_validate_with(y, k, cfg, |tr, te| {
        Ok((
            tr.iter().map(|&i| x[i].clone()).collect(),
            te.iter().map(|&i| x[i].clone()).collect(),
        ))
    })
}

/// One row of the threshold sensitivity table; metrics are `None` when the
/// threshold leaves too few members of a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta_hi: f64,
    pub method_id: u8,
    pub n_positive: usize,
    pub n_negative: usize,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub note: Option<String>,
}

pub fn write_sweep<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "theta_hi\tmethod\tn_pos\tn_neg\taccuracy\tauc\tstatus")?;
    for r in rows {
        let m = |v: Option<f64>| v.map_or("nan".to_string(), fmt_f64);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            fmt_f64(r.theta_hi),
            r.method_id,
            r.n_positive,
            r.n_negative,
            m(r.accuracy),
            m(r.auc),
            r.note.as_deref().unwrap_or("ok")
        )?;
    }
    Ok(())
}
