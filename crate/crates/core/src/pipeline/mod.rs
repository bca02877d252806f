//! Stage functions and the end-to-end run on a synthetic world.

mod artifacts;
mod config;

pub use artifacts::{file_sha256, read_sidecar, sidecar_path, verify_input, write_sidecar, Sidecar};
pub use config::{ConfigError, PipelineConfig, CONFIG_FORMAT_VERSION, CONFIG_KEYS};

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{self, AnomalyError, AnomalyResult, GpsRecord, Label};
use crate::classify::{self, ClassifyError, EvalReport, SweepRow};
use crate::corpus::{self, CharVocab, CorpusError, QueryRecord, Session, SplitSpec};
use crate::encoders::{
    self, Checkpoint, EncoderError, Model, QueryEncoder, SmqeParams, SsqeConfig, SsqeParams, TrainMetric,
};
use crate::features::{self, Arity, FeatureError, Generator, MethodSpec, Selector};
use crate::synth::{self, OracleReport, SynthError, World};
use crate::util::{fmt_f64, rng_from};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("stale input {path}: content hash {found} differs from recorded {recorded}")]
    StaleInput { path: String, recorded: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Corpus(_) => "corpus",
            PipelineError::Encoder(_) => "encoder",
            PipelineError::Anomaly(_) => "anomaly",
            PipelineError::Features(FeatureError::Leakage { .. }) => "leakage",
            PipelineError::Features(_) => "features",
            PipelineError::Classify(_) => "classify",
            PipelineError::Synth(_) => "synth",
            PipelineError::Io { .. } => "io",
            PipelineError::StaleInput { .. } => "stale_input",
            PipelineError::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Trained SSQE and SMQE over one character vocabulary.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub vocab: CharVocab,
    pub ssqe: SsqeParams,
    pub smqe: SmqeParams,
}

impl Encoders {
    pub fn single(&self) -> QueryEncoder<'_> {
        QueryEncoder::single(&self.ssqe, &self.vocab)
    }

    pub fn multiple(&self) -> QueryEncoder<'_> {
        QueryEncoder::multiple(&self.smqe, &self.vocab)
    }

    pub fn ssqe_checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            model: Model::Ssqe(self.ssqe.clone()),
            vocab: self.vocab.clone(),
            metadata,
        }
    }

    pub fn smqe_checkpoint(&self, metadata: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            model: Model::Smqe(self.smqe.clone()),
            vocab: self.vocab.clone(),
            metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub train_sessions: usize,
    pub val_sessions: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub ssqe_best_step: usize,
    /// 5-way next-query accuracy on validation pairs.
    pub ssqe_val_accuracy: f64,
    /// SSQE (last query as context) on the SMQE validation items.
    pub ssqe_session_accuracy: f64,
    pub smqe_best_step: usize,
    pub smqe_val_accuracy: f64,
    pub ssqe_metrics: Vec<TrainMetric>,
    pub smqe_metrics: Vec<TrainMetric>,
}

/// Train/validation split of sessions for encoder training.
pub fn split_sessions(sessions: &[Session], cfg: &PipelineConfig) -> Result<(Vec<Session>, Vec<Session>)> {
    if sessions.len() <= cfg.val_sessions {
        return Err(PipelineError::Invalid(format!(
            "{} sessions cannot hold out {} for validation",
            sessions.len(),
            cfg.val_sessions
        )));
    }
    let split = corpus::split_dataset(
        sessions,
        SplitSpec::holdout(sessions.len(), cfg.val_sessions, 0),
        cfg.stage_seed("split"),
    )?;
    Ok((split.train, split.validation))
}

pub fn build_vocab(train: &[Session], cfg: &PipelineConfig) -> Result<CharVocab> {
    Ok(corpus::build_char_vocab(corpus::session_queries(train), cfg.vocab_size)?)
}

pub fn train_ssqe_stage(
    vocab: &CharVocab,
    train: &[Session],
    val: &[Session],
    cfg: &PipelineConfig,
) -> Result<encoders::Trained<SsqeParams>> {
    let config = SsqeConfig {
        vocab_size: vocab.len(),
        ..cfg.ssqe
    };
    let init = SsqeParams::init(config, &mut rng_from(cfg.stage_seed("ssqe-init")))?;
    let pairs = corpus::build_pairs(train);
    let val_pairs = corpus::build_pairs(val);
    Ok(encoders::train_ssqe(init, vocab, &pairs, &val_pairs, &cfg.ssqe_train_config())?)
}

pub fn train_smqe_stage(
    ssqe: &SsqeParams,
    vocab: &CharVocab,
    train: &[Session],
    val: &[Session],
    cfg: &PipelineConfig,
) -> Result<encoders::Trained<SmqeParams>> {
    Ok(encoders::train_smqe(ssqe.clone(), cfg.smqe, vocab, train, val, &cfg.smqe_train_config())?)
}

/// SSQE accuracy on the SMQE validation items, using the last context
/// query alone, with the same negatives the SMQE evaluation draws.
pub fn ssqe_session_accuracy(ssqe: &SsqeParams, vocab: &CharVocab, val: &[Session], cfg: &PipelineConfig) -> Result<f64> {
    Ok(encoders::next_query_accuracy(
        &QueryEncoder::single(ssqe, vocab),
        &encoders::eval_items_from_sessions(val),
        cfg.smqe_train.negatives + 1,
        crate::util::derive_seed(cfg.smqe_train_config().seed, "smqe-eval"),
    )?)
}

/// Splits sessions, builds the vocabulary and trains both encoders.
pub fn train_encoders(sessions: &[Session], cfg: &PipelineConfig) -> Result<(Encoders, EncoderReport)> {
    let (train, val) = split_sessions(sessions, cfg)?;
    let vocab = build_vocab(&train, cfg)?;
    let ssqe = train_ssqe_stage(&vocab, &train, &val, cfg)?;
    let smqe = train_smqe_stage(&ssqe.params, &vocab, &train, &val, cfg)?;
    let ssqe_session_accuracy = ssqe_session_accuracy(&ssqe.params, &vocab, &val, cfg)?;
    let report = EncoderReport {
        train_sessions: train.len(),
        val_sessions: val.len(),
        train_pairs: corpus::build_pairs(&train).len(),
        val_pairs: corpus::build_pairs(&val).len(),
        ssqe_best_step: ssqe.best_step,
        ssqe_val_accuracy: ssqe.best_val_accuracy.unwrap_or(f64::NAN),
        ssqe_session_accuracy,
        smqe_best_step: smqe.best_step,
        smqe_val_accuracy: smqe.best_val_accuracy.unwrap_or(f64::NAN),
        ssqe_metrics: ssqe.metrics,
        smqe_metrics: smqe.metrics,
    };
    Ok((
        Encoders {
            vocab,
            ssqe: ssqe.params,
            smqe: smqe.params,
        },
        report,
    ))
}

/// Scores every user and labels with the configured thresholds.
pub fn label_stage(gps: &[GpsRecord], cfg: &PipelineConfig) -> Result<Vec<AnomalyResult>> {
    let mut results = anomaly::score_users(gps, &cfg.world.windows, &cfg.anomaly)?;
    anomaly::label_users(&mut results, cfg.theta_hi, cfg.theta_lo)?;
    Ok(results)
}

/// `(user, evacuated)` for users with a definite label.
pub fn labelled_users(results: &[AnomalyResult]) -> Vec<(String, bool)> {
    results
        .iter()
        .filter_map(|r| match r.label {
            Label::Evacuated => Some((r.user_id.clone(), true)),
            Label::Stayed => Some((r.user_id.clone(), false)),
            Label::Excluded => None,
        })
        .collect()
}

pub fn method_spec(id: u8, cfg: &PipelineConfig) -> Result<MethodSpec> {
    let spec = MethodSpec::from_id(id)?;
    Ok(match spec.arity {
        Arity::Single => spec,
        Arity::Multiple(_) => MethodSpec::new(Arity::Multiple(cfg.multiple_k), spec.selector, spec.generator)?,
    })
}

/// Cross-validates one feature method. `pre_records` must precede the
/// alert; one-hot vocabularies are rebuilt from each fold's training users.
pub fn evaluate_method(
    id: u8,
    pre_records: &[QueryRecord],
    labelled: &[(String, bool)],
    encoders: Option<&Encoders>,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let spec = method_spec(id, cfg)?;
    let users: Vec<String> = labelled.iter().map(|l| l.0.clone()).collect();
    let sel = features::select_for_users(&users, pre_records, &spec, cfg.world.windows.t_d)?;
    let flag: HashMap<&str, bool> = labelled.iter().map(|(u, y)| (u.as_str(), *y)).collect();
    let y: Vec<bool> = sel.user_ids.iter().map(|u| flag[u.as_str()]).collect();
    let rf = cfg.rf_config();
    let mut report = match spec.generator {
        // selections and vocabularies are refit on each fold's training users
        Generator::OneHot => classify::cross_validate_with(&y, cfg.k_folds, &rf, |tr, te| {
            let fold = sel.refit(tr);
            let train = fold.onehot_matrix(tr, tr, cfg.onehot_cap);
            let test = fold.onehot_matrix(tr, te, cfg.onehot_cap);
            Ok((train.rows, test.rows))
        })?,
        Generator::Encoder => {
            let enc = encoders.ok_or(FeatureError::MissingEncoder("encoder"))?;
            let model = match spec.arity {
                Arity::Single => enc.single(),
                Arity::Multiple(_) => enc.multiple(),
            };
            if spec.selector == Selector::Recent {
                let m = sel.encoder_matrix(&model)?;
                classify::cross_validate(&m.rows, &y, cfg.k_folds, &rf)?
            } else {
                // most users keep the same queries across folds
                let mut cache: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
                let mut failure: Option<FeatureError> = None;
                let result = classify::cross_validate_with(&y, cfg.k_folds, &rf, |tr, te| {
                    let fold = sel.refit(tr);
                    let mut rows = |idx: &[usize]| -> std::result::Result<Vec<Vec<f64>>, FeatureError> {
                        idx.iter()
                            .map(|&i| {
                                let q = &fold.queries[i];
                                if let Some(v) = cache.get(q) {
                                    return Ok(v.clone());
                                }
                                let v = features::encoder_features(q, &model, spec.arity)?;
                                cache.insert(q.clone(), v.clone());
                                Ok(v)
                            })
                            .collect()
                    };
                    let built = rows(tr).and_then(|a| Ok((a, rows(te)?)));
                    built.map_err(|e| {
                        let c = ClassifyError::Features(e.to_string());
                        failure = Some(e);
                        c
                    })
                });
                match failure {
                    Some(e) => return Err(e.into()),
                    None => result?,
                }
            }
        }
    };
    report.method_id = Some(id);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method_id: u8,
    pub method: String,
    pub accuracy: f64,
    pub auc: f64,
    pub n_users: usize,
    pub n_positive: usize,
}

impl Table1Row {
    pub fn from_report(r: &EvalReport, cfg: &PipelineConfig) -> Result<Self> {
        let id = r.method_id.ok_or_else(|| PipelineError::Invalid("report without method id".into()))?;
        Ok(Self {
            method_id: id,
            method: method_spec(id, cfg)?.describe(),
            accuracy: r.mean_accuracy,
            auc: r.mean_auc,
            n_users: r.n_samples,
            n_positive: r.n_positive,
        })
    }
}

pub fn write_table1<W: Write>(mut w: W, rows: &[Table1Row]) -> std::io::Result<()> {
    writeln!(w, "method\tdescription\taccuracy\tauc\tn_users\tn_pos")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
            r.method_id, r.method, r.accuracy, r.auc, r.n_users, r.n_positive
        )?;
    }
    Ok(())
}

/// Evaluates every configured method in id order.
pub fn evaluate_methods(
    pre_records: &[QueryRecord],
    labelled: &[(String, bool)],
    encoders: Option<&Encoders>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Table1Row>, Vec<EvalReport>)> {
    let mut ids = cfg.methods.clone();
    ids.sort_unstable();
    ids.dedup();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for id in ids {
        log::info!("{}", serde_json::json!({"event": "evaluate", "method": id}));
        let r = evaluate_method(id, pre_records, labelled, encoders, cfg)?;
        rows.push(Table1Row::from_report(&r, cfg)?);
        reports.push(r);
    }
    Ok((rows, reports))
}

/// Relabels at each grid threshold and cross-validates the sweep methods.
/// Grid points leaving a class with fewer than k members are marked.
pub fn run_sweep(
    pre_records: &[QueryRecord],
    scored: &[AnomalyResult],
    encoders: Option<&Encoders>,
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &hi in &cfg.theta_grid {
        if !(hi > cfg.theta_lo) {
            return Err(PipelineError::Invalid(format!(
                "grid value {hi} must exceed theta_lo {}",
                cfg.theta_lo
            )));
        }
        let mut relabelled = scored.to_vec();
        anomaly::label_users(&mut relabelled, hi, cfg.theta_lo)?;
        let labelled = labelled_users(&relabelled);
        for &id in &cfg.sweep_methods {
            log::info!("{}", serde_json::json!({"event": "sweep", "theta_hi": hi, "method": id}));
            let (n_pos, n_neg) = (
                labelled.iter().filter(|l| l.1).count(),
                labelled.iter().filter(|l| !l.1).count(),
            );
            let mut row = SweepRow {
                theta_hi: hi,
                method_id: id,
                n_positive: n_pos,
                n_negative: n_neg,
                accuracy: None,
                auc: None,
                note: None,
            };
            match evaluate_method(id, pre_records, &labelled, encoders, cfg) {
                Ok(r) => {
                    row.n_positive = r.n_positive;
                    row.n_negative = r.n_samples - r.n_positive;
                    row.accuracy = Some(r.mean_accuracy);
                    row.auc = Some(r.mean_auc);
                }
                Err(PipelineError::Classify(
                    e @ (ClassifyError::ClassTooSmall { .. } | ClassifyError::SingleClass),
                )) => {
                    row.note = Some(format!("unavailable: {e}"));
                }
                Err(e) => return Err(e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub query_a: String,
    pub query_b: String,
    pub group: String,
    pub cosine: f64,
}

pub fn similarity_rows(enc: &QueryEncoder, pairs: &[(String, String, String)]) -> Result<Vec<SimilarityRow>> {
    pairs
        .iter()
        .map(|(a, b, g)| {
            Ok(SimilarityRow {
                query_a: a.clone(),
                query_b: b.clone(),
                group: g.clone(),
                cosine: enc.similarity(a, b)?,
            })
        })
        .collect()
}

/// Mean cosine per group, in group name order.
pub fn similarity_means(rows: &[SimilarityRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.group.clone()).or_default();
        e.0 += r.cosine;
        e.1 += 1;
    }
    acc.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
}

pub fn write_similarity<W: Write>(mut w: W, rows: &[SimilarityRow]) -> std::io::Result<()> {
    writeln!(w, "query_a\tquery_b\tgroup\tcosine")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}\t{}", r.query_a, r.query_b, r.group, fmt_f64(r.cosine))?;
    }
    Ok(())
}

/// Everything one synthetic run produces, in memory.
pub struct PipelineOutputs {
    pub world: World,
    pub sessions: Vec<Session>,
    pub encoders: Encoders,
    pub encoder_report: EncoderReport,
    pub similarity: Vec<SimilarityRow>,
    pub labels: Vec<AnomalyResult>,
    pub theta_oracle: OracleReport,
    pub table1: Vec<Table1Row>,
    pub reports: Vec<EvalReport>,
    pub sweep: Vec<SweepRow>,
    /// Wall-clock seconds per stage. Not written to any artifact.
    pub timings: BTreeMap<&'static str, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_queries: usize,
    pub n_sessions: usize,
    pub encoder: EncoderReportSummary,
    pub similarity_means: BTreeMap<String, f64>,
    pub n_labelled: usize,
    pub n_positive: usize,
    pub positive_rate: f64,
    pub theta_oracle: OracleReport,
    pub table1: Vec<Table1Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReportSummary {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub ssqe_val_accuracy: f64,
    pub ssqe_session_accuracy: f64,
    pub smqe_val_accuracy: f64,
}

impl PipelineOutputs {
    pub fn summary(&self, cfg: &PipelineConfig) -> Summary {
        let labelled = labelled_users(&self.labels);
        let n_pos = labelled.iter().filter(|l| l.1).count();
        let r = &self.encoder_report;
        Summary {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            n_users: self.world.truth.users.len(),
            n_queries: self.world.queries.len(),
            n_sessions: self.sessions.len(),
            encoder: EncoderReportSummary {
                train_pairs: r.train_pairs,
                val_pairs: r.val_pairs,
                ssqe_val_accuracy: r.ssqe_val_accuracy,
                ssqe_session_accuracy: r.ssqe_session_accuracy,
                smqe_val_accuracy: r.smqe_val_accuracy,
            },
            similarity_means: similarity_means(&self.similarity),
            n_labelled: labelled.len(),
            n_positive: n_pos,
            positive_rate: n_pos as f64 / labelled.len().max(1) as f64,
            theta_oracle: self.theta_oracle,
            table1: self.table1.clone(),
        }
    }
}

/// θ of every scored user as `(user, θ)`.
pub fn theta_scores(results: &[AnomalyResult]) -> Vec<(String, f64)> {
    results
        .iter()
        .filter_map(|r| r.theta().map(|t| (r.user_id.clone(), t)))
        .collect()
}

/// Generates a world and runs every stage on it.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutputs> {
    let mut timings = BTreeMap::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |name: &'static str| {
        timings.insert(name, clock.elapsed().as_secs_f64());
        clock = std::time::Instant::now();
    };
    let world = synth::gen_world(&cfg.world_config())?;
    log::info!("{}", serde_json::json!({"event": "synth", "queries": world.queries.len(), "gps": world.gps.len()}));
    let sessions = corpus::sessionize(&world.queries, &cfg.session);
    lap("synth");
    let (encoders, encoder_report) = train_encoders(&sessions, cfg)?;
    let pairs = synth::category_word_pairs(cfg.world.n_intents);
    let similarity = similarity_rows(&encoders.single(), &pairs)?;
    lap("encoders");
    let labels = label_stage(&world.gps, cfg)?;
    let theta_oracle = synth::oracle_report(&theta_scores(&labels), cfg.theta_hi, &world.truth)?;
    lap("label");
    let pre = features::restrict_before(&world.queries, cfg.world.windows.t_d);
    let labelled = labelled_users(&labels);
    let (table1, reports) = evaluate_methods(&pre, &labelled, Some(&encoders), cfg)?;
    lap("evaluate");
    let sweep = run_sweep(&pre, &labels, Some(&encoders), cfg)?;
    lap("sweep");
    Ok(PipelineOutputs {
        world,
        sessions,
        encoders,
        encoder_report,
        similarity,
        labels,
        theta_oracle,
        table1,
        reports,
        sweep,
        timings,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| PipelineError::io(path, e))
}

/// Writes `path` with `f`, then its sidecar.
pub fn write_artifact<F>(path: &Path, stage: &str, cfg_hash: &str, inputs: &[&Path], f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| PipelineError::io(path, e))?;
    drop(w);
    write_sidecar(path, stage, cfg_hash, inputs)
}

/// Runs the pipeline and writes every artifact under `out_dir`. Returns
/// the written paths in write order.
pub fn run_e2e(cfg: &PipelineConfig, out_dir: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let out = run_pipeline(cfg)?;
    let h = cfg.hash();
    let p = |name: &str| out_dir.join(name);
    let written = std::cell::RefCell::new(Vec::new());
    let emit = |name: &str, stage: &str, inputs: &[&str], f: &mut dyn FnMut(&mut BufWriter<File>) -> std::io::Result<()>| {
        let path = p(name);
        let ins: Vec<PathBuf> = inputs.iter().map(|i| p(i)).collect();
        let refs: Vec<&Path> = ins.iter().map(PathBuf::as_path).collect();
        write_artifact(&path, stage, &h, &refs, f)?;
        written.borrow_mut().push(path);
        Ok::<_, PipelineError>(())
    };
    emit("config.txt", "e2e", &[], &mut |w| w.write_all(cfg.to_text().as_bytes()))?;
    emit("queries.jsonl", "synth", &[], &mut |w| corpus::write_query_log(w, &out.world.queries))?;
    emit("gps.jsonl", "synth", &[], &mut |w| anomaly::write_gps_log(w, &out.world.gps))?;
    emit("truth.tsv", "synth", &[], &mut |w| out.world.truth.write_tsv(w))?;
    emit("sessions.jsonl", "sessionize", &["queries.jsonl"], &mut |w| corpus::write_jsonl(w, &out.sessions))?;
    let meta: BTreeMap<String, String> = [("config_hash".to_string(), h.clone()), ("seed".to_string(), cfg.seed.to_string())]
        .into_iter()
        .collect();
    for (name, ckpt) in [
        ("ssqe.ckpt", out.encoders.ssqe_checkpoint(meta.clone())),
        ("smqe.ckpt", out.encoders.smqe_checkpoint(meta.clone())),
    ] {
        let path = p(name);
        encoders::save_checkpoint(&path, &ckpt)?;
        write_sidecar(&path, "train", &h, &[&p("sessions.jsonl")])?;
        written.borrow_mut().push(path);
    }
    emit("ssqe_metrics.jsonl", "train-ssqe", &["sessions.jsonl"], &mut |w| {
        encoders::write_metrics(w, &out.encoder_report.ssqe_metrics)
    })?;
    emit("smqe_metrics.jsonl", "train-smqe", &["sessions.jsonl"], &mut |w| {
        encoders::write_metrics(w, &out.encoder_report.smqe_metrics)
    })?;
    emit("similarity.tsv", "similarity", &["ssqe.ckpt"], &mut |w| write_similarity(w, &out.similarity))?;
    emit("labels.tsv", "label", &["gps.jsonl"], &mut |w| anomaly::write_labels(w, &out.labels))?;
    let thetas: Vec<f64> = out.labels.iter().filter_map(AnomalyResult::theta).collect();
    let hist = anomaly::score_histogram(&thetas, 0.5)?;
    emit("theta_hist.tsv", "label", &["gps.jsonl"], &mut |w| anomaly::write_histogram(w, &hist))?;
    let eval_inputs = ["queries.jsonl", "labels.tsv", "ssqe.ckpt", "smqe.ckpt"];
    emit("table1.tsv", "evaluate", &eval_inputs, &mut |w| write_table1(w, &out.table1))?;
    emit("eval_reports.json", "evaluate", &eval_inputs, &mut |w| {
        serde_json::to_writer_pretty(&mut *w, &out.reports)?;
        w.write_all(b"\n")
    })?;
    emit("sweep.tsv", "sweep", &eval_inputs, &mut |w| classify::write_sweep(w, &out.sweep))?;
    let summary = out.summary(cfg);
    emit("summary.json", "e2e", &[], &mut |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")
    })?;
    Ok((summary, written.into_inner()))
}
