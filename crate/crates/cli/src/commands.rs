//! One function per subcommand. Each returns a JSON summary for stdout.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use evacsense::anomaly::{self, AnomalyResult, GpsRecord, Label};
use evacsense::corpus::{self, LogFormat, OnError, QueryRecord, Session};
use evacsense::encoders::{self, Checkpoint, Model};
use evacsense::features::{self, FeatureError};
use evacsense::pipeline::{self as pl, Encoders, PipelineConfig, PipelineError, Result};
use evacsense::synth::{self, GroundTruth};
use serde_json::{json, Value};

fn open(path: &Path, cfg: &PipelineConfig) -> Result<BufReader<File>> {
    if let Some(meta) = pl::verify_input(path)? {
        if meta.config_hash != cfg.hash() {
            log::info!(
                "{}",
                json!({"event": "config_differs", "path": path.display().to_string(), "producer_hash": meta.config_hash})
            );
        }
    }
    File::open(path).map(BufReader::new).map_err(|e| PipelineError::io(path, e))
}

/// Fails when `upstream` was produced from a file named like `input` whose
/// content has since changed.
fn check_lineage(upstream: &Path, input: &Path) -> Result<()> {
    let (Some(meta), Some(name)) = (pl::read_sidecar(upstream)?, input.file_name()) else {
        return Ok(());
    };
    if let Some(recorded) = meta.inputs.get(&*name.to_string_lossy()) {
        let found = pl::file_sha256(input)?;
        if &found != recorded {
            return Err(PipelineError::StaleInput {
                path: input.display().to_string(),
                recorded: recorded.clone(),
                found,
            });
        }
    }
    Ok(())
}

fn read_queries(path: &Path, cfg: &PipelineConfig) -> Result<Vec<QueryRecord>> {
    let r = open(path, cfg)?;
    Ok(corpus::ingest_query_log(r, LogFormat::from_path(path), OnError::Abort)?.records)
}

fn read_gps(path: &Path, cfg: &PipelineConfig) -> Result<Vec<GpsRecord>> {
    let r = open(path, cfg)?;
    Ok(anomaly::ingest_gps_log(r, LogFormat::from_path(path), OnError::Abort)?.records)
}

fn read_sessions(path: &Path, cfg: &PipelineConfig) -> Result<Vec<Session>> {
    Ok(corpus::read_jsonl(open(path, cfg)?)?)
}

fn read_labels(path: &Path, cfg: &PipelineConfig) -> Result<Vec<AnomalyResult>> {
    Ok(anomaly::read_labels(open(path, cfg)?)?)
}

fn load_ckpt(path: &Path, cfg: &PipelineConfig, vocab_hash: Option<&str>) -> Result<Checkpoint> {
    open(path, cfg)?;
    Ok(encoders::load_checkpoint(path, vocab_hash)?)
}

fn load_encoders(ssqe: &Path, smqe: &Path, cfg: &PipelineConfig) -> Result<Encoders> {
    let s = load_ckpt(ssqe, cfg, None)?;
    let m = load_ckpt(smqe, cfg, Some(&s.vocab.hash()))?;
    let Model::Smqe(smqe_params) = m.model else {
        return Err(PipelineError::Invalid(format!("{} is not an SMQE checkpoint", smqe.display())));
    };
    Ok(Encoders {
        vocab: s.vocab.clone(),
        ssqe: s.ssqe().clone(),
        smqe: smqe_params,
    })
}

fn write_out<F>(path: &Path, stage: &str, cfg: &PipelineConfig, inputs: &[&Path], f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    pl::write_artifact(path, stage, &cfg.hash(), inputs, f)
}

fn json_out<T: serde::Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, value)?;
    w.write_all(b"\n")
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for queries.jsonl, gps.jsonl and truth.tsv.
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(cfg: &PipelineConfig, a: SynthArgs) -> Result<Value> {
    let world = synth::gen_world(&cfg.world_config())?;
    let (q, g, t) = (a.out.join("queries.jsonl"), a.out.join("gps.jsonl"), a.out.join("truth.tsv"));
    write_out(&q, "synth", cfg, &[], |w| corpus::write_query_log(w, &world.queries))?;
    write_out(&g, "synth", cfg, &[], |w| anomaly::write_gps_log(w, &world.gps))?;
    write_out(&t, "synth", cfg, &[], |w| world.truth.write_tsv(w))?;
    Ok(json!({
        "users": world.truth.users.len(),
        "evacuees": world.truth.evacuees().len(),
        "queries": world.queries.len(),
        "gps": world.gps.len(),
    }))
}

#[derive(Debug, Args)]
pub struct SessionizeArgs {
    #[arg(long)]
    queries: PathBuf,
    /// Sessions JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Optional next-query pairs JSONL.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

pub fn sessionize(cfg: &PipelineConfig, a: SessionizeArgs) -> Result<Value> {
    let records = read_queries(&a.queries, cfg)?;
    let sessions = corpus::sessionize(&records, &cfg.session);
    write_out(&a.out, "sessionize", cfg, &[&a.queries], |w| corpus::write_jsonl(w, &sessions))?;
    let pairs = corpus::build_pairs(&sessions);
    if let Some(p) = &a.pairs {
        write_out(p, "sessionize", cfg, &[&a.queries], |w| corpus::write_jsonl(w, &pairs))?;
    }
    Ok(json!({"queries": records.len(), "sessions": sessions.len(), "pairs": pairs.len()}))
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    queries: PathBuf,
    /// Labels TSV; cohort a is evacuated users, cohort b stayed users.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 86_400)]
    bucket_s: i64,
}

pub fn stats(cfg: &PipelineConfig, a: StatsArgs) -> Result<Value> {
    let records = read_queries(&a.queries, cfg)?;
    let labels = read_labels(&a.labels, cfg)?;
    let cohort = |l: Label| -> HashSet<String> {
        labels.iter().filter(|r| r.label == l).map(|r| r.user_id.clone()).collect()
    };
    let categories: Vec<(String, Vec<String>)> = synth::INTENTS[..cfg.world.n_intents]
        .iter()
        .map(|i| (i.name.to_string(), i.heads.iter().map(|h| h.to_string()).collect()))
        .collect();
    let stats = corpus::cohort_query_stats(&records, &cohort(Label::Evacuated), &cohort(Label::Stayed), &categories, a.bucket_s)?;
    write_out(&a.out, "stats", cfg, &[&a.queries, &a.labels], |w| stats.write_tsv(w))?;
    let rates: serde_json::Map<String, Value> = categories
        .iter()
        .map(|(c, _)| {
            (
                c.clone(),
                json!({"a": stats.per_user_rate("a", c), "b": stats.per_user_rate("b", c)}),
            )
        })
        .collect();
    Ok(json!({"cohort_sizes": stats.cohort_sizes, "per_user_rate": rates}))
}

#[derive(Debug, Args)]
pub struct TrainSsqeArgs {
    #[arg(long)]
    sessions: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional training curve JSONL.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn ckpt_metadata(cfg: &PipelineConfig) -> std::collections::BTreeMap<String, String> {
    [("config_hash", cfg.hash()), ("seed", cfg.seed.to_string())]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn save_ckpt(path: &Path, ckpt: &Checkpoint, cfg: &PipelineConfig, inputs: &[&Path]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    encoders::save_checkpoint(path, ckpt)?;
    pl::write_sidecar(path, "train", &cfg.hash(), inputs)
}

pub fn train_ssqe(cfg: &PipelineConfig, a: TrainSsqeArgs) -> Result<Value> {
    let sessions = read_sessions(&a.sessions, cfg)?;
    let (train, val) = pl::split_sessions(&sessions, cfg)?;
    let vocab = pl::build_vocab(&train, cfg)?;
    let trained = pl::train_ssqe_stage(&vocab, &train, &val, cfg)?;
    let ckpt = Checkpoint {
        model: Model::Ssqe(trained.params),
        vocab,
        metadata: ckpt_metadata(cfg),
    };
    save_ckpt(&a.out, &ckpt, cfg, &[&a.sessions])?;
    if let Some(m) = &a.metrics {
        write_out(m, "train-ssqe", cfg, &[&a.sessions], |w| encoders::write_metrics(w, &trained.metrics))?;
    }
    Ok(json!({
        "train_pairs": corpus::build_pairs(&train).len(),
        "val_pairs": corpus::build_pairs(&val).len(),
        "best_step": trained.best_step,
        "val_accuracy": trained.best_val_accuracy,
    }))
}

#[derive(Debug, Args)]
pub struct TrainSmqeArgs {
    /// The sessions file the SSQE was trained on.
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    ssqe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

pub fn train_smqe(cfg: &PipelineConfig, a: TrainSmqeArgs) -> Result<Value> {
    check_lineage(&a.ssqe, &a.sessions)?;
    let sessions = read_sessions(&a.sessions, cfg)?;
    let base = load_ckpt(&a.ssqe, cfg, None)?;
    let (train, val) = pl::split_sessions(&sessions, cfg)?;
    let trained = pl::train_smqe_stage(base.ssqe(), &base.vocab, &train, &val, cfg)?;
    let ssqe_acc = pl::ssqe_session_accuracy(base.ssqe(), &base.vocab, &val, cfg)?;
    let ckpt = Checkpoint {
        model: Model::Smqe(trained.params),
        vocab: base.vocab.clone(),
        metadata: ckpt_metadata(cfg),
    };
    save_ckpt(&a.out, &ckpt, cfg, &[&a.sessions, &a.ssqe])?;
    if let Some(m) = &a.metrics {
        write_out(m, "train-smqe", cfg, &[&a.sessions, &a.ssqe], |w| encoders::write_metrics(w, &trained.metrics))?;
    }
    Ok(json!({
        "best_step": trained.best_step,
        "val_accuracy": trained.best_val_accuracy,
        "ssqe_val_accuracy": ssqe_acc,
    }))
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// SSQE or SMQE checkpoint; its single-query encoder is used.
    #[arg(long)]
    model: PathBuf,
    /// TSV of `query_a⇥query_b[⇥group]`; defaults to all pairs of the
    /// synthetic intent head words.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read_pairs(path: &Path, cfg: &PipelineConfig) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path, cfg)?.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with("query_a\t") {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(PipelineError::Invalid(format!("{}:{}: expected 2 or 3 fields", path.display(), i + 1)));
        }
        let norm = |s: &str| corpus::normalize_query(s).unwrap_or_default();
        out.push((norm(f[0]), norm(f[1]), f.get(2).unwrap_or(&"all").to_string()));
    }
    Ok(out)
}

pub fn similarity(cfg: &PipelineConfig, a: SimilarityArgs) -> Result<Value> {
    let ckpt = load_ckpt(&a.model, cfg, None)?;
    let pairs = match &a.pairs {
        Some(p) => read_pairs(p, cfg)?,
        None => synth::category_word_pairs(cfg.world.n_intents),
    };
    let enc = encoders::QueryEncoder::single(ckpt.ssqe(), &ckpt.vocab);
    let rows = pl::similarity_rows(&enc, &pairs)?;
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.pairs.as_deref());
    write_out(&a.out, "similarity", cfg, &inputs, |w| pl::write_similarity(w, &rows))?;
    Ok(json!({"pairs": rows.len(), "mean_cosine": pl::similarity_means(&rows)}))
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    gps: PathBuf,
    /// Labels TSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional θ histogram TSV.
    #[arg(long)]
    hist: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    bin_width: f64,
}

fn label_summary(results: &[AnomalyResult]) -> Value {
    let count = |l: Label| results.iter().filter(|r| r.label == l).count();
    let (e, s) = (count(Label::Evacuated), count(Label::Stayed));
    json!({
        "users": results.len(),
        "scored": results.iter().filter(|r| r.parts.is_some()).count(),
        "evacuated": e,
        "stayed": s,
        "excluded": count(Label::Excluded),
        "positive_rate": e as f64 / (e + s).max(1) as f64,
    })
}

pub fn label(cfg: &PipelineConfig, a: LabelArgs) -> Result<Value> {
    let gps = read_gps(&a.gps, cfg)?;
    let results = pl::label_stage(&gps, cfg)?;
    write_out(&a.out, "label", cfg, &[&a.gps], |w| anomaly::write_labels(w, &results))?;
    if let Some(h) = &a.hist {
        let thetas: Vec<f64> = results.iter().filter_map(AnomalyResult::theta).collect();
        let bins = anomaly::score_histogram(&thetas, a.bin_width)?;
        write_out(h, "label", cfg, &[&a.gps], |w| anomaly::write_histogram(w, &bins))?;
    }
    Ok(label_summary(&results))
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    gps: PathBuf,
    /// Defaults to the configured synthetic evacuation rate.
    #[arg(long)]
    target_rate: Option<f64>,
}

pub fn calibrate(cfg: &PipelineConfig, a: CalibrateArgs) -> Result<Value> {
    let gps = read_gps(&a.gps, cfg)?;
    let results = anomaly::score_users(&gps, &cfg.world.windows, &cfg.anomaly)?;
    let thetas: Vec<f64> = results.iter().filter_map(AnomalyResult::theta).collect();
    let rate = a.target_rate.unwrap_or(cfg.world.evacuation_rate);
    let theta_hi = anomaly::calibrate_threshold(&thetas, rate)?;
    let above = thetas.iter().filter(|t| **t > theta_hi).count();
    Ok(json!({
        "target_rate": rate,
        "theta_hi": theta_hi,
        "scored": thetas.len(),
        "rate_above": above as f64 / thetas.len().max(1) as f64,
    }))
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    queries: PathBuf,
    /// Labels TSV; labelled users become rows.
    #[arg(long)]
    labels: PathBuf,
    /// Method id 1..8.
    #[arg(long)]
    method: u8,
    #[arg(long)]
    ssqe: Option<PathBuf>,
    #[arg(long)]
    smqe: Option<PathBuf>,
    /// Features TSV; provenance goes to `<out>.provenance.json`.
    #[arg(long)]
    out: PathBuf,
    /// Abort when the log holds any query at or after t_d instead of
    /// dropping those queries.
    #[arg(long)]
    strict_cutoff: bool,
}

fn pre_alert(records: Vec<QueryRecord>, cfg: &PipelineConfig, strict: bool) -> Result<Vec<QueryRecord>> {
    let t_d = cfg.world.windows.t_d;
    if strict {
        features::check_no_leakage(&records, t_d)?;
        return Ok(records);
    }
    let kept = features::restrict_before(&records, t_d);
    log::info!("{}", json!({"event": "cutoff", "t_d": t_d, "dropped": records.len() - kept.len()}));
    Ok(kept)
}

pub fn featurize(cfg: &PipelineConfig, a: FeaturizeArgs) -> Result<Value> {
    let records = pre_alert(read_queries(&a.queries, cfg)?, cfg, a.strict_cutoff)?;
    let users: Vec<String> = pl::labelled_users(&read_labels(&a.labels, cfg)?)
        .into_iter()
        .map(|u| u.0)
        .collect();
    let spec = pl::method_spec(a.method, cfg)?;
    let (ckpt_path, ckpt) = match (spec.generator, spec.arity.k() > 1, &a.ssqe, &a.smqe) {
        (features::Generator::OneHot, ..) => (None, None),
        (_, false, Some(p), _) | (_, true, _, Some(p)) => (Some(p.as_path()), Some(load_ckpt(p, cfg, None)?)),
        _ => return Err(FeatureError::MissingEncoder(if spec.arity.k() > 1 { "--smqe" } else { "--ssqe" }).into()),
    };
    let enc = ckpt.as_ref().map(|c| c.encoder());
    let m = features::build_feature_matrix(&users, &records, &spec, enc.as_ref(), cfg.onehot_cap, cfg.world.windows.t_d)?;
    let mut inputs = vec![a.queries.as_path(), a.labels.as_path()];
    inputs.extend(ckpt_path);
    write_out(&a.out, "featurize", cfg, &inputs, |w| m.write_tsv(w))?;
    let mut prov = a.out.as_os_str().to_owned();
    prov.push(".provenance.json");
    let prov = PathBuf::from(prov);
    write_out(&prov, "featurize", cfg, &inputs, |w| {
        m.write_sidecar(&mut *w).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })?;
    Ok(json!({"method": a.method, "description": spec.describe(), "rows": m.rows.len(), "dim": m.dim}))
}

#[derive(Debug, Args)]
pub struct EvalInputs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    ssqe: Option<PathBuf>,
    #[arg(long)]
    smqe: Option<PathBuf>,
}

struct Loaded {
    records: Vec<QueryRecord>,
    labels: Vec<AnomalyResult>,
    encoders: Option<Encoders>,
}

fn load_eval(cfg: &PipelineConfig, a: &EvalInputs, methods: &[u8]) -> Result<Loaded> {
    let needs_encoder = methods
        .iter()
        .map(|&id| pl::method_spec(id, cfg))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .any(|s| s.generator == features::Generator::Encoder);
    let encoders = match (&a.ssqe, &a.smqe) {
        (Some(s), Some(m)) => Some(load_encoders(s, m, cfg)?),
        _ if needs_encoder => return Err(FeatureError::MissingEncoder("--ssqe and --smqe").into()),
        _ => None,
    };
    Ok(Loaded {
        records: pre_alert(read_queries(&a.queries, cfg)?, cfg, false)?,
        labels: read_labels(&a.labels, cfg)?,
        encoders,
    })
}

impl EvalInputs {
    fn paths(&self) -> Vec<&Path> {
        let mut v = vec![self.queries.as_path(), self.labels.as_path()];
        v.extend(self.ssqe.as_deref());
        v.extend(self.smqe.as_deref());
        v
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    /// Table-1-style TSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-method reports as a JSON array.
    #[arg(long)]
    reports: Option<PathBuf>,
}

pub fn evaluate(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<Value> {
    let d = load_eval(cfg, &a.inputs, &cfg.methods)?;
    let labelled = pl::labelled_users(&d.labels);
    let (rows, reports) = pl::evaluate_methods(&d.records, &labelled, d.encoders.as_ref(), cfg)?;
    let inputs = a.inputs.paths();
    write_out(&a.out, "evaluate", cfg, &inputs, |w| pl::write_table1(w, &rows))?;
    if let Some(r) = &a.reports {
        write_out(r, "evaluate", cfg, &inputs, |w| json_out(w, &reports))?;
    }
    Ok(json!({"table1": rows}))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Labels TSV; users are relabelled from its θ column.
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long)]
    out: PathBuf,
}

pub fn sweep(cfg: &PipelineConfig, a: SweepArgs) -> Result<Value> {
    let d = load_eval(cfg, &a.inputs, &cfg.sweep_methods)?;
    let rows = pl::run_sweep(&d.records, &d.labels, d.encoders.as_ref(), cfg)?;
    write_out(&a.out, "sweep", cfg, &a.inputs.paths(), |w| evacsense::classify::write_sweep(w, &rows))?;
    let points: Vec<Value> = rows
        .iter()
        .map(|r| json!({"theta_hi": r.theta_hi, "method": r.method_id, "auc": r.auc, "status": r.note}))
        .collect();
    Ok(json!({"sweep": points}))
}

#[derive(Debug, Args)]
pub struct E2eArgs {
    /// Output directory for every artifact.
    #[arg(long)]
    out: PathBuf,
}

pub fn e2e(cfg: &PipelineConfig, a: E2eArgs) -> Result<Value> {
    let (summary, files) = pl::run_e2e(cfg, &a.out)?;
    let names: Vec<String> = files
        .iter()
        .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    Ok(json!({"summary": summary, "artifacts": names}))
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Ground truth TSV from `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// Labels TSV with θ scores.
    #[arg(long, conflicts_with = "gps")]
    labels: Option<PathBuf>,
    /// Score users directly from GPS instead.
    #[arg(long)]
    gps: Option<PathBuf>,
}

pub fn oracle(cfg: &PipelineConfig, a: OracleArgs) -> Result<Value> {
    let truth = GroundTruth::read_tsv(open(&a.truth, cfg)?)?;
    let results = match (&a.labels, &a.gps) {
        (Some(l), _) => read_labels(l, cfg)?,
        (None, Some(g)) => anomaly::score_users(&read_gps(g, cfg)?, &cfg.world.windows, &cfg.anomaly)?,
        (None, None) => return Err(PipelineError::Invalid("oracle needs --labels or --gps".into())),
    };
    let report = synth::oracle_report(&pl::theta_scores(&results), cfg.theta_hi, &truth)?;
    Ok(json!({"cutoff": cfg.theta_hi, "report": report}))
}
