mod commands;
mod logging;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evacsense::pipeline::{ConfigError, PipelineConfig, PipelineError};

/// Evacuation prediction from search queries.
#[derive(Debug, Parser)]
#[command(name = "evacsense", version)]
struct Cli {
    /// Key-value config file; flags and `--set` override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set rf.n_trees=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Shorthands for common config keys.
#[derive(Debug, Args)]
struct Flags {
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    timeout_s: Option<String>,
    #[arg(long, global = true)]
    min_len: Option<String>,
    #[arg(long, global = true)]
    max_len: Option<String>,
    #[arg(long, global = true)]
    vocab_size: Option<String>,
    /// Sets both horizontal bandwidths.
    #[arg(long, global = true)]
    sigma_xy_m: Option<String>,
    #[arg(long, global = true)]
    sigma_t_h: Option<String>,
    #[arg(long, global = true)]
    theta_hi: Option<String>,
    #[arg(long, global = true)]
    theta_lo: Option<String>,
    #[arg(long, global = true)]
    t0: Option<String>,
    #[arg(long, global = true)]
    t_l: Option<String>,
    #[arg(long, global = true)]
    t_d: Option<String>,
    #[arg(long, global = true)]
    t_e: Option<String>,
    #[arg(long, global = true)]
    onehot_cap: Option<String>,
    #[arg(long, global = true)]
    k_folds: Option<String>,
    #[arg(long, global = true)]
    n_trees: Option<String>,
    /// Comma-separated, e.g. "2.0,2.5,3.0".
    #[arg(long, global = true)]
    theta_grid: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&[&'static str], &Option<String>); 17] = [
            (&["seed"], &self.seed),
            (&["session.timeout_s"], &self.timeout_s),
            (&["session.min_len"], &self.min_len),
            (&["session.max_len"], &self.max_len),
            (&["corpus.vocab_size"], &self.vocab_size),
            (&["anomaly.sigma_x_m", "anomaly.sigma_y_m"], &self.sigma_xy_m),
            (&["anomaly.sigma_t_h"], &self.sigma_t_h),
            (&["anomaly.theta_hi"], &self.theta_hi),
            (&["anomaly.theta_lo"], &self.theta_lo),
            (&["windows.t0"], &self.t0),
            (&["windows.t_l"], &self.t_l),
            (&["windows.t_d"], &self.t_d),
            (&["windows.t_e"], &self.t_e),
            (&["features.onehot_cap"], &self.onehot_cap),
            (&["eval.k_folds"], &self.k_folds),
            (&["rf.n_trees"], &self.n_trees),
            (&["sweep.theta_grid"], &self.theta_grid),
        ];
        let mut out = Vec::new();
        for (keys, v) in pairs {
            if let Some(v) = v {
                out.extend(keys.iter().map(|k| (*k, v.as_str())));
            }
        }
        out
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: queries, GPS and ground truth.
    Synth(commands::SynthArgs),
    /// Split a query log into sessions and next-query pairs.
    Sessionize(commands::SessionizeArgs),
    /// Query counts per time bucket for labelled cohorts.
    Stats(commands::StatsArgs),
    /// Train the single-query encoder.
    TrainSsqe(commands::TrainSsqeArgs),
    /// Train the multiple-query encoder on top of an SSQE checkpoint.
    TrainSmqe(commands::TrainSmqeArgs),
    /// Cosine similarity of query pairs under a trained encoder.
    Similarity(commands::SimilarityArgs),
    /// Score users from GPS and label them.
    Label(commands::LabelArgs),
    /// Threshold matching a target positive rate.
    Calibrate(commands::CalibrateArgs),
    /// Build the feature matrix of one method.
    Featurize(commands::FeaturizeArgs),
    /// Cross-validate every configured method.
    Evaluate(commands::EvaluateArgs),
    /// Cross-validate over a grid of labelling thresholds.
    Sweep(commands::SweepArgs),
    /// Run every stage on a synthetic world.
    E2e(commands::E2eArgs),
    /// Compare anomaly scores with synthetic ground truth.
    Oracle(commands::OracleArgs),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: kv.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in cli.flags.overrides() {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        let _ = write!(std::io::stdout().lock(), "{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(PipelineError::Invalid("no subcommand given; see --help".into()));
    };
    let result = match command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Sessionize(a) => commands::sessionize(&cfg, a),
        Command::Stats(a) => commands::stats(&cfg, a),
        Command::TrainSsqe(a) => commands::train_ssqe(&cfg, a),
        Command::TrainSmqe(a) => commands::train_smqe(&cfg, a),
        Command::Similarity(a) => commands::similarity(&cfg, a),
        Command::Label(a) => commands::label(&cfg, a),
        Command::Calibrate(a) => commands::calibrate(&cfg, a),
        Command::Featurize(a) => commands::featurize(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::Sweep(a) => commands::sweep(&cfg, a),
        Command::E2e(a) => commands::e2e(&cfg, a),
        Command::Oracle(a) => commands::oracle(&cfg, a),
    }?;
    // a closed stdout (e.g. piped into `head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{result}");
    Ok(())
}

fn main() -> ExitCode {
    logging::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            let body = serde_json::json!({"error": {"kind": "usage", "message": message.trim_end()}});
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e {
                PipelineError::Config(_) | PipelineError::Invalid(_) => 2,
                _ => 1,
            };
            let body = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
