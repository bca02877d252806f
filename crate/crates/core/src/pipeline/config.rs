//! Flat `key = value` configuration for every stage.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::anomaly::AnomalyConfig;
use crate::classify::RfConfig;
use crate::corpus::SessionConfig;
use crate::encoders::{SmqeConfig, SsqeConfig, TrainConfig};
use crate::numerics::AdamConfig;
use crate::synth::WorldConfig;
use crate::util::{derive_seed, fmt_f64, sha256_hex};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("unsupported config format version {0}")]
    Version(u32),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub format_version: u32,
    /// Root seed; every stage seed derives from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub session: SessionConfig,
    pub vocab_size: usize,
    pub val_sessions: usize,
    pub ssqe: SsqeConfig,
    pub smqe: SmqeConfig,
    pub ssqe_train: TrainConfig,
    pub smqe_train: TrainConfig,
    pub anomaly: AnomalyConfig,
    pub theta_hi: f64,
    pub theta_lo: f64,
    pub onehot_cap: usize,
    pub multiple_k: usize,
    pub rf: RfConfig,
    pub k_folds: usize,
    pub methods: Vec<u8>,
    pub theta_grid: Vec<f64>,
    pub sweep_methods: Vec<u8>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        };
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            world: WorldConfig::default(),
            session: SessionConfig::default(),
            vocab_size: 64,
            val_sessions: 1000,
            ssqe: SsqeConfig {
                vocab_size: 0,
                embed_dim: 16,
                hidden_dim: 48,
                layers: 1,
                output_dim: 32,
            },
            smqe: SmqeConfig {
                session_hidden: 48,
                session_layers: 1,
            },
            ssqe_train: TrainConfig {
                iterations: 1500,
                eval_every: 250,
                adam,
                ..TrainConfig::default()
            },
            smqe_train: TrainConfig {
                iterations: 400,
                batch_size: 32,
                eval_every: 100,
                adam,
                ..TrainConfig::default()
            },
            anomaly: AnomalyConfig::default(),
            theta_hi: 4.0,
            theta_lo: 1.0,
            onehot_cap: crate::features::DEFAULT_ONEHOT_CAP,
            multiple_k: crate::features::MAX_MULTIPLE,
            rf: RfConfig::default(),
            k_folds: 5,
            methods: (1..=8).collect(),
            theta_grid: vec![2.0, 2.5, 3.0, 3.5, 4.0],
            sweep_methods: vec![7, 8],
        }
    }
}

trait KvValue: Sized {
    fn parse_kv(s: &str) -> Result<Self, String>;
    fn format_kv(&self) -> String;
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

kv_from_str!(u8, u32, u64, usize, i64, bool);

impl KvValue for f64 {
    fn parse_kv(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("must be finite".into())
        }
    }
    fn format_kv(&self) -> String {
        fmt_f64(*self)
    }
}

impl<T: KvValue> KvValue for Option<T> {
    fn parse_kv(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            T::parse_kv(s).map(Some)
        }
    }
    fn format_kv(&self) -> String {
        self.as_ref().map_or("none".to_string(), T::format_kv)
    }
}

impl<T: KvValue> KvValue for Vec<T> {
    fn parse_kv(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_kv(p.trim())).collect()
    }
    fn format_kv(&self) -> String {
        self.iter().map(T::format_kv).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($($key:literal => $($path:ident).+;)*) => {
        pub const CONFIG_KEYS: &[&str] = &[$($key),*];

        impl PipelineConfig {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($path).+ = KvValue::parse_kv(value).map_err(|message| ConfigError::BadValue {
                            key: key.to_string(),
                            message,
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Every key with its current value, in a fixed order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, KvValue::format_kv(&self.$($path).+))),*]
            }
        }
    };
}

config_keys! {
    "format_version" => format_version;
    "seed" => seed;
    "synth.n_users" => world.n_users;
    "synth.evacuation_rate" => world.evacuation_rate;
    "synth.queries_per_day" => world.queries_per_day;
    "synth.query_zipf_exponent" => world.query_zipf_exponent;
    "synth.query_zipf_cap" => world.query_zipf_cap;
    "synth.gps_per_day" => world.gps_per_day;
    "synth.gps_log_sigma" => world.gps_log_sigma;
    "synth.n_intents" => world.n_intents;
    "synth.n_districts" => world.n_districts;
    "synth.base_disaster_share" => world.base_disaster_share;
    "synth.evacuee_shift" => world.evacuee_shift;
    "synth.post_alert_shift" => world.post_alert_shift;
    "synth.keep_head" => world.keep_head;
    "synth.routine_district_rate" => world.routine_district_rate;
    "synth.bare_head_rate" => world.bare_head_rate;
    "synth.displacement_m" => world.displacement_m;
    "synth.gps_noise_m" => world.gps_noise_m;
    "synth.city_radius_m" => world.city_radius_m;
    "synth.query_start" => world.query_start;
    "windows.t0" => world.windows.t0;
    "windows.t_l" => world.windows.t_l;
    "windows.t_d" => world.windows.t_d;
    "windows.t_e" => world.windows.t_e;
    "windows.utc_offset_s" => world.windows.utc_offset_s;
    "session.timeout_s" => session.timeout_s;
    "session.min_len" => session.min_len;
    "session.max_len" => session.max_len;
    "corpus.vocab_size" => vocab_size;
    "corpus.val_sessions" => val_sessions;
    "ssqe.embed_dim" => ssqe.embed_dim;
    "ssqe.hidden_dim" => ssqe.hidden_dim;
    "ssqe.layers" => ssqe.layers;
    "ssqe.output_dim" => ssqe.output_dim;
    "smqe.session_hidden" => smqe.session_hidden;
    "smqe.session_layers" => smqe.session_layers;
    "train.ssqe.iterations" => ssqe_train.iterations;
    "train.ssqe.batch_size" => ssqe_train.batch_size;
    "train.ssqe.negatives" => ssqe_train.negatives;
    "train.ssqe.beta" => ssqe_train.beta;
    "train.ssqe.learning_rate" => ssqe_train.adam.learning_rate;
    "train.ssqe.clip_norm" => ssqe_train.clip_norm;
    "train.ssqe.eval_every" => ssqe_train.eval_every;
    "train.smqe.iterations" => smqe_train.iterations;
    "train.smqe.batch_size" => smqe_train.batch_size;
    "train.smqe.negatives" => smqe_train.negatives;
    "train.smqe.beta" => smqe_train.beta;
    "train.smqe.learning_rate" => smqe_train.adam.learning_rate;
    "train.smqe.clip_norm" => smqe_train.clip_norm;
    "train.smqe.eval_every" => smqe_train.eval_every;
    "train.smqe.joint" => smqe_train.joint;
    "anomaly.sigma_x_m" => anomaly.bandwidth.sigma_x_m;
    "anomaly.sigma_y_m" => anomaly.bandwidth.sigma_y_m;
    "anomaly.sigma_t_h" => anomaly.bandwidth.sigma_t_h;
    "anomaly.min_obs" => anomaly.min_obs;
    "anomaly.min_pre" => anomaly.min_pre;
    "anomaly.min_dis" => anomaly.min_dis;
    "anomaly.theta_hi" => theta_hi;
    "anomaly.theta_lo" => theta_lo;
    "features.onehot_cap" => onehot_cap;
    "features.multiple_k" => multiple_k;
    "rf.n_trees" => rf.n_trees;
    "rf.max_depth" => rf.max_depth;
    "rf.max_features" => rf.max_features;
    "rf.bootstrap" => rf.bootstrap;
    "eval.k_folds" => k_folds;
    "eval.methods" => methods;
    "sweep.theta_grid" => theta_grid;
    "sweep.methods" => sweep_methods;
}

impl PipelineConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(ConfigError::Version(self.format_version));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.stage_seed("synth"),
            ..self.world.clone()
        }
    }

    pub fn ssqe_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train-ssqe"),
            ..self.ssqe_train
        }
    }

    pub fn smqe_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("train-smqe"),
            ..self.smqe_train
        }
    }

    pub fn rf_config(&self) -> RfConfig {
        RfConfig {
            seed: self.stage_seed("rf"),
            ..self.rf.clone()
        }
    }
}
