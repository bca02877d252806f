//! JSONL logger on stderr. Verbosity comes from `EVACSENSE_LOG`
//! (`off`, `error`, `warn`, `info`, `debug`, `trace`; default `warn`).

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{LevelFilter, Log, Metadata, Record};

pub const LOG_ENV: &str = "EVACSENSE_LOG";

struct JsonLogger;

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let msg = record.args().to_string();
        // messages that are JSON objects are merged into the event
        let mut event = match serde_json::from_str::<serde_json::Value>(&msg) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => {
                let mut m = serde_json::Map::new();
                m.insert("msg".into(), msg.into());
                m
            }
        };
        event.insert("ts_ms".into(), ts_ms.into());
        event.insert("level".into(), record.level().as_str().to_lowercase().into());
        event.insert("target".into(), record.target().into());
        let line = serde_json::Value::Object(event).to_string();
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

pub fn init() {
    let level = std::env::var(LOG_ENV)
        .ok()
        .and_then(|v| v.parse::<LevelFilter>().ok())
        .unwrap_or(LevelFilter::Warn);
    if log::set_logger(&JsonLogger).is_ok() {
        log::set_max_level(level);
    }
}
