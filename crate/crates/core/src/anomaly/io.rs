use std::io::{BufRead, Write};

use serde::Deserialize;

use super::{AnomalyError, AnomalyResult, GpsRecord, HistBin, Label, ScoreParts};
use crate::corpus::{Ingested, LineError, LogFormat, OnError};
use crate::util::fmt_f64;

#[derive(Deserialize)]
struct JsonGps {
    user: String,
    ts: i64,
    lat: f64,
    lon: f64,
}

fn parse_gps_line(line: &str, format: LogFormat) -> Result<GpsRecord, String> {
    let (user, ts, lat, lon) = match format {
        LogFormat::Jsonl => {
            let r: JsonGps = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (r.user, r.ts, r.lat, r.lon)
        }
        LogFormat::Tsv => {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(format!("expected 4 tab-separated fields, got {}", f.len()));
            }
            let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|e| format!("bad {what} {s:?}: {e}"));
            let ts = f[1].trim().parse::<i64>().map_err(|e| format!("bad timestamp {:?}: {e}", f[1]))?;
            (f[0].to_string(), ts, num(f[2], "lat")?, num(f[3], "lon")?)
        }
    };
    if user.is_empty() {
        return Err("empty user id".into());
    }
    GpsRecord::new(user, ts, lat, lon).map_err(|e| e.to_string())
}

/// Reads GPS fixes (`{"user","ts","lat","lon"}` lines or `user⇥ts⇥lat⇥lon`)
/// sorted by `(user, timestamp)`.
pub fn ingest_gps_log<R: BufRead>(
    reader: R,
    format: LogFormat,
    on_error: OnError,
) -> Result<Ingested<GpsRecord>, AnomalyError> {
    let mut out = Ingested::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_gps_line(&line, format) {
            Ok(r) => out.records.push(r),
            Err(message) => match on_error {
                OnError::Abort => return Err(AnomalyError::Malformed { line: idx + 1, message }),
                OnError::Skip => out.skipped.push(LineError { line: idx + 1, message }),
            },
        }
    }
    out.records
        .sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    Ok(out)
}

pub fn write_gps_log<W: Write>(mut w: W, records: &[GpsRecord]) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({"user": r.user_id, "ts": r.timestamp, "lat": r.lat, "lon": r.lon});
        writeln!(w, "{line}")?;
    }
    Ok(())
}

const LABEL_HEADER: &str = "user\ttheta\tp_pre\ts_pre\tp_dis\tlabel";

/// `user⇥theta⇥p_pre⇥s_pre⇥p_dis⇥label`; unscored users carry `nan` values.
pub fn write_labels<W: Write>(mut w: W, results: &[AnomalyResult]) -> std::io::Result<()> {
    writeln!(w, "{LABEL_HEADER}")?;
    for r in results {
        let p = r.parts.unwrap_or(ScoreParts {
            p_pre: f64::NAN,
            s_pre: f64::NAN,
            p_dis: f64::NAN,
            theta: f64::NAN,
        });
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.user_id,
            fmt_f64(p.theta),
            fmt_f64(p.p_pre),
            fmt_f64(p.s_pre),
            fmt_f64(p.p_dis),
            r.label.as_str()
        )?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(reader: R) -> Result<Vec<AnomalyResult>, AnomalyError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (idx == 0 && line == LABEL_HEADER) {
            continue;
        }
        let bad = |message: String| AnomalyError::Malformed { line: idx + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("bad number {s:?}: {e}")));
        let (theta, p_pre, s_pre, p_dis) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        let label = Label::parse(f[5]).ok_or_else(|| bad(format!("bad label {:?}", f[5])))?;
        out.push(AnomalyResult {
            user_id: f[0].to_string(),
            parts: (!theta.is_nan()).then_some(ScoreParts {
                p_pre,
                s_pre,
                p_dis,
                theta,
            }),
            exclusion: None,
            label,
        });
    }
    Ok(out)
}

pub fn write_histogram<W: Write>(mut w: W, bins: &[HistBin]) -> std::io::Result<()> {
    writeln!(w, "bin_start\tbin_end\tcount")?;
    for b in bins {
        writeln!(w, "{}\t{}\t{}", fmt_f64(b.start), fmt_f64(b.end), b.count)?;
    }
    Ok(())
}
