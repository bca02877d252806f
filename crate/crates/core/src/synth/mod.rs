//! Synthetic world with planted search intents and evacuations.
//!
//! Every user gets home, work and leisure anchors and a weekly routine that
//! GPS fixes follow. Queries come in sessions; each session draws one intent
//! and builds its queries from that intent's head and tail words, with a
//! district name on every disaster query and on some others. Evacuees mix
//! extra disaster sessions into their pre-alert searches and are displaced
//! during the post-alert period.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{AnomalyError, GpsRecord, TimeWindows, EARTH_RADIUS_M};
use crate::classify::auc;
use crate::corpus::{QueryRecord, Session};
use crate::util::{derive_indexed, derive_seed, fmt_f64, rng_from};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error(transparent)]
    Windows(#[from] AnomalyError),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("unknown user id {0:?}")]
    UnknownUser(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

pub struct Intent {
    pub name: &'static str,
    pub heads: &'static [&'static str],
    pub tails: &'static [&'static str],
}

/// Intent 0 is the disaster intent.
pub const INTENTS: [Intent; 6] = [
    Intent {
        name: "disaster",
        heads: &["flood", "evacuation", "shelter", "heavy rain", "river level", "landslide", "dam release", "rain warning"],
        tails: &["map", "info", "now", "alert", "status", "hazard", "order", "update"],
    },
    Intent {
        name: "transit",
        heads: &["train", "bus", "jr line", "taxi", "highway", "ferry"],
        tails: &["timetable", "delay", "fare", "schedule", "station", "last run"],
    },
    Intent {
        name: "shopping",
        heads: &["supermarket", "drugstore", "mall", "outlet", "bakery", "electronics"],
        tails: &["sale", "hours", "coupon", "flyer", "price", "points"],
    },
    Intent {
        name: "entertainment",
        heads: &["movie", "karaoke", "baseball", "concert", "anime", "idol"],
        tails: &["tickets", "review", "lineup", "news", "ranking", "episode"],
    },
    Intent {
        name: "food",
        heads: &["ramen", "sushi", "cafe", "udon", "yakiniku", "curry"],
        tails: &["recipe", "lunch", "best", "delivery", "menu", "calories"],
    },
    Intent {
        name: "health",
        heads: &["clinic", "dentist", "pharmacy", "pediatrics", "eye doctor", "massage"],
        tails: &["booking", "open today", "fees", "symptoms", "closed", "walk in"],
    },
];

const SYLLABLES: [&str; 20] = [
    "ka", "ma", "bi", "ku", "ra", "shi", "ki", "to", "na", "mi", "ta", "su", "ho", "ne", "ya", "wa", "fu", "se", "chi", "go",
];

/// Centre of the synthetic city.
pub const CITY_LAT: f64 = 34.585;
pub const CITY_LON: f64 = 133.772;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_users: usize,
    pub evacuation_rate: f64,
    /// Population mean of the per-user daily query rate.
    pub queries_per_day: f64,
    /// Per-user rates follow a Zipf law on `1..=zipf_cap`, rescaled.
    pub query_zipf_exponent: f64,
    pub query_zipf_cap: u64,
    /// Population mean of daily GPS fixes; per-user rates are log-normal.
    pub gps_per_day: f64,
    pub gps_log_sigma: f64,
    pub n_intents: usize,
    pub n_districts: usize,
    /// Weight of the disaster intent in everyone's routine mixture.
    pub base_disaster_share: f64,
    /// Mixing strength of disaster sessions into evacuees' pre-alert searches.
    pub evacuee_shift: f64,
    /// Mixing strength of disaster sessions for everyone after the alert.
    pub post_alert_shift: f64,
    /// Chance a follow-up query keeps the session's head word.
    pub keep_head: f64,
    /// Chance a non-disaster session names a district.
    pub routine_district_rate: f64,
    /// Chance a query is just the head word.
    pub bare_head_rate: f64,
    pub displacement_m: f64,
    pub gps_noise_m: f64,
    /// Radius (m) around the city centre for anchors.
    pub city_radius_m: f64,
    /// Queries are generated from this time to `t_e`.
    pub query_start: i64,
    pub windows: TimeWindows,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let windows = TimeWindows::default();
        Self {
            n_users: 1000,
            evacuation_rate: 0.046,
            queries_per_day: 12.0,
            query_zipf_exponent: 1.0,
            query_zipf_cap: 50,
            gps_per_day: 40.0,
            gps_log_sigma: 0.5,
            n_intents: 4,
            n_districts: 40,
            base_disaster_share: 0.1,
            evacuee_shift: 0.4,
            post_alert_shift: 0.5,
            keep_head: 0.6,
            routine_district_rate: 0.2,
            bare_head_rate: 0.08,
            displacement_m: 5000.0,
            gps_noise_m: 30.0,
            city_radius_m: 6000.0,
            query_start: windows.t_l,
            windows,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.windows.validate()?;
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if !(self.evacuation_rate > 0.0 && self.evacuation_rate < 1.0) {
            return bad("evacuation_rate must lie in (0, 1)");
        }
        if !(self.queries_per_day > 0.0 && self.gps_per_day > 0.0) {
            return bad("volume means must be positive");
        }
        if self.query_zipf_cap == 0 || !(self.query_zipf_exponent > 0.0) || !(self.gps_log_sigma >= 0.0) {
            return bad("bad volume law parameters");
        }
        if !(2..=INTENTS.len()).contains(&self.n_intents) {
            return bad("n_intents must be between 2 and 6");
        }
        if self.n_districts == 0 || self.n_districts > 300 {
            return bad("n_districts must be between 1 and 300");
        }
        for (name, p) in [
            ("base_disaster_share", self.base_disaster_share),
            ("evacuee_shift", self.evacuee_shift),
            ("post_alert_shift", self.post_alert_shift),
            ("keep_head", self.keep_head),
            ("routine_district_rate", self.routine_district_rate),
            ("bare_head_rate", self.bare_head_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.displacement_m >= 0.0 && self.gps_noise_m >= 0.0 && self.city_radius_m > 0.0) {
            return bad("distances must be non-negative");
        }
        if !(self.query_start < self.windows.t_d && self.query_start >= self.windows.t0) {
            return bad("query_start must lie in [t0, t_d)");
        }
        Ok(())
    }

    pub fn intents(&self) -> &[Intent] {
        &INTENTS[..self.n_intents]
    }

    pub fn evacuee_count(&self) -> usize {
        ((self.n_users as f64 * self.evacuation_rate).round() as usize).clamp(1, self.n_users - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub evacuated: bool,
    pub home_lat: f64,
    pub home_lon: f64,
    pub home_district: String,
    /// Routine intent weights, in intent order.
    pub intent_mixture: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intents: Vec<String>,
    pub users: Vec<UserTruth>,
}

impl GroundTruth {
    pub fn evacuees(&self) -> BTreeSet<&str> {
        self.users.iter().filter(|u| u.evacuated).map(|u| u.user_id.as_str()).collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# intents: {}", self.intents.join(","))?;
        writeln!(w, "user\tevacuated\thome_lat\thome_lon\thome_district\tintent_mixture")?;
        for u in &self.users {
            let mix: Vec<String> = u.intent_mixture.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                u.user_id,
                u.evacuated as u8,
                fmt_f64(u.home_lat),
                fmt_f64(u.home_lon),
                u.home_district,
                mix.join(",")
            )?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self, SynthError> {
        let mut intents = Vec::new();
        let mut users = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = |message: String| SynthError::Malformed { line: idx + 1, message };
            if let Some(rest) = line.strip_prefix("# intents: ") {
                intents = rest.split(',').map(str::to_string).collect();
                continue;
            }
            if line.starts_with("user\t") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("bad number {s:?}: {e}")));
            users.push(UserTruth {
                user_id: f[0].to_string(),
                evacuated: match f[1] {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("bad flag {other:?}"))),
                },
                home_lat: num(f[2])?,
                home_lon: num(f[3])?,
                home_district: f[4].to_string(),
                intent_mixture: f[5].split(',').map(num).collect::<Result<_, _>>()?,
            });
        }
        Ok(Self { intents, users })
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub queries: Vec<QueryRecord>,
    pub gps: Vec<GpsRecord>,
    pub truth: GroundTruth,
    /// Generator sessions, including single-query ones, in user then time
    /// order.
    pub sessions: Vec<Session>,
    /// Intent index of each session.
    pub session_intents: Vec<usize>,
    pub districts: Vec<String>,
}

/// `n` distinct two- or three-syllable place names.
pub fn district_names(n: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_from(derive_seed(seed, "districts"));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(2..=3);
        let name: String = (0..k).map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty")).collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn offset_to_latlon(x: f64, y: f64) -> (f64, f64) {
    let lat = CITY_LAT + (y / EARTH_RADIUS_M).to_degrees();
    let lon = CITY_LON + (x / (EARTH_RADIUS_M * CITY_LAT.to_radians().cos())).to_degrees();
    (lat, lon)
}

fn uniform_disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    (r * a.cos(), r * a.sin())
}

fn lerp(a: (f64, f64), b: (f64, f64), w: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * w, a.1 + (b.1 - a.1) * w)
}

struct Anchors {
    home: (f64, f64),
    work: (f64, f64),
    leisure: (f64, f64),
}

impl Anchors {
    /// Routine position (city meters) at local weekday `dow` (Monday 0)
    /// and fractional hour `h`.
    fn position(&self, dow: usize, h: f64) -> (f64, f64) {
        match dow {
            0..=4 => match h {
                h if h < 8.0 => self.home,
                h if h < 9.0 => lerp(self.home, self.work, h - 8.0),
                h if h < 17.0 => self.work,
                h if h < 18.0 => lerp(self.work, self.home, h - 17.0),
                _ => self.home,
            },
            5 if (13.0..17.0).contains(&h) => self.leisure,
            _ => self.home,
        }
    }
}

struct UserPlan {
    id: String,
    evacuated: bool,
    anchors: Anchors,
    home_district: usize,
    mixture: Vec<f64>,
    query_rate: f64,
    gps_rate: f64,
    shift_dir: f64,
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn local_midnight(ts: i64, offset: i64) -> i64 {
    (ts + offset).div_euclid(86_400) * 86_400 - offset
}

struct UserOutput {
    queries: Vec<QueryRecord>,
    gps: Vec<GpsRecord>,
    sessions: Vec<Session>,
    intents: Vec<usize>,
}

const SLOT_S: i64 = 20 * 60;
const MIN_FIXES_PER_DAY: f64 = 24.0;
const WAKE_H: i64 = 7;

fn gen_user(cfg: &WorldConfig, plan: &UserPlan, districts: &[String], rng: &mut ChaCha8Rng) -> UserOutput {
    let w = cfg.windows;
    let mut out = UserOutput {
        queries: Vec::new(),
        gps: Vec::new(),
        sessions: Vec::new(),
        intents: Vec::new(),
    };
    let noise = Normal::new(0.0, cfg.gps_noise_m.max(1e-9)).expect("valid sigma");

    // GPS: a fixed daily grid of fixes with small jitter, at least hourly
    let per_day = plan.gps_rate.round().max(MIN_FIXES_PER_DAY) as i64;
    let step = 86_400 / per_day;
    let phase = rng.gen_range(0..step);
    let (dx, dy) = (cfg.displacement_m * plan.shift_dir.cos(), cfg.displacement_m * plan.shift_dir.sin());
    let mut day = local_midnight(w.t0, w.utc_offset_s);
    while day <= w.t_e {
        for i in 0..per_day {
            let ts = day + phase + i * step + rng.gen_range(-60..=60);
            if ts < w.t0 || ts > w.t_e {
                continue;
            }
            let (dow, _, h) = w.local_time(ts);
            let (mut x, mut y) = plan.anchors.position(dow, h);
            if plan.evacuated && w.in_dis(ts) {
                x += dx;
                y += dy;
            }
            x += noise.sample(rng);
            y += noise.sample(rng);
            let (lat, lon) = offset_to_latlon(x, y);
            out.gps.push(GpsRecord::new(plan.id.clone(), ts, lat, lon).expect("city coordinates are valid"));
        }
        day += 86_400;
    }

    // Queries: sessions in distinct 20-minute slots of the waking day
    let intents = cfg.intents();
    let volume = Poisson::new(plan.query_rate).expect("positive rate");
    let slots_per_day = ((24 - WAKE_H) * 3600 / SLOT_S) as usize;
    let mut day = local_midnight(cfg.query_start, w.utc_offset_s);
    while day <= w.t_e {
        let mut remaining = volume.sample(rng) as usize;
        let mut lengths = Vec::new();
        while remaining > 0 && lengths.len() < slots_per_day {
            let len = rng.gen_range(1..=6).min(remaining);
            lengths.push(len);
            remaining -= len;
        }
        let mut slots: Vec<usize> = (0..slots_per_day).collect();
        slots.shuffle(rng);
        let mut chosen: Vec<usize> = slots[..lengths.len()].to_vec();
        chosen.sort_unstable();
        for (slot, len) in chosen.into_iter().zip(lengths) {
            let start = day + WAKE_H * 3600 + slot as i64 * SLOT_S + rng.gen_range(0..300);
            if start < cfg.query_start || start > w.t_e {
                continue;
            }
            let shift = if start >= w.t_d {
                cfg.post_alert_shift
            } else if plan.evacuated && start >= w.t_l {
                cfg.evacuee_shift
            } else {
                0.0
            };
            let intent = if rng.gen::<f64>() < shift {
                0
            } else {
                sample_index(rng, &plan.mixture)
            };
            let spec = &intents[intent];
            let district = if intent == 0 || rng.gen::<f64>() < cfg.routine_district_rate {
                let d = if rng.gen::<f64>() < 0.6 {
                    plan.home_district
                } else {
                    rng.gen_range(0..districts.len())
                };
                Some(districts[d].as_str())
            } else {
                None
            };
            let mut head = *spec.heads.choose(rng).expect("non-empty");
            let mut ts = start;
            let mut session = Session {
                user_id: plan.id.clone(),
                queries: Vec::with_capacity(len),
                timestamps: Vec::with_capacity(len),
            };
            for k in 0..len {
                if k > 0 {
                    ts += rng.gen_range(10..=110);
                    if rng.gen::<f64>() >= cfg.keep_head {
                        head = *spec.heads.choose(rng).expect("non-empty");
                    }
                }
                let tail = *spec.tails.choose(rng).expect("non-empty");
                let text = match district {
                    _ if rng.gen::<f64>() < cfg.bare_head_rate => head.to_string(),
                    Some(d) => format!("{head} {tail} {d}"),
                    None => format!("{head} {tail}"),
                };
                let rec = QueryRecord::new(plan.id.clone(), ts, &text).expect("template text is non-empty");
                session.queries.push(rec.text.clone());
                session.timestamps.push(ts);
                out.queries.push(rec);
            }
            out.sessions.push(session);
            out.intents.push(intent);
        }
        day += 86_400;
    }
    out
}

/// Generates queries, GPS fixes and ground truth. Output depends only on
/// the config.
pub fn gen_world(cfg: &WorldConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let districts = district_names(cfg.n_districts, cfg.seed);
    let width = cfg.n_users.to_string().len().max(4);
    let mut order: Vec<usize> = (0..cfg.n_users).collect();
    order.shuffle(&mut rng_from(derive_seed(cfg.seed, "evacuees")));
    let evacuees: BTreeSet<usize> = order[..cfg.evacuee_count()].iter().copied().collect();

    let zipf = Zipf::new(cfg.query_zipf_cap, cfg.query_zipf_exponent).map_err(|e| SynthError::Config(e.to_string()))?;
    let zipf_mean = {
        let norm: f64 = (1..=cfg.query_zipf_cap).map(|k| (k as f64).powf(-cfg.query_zipf_exponent)).sum();
        (1..=cfg.query_zipf_cap)
            .map(|k| (k as f64).powf(1.0 - cfg.query_zipf_exponent))
            .sum::<f64>()
            / norm
    };
    let gps_law = rand_distr::LogNormal::new(-0.5 * cfg.gps_log_sigma.powi(2), cfg.gps_log_sigma)
        .map_err(|e| SynthError::Config(e.to_string()))?;

    let mut world = World {
        queries: Vec::new(),
        gps: Vec::new(),
        truth: GroundTruth {
            intents: cfg.intents().iter().map(|i| i.name.to_string()).collect(),
            users: Vec::with_capacity(cfg.n_users),
        },
        sessions: Vec::new(),
        session_intents: Vec::new(),
        districts: districts.clone(),
    };
    for u in 0..cfg.n_users {
        let mut rng = rng_from(derive_indexed(derive_seed(cfg.seed, "user"), u as u64));
        let home = uniform_disc(&mut rng, cfg.city_radius_m);
        let work = uniform_disc(&mut rng, cfg.city_radius_m);
        let leisure = uniform_disc(&mut rng, cfg.city_radius_m);
        // routine mixture: fixed disaster share, the rest split at random
        let mut rest: Vec<f64> = (1..cfg.n_intents).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let total: f64 = rest.iter().sum();
        rest.iter_mut().for_each(|v| *v *= (1.0 - cfg.base_disaster_share) / total);
        let mut mixture = vec![cfg.base_disaster_share];
        mixture.extend(rest);
        let plan = UserPlan {
            id: format!("u{u:0width$}"),
            evacuated: evacuees.contains(&u),
            anchors: Anchors { home, work, leisure },
            home_district: rng.gen_range(0..districts.len()),
            mixture,
            query_rate: cfg.queries_per_day * zipf.sample(&mut rng) / zipf_mean,
            gps_rate: cfg.gps_per_day * gps_law.sample(&mut rng),
            shift_dir: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let out = gen_user(cfg, &plan, &districts, &mut rng);
        let (home_lat, home_lon) = offset_to_latlon(home.0, home.1);
        world.truth.users.push(UserTruth {
            user_id: plan.id.clone(),
            evacuated: plan.evacuated,
            home_lat,
            home_lon,
            home_district: districts[plan.home_district].clone(),
            intent_mixture: plan.mixture.clone(),
        });
        world.queries.extend(out.queries);
        world.gps.extend(out.gps);
        world.sessions.extend(out.sessions);
        world.session_intents.extend(out.intents);
    }
    Ok(world)
}

/// Index of the intent whose head words start `query`, if any.
pub fn intent_of(query: &str, n_intents: usize) -> Option<usize> {
    INTENTS[..n_intents]
        .iter()
        .position(|i| i.heads.iter().any(|h| query == *h || query.starts_with(&format!("{h} "))))
}

/// Every pair of intent head words, tagged `same` when both belong to one
/// intent and `cross` otherwise.
pub fn category_word_pairs(n_intents: usize) -> Vec<(String, String, String)> {
    let words: Vec<(usize, &str)> = INTENTS[..n_intents.min(INTENTS.len())]
        .iter()
        .enumerate()
        .flat_map(|(i, it)| it.heads.iter().map(move |h| (i, *h)))
        .collect();
    let mut out = Vec::new();
    for (a, &(ia, wa)) in words.iter().enumerate() {
        for &(ib, wb) in &words[a + 1..] {
            let group = if ia == ib { "same" } else { "cross" };
            out.push((wa.to_string(), wb.to_string(), group.to_string()));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    /// `None` when the scored users are all of one true class.
    pub auc: Option<f64>,
}

/// Confusion counts of `score > cutoff` against the true evacuation flags,
/// and the AUC of the raw scores.
pub fn oracle_report(scores: &[(String, f64)], cutoff: f64, truth: &GroundTruth) -> Result<OracleReport, SynthError> {
    let flags: HashMap<&str, bool> = truth.users.iter().map(|u| (u.user_id.as_str(), u.evacuated)).collect();
    let mut r = OracleReport {
        n: scores.len(),
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        accuracy: 0.0,
        auc: None,
    };
    let mut ys = Vec::with_capacity(scores.len());
    for (u, s) in scores {
        let y = *flags.get(u.as_str()).ok_or_else(|| SynthError::UnknownUser(u.clone()))?;
        match (*s > cutoff, y) {
            (true, true) => r.tp += 1,
            (true, false) => r.fp += 1,
            (false, false) => r.tn += 1,
            (false, true) => r.fn_ += 1,
        }
        ys.push(y);
    }
    r.accuracy = (r.tp + r.tn) as f64 / r.n.max(1) as f64;
    let raw: Vec<f64> = scores.iter().map(|s| s.1).collect();
    r.auc = auc(&raw, &ys).ok();
    Ok(r)
}

#[cfg(test)]
mod tests;
