//! Evacuation labels from GPS traces.
//!
//! Each user's positions during a learning period are turned into a kernel
//! density over local meters and time of day, conditioned on the
//! (day-of-week, hour) bucket. The density of the user's positions just
//! before the alert is compared with the density after it; users whose
//! post-alert positions are far less likely than usual get a high score.

mod io;

pub use io::{ingest_gps_log, read_labels, write_gps_log, write_histogram, write_labels};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
const HOURS_PER_WEEK: usize = 168;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("invalid coordinate: lat {lat}, lon {lon}")]
    BadCoordinate { lat: f64, lon: f64 },
    #[error("time windows must satisfy t0 < t_l < t_d < t_e")]
    BadWindows,
    #[error("bandwidths must be positive and finite")]
    BadBandwidth,
    #[error("thresholds must satisfy theta_hi > theta_lo > 0, got {hi} and {lo}")]
    BadThresholds { hi: f64, lo: f64 },
    #[error("target rate must lie in (0, 1), got {0}")]
    BadRate(f64),
    #[error("need at least {needed} scores to calibrate, got {got}")]
    TooFewScores { needed: usize, got: usize },
    #[error("all scores are equal; no separating threshold")]
    DegenerateScores,
    #[error("histogram bin width must be positive")]
    BadBinWidth,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for AnomalyError {
    fn from(e: std::io::Error) -> Self {
        AnomalyError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsRecord {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

impl GpsRecord {
    pub fn new(user_id: impl Into<String>, timestamp: i64, lat: f64, lon: f64) -> Result<Self, AnomalyError> {
        if !(lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)) {
            return Err(AnomalyError::BadCoordinate { lat, lon });
        }
        Ok(Self {
            user_id: user_id.into(),
            lat,
            lon,
            timestamp,
        })
    }
}

/// Period boundaries: learning `[t0, t_l)`, pre-alert `[t_l, t_d)`,
/// post-alert `[t_d, t_e]`. `utc_offset_s` shifts timestamps to local time
/// before day-of-week and hour are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindows {
    pub t0: i64,
    pub t_l: i64,
    pub t_d: i64,
    pub t_e: i64,
    pub utc_offset_s: i64,
}

impl Default for TimeWindows {
    /// 2018-06-01, 2018-07-01, 2018-07-07 01:30 and 2018-07-10, Japan time.
    fn default() -> Self {
        Self {
            t0: 1_527_778_800,
            t_l: 1_530_370_800,
            t_d: 1_530_894_600,
            t_e: 1_531_148_400,
            utc_offset_s: 9 * 3600,
        }
    }
}

impl TimeWindows {
    pub fn validate(&self) -> Result<(), AnomalyError> {
        if self.t0 < self.t_l && self.t_l < self.t_d && self.t_d < self.t_e {
            Ok(())
        } else {
            Err(AnomalyError::BadWindows)
        }
    }

    pub fn in_learn(&self, ts: i64) -> bool {
        (self.t0..self.t_l).contains(&ts)
    }

    pub fn in_pre(&self, ts: i64) -> bool {
        (self.t_l..self.t_d).contains(&ts)
    }

    pub fn in_dis(&self, ts: i64) -> bool {
        (self.t_d..=self.t_e).contains(&ts)
    }

    /// Same learning period, with the post-alert period replaced by the day
    /// starting at `day_start` and the pre-alert period ending there. Used to
    /// score an ordinary day for comparison.
    pub fn for_day(&self, day_start: i64) -> Result<Self, AnomalyError> {
        let w = Self {
            t_d: day_start,
            t_e: day_start + 86_400 - 1,
            ..*self
        };
        w.validate()?;
        Ok(w)
    }

    /// `(day of week with Monday = 0, hour of day, fractional hour of day)`
    /// in local time.
    pub fn local_time(&self, ts: i64) -> (usize, usize, f64) {
        let local = ts + self.utc_offset_s;
        let days = local.div_euclid(86_400);
        let secs = local.rem_euclid(86_400);
        // 1970-01-01 was a Thursday
        let dow = (days + 3).rem_euclid(7) as usize;
        (dow, (secs / 3600) as usize, secs as f64 / 3600.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBandwidth {
    pub sigma_x_m: f64,
    pub sigma_y_m: f64,
    pub sigma_t_h: f64,
}

impl Default for KernelBandwidth {
    fn default() -> Self {
        Self {
            sigma_x_m: 100.0,
            sigma_y_m: 100.0,
            sigma_t_h: 1.0,
        }
    }
}

impl KernelBandwidth {
    pub fn validate(&self) -> Result<(), AnomalyError> {
        let ok = [self.sigma_x_m, self.sigma_y_m, self.sigma_t_h]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(AnomalyError::BadBandwidth)
        }
    }

    /// `(2π)^{3/2} |Σ|^{1/2}`
    pub fn normalizer(&self) -> f64 {
        (2.0 * PI).powf(1.5) * self.sigma_x_m * self.sigma_y_m * self.sigma_t_h
    }
}

/// Equirectangular projection about a reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub lat0: f64,
    pub lon0: f64,
}

impl Projection {
    /// `(x east, y north)` in meters.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = EARTH_RADIUS_M * (lon - self.lon0).to_radians() * self.lat0.to_radians().cos();
        let y = EARTH_RADIUS_M * (lat - self.lat0).to_radians();
        (x, y)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One kernel center: local meters and fractional hour of day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

/// Which bucket a density value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketSource {
    Exact,
    SameHour,
    AllBuckets,
}

/// Exact per-user conditional kernel density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    pub projection: Projection,
    pub bandwidth: KernelBandwidth,
    pub windows: TimeWindows,
    /// Indexed by `dow * 24 + hour`.
    pub buckets: Vec<Vec<Center>>,
}

impl DensityModel {
    pub fn bucket(&self, dow: usize, hour: usize) -> &[Center] {
        &self.buckets[dow * 24 + hour]
    }

    pub fn total_centers(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    /// Density at local coordinates `(x, y)` meters and hour of day `t`,
    /// conditioned on bucket `(dow, hour)` with the fallback chain applied.
    pub fn density_at(&self, dow: usize, hour: usize, x: f64, y: f64, t: f64) -> (f64, BucketSource) {
        let bw = &self.bandwidth;
        let exact = self.bucket(dow, hour);
        let (sum, n, source) = if !exact.is_empty() {
            let (s, n) = kernel_sum(exact, bw, x, y, t);
            (s, n, BucketSource::Exact)
        } else {
            let (s, n) = kernel_sum((0..7).flat_map(|d| self.bucket(d, hour)), bw, x, y, t);
            if n > 0 {
                (s, n, BucketSource::SameHour)
            } else {
                let (s, n) = kernel_sum(self.buckets.iter().flatten(), bw, x, y, t);
                (s, n, BucketSource::AllBuckets)
            }
        };
        debug_assert!(n > 0, "fitted models hold at least one center");
        (sum / (n as f64 * bw.normalizer()), source)
    }
}

/// Why a user received no score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    TooFewLearn,
    TooFewPre,
    TooFewDis,
    ZeroSpread,
}

impl Exclusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Exclusion::TooFewLearn => "too_few_learn",
            Exclusion::TooFewPre => "too_few_pre",
            Exclusion::TooFewDis => "too_few_dis",
            Exclusion::ZeroSpread => "zero_spread",
        }
    }
}

/// Fits the density on the records that fall in the learning period. Users
/// with fewer than `min_obs` such records are excluded.
pub fn fit_density(
    records: &[GpsRecord],
    bandwidth: KernelBandwidth,
    windows: TimeWindows,
    min_obs: usize,
) -> Result<Result<DensityModel, Exclusion>, AnomalyError> {
    bandwidth.validate()?;
    windows.validate()?;
    let learn: Vec<&GpsRecord> = records.iter().filter(|r| windows.in_learn(r.timestamp)).collect();
    if learn.is_empty() || learn.len() < min_obs {
        return Ok(Err(Exclusion::TooFewLearn));
    }
    let projection = Projection {
        lat0: median(learn.iter().map(|r| r.lat).collect()),
        lon0: median(learn.iter().map(|r| r.lon).collect()),
    };
    let mut buckets = vec![Vec::new(); HOURS_PER_WEEK];
    for r in learn {
        let (dow, hour, t) = windows.local_time(r.timestamp);
        let (x, y) = projection.project(r.lat, r.lon);
        buckets[dow * 24 + hour].push(Center { x, y, t });
    }
    Ok(Ok(DensityModel {
        projection,
        bandwidth,
        windows,
        buckets,
    }))
}

fn circular_hours(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(24.0);
    d.min(24.0 - d)
}

fn kernel_sum<'a, I: IntoIterator<Item = &'a Center>>(centers: I, bw: &KernelBandwidth, x: f64, y: f64, t: f64) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for c in centers {
        let dx = (x - c.x) / bw.sigma_x_m;
        let dy = (y - c.y) / bw.sigma_y_m;
        let dt = circular_hours(t, c.t) / bw.sigma_t_h;
        s += (-0.5 * (dx * dx + dy * dy + dt * dt)).exp();
        n += 1;
    }
    (s, n)
}

/// Density at a position and time, using the matching (day, hour) bucket
/// and widening to the same hour on any day, then to every bucket, when the
/// bucket is empty.
pub fn eval_density_with_source(
    model: &DensityModel,
    lat: f64,
    lon: f64,
    timestamp: i64,
) -> Result<(f64, BucketSource), AnomalyError> {
    if !(lat.is_finite() && lon.is_finite()) {
        return Err(AnomalyError::BadCoordinate { lat, lon });
    }
    let (dow, hour, t) = model.windows.local_time(timestamp);
    let (x, y) = model.projection.project(lat, lon);
    Ok(model.density_at(dow, hour, x, y, t))
}

pub fn eval_density(model: &DensityModel, lat: f64, lon: f64, timestamp: i64) -> Result<f64, AnomalyError> {
    Ok(eval_density_with_source(model, lat, lon, timestamp)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub p_pre: f64,
    pub s_pre: f64,
    pub p_dis: f64,
    pub theta: f64,
}

/// `θ = (p_pre − p_dis) / s_pre` from two sets of density values, with
/// `s_pre` the population standard deviation.
pub fn theta_from_densities(pre: &[f64], dis: &[f64]) -> Result<ScoreParts, Exclusion> {
    if pre.is_empty() {
        return Err(Exclusion::TooFewPre);
    }
    if dis.is_empty() {
        return Err(Exclusion::TooFewDis);
    }
    let n = pre.len() as f64;
    let p_pre = pre.iter().sum::<f64>() / n;
    let s_pre = (pre.iter().map(|p| (p - p_pre).powi(2)).sum::<f64>() / n).sqrt();
    let p_dis = dis.iter().sum::<f64>() / dis.len() as f64;
    if !(s_pre > 0.0) || s_pre <= 1e-12 * p_pre.abs() {
        return Err(Exclusion::ZeroSpread);
    }
    Ok(ScoreParts {
        p_pre,
        s_pre,
        p_dis,
        theta: (p_pre - p_dis) / s_pre,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    pub bandwidth: KernelBandwidth,
    pub min_obs: usize,
    pub min_pre: usize,
    pub min_dis: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            bandwidth: KernelBandwidth::default(),
            min_obs: 50,
            min_pre: 10,
            min_dis: 5,
        }
    }
}

/// Scores one user from the model and their pre- and post-alert records.
pub fn anomaly_score(
    model: &DensityModel,
    pre: &[GpsRecord],
    dis: &[GpsRecord],
    min_pre: usize,
    min_dis: usize,
) -> Result<Result<ScoreParts, Exclusion>, AnomalyError> {
    if pre.is_empty() || pre.len() < min_pre {
        return Ok(Err(Exclusion::TooFewPre));
    }
    if dis.is_empty() || dis.len() < min_dis {
        return Ok(Err(Exclusion::TooFewDis));
    }
    let dens = |rs: &[GpsRecord]| {
        rs.iter()
            .map(|r| eval_density(model, r.lat, r.lon, r.timestamp))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(theta_from_densities(&dens(pre)?, &dens(dis)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Evacuated,
    Stayed,
    Excluded,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Evacuated => "1",
            Label::Stayed => "0",
            Label::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Label::Evacuated),
            "0" => Some(Label::Stayed),
            "excluded" => Some(Label::Excluded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub user_id: String,
    /// `None` when the user could not be scored.
    pub parts: Option<ScoreParts>,
    pub exclusion: Option<Exclusion>,
    pub label: Label,
}

impl AnomalyResult {
    pub fn theta(&self) -> Option<f64> {
        self.parts.map(|p| p.theta)
    }
}

/// Fits and scores every user in `records` (any order). Results are sorted
/// by user id; unscorable users carry their exclusion reason and label
/// `Excluded`.
pub fn score_users(
    records: &[GpsRecord],
    windows: &TimeWindows,
    cfg: &AnomalyConfig,
) -> Result<Vec<AnomalyResult>, AnomalyError> {
    windows.validate()?;
    let mut by_user: BTreeMap<&str, Vec<GpsRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.as_str()).or_default().push(r.clone());
    }
    let mut out = Vec::with_capacity(by_user.len());
    for (user, recs) in by_user {
        let scored = match fit_density(&recs, cfg.bandwidth, *windows, cfg.min_obs)? {
            Err(e) => Err(e),
            Ok(model) => {
                let pre: Vec<GpsRecord> = recs.iter().filter(|r| windows.in_pre(r.timestamp)).cloned().collect();
                let dis: Vec<GpsRecord> = recs.iter().filter(|r| windows.in_dis(r.timestamp)).cloned().collect();
                anomaly_score(&model, &pre, &dis, cfg.min_pre, cfg.min_dis)?
            }
        };
        out.push(match scored {
            Ok(parts) => AnomalyResult {
                user_id: user.to_string(),
                parts: Some(parts),
                exclusion: None,
                label: Label::Excluded,
            },
            Err(e) => AnomalyResult {
                user_id: user.to_string(),
                parts: None,
                exclusion: Some(e),
                label: Label::Excluded,
            },
        });
    }
    Ok(out)
}

pub fn label_for(theta: f64, theta_hi: f64, theta_lo: f64) -> Label {
    if theta > theta_hi {
        Label::Evacuated
    } else if theta.abs() < theta_lo {
        Label::Stayed
    } else {
        Label::Excluded
    }
}

/// Assigns labels in place: `θ > θ_hi` evacuated, `|θ| < θ_lo` stayed,
/// anything else (including unscored users) excluded.
pub fn label_users(results: &mut [AnomalyResult], theta_hi: f64, theta_lo: f64) -> Result<(), AnomalyError> {
    if !(theta_lo > 0.0 && theta_hi > theta_lo) {
        return Err(AnomalyError::BadThresholds {
            hi: theta_hi,
            lo: theta_lo,
        });
    }
    for r in results {
        r.label = match r.theta() {
            Some(t) => label_for(t, theta_hi, theta_lo),
            None => Label::Excluded,
        };
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data at `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Threshold whose exceedance rate matches `target_rate`: the empirical
/// `1 − target_rate` quantile with linear interpolation.
pub fn calibrate_threshold(thetas: &[f64], target_rate: f64) -> Result<f64, AnomalyError> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(AnomalyError::BadRate(target_rate));
    }
    let needed = (1.0 / target_rate).ceil() as usize;
    let mut sorted: Vec<f64> = thetas.iter().copied().filter(|t| t.is_finite()).collect();
    if sorted.len() < needed {
        return Err(AnomalyError::TooFewScores {
            needed,
            got: sorted.len(),
        });
    }
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(AnomalyError::DegenerateScores);
    }
    Ok(quantile_sorted(&sorted, 1.0 - target_rate))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// Fixed-width histogram over the finite scores, with contiguous bins
/// `[k·w, (k+1)·w)` from the lowest to the highest occupied bin.
pub fn score_histogram(thetas: &[f64], bin_width: f64) -> Result<Vec<HistBin>, AnomalyError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(AnomalyError::BadBinWidth);
    }
    let keys: Vec<i64> = thetas
        .iter()
        .filter(|t| t.is_finite())
        .map(|t| (t / bin_width).floor() as i64)
        .collect();
    let (Some(&lo), Some(&hi)) = (keys.iter().min(), keys.iter().max()) else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for k in keys {
        counts[(k - lo) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let k = lo + i as i64;
            HistBin {
                start: k as f64 * bin_width,
                end: (k + 1) as f64 * bin_width,
                count,
            }
        })
        .collect())
}
