use super::*;
use crate::anomaly::Projection;
use crate::corpus::{sessionize, SessionConfig};

fn small(seed: u64) -> WorldConfig {
    WorldConfig {
        n_users: 80,
        seed,
        ..WorldConfig::default()
    }
}

fn meters(p: &Projection, r: &GpsRecord) -> (f64, f64) {
    p.project(r.lat, r.lon)
}

#[test]
fn evacuee_count_is_rounded_rate() {
    for (n, want) in [(1000, 46), (10_000, 460), (80, 4), (10, 1)] {
        let cfg = WorldConfig {
            n_users: n,
            ..WorldConfig::default()
        };
        assert_eq!(cfg.evacuee_count(), want);
    }
    let w = gen_world(&small(3)).unwrap();
    assert_eq!(w.truth.evacuees().len(), 4);
    assert_eq!(w.truth.users.len(), 80);
}

#[test]
fn evacuee_draw_depends_on_seed() {
    let a = gen_world(&small(1)).unwrap();
    let b = gen_world(&small(2)).unwrap();
    assert_ne!(a.truth.evacuees(), b.truth.evacuees());
}

#[test]
fn volumes_match_configured_means() {
    let cfg = WorldConfig {
        n_users: 300,
        seed: 7,
        ..WorldConfig::default()
    };
    let w = gen_world(&cfg).unwrap();
    let query_days = (cfg.windows.t_e - cfg.query_start) as f64 / 86_400.0;
    let per_day = w.queries.len() as f64 / cfg.n_users as f64 / query_days;
    assert!((per_day - 12.0).abs() < 12.0 * 0.15, "queries/day {per_day}");
    let gps_days = (cfg.windows.t_e - cfg.windows.t0) as f64 / 86_400.0;
    let fixes = w.gps.len() as f64 / cfg.n_users as f64 / gps_days;
    // rates below the hourly floor are raised to it
    assert!(fixes > 40.0 && fixes < 48.0, "fixes/day {fixes}");
}

#[test]
fn same_seed_same_world() {
    let a = gen_world(&small(5)).unwrap();
    let b = gen_world(&small(5)).unwrap();
    assert_eq!(a.queries, b.queries);
    assert_eq!(a.gps, b.gps);
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.sessions, b.sessions);
}

#[test]
fn sessionize_recovers_generator_sessions() {
    let w = gen_world(&small(11)).unwrap();
    let cfg = SessionConfig {
        timeout_s: 120,
        min_len: 1,
        max_len: usize::MAX,
    };
    assert_eq!(sessionize(&w.queries, &cfg), w.sessions);
    assert_eq!(w.sessions.len(), w.session_intents.len());
}

#[test]
fn every_query_has_its_session_intent() {
    let cfg = small(4);
    let w = gen_world(&cfg).unwrap();
    for (s, &i) in w.sessions.iter().zip(&w.session_intents) {
        for q in &s.queries {
            assert_eq!(intent_of(q, cfg.n_intents), Some(i), "{q}");
        }
        if i == 0 {
            for q in s.queries.iter().filter(|q| !INTENTS[0].heads.contains(&q.as_str())) {
                assert!(w.districts.iter().any(|d| q.ends_with(d.as_str())), "{q}");
            }
        }
    }
}

#[test]
fn only_evacuees_move_during_the_alert() {
    // distance from each post-alert fix to the nearest learning-window fix
    let cfg = small(9);
    let w = gen_world(&cfg).unwrap();
    let proj = Projection {
        lat0: CITY_LAT,
        lon0: CITY_LON,
    };
    let evac = w.truth.evacuees();
    let mut by_user: HashMap<&str, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = HashMap::new();
    for r in &w.gps {
        let e = by_user.entry(r.user_id.as_str()).or_default();
        if cfg.windows.in_learn(r.timestamp) {
            e.0.push(meters(&proj, r));
        } else if cfg.windows.in_dis(r.timestamp) {
            e.1.push(meters(&proj, r));
        }
    }
    for (user, (learn, dis)) in by_user {
        assert!(!dis.is_empty());
        let mut nearest: Vec<f64> = dis
            .iter()
            .map(|p| {
                learn
                    .iter()
                    .map(|q| (p.0 - q.0).hypot(p.1 - q.1))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        nearest.sort_by(f64::total_cmp);
        let median = nearest[nearest.len() / 2];
        if evac.contains(user) {
            assert!(median > 1000.0, "{user} median {median}");
        } else {
            // every fix sits near some routine position seen before; commute
            // legs add up to a minute of travel on top of the noise
            assert!(median < 3.0 * cfg.gps_noise_m, "{user} median {median}");
            assert!(nearest[nearest.len() - 1] < 400.0, "{user} max {}", nearest[nearest.len() - 1]);
        }
    }
}

#[test]
fn evacuees_search_disaster_more_before_the_alert() {
    let cfg = WorldConfig {
        n_users: 400,
        evacuation_rate: 0.25,
        seed: 2,
        ..WorldConfig::default()
    };
    let w = gen_world(&cfg).unwrap();
    let evac = w.truth.evacuees();
    let share = |want_evac: bool| {
        let (mut dis, mut all) = (0usize, 0usize);
        for (s, &i) in w.sessions.iter().zip(&w.session_intents) {
            let t = s.timestamps[0];
            if evac.contains(s.user_id.as_str()) == want_evac && t >= cfg.windows.t_l && t < cfg.windows.t_d {
                all += 1;
                dis += (i == 0) as usize;
            }
        }
        dis as f64 / all as f64
    };
    let (e, n) = (share(true), share(false));
    // expected: base + shift·(1 − base) versus base
    let want = cfg.base_disaster_share + cfg.evacuee_shift * (1.0 - cfg.base_disaster_share);
    assert!((n - cfg.base_disaster_share).abs() < 0.03, "non-evacuee share {n}");
    assert!((e - want).abs() < 0.05, "evacuee share {e} want {want}");
}

#[test]
fn truth_tsv_roundtrip() {
    let w = gen_world(&small(6)).unwrap();
    let mut buf = Vec::new();
    w.truth.write_tsv(&mut buf).unwrap();
    let back = GroundTruth::read_tsv(buf.as_slice()).unwrap();
    assert_eq!(back.intents, w.truth.intents);
    assert_eq!(back.evacuees(), w.truth.evacuees());
    for (a, b) in back.users.iter().zip(&w.truth.users) {
        assert_eq!(a.home_district, b.home_district);
        assert!((a.home_lat - b.home_lat).abs() < 1e-12);
    }
    let err = GroundTruth::read_tsv("u1\tmaybe\t0\t0\tx\t1".as_bytes()).unwrap_err();
    assert!(matches!(err, SynthError::Malformed { line: 1, .. }));
}

#[test]
fn bad_configs_rejected() {
    for cfg in [
        WorldConfig {
            n_users: 0,
            ..WorldConfig::default()
        },
        WorldConfig {
            evacuation_rate: 1.0,
            ..WorldConfig::default()
        },
        WorldConfig {
            n_intents: 7,
            ..WorldConfig::default()
        },
        WorldConfig {
            keep_head: 1.5,
            ..WorldConfig::default()
        },
    ] {
        assert!(matches!(gen_world(&cfg), Err(SynthError::Config(_))));
    }
}

#[test]
fn district_names_distinct() {
    let d = district_names(300, 1);
    assert_eq!(d.iter().collect::<BTreeSet<_>>().len(), 300);
    assert_eq!(d, district_names(300, 1));
}

#[test]
fn intent_of_matches_heads_only() {
    assert_eq!(intent_of("flood", 4), Some(0));
    assert_eq!(intent_of("heavy rain alert", 4), Some(0));
    assert_eq!(intent_of("train delay", 4), Some(1));
    assert_eq!(intent_of("trainee", 4), None);
    assert_eq!(intent_of("ramen menu", 4), None);
    assert_eq!(intent_of("ramen menu", 5), Some(4));
}

#[test]
fn word_pairs_cover_every_combination() {
    let pairs = category_word_pairs(4);
    let n = INTENTS[..4].iter().map(|i| i.heads.len()).sum::<usize>();
    assert_eq!(pairs.len(), n * (n - 1) / 2);
    let same: usize = INTENTS[..4].iter().map(|i| i.heads.len() * (i.heads.len() - 1) / 2).sum();
    assert_eq!(pairs.iter().filter(|p| p.2 == "same").count(), same);
}

fn truth_of(flags: &[bool]) -> GroundTruth {
    GroundTruth {
        intents: vec![],
        users: flags
            .iter()
            .enumerate()
            .map(|(i, &e)| UserTruth {
                user_id: format!("u{i}"),
                evacuated: e,
                home_lat: CITY_LAT,
                home_lon: CITY_LON,
                home_district: "x".into(),
                intent_mixture: vec![],
            })
            .collect(),
    }
}

#[test]
fn oracle_report_examples() {
    let truth = truth_of(&[true, false, false, true]);
    let s = |v: [f64; 4]| -> Vec<(String, f64)> { v.iter().enumerate().map(|(i, x)| (format!("u{i}"), *x)).collect() };
    let r = oracle_report(&s([5.0, 0.0, 1.0, 4.5]), 4.0, &truth).unwrap();
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 0, 2, 0));
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.auc, Some(1.0));
    let r = oracle_report(&s([-5.0, 0.0, 1.0, -4.5]), 4.0, &truth).unwrap();
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (0, 0, 2, 2));
    assert_eq!(r.auc, Some(0.0));
    // score equal to the cutoff is not positive
    let r = oracle_report(&s([4.0, 0.0, 1.0, 4.0]), 4.0, &truth).unwrap();
    assert_eq!(r.fn_, 2);
    let one_class = oracle_report(&[("u1".into(), 1.0)], 0.0, &truth).unwrap();
    assert_eq!(one_class.auc, None);
    assert_eq!(
        oracle_report(&[("zz".into(), 1.0)], 0.0, &truth),
        Err(SynthError::UnknownUser("zz".into()))
    );
}

#[test]
fn theta_separates_evacuees() {
    let cfg = WorldConfig {
        n_users: 200,
        evacuation_rate: 0.1,
        seed: 1,
        ..WorldConfig::default()
    };
    let w = gen_world(&cfg).unwrap();
    let results = crate::anomaly::score_users(&w.gps, &cfg.windows, &Default::default()).unwrap();
    let scores: Vec<(String, f64)> = results
        .iter()
        .filter_map(|r| r.theta().map(|t| (r.user_id.clone(), t)))
        .collect();
    let r = oracle_report(&scores, 4.0, &w.truth).unwrap();
    assert!(r.auc.unwrap() >= 0.95, "{r:?}");
}
