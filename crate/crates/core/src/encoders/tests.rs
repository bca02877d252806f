use std::collections::BTreeMap;

use super::*;
use crate::corpus::{CharVocab, QueryPair, Session};
use crate::numerics::{grad_check, Parameters};
use crate::util::rng_from;

fn micro_vocab() -> CharVocab {
    CharVocab::from_chars(vec!['a', 'b', 'c'])
}

fn micro_ssqe(seed: u64) -> SsqeParams {
    let cfg = SsqeConfig {
        vocab_size: 5,
        embed_dim: 3,
        hidden_dim: 4,
        layers: 2,
        output_dim: 2,
    };
    let mut p = SsqeParams::init(cfg, &mut rng_from(seed)).unwrap();
    // at default init the micro model's hidden states barely differ, so most
    // gradient entries sit at finite-difference noise level
    p.scale(3.0);
    p
}

fn small_vocab() -> CharVocab {
    CharVocab::from_chars("abcdefghijklmnopqrstuvwxyz ".chars().collect())
}

fn small_ssqe(seed: u64) -> SsqeParams {
    let cfg = SsqeConfig {
        vocab_size: small_vocab().len(),
        embed_dim: 6,
        hidden_dim: 10,
        layers: 2,
        output_dim: 8,
    };
    SsqeParams::init(cfg, &mut rng_from(seed)).unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn encode_is_deterministic() {
    let p = small_ssqe(1);
    let v = small_vocab();
    assert_eq!(p.encode(&v, "flood map").unwrap(), p.encode(&v, "flood map").unwrap());
}

#[test]
fn oov_characters_share_a_representation() {
    let p = small_ssqe(2);
    let v = small_vocab();
    assert_eq!(p.encode(&v, "rain 7").unwrap(), p.encode(&v, "rain 9").unwrap());
    assert_ne!(p.encode(&v, "rain a").unwrap(), p.encode(&v, "rain b").unwrap());
}

#[test]
fn empty_query_is_rejected() {
    let p = small_ssqe(3);
    assert!(matches!(p.encode(&small_vocab(), ""), Err(EncoderError::EmptyQuery)));
}

#[test]
fn self_similarity_is_one_and_symmetric() {
    let p = small_ssqe(4);
    let v = small_vocab();
    for q in ["a", "shelter", "evacuation route"] {
        assert!((similarity(&p, &v, q, q).unwrap() - 1.0).abs() < 1e-12);
    }
    let ab = similarity(&p, &v, "river level", "train delay").unwrap();
    let ba = similarity(&p, &v, "train delay", "river level").unwrap();
    assert!((ab - ba).abs() < 1e-12);
}

#[test]
fn vocab_size_mismatch_is_rejected() {
    let p = small_ssqe(5);
    assert!(matches!(p.encode(&micro_vocab(), "abc"), Err(EncoderError::ModelMismatch(_))));
}

#[test]
fn ssqe_pair_loss_passes_grad_check() {
    let p = micro_ssqe(8);
    let v = micro_vocab();
    let batch = [("ab", "ca"), ("bca", "a"), ("c", "bb"), ("aab", "cab"), ("ba", "acc")];
    let batch: Vec<(&str, &str)> = batch.to_vec();
    let negatives = vec![vec![1, 2, 3, 4], vec![0, 2, 3, 4], vec![0, 1, 3, 4], vec![0, 1, 2, 4], vec![0, 1, 2, 3]];
    let x = p.flatten();
    let err = grad_check(
        |flat| {
            let mut q = p.clone();
            q.assign_flat(flat);
            let mut g = q.zeros_like();
            let loss = pair_loss_and_grad(&q, &v, &batch, &negatives, 10.0, &mut g).unwrap();
            (loss, g.flatten())
        },
        &x,
        1e-5,
    );
    assert!(err < 1e-4, "relative error {err}");
}

fn micro_smqe(seed: u64) -> SmqeParams {
    let cfg = SmqeConfig {
        session_hidden: 3,
        session_layers: 2,
    };
    let mut p = SmqeParams::init(micro_ssqe(seed), cfg, &mut rng_from(seed + 100)).unwrap();
    p.head.scale(3.0);
    p
}

#[test]
fn smqe_session_loss_passes_grad_check_in_both_modes() {
    let v = micro_vocab();
    let s1 = strings(&["ab", "ca", "bca"]);
    let s2 = strings(&["c", "bb"]);
    let s3 = strings(&["aab", "cab", "a", "cc"]);
    let sessions: Vec<&[String]> = vec![&s1, &s2, &s3];
    // 6 prediction terms; targets: ca bca bb cab a cc
    let negatives = vec![vec![1, 2], vec![0, 3], vec![4, 5], vec![2, 1], vec![5, 0], vec![3, 4]];
    let p = micro_smqe(11);
    let err = grad_check(
        |flat| {
            let mut q = p.clone();
            q.assign_flat(flat);
            let mut g = q.zeros_like();
            let loss = session_loss_and_grad(&q, &v, &sessions, &negatives, 10.0, true, None, &mut g).unwrap();
            (loss, g.flatten())
        },
        &p.flatten(),
        1e-5,
    );
    assert!(err < 1e-4, "joint relative error {err}");
    let err = grad_check(
        |flat| {
            let mut q = p.clone();
            q.head.assign_flat(flat);
            let mut g = q.zeros_like();
            let loss = session_loss_and_grad(&q, &v, &sessions, &negatives, 10.0, false, None, &mut g).unwrap();
            (loss, g.head.flatten())
        },
        &p.head.flatten(),
        1e-5,
    );
    assert!(err < 1e-4, "frozen relative error {err}");
    let mut g = p.zeros_like();
    session_loss_and_grad(&p, &v, &sessions, &negatives, 10.0, false, None, &mut g).unwrap();
    assert_eq!(g.ssqe.global_norm(), 0.0);
}

#[test]
fn session_of_length_two_has_one_term() {
    let p = micro_smqe(12);
    let v = micro_vocab();
    let s1 = strings(&["ab", "ca"]);
    let s2 = strings(&["c", "bb"]);
    let sessions: Vec<&[String]> = vec![&s1, &s2];
    let mut g = p.zeros_like();
    // two sessions of length 2 give exactly two terms, so negatives has two rows
    let loss = session_loss_and_grad(&p, &v, &sessions, &[vec![1], vec![0]], 10.0, false, None, &mut g).unwrap();
    assert!(loss.is_finite());
    let items = eval_items_from_sessions(&[Session {
        user_id: "u".into(),
        queries: s1.clone(),
        timestamps: vec![0, 10],
    }]);
    assert_eq!(items.len(), 1);
    assert_eq!(items[0].context, vec!["ab".to_string()]);
    assert_eq!(items[0].next, "ca");
}

#[test]
fn smqe_prefix_causality_and_single_step() {
    let p = SmqeParams::init(small_ssqe(13), SmqeConfig::desk(), &mut rng_from(14)).unwrap();
    let v = small_vocab();
    let enc = QueryEncoder::multiple(&p, &v);
    let one = enc.encode_session(&strings(&["flood"])).unwrap();
    assert_eq!(one.dim(), 8);
    let ab = enc.encode_session(&strings(&["flood", "shelter"])).unwrap();
    let ab_again = QueryEncoder::multiple(&p, &v)
        .encode_session(&strings(&["flood", "shelter"]))
        .unwrap();
    assert_eq!(ab, ab_again);
    let s = enc.encode_session(&strings(&["flood", "shelter", "route"])).unwrap();
    assert_ne!(ab, s);
    assert!(matches!(enc.encode_session(&[]), Err(EncoderError::EmptySequence)));
    let long: Vec<String> = (0..11).map(|i| format!("q{i}")).collect();
    assert!(matches!(enc.encode_session(&long), Err(EncoderError::SequenceTooLong { .. })));
}

#[test]
fn smqe_init_rejects_mismatched_ssqe() {
    let mut s = small_ssqe(15);
    s.config.hidden_dim = 11;
    assert!(SmqeParams::init(s, SmqeConfig::desk(), &mut rng_from(1)).is_err());
}

struct Oracle;

impl NextQueryModel for Oracle {
    fn context(&self, history: &[String]) -> Result<Vec<f64>, EncoderError> {
        // the items below use "ctx-K" -> "next-K"
        let k: f64 = history.last().unwrap()[4..].parse().unwrap();
        Ok(vec![k.cos(), k.sin()])
    }
    fn target(&self, query: &str) -> Result<Vec<f64>, EncoderError> {
        let k: f64 = query[5..].parse().unwrap();
        Ok(vec![k.cos(), k.sin()])
    }
}

struct RandomRep;

impl NextQueryModel for RandomRep {
    fn context(&self, history: &[String]) -> Result<Vec<f64>, EncoderError> {
        self.target(history.last().unwrap())
    }
    fn target(&self, query: &str) -> Result<Vec<f64>, EncoderError> {
        let seed = crate::util::derive_seed(99, query);
        let mut rng = rng_from(seed);
        use rand::Rng;
        Ok((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }
}

fn items(n: usize) -> Vec<EvalItem> {
    (0..n)
        .map(|k| EvalItem {
            context: vec![format!("ctx-{}", k % 300)],
            next: format!("next-{}", k % 300),
        })
        .collect()
}

#[test]
fn oracle_model_scores_perfectly() {
    assert_eq!(next_query_accuracy(&Oracle, &items(500), 5, 3).unwrap(), 1.0);
}

#[test]
fn random_representations_score_near_chance() {
    let it = items(3000);
    let acc = next_query_accuracy(&RandomRep, &it, 5, 4).unwrap();
    assert!((acc - 0.2).abs() < 0.05, "accuracy {acc}");
    assert_eq!(acc, next_query_accuracy(&RandomRep, &it, 5, 4).unwrap());
}

#[test]
fn accuracy_needs_enough_candidates() {
    let it = items(3);
    assert!(matches!(
        next_query_accuracy(&Oracle, &it, 5, 0),
        Err(EncoderError::NotEnoughCandidates { available: 3, needed: 5 })
    ));
    assert!(matches!(next_query_accuracy(&Oracle, &[], 5, 0), Err(EncoderError::EmptyDataset)));
}

fn toy_pairs() -> Vec<QueryPair> {
    let places = ["tokyo", "osaka", "kyoto", "nagoya", "sapporo", "fukuoka", "kobe", "sendai"];
    let mut out = Vec::new();
    for (i, p) in places.iter().enumerate() {
        for (a, b) in [("weather", "rain"), ("flood", "shelter")] {
            out.push(QueryPair {
                user_id: format!("u{i}"),
                query_q: format!("{a} {p}"),
                query_d: format!("{b} {p}"),
            });
        }
    }
    out
}

#[test]
fn initial_loss_is_near_log_five() {
    use rand::Rng;
    let v = small_vocab();
    let p = SsqeParams::init(SsqeConfig::desk(v.len()), &mut rng_from(21)).unwrap();
    let mut rng = rng_from(22);
    let mut word = || -> String { (0..rng.gen_range(4..12)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect() };
    let owned: Vec<(String, String)> = (0..64).map(|_| (word(), word())).collect();
    let batch: Vec<(&str, &str)> = owned.iter().map(|(q, d)| (q.as_str(), d.as_str())).collect();
    let n = batch.len();
    let negatives: Vec<Vec<usize>> = (0..n).map(|i| (1..5).map(|k| (i + k) % n).collect()).collect();
    // independent oracle: mean -log softmax over raw cosines
    let z: Vec<(Vec<f64>, Vec<f64>)> = batch
        .iter()
        .map(|(q, d)| (p.encode(&v, q).unwrap().0, p.encode(&v, d).unwrap().0))
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let oracle: f64 = (0..n)
        .map(|i| {
            let e: Vec<f64> = std::iter::once(i)
                .chain(negatives[i].iter().copied())
                .map(|j| (10.0 * cos(&z[i].0, &z[j].1)).exp())
                .collect();
            -(e[0] / e.iter().sum::<f64>()).ln()
        })
        .sum::<f64>()
        / n as f64;
    let mut g = p.zeros_like();
    let loss = pair_loss_and_grad(&p, &v, &batch, &negatives, 10.0, &mut g).unwrap();
    assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
    // near-uniform similarities: a shared output offset dominates every z
    let mut flat = p.clone();
    flat.proj.weight.data_mut().iter_mut().for_each(|w| *w *= 1e-3);
    flat.proj.bias.data_mut().iter_mut().enumerate().for_each(|(k, b)| *b = 1.0 / (1.0 + k as f64));
    let loss = pair_loss_and_grad(&flat, &v, &batch, &negatives, 10.0, &mut g).unwrap();
    assert!((loss - 5f64.ln()).abs() < 0.3, "loss {loss}");
}

#[test]
fn training_is_deterministic_and_rejects_oversized_batches() {
    let v = small_vocab();
    let pairs = toy_pairs();
    let cfg = TrainConfig {
        batch_size: 8,
        iterations: 6,
        eval_every: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train_ssqe(small_ssqe(1), &v, &pairs, &pairs, &cfg).unwrap();
    let b = train_ssqe(small_ssqe(1), &v, &pairs, &pairs, &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics.len(), 2);
    let big = TrainConfig {
        batch_size: 100,
        ..cfg
    };
    assert!(matches!(
        train_ssqe(small_ssqe(1), &v, &pairs, &[], &big),
        Err(EncoderError::BatchTooLarge { batch: 100, len: 16 })
    ));
    let bad = TrainConfig { negatives: 0, ..cfg };
    assert!(train_ssqe(small_ssqe(1), &v, &pairs, &[], &bad).is_err());
}

#[test]
fn frozen_smqe_training_leaves_ssqe_untouched() {
    let v = small_vocab();
    let places = ["tokyo", "osaka", "kyoto", "nagoya", "kobe", "sendai"];
    let sessions: Vec<Session> = places
        .iter()
        .enumerate()
        .map(|(i, p)| Session {
            user_id: format!("u{i}"),
            queries: vec![format!("flood {p}"), format!("shelter {p}"), format!("route {p}")],
            timestamps: vec![0, 30, 60],
        })
        .collect();
    let ssqe = small_ssqe(30);
    let cfg = TrainConfig {
        batch_size: 4,
        iterations: 5,
        eval_every: 5,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train_smqe(ssqe.clone(), SmqeConfig::desk(), &v, &sessions, &sessions, &cfg).unwrap();
    assert_eq!(out.params.ssqe, ssqe);
    let joint = TrainConfig { joint: true, ..cfg };
    let out = train_smqe(ssqe.clone(), SmqeConfig::desk(), &v, &sessions, &sessions, &joint).unwrap();
    assert_ne!(out.params.ssqe, ssqe);
}

#[test]
fn metrics_are_jsonl() {
    let m = vec![
        TrainMetric {
            step: 1,
            loss: 1.5,
            val_accuracy: Some(0.25),
        },
        TrainMetric {
            step: 2,
            loss: 1.25,
            val_accuracy: None,
        },
    ];
    let mut buf = Vec::new();
    write_metrics(&mut buf, &m).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"step":1,"loss":1.5,"val_accuracy":0.25}"#);
    assert_eq!(lines[1], r#"{"step":2,"loss":1.25,"val_accuracy":null}"#);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let v = small_vocab();
    let ssqe = small_ssqe(40);
    let smqe = SmqeParams::init(ssqe.clone(), SmqeConfig::desk(), &mut rng_from(41)).unwrap();
    for model in [Model::Ssqe(ssqe), Model::Smqe(smqe)] {
        let path = dir.path().join("m.ckpt");
        let mut metadata = BTreeMap::new();
        metadata.insert("seed".to_string(), "40".to_string());
        let ck = Checkpoint {
            model,
            vocab: v.clone(),
            metadata,
        };
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path, Some(&v.hash())).unwrap();
        assert_eq!(back, ck);
        let q = "evacuation center";
        let a = ck.encoder().encode_query(q).unwrap();
        let b = back.encoder().encode_query(q).unwrap();
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn truncated_and_mismatched_checkpoints_fail() {
    let dir = tempfile::tempdir().unwrap();
    let v = small_vocab();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint {
        model: Model::Ssqe(small_ssqe(42)),
        vocab: v.clone(),
        metadata: BTreeMap::new(),
    };
    save_checkpoint(&path, &ck).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 15, 40, bytes.len() - 8, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.ckpt"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&p, None), Err(EncoderError::Checkpoint(_))), "cut {cut}");
    }
    let other = CharVocab::from_chars(vec!['x', 'y']);
    assert!(matches!(
        load_checkpoint(&path, Some(&other.hash())),
        Err(EncoderError::VocabMismatch { .. })
    ));
    let mut bad = bytes.clone();
    bad[8] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(EncoderError::Checkpoint(_))));
}




