use std::collections::BTreeMap;
use std::io::BufReader;

use dualgr::quantizer::{CodebookHierarchy, KMeansConfig};
use dualgr::simulator::{generate_catalog, generate_logs, leakage_violations, read_jsonl, split, write_jsonl, LogRecord, WorldConfig};
use dualgr::tensor::Real;

fn small() -> WorldConfig {
    WorldConfig {
        n_items: 400,
        n_users: 60,
        ..WorldConfig::default()
    }
}

#[test]
fn noiseless_topics_are_recovered_by_the_first_level() {
    for seed in 0..3 {
        let cfg = WorldConfig {
            sigma: 0.0,
            n_subtopics: 1,
            seed,
            ..small()
        };
        let cat = generate_catalog(&cfg).unwrap();
        let h = CodebookHierarchy::fit(&cat.vectors, cat.d, &[cfg.n_topics, 4], &KMeansConfig { seed, ..KMeansConfig::default() }).unwrap();
        let mut topic_of_code: BTreeMap<u32, u32> = BTreeMap::new();
        for i in 0..cat.len() {
            let code = h.encode(cat.vector(i)).unwrap().level1();
            let t = *topic_of_code.entry(code).or_insert(cat.topics[i]);
            assert_eq!(t, cat.topics[i], "seed {seed}: code {code} mixes topics");
        }
        assert_eq!(topic_of_code.len(), cfg.n_topics);
    }
}

#[test]
fn single_cell_spread_is_the_noise_variance() {
    let cfg = WorldConfig {
        n_topics: 1,
        n_subtopics: 1,
        n_items: 2000,
        sigma: 0.3,
        ..small()
    };
    let cat = generate_catalog(&cfg).unwrap();
    let h = CodebookHierarchy::fit(&cat.vectors, cat.d, &[1], &KMeansConfig::default()).unwrap();
    let mse = h.report(&cat.vectors).unwrap().per_level_mse[0];
    let want = cat.d as Real * cfg.sigma * cfg.sigma;
    assert!((mse - want).abs() < 0.05 * want, "{mse} vs {want}");
}

#[test]
fn bursts_are_followed_with_configured_fidelity() {
    let cfg = WorldConfig { n_users: 200, ..small() };
    let cat = generate_catalog(&cfg).unwrap();
    let logs = generate_logs(&cfg, &cat).unwrap();
    let in_burst: Vec<_> = logs.truth.iter().filter_map(|t| t.burst_topic.map(|b| b == t.topic)).collect();
    assert!(in_burst.len() > 500);
    let rate = in_burst.iter().filter(|&&x| x).count() as Real / in_burst.len() as Real;
    assert!(rate >= 0.9, "burst fidelity {rate}");
    let clicks = logs.records.iter().filter(|r| r.clicked == 1).count();
    assert_eq!(clicks, logs.truth.len());
    for r in logs.records.iter().filter(|r| r.clicked == 1) {
        assert!(r.item_id < cat.len() as u32);
    }
}

#[test]
fn split_holds_out_last_clicks_without_leakage() {
    let cfg = small();
    let cat = generate_catalog(&cfg).unwrap();
    let logs = generate_logs(&cfg, &cat).unwrap();
    for holdout in 1..=2 {
        let s = split(&logs.records, holdout).unwrap();
        assert_eq!(leakage_violations(&s), 0);
        assert_eq!(s.eval.len(), s.train.len() * holdout);
        for req in &s.eval {
            let last_train = s.train[&req.user_id].iter().map(|r| r.timestamp).max().unwrap_or(0);
            assert!(last_train < req.target.timestamp || s.train[&req.user_id].is_empty());
            assert!(req.history.iter().all(|r| r.clicked == 1 && r.timestamp < req.target.timestamp));
            assert_eq!(req.target.clicked, 1);
        }
    }
}

#[test]
fn tiny_users_are_dropped() {
    let rec = |u, t, c| LogRecord {
        user_id: u,
        item_id: 0,
        timestamp: t,
        clicked: c,
        watch_time_bucket: 0,
        tags: vec![],
    };
    let s = split(&[rec(1, 0, 1), rec(1, 1, 0), rec(2, 0, 1), rec(2, 1, 1)], 1).unwrap();
    assert_eq!(s.dropped_users, 1);
    assert_eq!(s.eval.len(), 1);
    assert_eq!(s.eval[0].history.len(), 1);
    assert!(split(&[rec(1, 3, 1), rec(1, 3, 1)], 1).is_err());
}

#[test]
fn generation_is_seed_deterministic() {
    let cfg = small();
    let a = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
    let b = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = WorldConfig { seed: 1, ..cfg };
    let c = generate_logs(&other, &generate_catalog(&other).unwrap()).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn log_records_round_trip_through_jsonl() {
    let cfg = small();
    let logs = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &logs.records).unwrap();
    let back: Vec<LogRecord> = read_jsonl(BufReader::new(&buf[..])).unwrap();
    assert_eq!(back, logs.records);
}

#[test]
fn without_bursts_every_click_is_long_term() {
    let cfg = WorldConfig {
        burst_probability: 0.0,
        ..small()
    };
    let logs = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
    let lt: BTreeMap<u32, &Vec<u32>> = logs.users.iter().map(|u| (u.user_id, &u.long_term_topics)).collect();
    let clicks = logs.records.iter().filter(|r| r.clicked == 1);
    for (r, t) in clicks.zip(&logs.truth) {
        assert!(t.burst_topic.is_none());
        assert!(lt[&r.user_id].contains(&t.topic));
    }
}
