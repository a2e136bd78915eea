//! Seeded synthetic world: a topic-structured catalog and user logs with
//! persistent topic preferences, transient bursts and unclicked exposures.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_topics: usize,
    /// Sub-clusters inside each topic; users prefer one per topic.
    pub n_subtopics: usize,
    pub d: usize,
    /// Item noise around its (sub)topic centre.
    pub sigma: Real,
    /// Scale of topic centroids.
    pub topic_scale: Real,
    /// Scale of subtopic offsets around the topic centroid.
    pub subtopic_scale: Real,
    pub n_users: usize,
    pub session_count: usize,
    /// Sessions draw their length uniformly from `min_session_length..=session_length`.
    pub session_length: usize,
    pub min_session_length: usize,
    pub burst_probability: Real,
    pub burst_length: usize,
    /// Chance that a click inside an active burst comes from the burst topic.
    pub burst_fidelity: Real,
    /// Chance that a click lands in the user's preferred subtopic.
    pub subtopic_fidelity: Real,
    /// Zipf exponent of topic popularity, used when drawing long-term
    /// topics and exposures; 0 is uniform.
    pub topic_popularity_exponent: Real,
    /// Zipf exponent of item popularity inside a subtopic.
    pub popularity_exponent: Real,
    pub exposure_per_click: usize,
    /// Chance that an exposure comes from the user's last finished burst.
    pub stale_exposure_probability: Real,
    pub static_cardinalities: Vec<usize>,
    pub n_tags: usize,
    pub n_watch_buckets: usize,
    /// Clicks held out per user for evaluation.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_items: 1200,
            n_topics: 16,
            n_subtopics: 4,
            d: 16,
            sigma: 0.1,
            topic_scale: 2.0,
            subtopic_scale: 0.5,
            n_users: 240,
            session_count: 5,
            session_length: 10,
            min_session_length: 3,
            burst_probability: 0.5,
            burst_length: 6,
            burst_fidelity: 0.95,
            subtopic_fidelity: 0.8,
            topic_popularity_exponent: 1.0,
            popularity_exponent: 1.0,
            exposure_per_click: 2,
            stale_exposure_probability: 0.5,
            static_cardinalities: vec![6, 3, 8],
            n_tags: 3,
            n_watch_buckets: 4,
            holdout: 1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_topics", self.n_topics),
            ("n_subtopics", self.n_subtopics),
            ("d", self.d),
            ("n_users", self.n_users),
            ("session_count", self.session_count),
            ("session_length", self.session_length),
            ("n_tags", self.n_tags),
            ("n_watch_buckets", self.n_watch_buckets),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world.{name} must be >= 1")));
        }
        if self.min_session_length == 0 || self.min_session_length > self.session_length {
            return Err(Error::Config("need 1 <= min_session_length <= session_length".into()));
        }
        if !(self.popularity_exponent >= 0.0 && self.topic_popularity_exponent >= 0.0) {
            return Err(Error::Config("popularity exponents must be >= 0".into()));
        }
        if self.n_items < self.n_topics * self.n_subtopics {
            return Err(Error::Config(format!(
                "n_items {} must cover n_topics * n_subtopics = {}",
                self.n_items,
                self.n_topics * self.n_subtopics
            )));
        }
        for (name, p) in [
            ("burst_probability", self.burst_probability),
            ("burst_fidelity", self.burst_fidelity),
            ("subtopic_fidelity", self.subtopic_fidelity),
            ("stale_exposure_probability", self.stale_exposure_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("world.{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.sigma >= 0.0 && self.topic_scale > 0.0 && self.subtopic_scale >= 0.0) {
            return Err(Error::Config("scales must be non-negative, topic_scale positive".into()));
        }
        if self.static_cardinalities.contains(&0) {
            return Err(Error::Config("static cardinalities must be positive".into()));
        }
        Ok(())
    }

    fn long_term_topics(&self) -> usize {
        self.n_topics.min(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub d: usize,
    /// Row-major `[n_items, d]`.
    pub vectors: Vec<Real>,
    pub topics: Vec<u32>,
    pub subtopics: Vec<u32>,
    pub tags: Vec<Vec<u32>>,
    pub topic_centroids: Vec<Real>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn vector(&self, item: usize) -> &[Real] {
        &self.vectors[item * self.d..(item + 1) * self.d]
    }

    /// Item ids grouped by `(topic, subtopic)`.
    fn cells(&self, n_subtopics: usize) -> Vec<Vec<u32>> {
        let n_topics = self.topics.iter().map(|&t| t as usize + 1).max().unwrap_or(0);
        let mut cells = vec![Vec::new(); n_topics * n_subtopics];
        for (i, (&t, &s)) in self.topics.iter().zip(&self.subtopics).enumerate() {
            cells[t as usize * n_subtopics + s as usize].push(i as u32);
        }
        cells
    }
}

fn dist(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
}

/// Topic centroids at least `4 * sigma` apart (and distinct), then items
/// spread round-robin over topics and subtopics.
pub fn generate_catalog(cfg: &WorldConfig) -> Result<Catalog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let d = cfg.d;
    let min_sep = (4.0 * cfg.sigma).max(1e-9);
    let mut scale = cfg.topic_scale;
    let mut centroids: Vec<Real> = Vec::with_capacity(cfg.n_topics * d);
    let mut rejects = 0;
    while centroids.len() < cfg.n_topics * d {
        let dist_c = Normal::new(0.0, scale).expect("scale");
        let c: Vec<Real> = (0..d).map(|_| dist_c.sample(&mut rng)).collect();
        if centroids.chunks(d).all(|o| dist(o, &c) >= min_sep) {
            centroids.extend(c);
        } else {
            rejects += 1;
            if rejects % 1000 == 0 {
                scale *= 2.0;
            }
        }
    }
    let sub = Normal::new(0.0, cfg.subtopic_scale).expect("scale");
    let offsets: Vec<Real> = (0..cfg.n_topics * cfg.n_subtopics * d).map(|_| sub.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma");
    let mut vectors = Vec::with_capacity(cfg.n_items * d);
    let mut topics = Vec::with_capacity(cfg.n_items);
    let mut subtopics = Vec::with_capacity(cfg.n_items);
    let mut tags = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let t = i % cfg.n_topics;
        let s = (i / cfg.n_topics) % cfg.n_subtopics;
        let off = &offsets[(t * cfg.n_subtopics + s) * d..][..d];
        for j in 0..d {
            vectors.push(centroids[t * d + j] + off[j] + noise.sample(&mut rng));
        }
        topics.push(t as u32);
        subtopics.push(s as u32);
        tags.push(vec![rng.random_range(0..cfg.n_tags as u32)]);
    }
    Ok(Catalog {
        d,
        vectors,
        topics,
        subtopics,
        tags,
        topic_centroids: centroids,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub user_id: u32,
    pub item_id: u32,
    pub timestamp: u64,
    pub clicked: u8,
    pub watch_time_bucket: u32,
    pub tags: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub static_features: Vec<u32>,
    pub long_term_topics: Vec<u32>,
}

/// Per-click ground truth, for counting checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickTruth {
    pub burst_topic: Option<u32>,
    pub topic: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logs {
    pub users: Vec<UserProfile>,
    /// Sorted by user, then timestamp.
    pub records: Vec<LogRecord>,
    /// One entry per clicked record, in record order.
    pub truth: Vec<ClickTruth>,
}

struct Cells {
    items: Vec<Vec<u32>>,
    /// Cumulative Zipf weights, one table per cell size.
    cdf: Vec<Vec<Real>>,
    n_sub: usize,
}

impl Cells {
    fn new(catalog: &Catalog, n_sub: usize, exponent: Real) -> Self {
        let items = catalog.cells(n_sub);
        let cdf = items
            .iter()
            .map(|c| {
                let mut acc = 0.0;
                (0..c.len())
                    .map(|r| {
                        acc += 1.0 / ((r + 1) as Real).powf(exponent);
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { items, cdf, n_sub }
    }

    fn pick(&self, rng: &mut ChaCha8Rng, topic: u32, pref_sub: u32, fidelity: Real) -> u32 {
        let s = if rng.random::<Real>() < fidelity {
            pref_sub
        } else {
            rng.random_range(0..self.n_sub as u32)
        };
        let c = topic as usize * self.n_sub + s as usize;
        let cdf = &self.cdf[c];
        let u = rng.random::<Real>() * cdf[cdf.len() - 1];
        let r = cdf.partition_point(|&x| x <= u).min(cdf.len() - 1);
        self.items[c][r]
    }
}

pub fn generate_logs(cfg: &WorldConfig, catalog: &Catalog) -> Result<Logs> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let cells = Cells::new(catalog, cfg.n_subtopics, cfg.popularity_exponent);
    let n_topics = cfg.n_topics as u32;
    let topic_weight = |t: u32| 1.0 / ((t + 1) as Real).powf(cfg.topic_popularity_exponent);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for u in 0..cfg.n_users as u32 {
        let static_features = cfg
            .static_cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c as u32))
            .collect();
        let all: Vec<u32> = (0..n_topics).collect();
        let lt: Vec<u32> = all
            .choose_multiple_weighted(&mut rng, cfg.long_term_topics(), |&t| topic_weight(t))
            .expect("positive weights")
            .copied()
            .collect();
        let lt_weight: Real = rng.random_range(0.5..0.8);
        let pref_sub: Vec<u32> = (0..n_topics).map(|_| rng.random_range(0..cfg.n_subtopics as u32)).collect();
        let others: Vec<u32> = all.iter().copied().filter(|t| !lt.contains(t)).collect();
        let mut ts = 0u64;
        let mut stale: Option<u32> = None;
        for _ in 0..cfg.session_count {
            let burst = if !others.is_empty() && rng.random::<Real>() < cfg.burst_probability {
                let pool: Vec<u32> = others.iter().copied().filter(|&t| Some(t) != stale).collect();
                pool.choose(&mut rng).or(others.first()).copied()
            } else {
                None
            };
            let mut exposed: HashSet<u32> = HashSet::new();
            let len = rng.random_range(cfg.min_session_length..=cfg.session_length);
            for j in 0..len {
                if j == cfg.burst_length && burst.is_some() {
                    stale = burst;
                }
                let active_burst = burst.filter(|_| j < cfg.burst_length);
                let topic = match active_burst {
                    Some(b) if rng.random::<Real>() < cfg.burst_fidelity => b,
                    _ => {
                        if lt.len() == 1 || rng.random::<Real>() < lt_weight {
                            lt[0]
                        } else {
                            lt[1]
                        }
                    }
                };
                let neg_pool: Vec<u32> = others.iter().copied().filter(|&t| Some(t) != active_burst).collect();
                for _ in 0..cfg.exposure_per_click {
                    let t = match stale {
                        Some(s) if s != topic && active_burst != Some(s) && rng.random::<Real>() < cfg.stale_exposure_probability => s,
                        _ => match neg_pool.choose_weighted(&mut rng, |&t| topic_weight(t)) {
                            Ok(&t) => t,
                            Err(_) => break,
                        },
                    };
                    let item = cells.pick(&mut rng, t, pref_sub[t as usize], 0.0);
                    exposed.insert(item);
                    ts += 1;
                    records.push(LogRecord {
                        user_id: u,
                        item_id: item,
                        timestamp: ts,
                        clicked: 0,
                        watch_time_bucket: rng.random_range(0..cfg.n_watch_buckets as u32),
                        tags: catalog.tags[item as usize].clone(),
                    });
                }
                let mut item = cells.pick(&mut rng, topic, pref_sub[topic as usize], cfg.subtopic_fidelity);
                let mut tries = 0;
                while exposed.contains(&item) && tries < 32 {
                    item = cells.pick(&mut rng, topic, pref_sub[topic as usize], cfg.subtopic_fidelity);
                    tries += 1;
                }
                if exposed.contains(&item) {
                    continue;
                }
                ts += 1;
                records.push(LogRecord {
                    user_id: u,
                    item_id: item,
                    timestamp: ts,
                    clicked: 1,
                    watch_time_bucket: rng.random_range(0..cfg.n_watch_buckets as u32),
                    tags: catalog.tags[item as usize].clone(),
                });
                truth.push(ClickTruth {
                    burst_topic: active_burst,
                    topic,
                });
            }
            if burst.is_some() {
                stale = burst;
            }
        }
        users.push(UserProfile {
            user_id: u,
            static_features,
            long_term_topics: lt,
        });
    }
    Ok(Logs { users, records, truth })
}

/// One held-out next click with the user's full preceding click history.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub user_id: u32,
    /// Clicks strictly before the target, in time order.
    pub history: Vec<LogRecord>,
    pub target: LogRecord,
}

/// Training records per user plus evaluation requests.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Per retained user: every record (clicks and exposures) before the
    /// first held-out click.
    pub train: BTreeMap<u32, Vec<LogRecord>>,
    pub eval: Vec<EvalRequest>,
    pub dropped_users: usize,
}

/// Leave-last-`holdout` split. Users with at most `holdout` clicks are dropped.
pub fn split(records: &[LogRecord], holdout: usize) -> Result<Split> {
    if holdout == 0 {
        return Err(Error::Config("holdout must be >= 1".into()));
    }
    let mut by_user: BTreeMap<u32, Vec<&LogRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let mut train = BTreeMap::new();
    let mut eval = Vec::new();
    let mut dropped = 0;
    for (u, mut recs) in by_user {
        recs.sort_by_key(|r| r.timestamp);
        if recs.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
            return Err(Error::Data(format!("user {u} has non-increasing timestamps")));
        }
        let clicks: Vec<&LogRecord> = recs.iter().copied().filter(|r| r.clicked == 1).collect();
        if clicks.len() <= holdout {
            dropped += 1;
            continue;
        }
        let first_held = clicks[clicks.len() - holdout].timestamp;
        train.insert(u, recs.iter().filter(|r| r.timestamp < first_held).map(|r| (*r).clone()).collect());
        for (i, t) in clicks.iter().enumerate().skip(clicks.len() - holdout) {
            eval.push(EvalRequest {
                user_id: u,
                history: clicks[..i].iter().map(|r| (*r).clone()).collect(),
                target: (*t).clone(),
            });
        }
    }
    Ok(Split {
        train,
        eval,
        dropped_users: dropped,
    })
}

/// Held-out clicks that also appear in training data for the same user at
/// the same time. Should always be zero.
pub fn leakage_violations(split: &Split) -> usize {
    let mut n = 0;
    for req in &split.eval {
        if let Some(train) = split.train.get(&req.user_id) {
            n += train.iter().filter(|r| r.timestamp >= req.target.timestamp).count();
        }
    }
    n
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_catalog_csv(mut w: impl Write, catalog: &Catalog) -> Result<()> {
    let mut s = String::from("item_id,topic\n");
    for (i, t) in catalog.topics.iter().enumerate() {
        s.push_str(&format!("{i},{t}\n"));
    }
    w.write_all(s.as_bytes()).map_err(|e| Error::io("<catalog>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_items: 128,
            n_users: 20,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn timestamps_strictly_increase_per_user() {
        let cfg = small();
        let logs = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
        for w in logs.records.windows(2) {
            if w[0].user_id == w[1].user_id {
                assert!(w[0].timestamp < w[1].timestamp);
            }
        }
    }

    #[test]
    fn no_exposures_when_ratio_zero() {
        let cfg = WorldConfig {
            exposure_per_click: 0,
            ..small()
        };
        let logs = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
        assert!(logs.records.iter().all(|r| r.clicked == 1));
    }

    #[test]
    fn single_click_user_is_dropped() {
        let r = |t, c| LogRecord {
            user_id: 7,
            item_id: 1,
            timestamp: t,
            clicked: c,
            watch_time_bucket: 0,
            tags: vec![],
        };
        let s = split(&[r(1, 0), r(2, 1)], 1).unwrap();
        assert_eq!(s.dropped_users, 1);
        assert!(s.eval.is_empty());
    }

    #[test]
    fn holdout_one_targets_final_click() {
        let cfg = small();
        let logs = generate_logs(&cfg, &generate_catalog(&cfg).unwrap()).unwrap();
        let s = split(&logs.records, 1).unwrap();
        for req in &s.eval {
            let last = logs
                .records
                .iter()
                .filter(|r| r.user_id == req.user_id && r.clicked == 1)
                .last()
                .unwrap();
            assert_eq!(&req.target, last);
        }
        assert_eq!(leakage_violations(&s), 0);
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig { n_topics: 0, ..small() }.validate().is_err());
        assert!(WorldConfig { burst_probability: 1.5, ..small() }.validate().is_err());
        assert!(WorldConfig { n_items: 10, ..small() }.validate().is_err());
    }
}
