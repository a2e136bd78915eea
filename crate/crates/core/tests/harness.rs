use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dualgr::beam::{retrieve, RetrievalConfig};
use dualgr::harness::{
    self, checkpoint_variant, evaluate, prepare, run_ablation, run_sweep, train_model, RunConfig, SweepParam, HR_FILE,
    LOSS_FILE, MODEL_FILE,
};
use dualgr::model::{ActionRecord, DecoderModel, ModelConfig, UserContext};
use dualgr::quantizer::SidTuple;
use dualgr::router::WindowConfig;
use dualgr::s2d::BucketSearchConfig;
use dualgr::sid_index::{IndexedItem, SidTrie};
use dualgr::tensor::{read_checkpoint, Real};
use dualgr::training::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 3

[world]
n_items = 200
n_topics = 6
n_users = 30
session_count = 3
session_length = 6

[quantizer]
level_sizes = [6, 4, 4]

[model]
d_model = 16
d_ffn = 32

[router]
long = 20
short = 4

[s2d]
cap = 8
fallback_cap = 3

[optimizer]
lr = 0.01
batch = 8
steps = 30

[beam]
beam = 20

[eval]
k = [5, 10, 20]
"#,
    )
    .unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(cfg: &RunConfig, out: &Path) {
    harness::cmd_simulate(cfg, out).unwrap();
    harness::cmd_quantize(cfg, out).unwrap();
    harness::cmd_train(cfg, out).unwrap();
    harness::cmd_eval(cfg, out).unwrap();
}

#[test]
fn commands_are_byte_reproducible() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let nested = a.path().join("not/yet/there");
    pipeline(&cfg, &nested);
    pipeline(&cfg, b.path());
    let fa = files(&nested);
    let fb = files(b.path());
    assert!(fa.len() >= 12, "{:?}", fa.keys());
    assert_eq!(fa, fb);

    let loss = String::from_utf8(fa[LOSS_FILE].clone()).unwrap();
    let vals: Vec<Real> = loss.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 30);
    let head: Real = vals[..5].iter().sum::<Real>() / 5.0;
    let tail: Real = vals[25..].iter().sum::<Real>() / 5.0;
    assert!(tail < head, "loss {head} -> {tail}");

    let hr = String::from_utf8(fa[HR_FILE].clone()).unwrap();
    let full: Vec<Real> = hr
        .lines()
        .filter(|l| l.starts_with("full,"))
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(full.len(), 3);
    assert!(full.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let mut cfg = tiny();
    cfg.optimizer.steps = 0;
    cfg.variant = Variant { s2d: false, ..Variant::FULL };
    let dir = tempfile::tempdir().unwrap();
    harness::cmd_simulate(&cfg, dir.path()).unwrap();
    harness::cmd_quantize(&cfg, dir.path()).unwrap();
    harness::cmd_train(&cfg, dir.path()).unwrap();
    let named = read_checkpoint(fs::File::open(dir.path().join(MODEL_FILE)).unwrap()).unwrap();
    assert_eq!(checkpoint_variant(&named), Some(cfg.variant));
    let init = DecoderModel::new(cfg.model_config(), cfg.seed).unwrap();
    let loaded = DecoderModel::from_named(&named).unwrap();
    assert_eq!(loaded.to_named(), init.to_named());
}

#[test]
fn single_code_level_warns() {
    let mut cfg = tiny();
    cfg.quantizer.level_sizes = vec![6, 1, 4];
    let dir = tempfile::tempdir().unwrap();
    harness::cmd_simulate(&cfg, dir.path()).unwrap();
    let o = harness::cmd_quantize(&cfg, dir.path()).unwrap();
    assert!(o.messages.iter().any(|m| m.contains("single code")), "{:?}", o.messages);
}

#[test]
fn retrieving_the_whole_corpus_hits_everything() {
    let mut cfg = tiny();
    cfg.eval.k = vec![5, cfg.world.n_items];
    cfg.optimizer.steps = 2;
    let prep = prepare(&cfg).unwrap();
    let (model, _) = train_model(&cfg, Variant::FULL, &prep.set).unwrap();
    let r = evaluate(&cfg, Variant::FULL, &model, &prep.trie, &prep.requests, &prep.quantized.sids).unwrap();
    assert_eq!(r.hit_rate[1], 1.0);
    assert!(r.hit_rate[0] <= r.hit_rate[1]);
    assert!(evaluate(&cfg, Variant::FULL, &model, &prep.trie, &[], &prep.quantized.sids).is_err());
}

/// With every head zeroed all SIDs tie, so the retrieved set is fixed and a
/// uniformly drawn target lands in it with probability K/n.
#[test]
fn uniform_logits_hit_at_chance() {
    let level_sizes = vec![4, 4, 4];
    let cfg = ModelConfig {
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ffn: 16,
        level_sizes: level_sizes.clone(),
        max_history: 8,
        static_cardinalities: vec![2],
        n_tags: 1,
        n_watch_buckets: 1,
        ln_eps: 1e-5,
    };
    let mut items = Vec::new();
    for a in 0..4u32 {
        for b in 0..4u32 {
            for c in 0..4u32 {
                items.push(IndexedItem {
                    item_id: items.len() as u32,
                    sid: SidTuple(vec![a, b, c]),
                    popularity: 0.0,
                });
            }
        }
    }
    let n = items.len();
    let trie = SidTrie::build(&items, &level_sizes).unwrap();
    let k = 16;
    let rc = RetrievalConfig { beam: k, k_sids: k, k_items: k };
    let (mut hits, mut total) = (0usize, 0usize);
    for seed in 0..5 {
        let mut m = DecoderModel::new(cfg.clone(), seed).unwrap();
        for level in 1..=3 {
            let (w, b) = m.head_params(level);
            m.params_mut().get_mut(w).data_mut().fill(0.0);
            m.params_mut().get_mut(b).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let history = (0..5)
                .map(|i| {
                    let it = &items[rng.random_range(0..n)];
                    ActionRecord {
                        item_id: it.item_id,
                        sid: it.sid.clone(),
                        timestamp: i,
                        clicked: true,
                        watch_bucket: 0,
                        tags: vec![0],
                    }
                })
                .collect();
            let user = UserContext {
                user_id: 0,
                static_features: vec![rng.random_range(0..2)],
                history,
            };
            let target = rng.random_range(0..n) as u32;
            let r = retrieve(&user, &m, &trie, &WindowConfig { long: 8, short: 2 }, &BucketSearchConfig { cap: 4, fallback_cap: 2 }, Variant::FULL, &rc).unwrap();
            assert_eq!(r.items.len(), k);
            hits += r.item_ids().contains(&target) as usize;
            total += 1;
        }
    }
    let p = k as Real / n as Real;
    let hr = hits as Real / total as Real;
    let sd = (p * (1.0 - p) / total as Real).sqrt();
    assert!((hr - p).abs() < 3.0 * sd, "HR {hr} vs {p}");
}

#[test]
fn ablation_replays_identically_and_tags_checkpoints() {
    let mut cfg = tiny();
    cfg.optimizer.steps = 5;
    let dir = tempfile::tempdir().unwrap();
    let a = run_ablation(&cfg, &[1], Some(dir.path())).unwrap();
    let b = run_ablation(&cfg, &[1], None).unwrap();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.label, y.label);
        assert_eq!(x.hit_rate, y.hit_rate);
    }
    for v in Variant::ablations() {
        let p = dir.path().join("seed1").join(v.name()).join(MODEL_FILE);
        let named = read_checkpoint(fs::File::open(p).unwrap()).unwrap();
        assert_eq!(checkpoint_variant(&named), Some(v));
    }
}

#[test]
fn single_value_sweep_equals_train_then_eval() {
    let mut cfg = tiny();
    cfg.optimizer.steps = 5;
    cfg.experiment.l_short = vec![3];
    let rows = run_sweep(&cfg, SweepParam::LShort, &[2], None).unwrap();
    let mut c = cfg.with_seed(2);
    c.router.short = 3;
    let prep = prepare(&c).unwrap();
    let (m, _) = train_model(&c, Variant::FULL, &prep.set).unwrap();
    let r = evaluate(&c, Variant::FULL, &m, &prep.trie, &prep.requests, &prep.quantized.sids).unwrap();
    assert_eq!(rows.len(), 1);
    let want: Vec<(usize, Real)> = r.ks.iter().copied().zip(r.hit_rate).collect();
    assert_eq!(rows[0].hit_rate, want);
}

#[test]
fn alpha_sweep_accepts_the_zero_limit() {
    let mut cfg = tiny();
    cfg.optimizer.steps = 3;
    cfg.experiment.alpha = vec![0.0, 0.5];
    let rows = run_sweep(&cfg, SweepParam::Alpha, &[0], None).unwrap();
    assert_eq!(rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["0", "0.5"]);
    assert!(SweepParam::parse("beta").is_err());
}

#[test]
fn shipped_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
}
