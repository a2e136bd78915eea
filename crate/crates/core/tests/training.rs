use dualgr::model::{ActionRecord, DecoderModel, ModelConfig, UserContext};
use dualgr::quantizer::SidTuple;
use dualgr::router::WindowConfig;
use dualgr::s2d::BucketSearchConfig;
use dualgr::tensor::{check_gradients, log_softmax, GradCheckConfig, Real, Tape};
use dualgr::training::{
    batch_loss, entp_loss, forward_example, train, ExampleProbs, LossConfig, OptimizerConfig, PipelineConfig, TrainingExample,
    TrainingSet, Variant,
};
use dualgr::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZES: [usize; 3] = [4, 4, 4];

fn model_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_blocks: 1,
        n_heads: 2,
        d_ffn: 2 * d,
        level_sizes: SIZES.to_vec(),
        max_history: 8,
        static_cardinalities: vec![3],
        n_tags: 2,
        n_watch_buckets: 2,
        ln_eps: 1e-5,
    }
}

fn pipeline(variant: Variant, alpha: Real) -> PipelineConfig {
    PipelineConfig {
        windows: WindowConfig { long: 8, short: 2 },
        s2d: BucketSearchConfig { cap: 4, fallback_cap: 2 },
        loss: LossConfig { alpha, epsilon: 1e-6 },
        variant,
    }
}

fn action(item: u32, sid: Vec<u32>, t: u64, clicked: bool) -> ActionRecord {
    ActionRecord {
        item_id: item,
        sid: SidTuple(sid),
        timestamp: t,
        clicked,
        watch_bucket: (item % 2) as u32,
        tags: vec![item % 2],
    }
}

fn random_sid(rng: &mut ChaCha8Rng) -> Vec<u32> {
    SIZES.iter().map(|&k| rng.random_range(0..k as u32)).collect()
}

/// `users` users with `clicks` clicked targets each; every click is
/// preceded by `negs` exposures sharing its history. Each history opens with
/// one extra click so that no two contexts are empty.
fn synthetic_set(users: usize, clicks: usize, negs: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet::default();
    let mut item = 0;
    for u in 0..users {
        item += 1;
        let mut history = vec![action(item, random_sid(&mut rng), 0, true)];
        for j in 1..=clicks {
            let t = 10 * j as u64;
            for k in 0..negs {
                item += 1;
                set.examples.push(TrainingExample {
                    user: u,
                    history_len: j,
                    target: action(item, random_sid(&mut rng), t - 5 + k as u64, false),
                    clicked: false,
                });
            }
            item += 1;
            let a = action(item, random_sid(&mut rng), t, true);
            set.examples.push(TrainingExample {
                user: u,
                history_len: j,
                target: a.clone(),
                clicked: true,
            });
            history.push(a);
        }
        set.users.push(UserContext {
            user_id: u as u32,
            static_features: vec![(u % 3) as u32],
            history,
        });
    }
    set.regroup();
    set
}

fn jittered_model(seed: u64) -> DecoderModel {
    let mut m = DecoderModel::new(model_cfg(8), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn oracle_loss(batch: &[ExampleProbs], alpha: Real, eps: Real) -> Real {
    let mut s = 0.0;
    for ex in batch {
        if ex.clicked {
            for &p in &ex.probs {
                s -= p.max(eps).min(1.0 - eps).ln();
            }
        } else {
            s -= alpha * (1.0 - ex.probs[0].max(eps).min(1.0 - eps)).ln();
        }
    }
    s / batch.len() as Real
}

#[test]
fn loss_from_probabilities_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let alpha = rng.random_range(0.0..5.0);
        let batch: Vec<ExampleProbs> = (0..n)
            .map(|_| {
                let clicked = rng.random_bool(0.5);
                let levels = if clicked { 3 } else { 1 };
                ExampleProbs {
                    probs: (0..levels).map(|_| rng.random_range(0.0..=1.0)).collect(),
                    clicked,
                }
            })
            .collect();
        let got = entp_loss(&batch, &LossConfig { alpha, epsilon: 1e-6 }).unwrap();
        let want = oracle_loss(&batch, alpha, 1e-6);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

/// Per-example ground-truth probabilities recomputed without the training
/// graph: fresh tapes, plain log-softmax on the logits.
fn independent_probs(m: &DecoderModel, set: &TrainingSet, idx: usize, cfg: &PipelineConfig) -> ExampleProbs {
    let ex = &set.examples[idx];
    let user = &set.users[ex.user];
    let history = &user.history[..ex.history_len];
    let sid = ex.target.sid.tokens();
    let mut tape = Tape::new(m.params());
    let fwd = forward_example(&mut tape, m, set, ex, cfg).unwrap();
    let len = match fwd.branch {
        dualgr::router::Branch::Long => cfg.windows.long,
        dualgr::router::Branch::Short => cfg.windows.short,
    };
    let levels = if ex.clicked { sid.len() } else { 1 };
    let probs = (0..levels)
        .map(|l| {
            let mut t = Tape::new(m.params());
            let window = if l == 0 || !cfg.variant.s2d {
                dualgr::model::Window::suffix(history, len)
            } else {
                dualgr::s2d::fine_window(history, sid[0], &cfg.s2d)
            };
            let mem = m.encode_context(&mut t, &user.static_features, &window).unwrap();
            let z = m.decode_logits(&mut t, &sid[..l], &mem, l + 1).unwrap();
            log_softmax(t.value(z).data())[sid[l] as usize].exp()
        })
        .collect();
    ExampleProbs { probs, clicked: ex.clicked }
}

#[test]
fn graph_loss_matches_oracle_on_model_probabilities() {
    let set = synthetic_set(6, 5, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..60 {
        let m = jittered_model(trial);
        let variant = Variant::ablations()[trial as usize % 4];
        let cfg = pipeline(variant, rng.random_range(0.0..3.0));
        let n = rng.random_range(1..10);
        let batch: Vec<usize> = (0..n).map(|_| rng.random_range(0..set.examples.len())).collect();
        let probs: Vec<ExampleProbs> = batch.iter().map(|&i| independent_probs(&m, &set, i, &cfg)).collect();
        let want = oracle_loss(&probs, cfg.loss.alpha, cfg.loss.epsilon);
        let mut tape = Tape::new(m.params());
        let l = batch_loss(&mut tape, &m, &set, &batch, &cfg).unwrap();
        let got = tape.value(l).item();
        assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn degenerate_cases_reduce_to_plain_next_token_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<ExampleProbs> = (0..9)
        .map(|i| ExampleProbs {
            probs: if i % 3 == 0 { vec![rng.random()] } else { (0..3).map(|_| rng.random()).collect() },
            clicked: i % 3 != 0,
        })
        .collect();
    let pos: Vec<ExampleProbs> = batch.iter().filter(|e| e.clicked).cloned().collect();
    let zero = LossConfig { alpha: 0.0, epsilon: 1e-6 };
    let full = entp_loss(&batch, &zero).unwrap() * batch.len() as Real;
    let ntp = entp_loss(&pos, &zero).unwrap() * pos.len() as Real;
    assert!((full - ntp).abs() < 1e-12);
    let any_alpha = LossConfig { alpha: 3.0, epsilon: 1e-6 };
    assert_eq!(entp_loss(&pos, &any_alpha).unwrap(), entp_loss(&pos, &zero).unwrap());
}

#[test]
fn loss_grows_with_alpha_when_negatives_present() {
    let batch = vec![
        ExampleProbs { probs: vec![0.3, 0.5, 0.2], clicked: true },
        ExampleProbs { probs: vec![0.4], clicked: false },
    ];
    let mut prev = Real::NEG_INFINITY;
    for alpha in [0.0, 0.1, 1.0, 5.0] {
        let l = entp_loss(&batch, &LossConfig { alpha, epsilon: 1e-6 }).unwrap();
        assert!(l > prev);
        prev = l;
    }
}

#[test]
fn extreme_probabilities_stay_finite() {
    let batch = vec![
        ExampleProbs { probs: vec![0.0, 1.0, 0.0], clicked: true },
        ExampleProbs { probs: vec![1.0], clicked: false },
    ];
    let l = entp_loss(&batch, &LossConfig { alpha: 1.0, epsilon: 1e-6 }).unwrap();
    assert!(l.is_finite());
    assert!((l - oracle_loss(&batch, 1.0, 1e-6)).abs() < 1e-12);
}

#[test]
fn negatives_only_touch_the_coarse_level() {
    let set = synthetic_set(3, 4, 2, 5);
    let m = jittered_model(1);
    let cfg = pipeline(Variant::FULL, 1.0);
    let negs: Vec<usize> = (0..set.examples.len()).filter(|&i| !set.examples[i].clicked).collect();
    let mut tape = Tape::new(m.params());
    let l = batch_loss(&mut tape, &m, &set, &negs, &cfg).unwrap();
    let g = tape.backward(l).unwrap();
    for level in 2..=3 {
        let (w, b) = m.head_params(level);
        assert!(g.get(w).data().iter().all(|&v| v == 0.0), "level {level} weight");
        assert!(g.get(b).data().iter().all(|&v| v == 0.0), "level {level} bias");
    }
    let (w1, _) = m.head_params(1);
    assert!(g.get(w1).data().iter().any(|&v| v != 0.0));
}

#[test]
fn forward_shapes_follow_click_label() {
    let set = synthetic_set(2, 3, 1, 6);
    let m = jittered_model(2);
    for v in Variant::ablations() {
        let cfg = pipeline(v, 0.5);
        for ex in &set.examples {
            let mut tape = Tape::new(m.params());
            let f = forward_example(&mut tape, &m, &set, ex, &cfg).unwrap();
            assert_eq!(f.level_probs.len(), if ex.clicked { 3 } else { 1 });
            for &p in &f.level_probs {
                let v = tape.value(p);
                assert_eq!(v.shape(), &[1, 1]);
                assert!(v.item() > 0.0 && v.item() < 1.0);
            }
        }
    }
}

#[test]
fn entp_graph_passes_gradcheck() {
    let set = synthetic_set(2, 3, 2, 7);
    let m = jittered_model(3);
    let cfg = pipeline(Variant::FULL, 0.7);
    let batch: Vec<usize> = (0..set.examples.len()).collect();
    let gc = GradCheckConfig {
        max_probes: Some(400),
        ..GradCheckConfig::default()
    };
    let r = check_gradients(m.params(), |t| batch_loss(t, &m, &set, &batch, &cfg).map_err(|e| match e {
        Error::Tensor(t) => t,
        other => panic!("{other}"),
    }), &gc)
    .unwrap();
    assert!(r.passed(), "max rel error {}", r.max_rel_error());
}

fn opt(steps: usize, lr: Real, batch: usize) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        batch,
        steps,
        seed: 9,
        ..OptimizerConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let set = synthetic_set(3, 3, 1, 8);
    let mut m = DecoderModel::new(model_cfg(8), 4).unwrap();
    let before = m.to_named();
    train(&mut m, &set, &pipeline(Variant::FULL, 0.1), &opt(5, 0.0, 4), |_| {}).unwrap();
    assert_eq!(m.to_named(), before);
}

#[test]
fn same_seed_reproduces_the_loss_curve() {
    let set = synthetic_set(4, 4, 2, 9);
    let run = || {
        let mut m = DecoderModel::new(model_cfg(8), 5).unwrap();
        let r = train(&mut m, &set, &pipeline(Variant::FULL, 0.1), &opt(12, 1e-2, 3), |_| {}).unwrap();
        (r, m.to_named())
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn non_finite_parameters_abort_training() {
    let set = synthetic_set(2, 3, 1, 10);
    let mut m = DecoderModel::new(model_cfg(8), 6).unwrap();
    let id = m.params().ids().next().unwrap();
    m.params_mut().get_mut(id).data_mut()[0] = Real::NAN;
    let err = train(&mut m, &set, &pipeline(Variant::FULL, 0.1), &opt(3, 1e-3, 2), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err:?}");
}

#[test]
fn overfits_a_small_positive_set() {
    let set = synthetic_set(10, 5, 0, 11);
    assert_eq!(set.positives(), 50);
    let mut m = DecoderModel::new(model_cfg(32), 7).unwrap();
    let cfg = pipeline(Variant::FULL, 0.1);
    let r = train(&mut m, &set, &cfg, &opt(500, 1e-2, 50), |_| {}).unwrap();
    let uniform: Real = SIZES.iter().map(|&k| (k as Real).ln()).sum();
    assert!(r.curve[0].loss > 0.5 * uniform);
    let last = r.curve.last().unwrap().loss;
    assert!(last < 0.05, "final loss {last}");
}
