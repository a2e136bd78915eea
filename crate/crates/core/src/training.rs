//! Teacher-forced training with the exposure-aware next-token loss.
//!
//! For a clicked target the loss is the NTP negative log-likelihood summed
//! over all levels. For an exposed-but-unclicked target only the level-1
//! probability is touched, through `-alpha * ln(1 - p1)`. Probabilities are
//! clipped to `[eps, 1 - eps]` and the batch sum is divided by the batch size
//! counting both kinds of example.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionRecord, DecoderModel, UserContext, Window};
use crate::router::{route_history, Branch, WindowConfig};
use crate::s2d::{fine_window, BucketSearchConfig};
use crate::tensor::{Gradients, NodeId, ParamStore, Real, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: Real,
    pub epsilon: Real,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// Which mechanisms are active; each flag off is one ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    /// Route the coarse step between long and short windows; off = long only.
    pub dbr: bool,
    /// Fine levels attend to the bucket-filtered history; off = routed window.
    pub s2d: bool,
    /// Train on unclicked exposures; off = negatives dropped.
    pub entp: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        dbr: true,
        s2d: true,
        entp: true,
    };

    pub fn name(&self) -> &'static str {
        match (self.dbr, self.s2d, self.entp) {
            (true, true, true) => "full",
            (false, true, true) => "wo_dbr",
            (true, false, true) => "wo_s2d",
            (true, true, false) => "wo_entp",
            _ => "custom",
        }
    }

    /// Full model followed by the three single-mechanism ablations.
    pub fn ablations() -> [Variant; 4] {
        [
            Self::FULL,
            Variant { dbr: false, ..Self::FULL },
            Variant { s2d: false, ..Self::FULL },
            Variant { entp: false, ..Self::FULL },
        ]
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

/// Per-example ground-truth probabilities; negatives carry level 1 only.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleProbs {
    pub probs: Vec<Real>,
    pub clicked: bool,
}

fn clip(p: Real, eps: Real) -> Real {
    p.clamp(eps, 1.0 - eps)
}

/// Direct evaluation of the batch loss from probabilities.
pub fn entp_loss(batch: &[ExampleProbs], cfg: &LossConfig) -> Result<Real> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        if ex.clicked {
            total += ex.probs.iter().map(|&p| -clip(p, cfg.epsilon).ln()).sum::<Real>();
        } else {
            let p1 = *ex
                .probs
                .first()
                .ok_or_else(|| Error::Data("negative example without level-1 probability".into()))?;
            total += -cfg.alpha * (1.0 - clip(p1, cfg.epsilon)).ln();
        }
    }
    Ok(total / batch.len() as Real)
}

/// A training target viewed against its user's click history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub user: usize,
    /// The history is `users[user].history[..history_len]`.
    pub history_len: usize,
    pub target: ActionRecord,
    pub clicked: bool,
}

/// Users' click histories plus examples grouped by decision point: each
/// group is one clicked target followed by the exposures logged with it.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub users: Vec<UserContext>,
    pub examples: Vec<TrainingExample>,
    pub groups: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn history(&self, ex: &TrainingExample) -> &[ActionRecord] {
        &self.users[ex.user].history[..ex.history_len]
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.clicked).count()
    }

    pub fn negatives(&self) -> usize {
        self.examples.len() - self.positives()
    }

    /// Groups examples by `(user, history_len)`, keeping groups with a click.
    pub fn regroup(&mut self) {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.sort_by_key(|&i| {
            let e = &self.examples[i];
            (e.user, e.history_len, !e.clicked, e.target.timestamp)
        });
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut last = None;
        for i in order {
            let e = &self.examples[i];
            let key = (e.user, e.history_len);
            if last != Some(key) {
                groups.push(Vec::new());
                last = Some(key);
            }
            groups.last_mut().expect("group").push(i);
        }
        groups.retain(|g| self.examples[g[0]].clicked);
        self.groups = groups;
    }
}

/// Everything the per-example forward pass needs besides the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub windows: WindowConfig,
    pub s2d: BucketSearchConfig,
    pub loss: LossConfig,
    pub variant: Variant,
}

/// Probability nodes of the ground-truth token per computed level.
#[derive(Debug, Clone)]
pub struct ExampleForward {
    pub level_probs: Vec<NodeId>,
    pub branch: Branch,
}

/// Teacher-forced forward pass for one example.
pub fn forward_example(
    tape: &mut Tape,
    model: &DecoderModel,
    set: &TrainingSet,
    ex: &TrainingExample,
    cfg: &PipelineConfig,
) -> Result<ExampleForward> {
    let depth = model.config().depth();
    let target = ex.target.sid.tokens();
    if target.len() != depth {
        return Err(Error::Data(format!(
            "target item {} has SID depth {}, expected {depth}",
            ex.target.item_id,
            target.len()
        )));
    }
    let user = &set.users[ex.user];
    let history = set.history(ex);
    if history.last().is_some_and(|a| a.timestamp >= ex.target.timestamp) {
        return Err(Error::Data(format!(
            "history of user {} does not precede target at {}",
            user.user_id, ex.target.timestamp
        )));
    }
    let branch = if cfg.variant.dbr {
        route_history(target[0], history, &cfg.windows, model.level1_embeddings()).branch
    } else {
        Branch::Long
    };
    let routed = match branch {
        Branch::Long => Window::suffix(history, cfg.windows.long),
        Branch::Short => Window::suffix(history, cfg.windows.short),
    };
    let coarse_mem = model.encode_context(tape, &user.static_features, &routed)?;
    let coarse_proj = model.project_memory(tape, &coarse_mem)?;
    let mut logits = model.decode_positions(tape, &[], &coarse_proj, &[0])?;

    if ex.clicked && depth > 1 {
        let positions: Vec<usize> = (1..depth).collect();
        let prefix = &target[..depth - 1];
        let fine = if cfg.variant.s2d {
            let w = fine_window(history, target[0], &cfg.s2d);
            let mem = model.encode_context(tape, &user.static_features, &w)?;
            let proj = model.project_memory(tape, &mem)?;
            model.decode_positions(tape, prefix, &proj, &positions)?
        } else {
            model.decode_positions(tape, prefix, &coarse_proj, &positions)?
        };
        logits.extend(fine);
    }

    let mut level_probs = Vec::with_capacity(logits.len());
    for (l, z) in logits.into_iter().enumerate() {
        let p = tape.softmax(z)?;
        level_probs.push(tape.slice_cols(p, target[l] as usize, 1)?);
    }
    Ok(ExampleForward { level_probs, branch })
}

/// Loss contribution of one example before division by the batch size.
/// Returns the loss node and whether it came from a click.
pub fn example_loss(tape: &mut Tape, fwd: &ExampleForward, clicked: bool, cfg: &LossConfig) -> Result<NodeId> {
    let eps = cfg.epsilon;
    if clicked {
        let mut terms = Vec::with_capacity(fwd.level_probs.len());
        for &p in &fwd.level_probs {
            let c = tape.clamp(p, eps, 1.0 - eps)?;
            let l = tape.ln(c)?;
            terms.push(tape.scale(l, -1.0)?);
        }
        let cat = if terms.len() == 1 { terms[0] } else { tape.concat_cols(&terms)? };
        Ok(tape.sum(cat)?)
    } else {
        let c = tape.clamp(fwd.level_probs[0], eps, 1.0 - eps)?;
        let q = tape.affine(c, -1.0, 1.0)?;
        let l = tape.ln(q)?;
        Ok(tape.scale(l, -cfg.alpha)?)
    }
}

/// Mean loss of `batch` recorded on a single tape.
pub fn batch_loss(
    tape: &mut Tape,
    model: &DecoderModel,
    set: &TrainingSet,
    batch: &[usize],
    cfg: &PipelineConfig,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &set.examples[i];
        let fwd = forward_example(tape, model, set, ex, cfg)?;
        terms.push(example_loss(tape, &fwd, ex.clicked, &cfg.loss)?);
    }
    let cat = if terms.len() == 1 { terms[0] } else { tape.concat_cols(&terms)? };
    let s = tape.sum(cat)?;
    Ok(tape.scale(s, 1.0 / batch.len() as Real)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Clicked targets per step; their logged exposures ride along.
    pub batch: usize,
    pub steps: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 32,
            steps: 300,
            seed: 0,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = self.m.get(id).data();
            let v = self.v.get(id).data();
            for ((p, mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: Real,
    pub loss_pos: Real,
    pub loss_neg: Real,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    /// How often the coarse step was routed to each branch (long, short).
    pub route_counts: (usize, usize),
}

struct ExampleResult {
    loss: Real,
    clicked: bool,
    branch: Branch,
    grads: Gradients,
}

const CHUNK: usize = 8;

fn run_examples(model: &DecoderModel, set: &TrainingSet, idx: &[usize], cfg: &PipelineConfig, scale: Real) -> Result<Vec<ExampleResult>> {
    let chunks: Vec<Result<Vec<ExampleResult>>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    let ex = &set.examples[i];
                    let mut tape = Tape::new(model.params());
                    let fwd = forward_example(&mut tape, model, set, ex, cfg)?;
                    let loss = example_loss(&mut tape, &fwd, ex.clicked, &cfg.loss)?;
                    let grads = tape.backward_scaled(loss, scale)?;
                    Ok(ExampleResult {
                        loss: tape.value(loss).item(),
                        clicked: ex.clicked,
                        branch: fwd.branch,
                        grads,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(idx.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Examples in step `step`'s batch under `variant`, given a group order.
fn batch_indices(set: &TrainingSet, order: &[usize], step: usize, batch: usize, entp: bool) -> Vec<usize> {
    let n = order.len();
    let mut out = Vec::new();
    for j in 0..batch {
        let g = &set.groups[order[(step * batch + j) % n]];
        if entp {
            out.extend_from_slice(g);
        } else {
            out.push(g[0]);
        }
    }
    out
}

/// Epoch-wise shuffled group order covering `steps * batch` draws.
fn group_order(n_groups: usize, draws: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(draws.max(n_groups));
    while order.len() < draws {
        let mut epoch: Vec<usize> = (0..n_groups).collect();
        epoch.shuffle(&mut rng);
        order.extend(epoch);
    }
    order
}

/// Trains `model` in place. Deterministic given the seed: batch order comes
/// from the seed and gradients are reduced in a fixed order.
pub fn train(
    model: &mut DecoderModel,
    set: &TrainingSet,
    cfg: &PipelineConfig,
    opt: &OptimizerConfig,
    mut on_step: impl FnMut(&LossPoint),
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if set.groups.is_empty() {
        return Err(Error::Data("training set has no clicked examples".into()));
    }
    if opt.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let order = group_order(set.groups.len(), opt.steps * opt.batch, opt.seed);
    let mut adam = Adam::new(model.params());
    let mut report = TrainReport::default();
    for step in 0..opt.steps {
        let idx = batch_indices(set, &order, step, opt.batch, cfg.variant.entp);
        let inv_n = 1.0 / idx.len() as Real;
        let results = run_examples(model, set, &idx, cfg, inv_n).map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { node, op }) => Error::Diverged {
                step,
                detail: format!("non-finite value at node {node} ({op})"),
            },
            other => other,
        })?;
        let mut grads = Gradients::zeros_like(model.params());
        let (mut pos, mut neg) = (0.0, 0.0);
        for r in &results {
            grads.add_scaled(&r.grads, 1.0);
            if r.clicked {
                pos += r.loss;
            } else {
                neg += r.loss;
            }
            match r.branch {
                Branch::Long => report.route_counts.0 += 1,
                Branch::Short => report.route_counts.1 += 1,
            }
        }
        let point = LossPoint {
            step,
            loss: (pos + neg) * inv_n,
            loss_pos: pos * inv_n,
            loss_neg: neg * inv_n,
        };
        if !point.loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}", point.loss),
            });
        }
        on_step(&point);
        report.curve.push(point);
        adam.step(model.params_mut(), &grads, opt);
    }
    Ok(report)
}

/// Mean loss over the groups without updating anything.
pub fn evaluate_loss(model: &DecoderModel, set: &TrainingSet, cfg: &PipelineConfig, groups: &[usize]) -> Result<LossPoint> {
    let mut idx = Vec::new();
    for &g in groups {
        if cfg.variant.entp {
            idx.extend_from_slice(&set.groups[g]);
        } else {
            idx.push(set.groups[g][0]);
        }
    }
    let inv_n = 1.0 / idx.len().max(1) as Real;
    let results = run_examples(model, set, &idx, cfg, inv_n)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for r in &results {
        if r.clicked {
            pos += r.loss;
        } else {
            neg += r.loss;
        }
    }
    Ok(LossPoint {
        step: 0,
        loss: (pos + neg) * inv_n,
        loss_pos: pos * inv_n,
        loss_neg: neg * inv_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(probs: &[Real], clicked: bool) -> ExampleProbs {
        ExampleProbs {
            probs: probs.to_vec(),
            clicked,
        }
    }

    #[test]
    fn perfect_positive_costs_only_the_clip() {
        let cfg = LossConfig::default();
        let l = entp_loss(&[ex(&[1.0, 1.0, 1.0], true)], &cfg).unwrap();
        assert!((l - (-3.0 * (1.0 - 1e-6f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn suppressed_negative_costs_only_the_clip() {
        let cfg = LossConfig::default();
        let l = entp_loss(&[ex(&[0.0], false)], &cfg).unwrap();
        assert!((l - (-0.1 * (1.0 - 1e-6f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn half_probability_negative() {
        let l = entp_loss(&[ex(&[0.5], false)], &LossConfig::default()).unwrap();
        assert!((l - 0.069_314_718_055_994_53).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(entp_loss(&[], &LossConfig::default()).is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig { alpha: 0.1, epsilon: 0.5 }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, epsilon: 1e-6 }.validate().is_err());
        assert!(LossConfig { alpha: 0.0, epsilon: 1e-6 }.validate().is_ok());
    }

    #[test]
    fn variant_names() {
        let names: Vec<_> = Variant::ablations().iter().map(Variant::name).collect();
        assert_eq!(names, vec!["full", "wo_dbr", "wo_s2d", "wo_entp"]);
    }
}
