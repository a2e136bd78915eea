//! Trie-constrained beam search, dual-branch merging and item lookup.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ProjectedMemory, UserContext, Window};
use crate::quantizer::SidTuple;
use crate::router::{Branch, WindowConfig};
use crate::s2d::{fine_window, BucketSearchConfig};
use crate::sid_index::SidTrie;
use crate::tensor::{log_softmax, Real, Tape};
use crate::training::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub prefix: Vec<u32>,
    pub log_prob: Real,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSid {
    pub sid: SidTuple,
    pub score: Real,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub sids: Vec<ScoredSid>,
    /// Fewer than `k` realizable tuples were available.
    pub exhausted: bool,
}

/// Descending score, then ascending tuple.
fn rank(a_score: Real, a: &[u32], b_score: Real, b: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

/// Where each decoding step gets its context.
pub trait MemoryProvider {
    fn coarse(&mut self, tape: &mut Tape) -> Result<ProjectedMemory>;
    fn fine(&mut self, tape: &mut Tape, s1: u32) -> Result<ProjectedMemory>;
}

/// Same memory for every level.
pub struct FixedMemory<'a> {
    pub model: &'a DecoderModel,
    pub static_features: &'a [u32],
    pub window: Window<'a>,
}

impl MemoryProvider for FixedMemory<'_> {
    fn coarse(&mut self, tape: &mut Tape) -> Result<ProjectedMemory> {
        let m = self.model.encode_context(tape, self.static_features, &self.window)?;
        self.model.project_memory(tape, &m)
    }

    fn fine(&mut self, tape: &mut Tape, _s1: u32) -> Result<ProjectedMemory> {
        self.coarse(tape)
    }
}

/// Branch window at level 1, bucket-filtered history for the fine levels.
pub struct BranchMemory<'a> {
    pub model: &'a DecoderModel,
    pub user: &'a UserContext,
    pub window: Window<'a>,
    pub s2d: Option<BucketSearchConfig>,
}

impl MemoryProvider for BranchMemory<'_> {
    fn coarse(&mut self, tape: &mut Tape) -> Result<ProjectedMemory> {
        let m = self.model.encode_context(tape, &self.user.static_features, &self.window)?;
        self.model.project_memory(tape, &m)
    }

    fn fine(&mut self, tape: &mut Tape, s1: u32) -> Result<ProjectedMemory> {
        match &self.s2d {
            Some(cfg) => {
                let w = fine_window(&self.user.history, s1, cfg);
                let m = self.model.encode_context(tape, &self.user.static_features, &w)?;
                self.model.project_memory(tape, &m)
            }
            None => self.coarse(tape),
        }
    }
}

/// Top-`k` complete tuples under a beam of width `beam`, expanding only
/// continuations present in `trie`.
pub fn beam_search(
    model: &DecoderModel,
    memory: &mut dyn MemoryProvider,
    trie: &SidTrie,
    beam: usize,
    k: usize,
    branch: Branch,
) -> Result<BeamOutput> {
    if k == 0 || beam < k {
        return Err(Error::Config(format!("need beam >= k >= 1, got beam {beam} k {k}")));
    }
    let depth = model.config().depth();
    if trie.depth() != depth {
        return Err(Error::Config(format!(
            "trie depth {} does not match model depth {depth}",
            trie.depth()
        )));
    }
    let mut tape = Tape::new(model.params());
    let coarse = memory.coarse(&mut tape)?;
    let mut fine: BTreeMap<u32, ProjectedMemory> = BTreeMap::new();
    let mut hyps = vec![BeamHypothesis {
        prefix: Vec::new(),
        log_prob: 0.0,
        branch,
    }];
    for level in 0..depth {
        let mut next = Vec::new();
        for h in &hyps {
            let allowed = trie.valid_continuations(&h.prefix);
            if allowed.is_empty() {
                continue;
            }
            let mem = if level == 0 {
                &coarse
            } else {
                let s1 = h.prefix[0];
                if !fine.contains_key(&s1) {
                    let m = memory.fine(&mut tape, s1)?;
                    fine.insert(s1, m);
                }
                &fine[&s1]
            };
            let z = model.decode_positions(&mut tape, &h.prefix, mem, &[level])?[0];
            let logp = log_softmax(tape.value(z).data());
            for t in allowed {
                let mut prefix = h.prefix.clone();
                prefix.push(t);
                next.push(BeamHypothesis {
                    prefix,
                    log_prob: h.log_prob + logp[t as usize],
                    branch,
                });
            }
        }
        next.sort_by(|a, b| rank(a.log_prob, &a.prefix, b.log_prob, &b.prefix));
        next.truncate(beam);
        hyps = next;
    }
    let exhausted = hyps.len() < k;
    hyps.truncate(k);
    Ok(BeamOutput {
        sids: hyps
            .into_iter()
            .map(|h| ScoredSid {
                sid: SidTuple(h.prefix),
                score: h.log_prob,
                branch,
            })
            .collect(),
        exhausted,
    })
}

/// Dedupes by tuple keeping the higher score, reserves `min(k/2, |set|)`
/// slots for each branch's own top tuples, fills the rest by score.
pub fn merge_branches(long: &[ScoredSid], short: &[ScoredSid], k: usize) -> Vec<ScoredSid> {
    let mut best: BTreeMap<&SidTuple, ScoredSid> = BTreeMap::new();
    for s in long.iter().chain(short) {
        match best.get(&s.sid) {
            Some(b) if b.score >= s.score => {}
            _ => {
                best.insert(&s.sid, s.clone());
            }
        }
    }
    let quota = k / 2;
    let mut chosen: Vec<&SidTuple> = Vec::new();
    let mut taken: HashSet<&SidTuple> = HashSet::new();
    for set in [long, short] {
        let mut n = 0;
        for s in set {
            if n == quota.min(set.len()) {
                break;
            }
            if taken.insert(&s.sid) {
                chosen.push(&s.sid);
            }
            n += 1;
        }
    }
    let mut rest: Vec<&ScoredSid> = best.values().filter(|s| !taken.contains(&s.sid)).collect();
    rest.sort_by(|a, b| rank(a.score, &a.sid.0, b.score, &b.sid.0));
    for s in rest {
        if chosen.len() >= k {
            break;
        }
        chosen.push(&s.sid);
    }
    let mut out: Vec<ScoredSid> = chosen.into_iter().take(k).map(|sid| best[sid].clone()).collect();
    out.sort_by(|a, b| rank(a.score, &a.sid.0, b.score, &b.sid.0));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub beam: usize,
    pub k_sids: usize,
    pub k_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedItem {
    pub item_id: u32,
    pub sid: SidTuple,
    pub score: Real,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RetrievalResult {
    pub items: Vec<RetrievedItem>,
    pub exhausted: bool,
}

impl RetrievalResult {
    pub fn item_ids(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.item_id).collect()
    }
}

/// Full inference path: decode each branch, merge, map SIDs to items.
pub fn retrieve(
    user: &UserContext,
    model: &DecoderModel,
    trie: &SidTrie,
    windows: &WindowConfig,
    s2d: &BucketSearchConfig,
    variant: Variant,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    if cfg.k_items == 0 || trie.item_count() == 0 {
        return Ok(RetrievalResult::default());
    }
    let s2d = variant.s2d.then_some(*s2d);
    let k = cfg.k_sids.max(1);
    let beam = cfg.beam.max(k);
    let run = |branch: Branch, len: usize| {
        let mut mem = BranchMemory {
            model,
            user,
            window: Window::suffix(&user.history, len),
            s2d,
        };
        beam_search(model, &mut mem, trie, beam, k, branch)
    };
    let long = run(Branch::Long, windows.long)?;
    let (merged, exhausted) = if variant.dbr {
        let short = run(Branch::Short, windows.short)?;
        (merge_branches(&long.sids, &short.sids, k), long.exhausted && short.exhausted)
    } else {
        (long.sids, long.exhausted)
    };
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(cfg.k_items);
    for s in &merged {
        if items.len() >= cfg.k_items {
            break;
        }
        for id in trie.lookup(&s.sid, cfg.k_items - items.len()) {
            if seen.insert(id) {
                items.push(RetrievedItem {
                    item_id: id,
                    sid: s.sid.clone(),
                    score: s.score,
                    branch: s.branch,
                });
            }
        }
    }
    let exhausted = exhausted || items.len() < cfg.k_items;
    Ok(RetrievalResult { items, exhausted })
}

/// One JSON Lines record of retrieval output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalRecord {
    pub user_id: u32,
    pub items: Vec<u32>,
    pub sids: Vec<String>,
    pub scores: Vec<Real>,
    pub branches: Vec<Branch>,
}

impl RetrievalRecord {
    pub fn new(user_id: u32, r: &RetrievalResult) -> Self {
        Self {
            user_id,
            items: r.item_ids(),
            sids: r.items.iter().map(|i| i.sid.to_string()).collect(),
            scores: r.items.iter().map(|i| i.score).collect(),
            branches: r.items.iter().map(|i| i.branch).collect(),
        }
    }
}
