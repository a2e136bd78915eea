//! Residual k-means (RQ-KMeans) codebooks and semantic-ID encoding.
//!
//! Level 1 clusters the raw item vectors; every further level clusters what
//! is left after subtracting the centroids chosen at earlier levels.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NamedTensors, Real, Tensor};

/// The semantic ID of one item: one token per codebook level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SidTuple(pub Vec<u32>);

impl SidTuple {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn level1(&self) -> u32 {
        self.0[0]
    }
}

impl fmt::Display for SidTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("need at least {k} vectors for a level of size {k}, got {n}")]
    TooFewVectors { n: usize, k: usize },
    #[error("non-finite value in input vector {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid quantizer config: {0}")]
    Config(String),
    #[error("malformed codebook file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Distance-squared weighted seeding.
    KMeansPlusPlus,
    /// Distinct points drawn uniformly.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            seed: 0,
            init: InitMethod::KMeansPlusPlus,
        }
    }
}

/// Per-level centroid matrices, level `l` of shape `|C(l)| x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookHierarchy {
    levels: Vec<Tensor>,
    dim: usize,
}

/// Trace of one fitted level, kept for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFit {
    /// Within-cluster SSE after each centroid update.
    pub sse_history: Vec<Real>,
    pub iterations: usize,
    pub converged: bool,
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizationReport {
    pub per_level_mse: Vec<Real>,
    pub per_level_token_histogram: Vec<Vec<usize>>,
    /// Items whose full SID is shared with at least one other item.
    pub collision_count: usize,
    pub distinct_sids: usize,
}

fn sq_dist(a: &[Real], b: &[Real]) -> Real {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Index of the nearest row of `centroids`, lowest index on ties.
fn nearest(point: &[Real], centroids: &[Real], dim: usize) -> (usize, Real) {
    let mut best = (0, Real::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// RNG stream used to seed level `level` (0-based).
pub fn level_rng(seed: u64, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64 + 1);
    rng
}

/// Initial centroids for one level, as a flat `k x dim` buffer.
pub fn init_centroids(points: &[Real], dim: usize, k: usize, method: InitMethod, rng: &mut impl Rng) -> Vec<Real> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    match method {
        InitMethod::Random => {
            for i in rand::seq::index::sample(rng, n, k) {
                centroids.extend_from_slice(row(i));
            }
        }
        InitMethod::KMeansPlusPlus => {
            let first = rng.random_range(0..n);
            centroids.extend_from_slice(row(first));
            let mut d2: Vec<Real> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
            for _ in 1..k {
                let total: Real = d2.iter().sum();
                let pick = if total > 0.0 {
                    let target = rng.random::<Real>() * total;
                    let mut acc = 0.0;
                    let mut chosen = n - 1;
                    for (i, &w) in d2.iter().enumerate() {
                        acc += w;
                        if acc > target {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                } else {
                    rng.random_range(0..n)
                };
                centroids.extend_from_slice(row(pick));
                for (i, d) in d2.iter_mut().enumerate() {
                    *d = d.min(sq_dist(row(i), row(pick)));
                }
            }
        }
    }
    centroids
}

fn assign_all(points: &[Real], centroids: &[Real], dim: usize) -> Vec<usize> {
    points.chunks(dim).map(|p| nearest(p, centroids, dim).0).collect()
}

fn update_means(points: &[Real], assign: &[usize], k: usize, dim: usize) -> Vec<Real> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks(dim).zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            for s in &mut sums[j * dim..(j + 1) * dim] {
                *s /= c as Real;
            }
        }
    }
    sums
}

fn sse(points: &[Real], assign: &[usize], centroids: &[Real], dim: usize) -> Real {
    points
        .chunks(dim)
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a * dim..(a + 1) * dim]))
        .sum()
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from clusters that can spare one. Returns true if anything moved.
fn repair_empty(points: &[Real], assign: &mut [usize], centroids: &mut [Real], k: usize, dim: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    let mut moved = false;
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<(usize, Real)> = None;
        for (i, p) in points.chunks(dim).enumerate() {
            let a = assign[i];
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a * dim..(a + 1) * dim]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        counts[assign[i]] -= 1;
        assign[i] = j;
        counts[j] = 1;
        centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        moved = true;
    }
    moved
}

/// Lloyd iterations from the given initial centroids.
pub fn lloyd(points: &[Real], dim: usize, mut centroids: Vec<Real>, max_iters: usize) -> (Vec<Real>, LevelFit) {
    let k = centroids.len() / dim;
    let mut assign = assign_all(points, &centroids, dim);
    repair_empty(points, &mut assign, &mut centroids, k, dim);
    let mut sse_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        centroids = update_means(points, &assign, k, dim);
        sse_history.push(sse(points, &assign, &centroids, dim));
        let mut next = assign_all(points, &centroids, dim);
        let mut trial = centroids.clone();
        if repair_empty(points, &mut next, &mut trial, k, dim) {
            centroids = trial;
        }
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    if max_iters == 0 {
        centroids = update_means(points, &assign, k, dim);
    }
    (
        centroids,
        LevelFit {
            sse_history,
            iterations,
            converged,
            assignments: assign,
        },
    )
}

impl CodebookHierarchy {
    pub fn from_levels(levels: Vec<Tensor>) -> Result<Self, QuantizerError> {
        let dim = levels.first().map(Tensor::cols).unwrap_or(0);
        for l in &levels {
            if l.shape().len() != 2 || l.cols() != dim {
                return Err(QuantizerError::Format(format!("level shape {:?}", l.shape())));
            }
        }
        Ok(Self { levels, dim })
    }

    /// Fits the hierarchy. `vectors` is a flat `n x dim` buffer.
    pub fn fit(vectors: &[Real], dim: usize, level_sizes: &[usize], cfg: &KMeansConfig) -> Result<Self, QuantizerError> {
        Self::fit_traced(vectors, dim, level_sizes, cfg).map(|(h, _)| h)
    }

    pub fn fit_traced(
        vectors: &[Real],
        dim: usize,
        level_sizes: &[usize],
        cfg: &KMeansConfig,
    ) -> Result<(Self, Vec<LevelFit>), QuantizerError> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(QuantizerError::Config(format!(
                "buffer of {} values is not a multiple of dim {dim}",
                vectors.len()
            )));
        }
        if level_sizes.is_empty() || level_sizes.contains(&0) {
            return Err(QuantizerError::Config("level sizes must be non-empty and positive".into()));
        }
        let n = vectors.len() / dim;
        if let Some(&k) = level_sizes.iter().find(|&&k| k > n) {
            return Err(QuantizerError::TooFewVectors { n, k });
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFinite(i / dim));
        }

        let mut residual = vectors.to_vec();
        let mut levels = Vec::with_capacity(level_sizes.len());
        let mut traces = Vec::with_capacity(level_sizes.len());
        for (l, &k) in level_sizes.iter().enumerate() {
            let mut rng = level_rng(cfg.seed, l);
            let init = init_centroids(&residual, dim, k, cfg.init, &mut rng);
            let (centroids, fit) = lloyd(&residual, dim, init, cfg.max_iters);
            for (r, &a) in residual.chunks_mut(dim).zip(&fit.assignments) {
                for (x, c) in r.iter_mut().zip(&centroids[a * dim..(a + 1) * dim]) {
                    *x -= c;
                }
            }
            levels.push(Tensor::matrix(k, dim, centroids).expect("k x dim centroids"));
            traces.push(fit);
        }
        Ok((Self { levels, dim }, traces))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Tensor::rows).collect()
    }

    pub fn centroids(&self, level: usize) -> &Tensor {
        &self.levels[level]
    }

    pub fn encode(&self, vector: &[Real]) -> Result<SidTuple, QuantizerError> {
        if vector.len() != self.dim {
            return Err(QuantizerError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let mut residual = vector.to_vec();
        let mut tokens = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (j, _) = nearest(&residual, level.data(), self.dim);
            for (x, c) in residual.iter_mut().zip(level.row_slice(j)) {
                *x -= c;
            }
            tokens.push(j as u32);
        }
        Ok(SidTuple(tokens))
    }

    /// Sum of the centroids named by `sid`.
    pub fn reconstruct(&self, sid: &SidTuple) -> Vec<Real> {
        let mut out = vec![0.0; self.dim];
        for (level, &t) in self.levels.iter().zip(sid.tokens()) {
            for (o, c) in out.iter_mut().zip(level.row_slice(t as usize)) {
                *o += c;
            }
        }
        out
    }

    pub fn report(&self, vectors: &[Real]) -> Result<QuantizationReport, QuantizerError> {
        let n = vectors.len() / self.dim.max(1);
        let mut per_level_sse = vec![0.0; self.levels.len()];
        let mut hist: Vec<Vec<usize>> = self.levels.iter().map(|l| vec![0; l.rows()]).collect();
        let mut counts: HashMap<SidTuple, usize> = HashMap::new();
        for v in vectors.chunks(self.dim) {
            let sid = self.encode(v)?;
            let mut residual = v.to_vec();
            for (l, level) in self.levels.iter().enumerate() {
                let t = sid.0[l] as usize;
                hist[l][t] += 1;
                for (x, c) in residual.iter_mut().zip(level.row_slice(t)) {
                    *x -= c;
                }
                per_level_sse[l] += residual.iter().map(|x| x * x).sum::<Real>();
            }
            *counts.entry(sid).or_default() += 1;
        }
        let collision_count = counts.values().filter(|&&c| c > 1).sum();
        Ok(QuantizationReport {
            per_level_mse: per_level_sse.iter().map(|s| s / n.max(1) as Real).collect(),
            per_level_token_histogram: hist,
            collision_count,
            distinct_sids: counts.len(),
        })
    }

    /// Tensors named `level{l}/centroids`, `l` starting at 1.
    pub fn to_named(&self) -> NamedTensors {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, t)| (format!("level{}/centroids", l + 1), t.clone()))
            .collect()
    }

    pub fn from_named(named: &NamedTensors) -> Result<Self, QuantizerError> {
        let mut levels = Vec::new();
        for l in 1.. {
            let name = format!("level{l}/centroids");
            match named.iter().find(|(n, _)| *n == name) {
                Some((_, t)) => levels.push(t.clone()),
                None => break,
            }
        }
        if levels.is_empty() {
            return Err(QuantizerError::Format("no level1/centroids tensor".into()));
        }
        Self::from_levels(levels)
    }
}

/// Writes `item_id,s1,...,sL` rows.
pub fn write_sid_csv<W: Write>(mut w: W, items: &[(u32, SidTuple)]) -> io::Result<()> {
    let depth = items.first().map(|(_, s)| s.depth()).unwrap_or(3);
    let header: Vec<String> = (1..=depth).map(|l| format!("s{l}")).collect();
    writeln!(w, "item_id,{}", header.join(","))?;
    for (id, sid) in items {
        let toks: Vec<String> = sid.tokens().iter().map(u32::to_string).collect();
        writeln!(w, "{id},{}", toks.join(","))?;
    }
    w.flush()
}

pub fn read_sid_csv<R: BufRead>(r: R) -> io::Result<Vec<(u32, SidTuple)>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(|f| f.trim().parse::<u32>());
        let id = fields
            .next()
            .ok_or_else(|| bad(format!("line {}: empty", i + 1)))?
            .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        let toks = fields
            .collect::<Result<Vec<u32>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        out.push((id, SidTuple(toks)));
    }
    Ok(out)
}
