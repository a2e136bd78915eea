//! End-to-end pipeline driven by one TOML run config: world generation,
//! quantization, training, offline hit-rate evaluation, ablations, sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beam::{retrieve, RetrievalConfig, RetrievalRecord};
use crate::error::{Error, Result};
use crate::model::{ActionRecord, DecoderModel, ModelConfig, UserContext};
use crate::quantizer::{read_sid_csv, write_sid_csv, CodebookHierarchy, InitMethod, KMeansConfig, QuantizationReport, SidTuple};
use crate::router::WindowConfig;
use crate::s2d::BucketSearchConfig;
use crate::sid_index::{IndexedItem, SidTrie};
use crate::simulator::{
    generate_catalog, generate_logs, leakage_violations, read_jsonl, split, write_catalog_csv, write_jsonl, Catalog,
    LogRecord, Logs, Split, UserProfile, WorldConfig,
};
use crate::tensor::{read_checkpoint, write_checkpoint, NamedTensors, Real, Tape, Tensor};
use crate::training::{
    batch_loss, train, LossConfig, LossPoint, OptimizerConfig, PipelineConfig, TrainReport, TrainingExample,
    TrainingSet, Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub level_sizes: Vec<usize>,
    pub max_iters: usize,
    pub init: InitMethod,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            level_sizes: vec![16, 8, 8],
            max_iters: 50,
            init: InitMethod::KMeansPlusPlus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub ln_eps: Real,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_blocks: 1,
            n_heads: 2,
            d_ffn: 64,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    pub beam: usize,
    /// SIDs kept after merging; 0 means the largest evaluated K.
    pub k_sids: usize,
}

impl Default for BeamSection {
    fn default() -> Self {
        Self { beam: 50, k_sids: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: Vec<usize>,
    /// Evaluate at most this many requests (0 = all), taken in user order.
    pub max_requests: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: vec![10, 20, 50],
            max_requests: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Seeds averaged by `ablate` and `sweep`.
    pub seeds: Vec<u64>,
    pub l_short: Vec<usize>,
    pub alpha: Vec<Real>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            l_short: vec![2, 5, 10, 20],
            alpha: vec![0.0, 0.1, 1.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the world, quantizer, model initialization and batch order.
    pub seed: u64,
    pub world: WorldConfig,
    pub quantizer: QuantizerSection,
    pub model: ModelSection,
    pub router: WindowConfig,
    pub s2d: BucketSearchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub beam: BeamSection,
    pub eval: EvalSection,
    pub variant: Variant,
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            quantizer: QuantizerSection::default(),
            model: ModelSection::default(),
            router: WindowConfig { long: 40, short: 5 },
            s2d: BucketSearchConfig { cap: 12, fallback_cap: 5 },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig {
                lr: 3e-3,
                batch: 16,
                steps: 400,
                ..OptimizerConfig::default()
            },
            beam: BeamSection::default(),
            eval: EvalSection::default(),
            variant: Variant::FULL,
            experiment: ExperimentSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Same config with every seed-dependent part reseeded.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.router.validate()?;
        self.s2d.validate()?;
        self.loss.validate()?;
        self.model_config().validate()?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) || self.eval.k.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.k must be non-empty, positive and strictly ascending".into()));
        }
        if self.beam.beam == 0 {
            return Err(Error::Config("beam.beam must be >= 1".into()));
        }
        Ok(())
    }

    fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            d_ffn: self.model.d_ffn,
            level_sizes: self.quantizer.level_sizes.clone(),
            max_history: self.router.long.max(self.s2d.cap),
            static_cardinalities: self.world.static_cardinalities.clone(),
            n_tags: self.world.n_tags,
            n_watch_buckets: self.world.n_watch_buckets,
            ln_eps: self.model.ln_eps,
        }
    }

    pub fn pipeline(&self, variant: Variant) -> PipelineConfig {
        PipelineConfig {
            windows: self.router,
            s2d: self.s2d,
            loss: self.loss,
            variant,
        }
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed,
            ..self.optimizer
        }
    }

    fn retrieval_config(&self) -> RetrievalConfig {
        let k_max = *self.eval.k.last().expect("validated");
        let k_sids = if self.beam.k_sids == 0 { k_max } else { self.beam.k_sids };
        RetrievalConfig {
            beam: self.beam.beam.max(k_sids),
            k_sids,
            k_items: k_max,
        }
    }
}

/// Generated catalog, logs and their train/eval split.
#[derive(Debug, Clone)]
pub struct World {
    pub catalog: Catalog,
    pub logs: Logs,
    pub split: Split,
}

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    let wc = cfg.world_config();
    let catalog = generate_catalog(&wc)?;
    let logs = generate_logs(&wc, &catalog)?;
    let split = split(&logs.records, wc.holdout)?;
    Ok(World { catalog, logs, split })
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub codebooks: CodebookHierarchy,
    /// SID of every catalog item, indexed by item id.
    pub sids: Vec<SidTuple>,
    pub report: QuantizationReport,
}

pub fn quantize(cfg: &RunConfig, catalog: &Catalog) -> Result<Quantized> {
    let kcfg = KMeansConfig {
        max_iters: cfg.quantizer.max_iters,
        seed: cfg.seed,
        init: cfg.quantizer.init,
    };
    let codebooks = CodebookHierarchy::fit(&catalog.vectors, catalog.d, &cfg.quantizer.level_sizes, &kcfg)?;
    let sids = catalog
        .vectors
        .chunks(catalog.d)
        .map(|v| codebooks.encode(v))
        .collect::<Result<Vec<_>, _>>()?;
    let report = codebooks.report(&catalog.vectors)?;
    Ok(Quantized { codebooks, sids, report })
}

/// Warning text when some level has a single code.
pub fn single_path_warning(level_sizes: &[usize]) -> Option<String> {
    level_sizes
        .iter()
        .position(|&k| k == 1)
        .map(|l| format!("warning: level {} has a single code; the trie degenerates to a single path there", l + 1))
}

fn to_action(r: &LogRecord, sids: &[SidTuple]) -> ActionRecord {
    ActionRecord {
        item_id: r.item_id,
        sid: sids[r.item_id as usize].clone(),
        timestamp: r.timestamp,
        clicked: r.clicked == 1,
        watch_bucket: r.watch_time_bucket,
        tags: r.tags.clone(),
    }
}

/// Training examples from the training side of the split: every click is a
/// positive, every exposure a negative, each against the clicks before it.
pub fn training_set(split: &Split, users: &[UserProfile], sids: &[SidTuple]) -> TrainingSet {
    let profiles: BTreeMap<u32, &UserProfile> = users.iter().map(|u| (u.user_id, u)).collect();
    let mut set = TrainingSet::default();
    for (&uid, recs) in &split.train {
        let idx = set.users.len();
        let history: Vec<ActionRecord> = recs.iter().filter(|r| r.clicked == 1).map(|r| to_action(r, sids)).collect();
        let mut seen = 0;
        for r in recs {
            set.examples.push(TrainingExample {
                user: idx,
                history_len: seen,
                target: to_action(r, sids),
                clicked: r.clicked == 1,
            });
            if r.clicked == 1 {
                seen += 1;
            }
        }
        set.users.push(UserContext {
            user_id: uid,
            static_features: profiles.get(&uid).map(|p| p.static_features.clone()).unwrap_or_default(),
            history,
        });
    }
    set.regroup();
    set
}

/// Corpus index weighted by training click counts.
pub fn build_trie(split: &Split, sids: &[SidTuple], level_sizes: &[usize]) -> Result<SidTrie> {
    let mut pop = vec![0.0; sids.len()];
    for recs in split.train.values() {
        for r in recs.iter().filter(|r| r.clicked == 1) {
            pop[r.item_id as usize] += 1.0;
        }
    }
    let items: Vec<IndexedItem> = sids
        .iter()
        .enumerate()
        .map(|(i, s)| IndexedItem {
            item_id: i as u32,
            sid: s.clone(),
            popularity: pop[i],
        })
        .collect();
    Ok(SidTrie::build(&items, level_sizes)?)
}

/// Evaluation requests as user contexts paired with the held-out item.
pub fn eval_requests(world: &World, sids: &[SidTuple], max: usize) -> Vec<(UserContext, u32)> {
    let profiles: BTreeMap<u32, &UserProfile> = world.logs.users.iter().map(|u| (u.user_id, u)).collect();
    let n = if max == 0 { world.split.eval.len() } else { max.min(world.split.eval.len()) };
    world.split.eval[..n]
        .iter()
        .map(|req| {
            let user = UserContext {
                user_id: req.user_id,
                static_features: profiles.get(&req.user_id).map(|p| p.static_features.clone()).unwrap_or_default(),
                history: req.history.iter().map(|r| to_action(r, sids)).collect(),
            };
            (user, req.target.item_id)
        })
        .collect()
}

pub fn train_model(cfg: &RunConfig, variant: Variant, set: &TrainingSet) -> Result<(DecoderModel, TrainReport)> {
    let mut model = DecoderModel::new(cfg.model_config(), cfg.seed)?;
    let report = train(&mut model, set, &cfg.pipeline(variant), &cfg.optimizer_config(), |_| {})?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Fraction of requests whose held-out click is in the top K, per K.
    pub hit_rate: Vec<Real>,
    pub requests: usize,
    /// Hits at the largest K credited to the branch that produced the SID.
    pub hits_long: usize,
    pub hits_short: usize,
    /// Mean number of distinct level-1 tokens among retrieved items.
    pub mean_level1_coverage: Real,
    /// Fraction of requests where the target's level-1 token was retrieved.
    pub level1_hit_rate: Real,
    pub exhausted: usize,
    pub records: Vec<RetrievalRecord>,
}

pub fn evaluate(
    cfg: &RunConfig,
    variant: Variant,
    model: &DecoderModel,
    trie: &SidTrie,
    requests: &[(UserContext, u32)],
    sids: &[SidTuple],
) -> Result<EvalReport> {
    use rayon::prelude::*;
    if requests.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let rc = cfg.retrieval_config();
    let results: Vec<_> = requests
        .par_iter()
        .map(|(user, _)| retrieve(user, model, trie, &cfg.router, &cfg.s2d, variant, &rc))
        .collect::<Result<_>>()?;
    let ks = cfg.eval.k.clone();
    let mut hits = vec![0usize; ks.len()];
    let (mut hits_long, mut hits_short, mut exhausted) = (0, 0, 0);
    let (mut coverage, mut l1_hits) = (0.0, 0usize);
    let mut records = Vec::with_capacity(requests.len());
    for ((user, target), res) in requests.iter().zip(&results) {
        if let Some(pos) = res.items.iter().position(|i| i.item_id == *target) {
            for (h, &k) in hits.iter_mut().zip(&ks) {
                if pos < k {
                    *h += 1;
                }
            }
            match res.items[pos].branch {
                crate::router::Branch::Long => hits_long += 1,
                crate::router::Branch::Short => hits_short += 1,
            }
        }
        let l1: BTreeSet<u32> = res.items.iter().map(|i| i.sid.level1()).collect();
        coverage += l1.len() as Real;
        if l1.contains(&sids[*target as usize].level1()) {
            l1_hits += 1;
        }
        exhausted += res.exhausted as usize;
        records.push(RetrievalRecord::new(user.user_id, res));
    }
    let n = requests.len() as Real;
    Ok(EvalReport {
        hit_rate: hits.iter().map(|&h| h as Real / n).collect(),
        ks,
        requests: requests.len(),
        hits_long,
        hits_short,
        mean_level1_coverage: coverage / n,
        level1_hit_rate: l1_hits as Real / n,
        exhausted,
        records,
    })
}

/// Untrained dot-product retriever: mean history vector against every item.
pub fn two_tower_hit_rate(world: &World, ks: &[usize], max: usize) -> Vec<Real> {
    let cat = &world.catalog;
    let n = if max == 0 { world.split.eval.len() } else { max.min(world.split.eval.len()) };
    let reqs = &world.split.eval[..n];
    let mut hits = vec![0usize; ks.len()];
    for req in reqs {
        let mut u = vec![0.0; cat.d];
        for r in &req.history {
            for (a, b) in u.iter_mut().zip(cat.vector(r.item_id as usize)) {
                *a += b;
            }
        }
        let target_score: Real = u.iter().zip(cat.vector(req.target.item_id as usize)).map(|(a, b)| a * b).sum();
        let tid = req.target.item_id as usize;
        let rank = (0..cat.len())
            .filter(|&i| {
                let s: Real = u.iter().zip(cat.vector(i)).map(|(a, b)| a * b).sum();
                s > target_score || (s == target_score && i < tid)
            })
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    hits.iter().map(|&h| h as Real / reqs.len().max(1) as Real).collect()
}

/// `|loss(alpha=0) * N - NTP(positives) * N_pos|` on the first batch of
/// groups; the exposure term must vanish exactly when alpha is zero.
pub fn alpha_zero_gap(cfg: &RunConfig, model: &DecoderModel, set: &TrainingSet) -> Result<Real> {
    let groups: Vec<usize> = (0..set.groups.len().min(cfg.optimizer.batch.max(1))).collect();
    let all: Vec<usize> = groups.iter().flat_map(|&g| set.groups[g].iter().copied()).collect();
    let pos: Vec<usize> = groups.iter().map(|&g| set.groups[g][0]).collect();
    let mut zero = cfg.pipeline(Variant::FULL);
    zero.loss.alpha = 0.0;
    let vanilla = cfg.pipeline(Variant {
        entp: false,
        ..Variant::FULL
    });
    let mut t = Tape::new(model.params());
    let a = batch_loss(&mut t, model, set, &all, &zero)?;
    let a = t.value(a).item() * all.len() as Real;
    let mut t = Tape::new(model.params());
    let b = batch_loss(&mut t, model, set, &pos, &vanilla)?;
    let b = t.value(b).item() * pos.len() as Real;
    Ok((a - b).abs())
}

/// Files written and lines to echo for one command.
#[derive(Debug, Clone, Default)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub messages: Vec<String>,
}

impl CommandOutput {
    fn file(&mut self, p: PathBuf) {
        self.files.push(p);
    }

    fn say(&mut self, m: impl Into<String>) {
        self.messages.push(m.into());
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn write_tensors(path: &Path, named: &NamedTensors) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(&mut w, named).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_tensors(path: &Path) -> Result<NamedTensors> {
    read_checkpoint(open(path)?).map_err(|e| Error::io(path, e))
}

pub const LOGS_FILE: &str = "logs.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const CATALOG_FILE: &str = "catalog.csv";
pub const VECTORS_FILE: &str = "catalog_vectors.dgr";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_REQUESTS_FILE: &str = "eval_requests.jsonl";
pub const CODEBOOKS_FILE: &str = "codebooks.dgr";
pub const SIDS_FILE: &str = "sids.csv";
pub const QUANT_REPORT_FILE: &str = "quantization_report.json";
pub const MODEL_FILE: &str = "model.dgr";
pub const LOSS_FILE: &str = "loss.csv";
pub const HR_FILE: &str = "hr.csv";
pub const RETRIEVALS_FILE: &str = "retrievals.jsonl";
pub const EVAL_TABLE_FILE: &str = "eval.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    users: usize,
    retained_users: usize,
    dropped_users: usize,
    train_records: usize,
    train_clicks: usize,
    train_exposures: usize,
    eval_requests: usize,
    leakage_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalRequestRow {
    user_id: u32,
    item_id: u32,
    timestamp: u64,
    history_len: usize,
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let world = build_world(cfg)?;
    let mut o = CommandOutput::default();
    let p = out.join(LOGS_FILE);
    let mut w = create(&p)?;
    write_jsonl(&mut w, &world.logs.records)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);

    let p = out.join(USERS_FILE);
    let mut w = create(&p)?;
    write_jsonl(&mut w, &world.logs.users)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);

    let p = out.join(CATALOG_FILE);
    let mut w = create(&p)?;
    write_catalog_csv(&mut w, &world.catalog)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);

    let p = out.join(VECTORS_FILE);
    let vectors = Tensor::matrix(world.catalog.len(), world.catalog.d, world.catalog.vectors.clone())?;
    write_tensors(&p, &vec![("items/vectors".to_string(), vectors)])?;
    o.file(p);

    let train_records: usize = world.split.train.values().map(Vec::len).sum();
    let train_clicks: usize = world
        .split
        .train
        .values()
        .map(|v| v.iter().filter(|r| r.clicked == 1).count())
        .sum();
    let manifest = SplitManifest {
        users: world.logs.users.len(),
        retained_users: world.split.train.len(),
        dropped_users: world.split.dropped_users,
        train_records,
        train_clicks,
        train_exposures: train_records - train_clicks,
        eval_requests: world.split.eval.len(),
        leakage_violations: leakage_violations(&world.split),
    };
    let p = out.join(SPLIT_FILE);
    write_text(&p, &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"))?;
    o.file(p);

    let rows: Vec<EvalRequestRow> = world
        .split
        .eval
        .iter()
        .map(|r| EvalRequestRow {
            user_id: r.user_id,
            item_id: r.target.item_id,
            timestamp: r.target.timestamp,
            history_len: r.history.len(),
        })
        .collect();
    let p = out.join(EVAL_REQUESTS_FILE);
    let mut w = create(&p)?;
    write_jsonl(&mut w, &rows)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);

    o.say(format!(
        "simulated {} items, {} users, {} log records ({} clicks in training, {} exposures); {} eval requests, {} users dropped",
        world.catalog.len(),
        manifest.users,
        world.logs.records.len(),
        manifest.train_clicks,
        manifest.train_exposures,
        manifest.eval_requests,
        manifest.dropped_users
    ));
    Ok(o)
}

pub fn cmd_quantize(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let named = read_tensors(&out.join(VECTORS_FILE))?;
    let vectors = named
        .iter()
        .find(|(n, _)| n == "items/vectors")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Data(format!("{VECTORS_FILE} lacks items/vectors")))?;
    let catalog = Catalog {
        d: vectors.cols(),
        vectors: vectors.into_data(),
        topics: Vec::new(),
        subtopics: Vec::new(),
        tags: Vec::new(),
        topic_centroids: Vec::new(),
    };
    let q = quantize(cfg, &catalog)?;
    let mut o = CommandOutput::default();
    if let Some(w) = single_path_warning(&cfg.quantizer.level_sizes) {
        o.say(w);
    }
    let p = out.join(CODEBOOKS_FILE);
    write_tensors(&p, &q.codebooks.to_named())?;
    o.file(p);
    let p = out.join(SIDS_FILE);
    let mut w = create(&p)?;
    let rows: Vec<(u32, SidTuple)> = q.sids.iter().enumerate().map(|(i, s)| (i as u32, s.clone())).collect();
    write_sid_csv(&mut w, &rows).map_err(|e| Error::io(&p, e))?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);
    let p = out.join(QUANT_REPORT_FILE);
    write_text(&p, &(serde_json::to_string_pretty(&q.report).expect("report") + "\n"))?;
    o.file(p);
    let mse: Vec<String> = q.report.per_level_mse.iter().map(|m| format!("{m:.6}")).collect();
    o.say(format!(
        "quantized {} items into {} distinct SIDs; per-level residual MSE [{}]; {} items share a SID",
        q.sids.len(),
        q.report.distinct_sids,
        mse.join(", "),
        q.report.collision_count
    ));
    Ok(o)
}

/// World and SIDs loaded back from the output directory.
struct Artifacts {
    world: World,
    sids: Vec<SidTuple>,
}

fn load_artifacts(cfg: &RunConfig, out: &Path) -> Result<Artifacts> {
    let records: Vec<LogRecord> = read_jsonl(open(&out.join(LOGS_FILE))?)?;
    let users: Vec<UserProfile> = read_jsonl(open(&out.join(USERS_FILE))?)?;
    let sid_rows = read_sid_csv(open(&out.join(SIDS_FILE))?).map_err(|e| Error::io(out.join(SIDS_FILE), e))?;
    let mut sids = vec![SidTuple(Vec::new()); sid_rows.len()];
    for (id, s) in sid_rows {
        let slot = sids
            .get_mut(id as usize)
            .ok_or_else(|| Error::Data(format!("{SIDS_FILE}: item id {id} out of range")))?;
        *slot = s;
    }
    if let Some(r) = records.iter().find(|r| r.item_id as usize >= sids.len()) {
        return Err(Error::Data(format!("log references item {} without a SID", r.item_id)));
    }
    let named = read_tensors(&out.join(VECTORS_FILE))?;
    let vectors = named
        .into_iter()
        .find(|(n, _)| n == "items/vectors")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Data(format!("{VECTORS_FILE} lacks items/vectors")))?;
    let n = vectors.rows();
    let catalog = Catalog {
        d: vectors.cols(),
        vectors: vectors.into_data(),
        topics: vec![0; n],
        subtopics: vec![0; n],
        tags: vec![Vec::new(); n],
        topic_centroids: Vec::new(),
    };
    let split = split(&records, cfg.world.holdout)?;
    Ok(Artifacts {
        world: World {
            catalog,
            logs: Logs {
                users,
                records,
                truth: Vec::new(),
            },
            split,
        },
        sids,
    })
}

fn variant_named(v: Variant) -> (String, Tensor) {
    (
        "meta/variant".to_string(),
        Tensor::row(vec![v.dbr as u8 as Real, v.s2d as u8 as Real, v.entp as u8 as Real]),
    )
}

/// Variant flags stored in a checkpoint.
pub fn checkpoint_variant(named: &NamedTensors) -> Option<Variant> {
    let t = &named.iter().find(|(n, _)| n == "meta/variant")?.1;
    let d = t.data();
    (d.len() == 3).then(|| Variant {
        dbr: d[0] != 0.0,
        s2d: d[1] != 0.0,
        entp: d[2] != 0.0,
    })
}

fn loss_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss,loss_pos,loss_neg\n");
    for p in curve {
        let _ = writeln!(s, "{},{:.10},{:.10},{:.10}", p.step, p.loss, p.loss_pos, p.loss_neg);
    }
    s
}

fn train_into(cfg: &RunConfig, variant: Variant, set: &TrainingSet, dir: &Path, o: &mut CommandOutput) -> Result<DecoderModel> {
    let (model, report) = train_model(cfg, variant, set)?;
    let mut named = model.to_named();
    named.push(variant_named(variant));
    let p = dir.join(MODEL_FILE);
    write_tensors(&p, &named)?;
    o.file(p);
    let p = dir.join(LOSS_FILE);
    write_text(&p, &loss_csv(&report.curve))?;
    o.file(p);
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        o.say(format!(
            "trained {} ({} steps): loss {:.4} -> {:.4}; coarse routing long/short {}/{}",
            variant.name(),
            report.curve.len(),
            first.loss,
            last.loss,
            report.route_counts.0,
            report.route_counts.1
        ));
    } else {
        o.say(format!("trained {} (0 steps): checkpoint holds the initialization", variant.name()));
    }
    Ok(model)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let a = load_artifacts(cfg, out)?;
    let set = training_set(&a.world.split, &a.world.logs.users, &a.sids);
    let mut o = CommandOutput::default();
    o.say(format!(
        "training set: {} users, {} positives, {} negatives",
        set.users.len(),
        set.positives(),
        set.negatives()
    ));
    train_into(cfg, cfg.variant, &set, out, &mut o)?;
    Ok(o)
}

fn hr_csv(rows: &[(String, Vec<(usize, Real)>, usize)]) -> String {
    let mut s = String::from("run,metric,k,value,requests,normalization\n");
    for (run, hr, n) in rows {
        for (k, v) in hr {
            let _ = writeln!(s, "{run},offline_hit_rate,{k},{v:.6},{n},per_request");
        }
    }
    s
}

fn eval_table(name: &str, r: &EvalReport, two_tower: &[Real]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "offline hit rate (held-out next click in top-K retrieved items, per request) over {} requests",
        r.requests
    );
    let _ = writeln!(s, "{:<12} {:>6} {:>10}", "run", "K", "HR@K");
    for (k, v) in r.ks.iter().zip(&r.hit_rate) {
        let _ = writeln!(s, "{name:<12} {k:>6} {v:>10.4}");
    }
    for (k, v) in r.ks.iter().zip(two_tower) {
        let _ = writeln!(s, "{:<12} {k:>6} {v:>10.4}", "two_tower");
    }
    let _ = writeln!(s, "hits by branch at K={}: long {} short {}", r.ks.last().unwrap_or(&0), r.hits_long, r.hits_short);
    let _ = writeln!(s, "mean distinct level-1 tokens retrieved: {:.3}", r.mean_level1_coverage);
    let _ = writeln!(s, "target level-1 token retrieved: {:.4}", r.level1_hit_rate);
    let _ = writeln!(s, "requests with fewer than K items available: {}", r.exhausted);
    s
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let a = load_artifacts(cfg, out)?;
    let named = read_tensors(&out.join(MODEL_FILE))?;
    let variant = checkpoint_variant(&named).unwrap_or(cfg.variant);
    let model = DecoderModel::from_named(&named)?;
    let trie = build_trie(&a.world.split, &a.sids, &model.config().level_sizes)?;
    let requests = eval_requests(&a.world, &a.sids, cfg.eval.max_requests);
    let report = evaluate(cfg, variant, &model, &trie, &requests, &a.sids)?;
    let two_tower = two_tower_hit_rate(&a.world, &cfg.eval.k, cfg.eval.max_requests);
    let mut o = CommandOutput::default();
    let rows = vec![
        (variant.name().to_string(), report.ks.iter().copied().zip(report.hit_rate.iter().copied()).collect(), report.requests),
        ("two_tower".to_string(), report.ks.iter().copied().zip(two_tower.iter().copied()).collect(), report.requests),
    ];
    let p = out.join(HR_FILE);
    write_text(&p, &hr_csv(&rows))?;
    o.file(p);
    let p = out.join(RETRIEVALS_FILE);
    let mut w = create(&p)?;
    write_jsonl(&mut w, &report.records)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.file(p);
    let table = eval_table(variant.name(), &report, &two_tower);
    let p = out.join(EVAL_TABLE_FILE);
    write_text(&p, &table)?;
    o.file(p);
    o.say(table.trim_end().to_string());
    Ok(o)
}

/// Seed-level artifacts shared by every variant of one experiment.
pub struct Prepared {
    pub world: World,
    pub quantized: Quantized,
    pub set: TrainingSet,
    pub trie: SidTrie,
    pub requests: Vec<(UserContext, u32)>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let world = build_world(cfg)?;
    let quantized = quantize(cfg, &world.catalog)?;
    let set = training_set(&world.split, &world.logs.users, &quantized.sids);
    let trie = build_trie(&world.split, &quantized.sids, &cfg.quantizer.level_sizes)?;
    let requests = eval_requests(&world, &quantized.sids, cfg.eval.max_requests);
    Ok(Prepared {
        world,
        quantized,
        set,
        trie,
        requests,
    })
}

/// One row of an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub label: String,
    pub seed: u64,
    pub hit_rate: Vec<(usize, Real)>,
    pub final_loss: Real,
}

fn run_variant(cfg: &RunConfig, prep: &Prepared, variant: Variant, dir: Option<&Path>, label: String) -> Result<ExperimentRow> {
    let mut o = CommandOutput::default();
    let (model, final_loss) = match dir {
        Some(d) => {
            let m = train_into(cfg, variant, &prep.set, d, &mut o)?;
            (m, Real::NAN)
        }
        None => {
            let (m, r) = train_model(cfg, variant, &prep.set)?;
            (m, r.curve.last().map_or(Real::NAN, |p| p.loss))
        }
    };
    let report = evaluate(cfg, variant, &model, &prep.trie, &prep.requests, &prep.quantized.sids)?;
    if let Some(d) = dir {
        let rows = vec![(label.clone(), report.ks.iter().copied().zip(report.hit_rate.iter().copied()).collect(), report.requests)];
        write_text(&d.join(HR_FILE), &hr_csv(&rows))?;
        write_text(&d.join(EVAL_TABLE_FILE), &eval_table(&label, &report, &[]))?;
    }
    Ok(ExperimentRow {
        label,
        seed: cfg.seed,
        hit_rate: report.ks.iter().copied().zip(report.hit_rate.iter().copied()).collect(),
        final_loss,
    })
}

/// Trains and evaluates the four variants on identical data and seeds.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64], dir: Option<&Path>) -> Result<Vec<ExperimentRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let prep = prepare(&c)?;
        for v in Variant::ablations() {
            let sub = dir.map(|d| d.join(format!("seed{seed}")).join(v.name()));
            rows.push(run_variant(&c, &prep, v, sub.as_deref(), v.name().to_string())?);
        }
    }
    Ok(rows)
}

/// Mean hit rate per label over seeds, in first-seen label order.
pub fn mean_by_label(rows: &[ExperimentRow]) -> Vec<(String, Vec<(usize, Real)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (Vec<(usize, Real)>, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.label.clone()).or_insert_with(|| {
            order.push(r.label.clone());
            (r.hit_rate.iter().map(|&(k, _)| (k, 0.0)).collect(), 0)
        });
        for (a, &(_, v)) in e.0.iter_mut().zip(&r.hit_rate) {
            a.1 += v;
        }
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|l| {
            let (hr, n) = &acc[&l];
            (l, hr.iter().map(|&(k, v)| (k, v / *n as Real)).collect())
        })
        .collect()
}

fn experiment_csv(head: &str, rows: &[ExperimentRow], n_requests: &[usize]) -> String {
    let mut s = format!("{head},seed,k,offline_hit_rate,requests,normalization\n");
    for (r, n) in rows.iter().zip(n_requests) {
        for (k, v) in &r.hit_rate {
            let _ = writeln!(s, "{},{},{k},{v:.6},{n},per_request", r.label, r.seed);
        }
    }
    for (label, hr) in mean_by_label(rows) {
        for (k, v) in hr {
            let _ = writeln!(s, "{label},mean,{k},{v:.6},,per_request");
        }
    }
    s
}

fn request_count(cfg: &RunConfig, seed: u64) -> Result<usize> {
    let c = cfg.with_seed(seed);
    let world = build_world(&c)?;
    let n = world.split.eval.len();
    Ok(if c.eval.max_requests == 0 { n } else { n.min(c.eval.max_requests) })
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let seeds = &cfg.experiment.seeds;
    let dir = out.join("ablation");
    let rows = run_ablation(cfg, seeds, Some(&dir))?;
    let counts: Vec<usize> = rows.iter().map(|r| request_count(cfg, r.seed)).collect::<Result<_>>()?;
    let mut o = CommandOutput::default();
    let p = out.join(ABLATION_FILE);
    write_text(&p, &experiment_csv("variant", &rows, &counts))?;
    o.file(p);
    for (label, hr) in mean_by_label(&rows) {
        let cells: Vec<String> = hr.iter().map(|(k, v)| format!("HR@{k}={v:.4}")).collect();
        o.say(format!("{label:<8} {}", cells.join(" ")));
    }
    Ok(o)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    LShort,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LShort => "l_short",
            SweepParam::Alpha => "alpha",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l_short" | "L_short" => Ok(SweepParam::LShort),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?} (expected l_short or alpha)"))),
        }
    }

    fn values(self, cfg: &RunConfig) -> Vec<String> {
        match self {
            SweepParam::LShort => cfg.experiment.l_short.iter().map(|v| v.to_string()).collect(),
            SweepParam::Alpha => cfg.experiment.alpha.iter().map(|v| v.to_string()).collect(),
        }
    }

    fn apply(self, cfg: &RunConfig, i: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::LShort => c.router.short = cfg.experiment.l_short[i],
            SweepParam::Alpha => c.loss.alpha = cfg.experiment.alpha[i],
        }
        c
    }
}

/// One train+eval of the full model per value and seed, all else fixed.
pub fn run_sweep(cfg: &RunConfig, param: SweepParam, seeds: &[u64], dir: Option<&Path>) -> Result<Vec<ExperimentRow>> {
    let values = param.values(cfg);
    if values.is_empty() {
        return Err(Error::Config(format!("experiment.{} is empty", param.name())));
    }
    for i in 0..values.len() {
        param.apply(cfg, i).validate()?;
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let base = cfg.with_seed(seed);
        let prep = prepare(&base)?;
        for (i, v) in values.iter().enumerate() {
            let c = param.apply(&base, i);
            if param == SweepParam::Alpha && c.loss.alpha == 0.0 {
                let model = DecoderModel::new(c.model_config(), seed)?;
                let gap = alpha_zero_gap(&c, &model, &prep.set)?;
                if gap > 1e-9 {
                    return Err(Error::Model(format!("alpha=0 loss differs from plain NTP on positives by {gap:e}")));
                }
            }
            let sub = dir.map(|d| d.join(format!("seed{seed}")).join(format!("{}={v}", param.name())));
            rows.push(run_variant(&c, &prep, c.variant, sub.as_deref(), v.clone())?);
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, param: SweepParam) -> Result<CommandOutput> {
    let dir = out.join(format!("sweep_{}", param.name()));
    let rows = run_sweep(cfg, param, &cfg.experiment.seeds, Some(&dir))?;
    let counts: Vec<usize> = rows.iter().map(|r| request_count(cfg, r.seed)).collect::<Result<_>>()?;
    let mut o = CommandOutput::default();
    let p = out.join(format!("sweep_{}.csv", param.name()));
    write_text(&p, &experiment_csv(param.name(), &rows, &counts))?;
    o.file(p);
    for (label, hr) in mean_by_label(&rows) {
        let cells: Vec<String> = hr.iter().map(|(k, v)| format!("HR@{k}={v:.4}")).collect();
        o.say(format!("{}={label:<8} {}", param.name(), cells.join(" ")));
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unsorted_k_list_rejected() {
        let mut cfg = RunConfig::default();
        cfg.eval.k = vec![50, 10];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn single_code_level_warns() {
        assert!(single_path_warning(&[4, 1, 4]).unwrap().contains("level 2"));
        assert!(single_path_warning(&[4, 4]).is_none());
    }
}
