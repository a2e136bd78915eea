use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Window};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, NodeId, ParamId, ParamStore, Real, Tape, Tensor, MASK_VALUE};

/// Encoded user context: slot 0 holds the static features, then one slot per
/// window position. `mask[i]` is false for padding slots.
#[derive(Debug, Clone)]
pub struct ContextMemory {
    pub slots: NodeId,
    pub mask: Vec<bool>,
}

impl ContextMemory {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Cross-attention keys and values for every block and head, computed once
/// per memory and reusable across many decode calls on the same tape.
#[derive(Debug, Clone)]
pub struct ProjectedMemory {
    kv: Vec<Vec<(NodeId, NodeId)>>,
    mask_row: NodeId,
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1: (ParamId, ParamId),
    self_qkvo: [ParamId; 4],
    ln2: (ParamId, ParamId),
    cross_qkvo: [ParamId; 4],
    ln3: (ParamId, ParamId),
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    level_emb: Vec<ParamId>,
    tag_emb: ParamId,
    watch_emb: ParamId,
    pos_emb: ParamId,
    static_emb: ParamId,
    static_proj: ParamId,
    ctx_ln: (ParamId, ParamId),
    bos: ParamId,
    dec_pos: ParamId,
    blocks: Vec<BlockParams>,
    head_ln: (ParamId, ParamId),
    /// Level 1: `[d, d]` projection into the tied embedding space; deeper
    /// levels: `[d, |C(l)|]`.
    head_w: Vec<ParamId>,
    head_b: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    cfg: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
    static_offsets: Vec<usize>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: Real) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data).expect("shape")
    }
}

enum AttnMask {
    None,
    /// `[n, m]` additive mask.
    Full(NodeId),
    /// `[1, m]` additive mask applied to every query row.
    Row(NodeId),
}

impl DecoderModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParamStore::new();
        let emb_std = 1.0;
        let w_std = 1.0 / (d as Real).sqrt();
        let out_std = w_std / (2.0 * cfg.n_blocks as Real).sqrt();

        let level_emb = cfg
            .level_sizes
            .iter()
            .enumerate()
            .map(|(l, &k)| p.add(format!("emb/level{}", l + 1), init.normal(k, d, emb_std)))
            .collect();
        let tag_emb = p.add("emb/tag", init.normal(cfg.n_tags, d, emb_std));
        let watch_emb = p.add("emb/watch", init.normal(cfg.n_watch_buckets, d, emb_std));
        let pos_emb = p.add("emb/pos", init.normal(cfg.max_history, d, emb_std));
        let n_static: usize = cfg.static_cardinalities.iter().sum();
        let static_emb = p.add("emb/static", init.normal(n_static.max(1), d, emb_std));
        let static_proj = p.add("proj/static", init.normal(d, d, w_std));
        let ones = || Tensor::full(vec![1, d], 1.0);
        let zeros = || Tensor::zeros(vec![1, d]);
        let ctx_ln = (p.add("ctx/ln_gain", ones()), p.add("ctx/ln_bias", zeros()));
        let bos = p.add("dec/bos", init.normal(1, d, emb_std));
        let dec_pos = p.add("dec/pos", init.normal(cfg.depth(), d, emb_std));

        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let name = |s: &str| format!("block{b}/{s}");
            let ln = |p: &mut ParamStore, s: &str| {
                (
                    p.add(name(&format!("{s}_gain")), ones()),
                    p.add(name(&format!("{s}_bias")), zeros()),
                )
            };
            let ln1 = ln(&mut p, "ln1");
            let self_qkvo = [
                p.add(name("self_q"), init.normal(d, d, w_std)),
                p.add(name("self_k"), init.normal(d, d, w_std)),
                p.add(name("self_v"), init.normal(d, d, w_std)),
                p.add(name("self_o"), init.normal(d, d, out_std)),
            ];
            let ln2 = ln(&mut p, "ln2");
            let cross_qkvo = [
                p.add(name("cross_q"), init.normal(d, d, w_std)),
                p.add(name("cross_k"), init.normal(d, d, w_std)),
                p.add(name("cross_v"), init.normal(d, d, w_std)),
                p.add(name("cross_o"), init.normal(d, d, out_std)),
            ];
            let ln3 = ln(&mut p, "ln3");
            let ffn_w1 = p.add(name("ffn_w1"), init.normal(d, cfg.d_ffn, w_std));
            let ffn_b1 = p.add(name("ffn_b1"), Tensor::zeros(vec![1, cfg.d_ffn]));
            let ffn_w2 = p.add(
                name("ffn_w2"),
                init.normal(cfg.d_ffn, d, 1.0 / (cfg.d_ffn as Real).sqrt() / (2.0 * cfg.n_blocks as Real).sqrt()),
            );
            let ffn_b2 = p.add(name("ffn_b2"), zeros());
            blocks.push(BlockParams {
                ln1,
                self_qkvo,
                ln2,
                cross_qkvo,
                ln3,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let head_ln = (p.add("head/ln_gain", ones()), p.add("head/ln_bias", zeros()));
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for (l, &k) in cfg.level_sizes.iter().enumerate() {
            let cols = if l == 0 { d } else { k };
            head_w.push(p.add(format!("head/level{}_w", l + 1), Tensor::zeros(vec![d, cols])));
            head_b.push(p.add(format!("head/level{}_bias", l + 1), Tensor::zeros(vec![1, k])));
        }

        let mut static_offsets = Vec::with_capacity(cfg.static_cardinalities.len());
        let mut acc = 0;
        for &c in &cfg.static_cardinalities {
            static_offsets.push(acc);
            acc += c;
        }

        Ok(Self {
            cfg,
            params: p,
            ids: ParamIds {
                level_emb,
                tag_emb,
                watch_emb,
                pos_emb,
                static_emb,
                static_proj,
                ctx_ln,
                bos,
                dec_pos,
                blocks,
                head_ln,
                head_w,
                head_b,
            },
            static_offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The level-1 vocabulary embedding, shared by the router, the context
    /// frontend, the decoder input and the level-1 output head.
    pub fn level1_embeddings(&self) -> &Tensor {
        self.params.get(self.ids.level_emb[0])
    }

    /// Parameter ids of the output head for `level` (1-based): weight and bias.
    pub fn head_params(&self, level: usize) -> (ParamId, ParamId) {
        (self.ids.head_w[level - 1], self.ids.head_b[level - 1])
    }

    fn check_token(&self, level: usize, token: u32) -> Result<()> {
        let size = self.cfg.level_sizes[level];
        if token as usize >= size {
            return Err(Error::Model(format!(
                "token {token} at level {} outside codebook of size {size}",
                level + 1
            )));
        }
        Ok(())
    }

    /// Embeds the statics slot and every window slot, then applies LayerNorm.
    pub fn encode_context(&self, tape: &mut Tape, static_features: &[u32], window: &Window) -> Result<ContextMemory> {
        let cfg = &self.cfg;
        if window.len > cfg.max_history {
            return Err(Error::Model(format!(
                "window of {} exceeds max_history {}",
                window.len, cfg.max_history
            )));
        }
        if static_features.len() != cfg.static_cardinalities.len() {
            return Err(Error::Model(format!(
                "expected {} static features, got {}",
                cfg.static_cardinalities.len(),
                static_features.len()
            )));
        }
        let mut static_ids = Vec::with_capacity(static_features.len());
        for (f, (&v, &card)) in static_features.iter().zip(&cfg.static_cardinalities).enumerate() {
            if v as usize >= card {
                return Err(Error::Model(format!("static feature {f} value {v} outside 0..{card}")));
            }
            static_ids.push(self.static_offsets[f] + v as usize);
        }
        let table = tape.param(self.ids.static_emb);
        let stat = tape.gather_sum(table, vec![static_ids])?;
        let proj = tape.param(self.ids.static_proj);
        let stat = tape.matmul(stat, proj)?;

        let mut mask = Vec::with_capacity(window.len + 1);
        mask.push(true);
        let slots = if window.len == 0 {
            stat
        } else {
            let depth = cfg.depth();
            let mut level_lists: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(window.len); depth];
            let mut tag_lists = Vec::with_capacity(window.len);
            let mut watch_lists = Vec::with_capacity(window.len);
            let mut pos = Vec::with_capacity(window.len);
            for i in 0..window.len {
                // Positions count back from the most recent slot.
                pos.push(window.len - 1 - i);
                match window.slot(i) {
                    Some(a) => {
                        if a.sid.depth() != depth {
                            return Err(Error::Model(format!(
                                "item {} has SID depth {}, expected {depth}",
                                a.item_id,
                                a.sid.depth()
                            )));
                        }
                        for (l, &t) in a.sid.tokens().iter().enumerate() {
                            self.check_token(l, t)?;
                            level_lists[l].push(vec![t as usize]);
                        }
                        if let Some(&t) = a.tags.iter().find(|&&t| t as usize >= cfg.n_tags) {
                            return Err(Error::Model(format!("tag {t} outside 0..{}", cfg.n_tags)));
                        }
                        tag_lists.push(a.tags.iter().map(|&t| t as usize).collect());
                        if a.watch_bucket as usize >= cfg.n_watch_buckets {
                            return Err(Error::Model(format!(
                                "watch bucket {} outside 0..{}",
                                a.watch_bucket, cfg.n_watch_buckets
                            )));
                        }
                        watch_lists.push(vec![a.watch_bucket as usize]);
                        mask.push(true);
                    }
                    None => {
                        for lists in &mut level_lists {
                            lists.push(Vec::new());
                        }
                        tag_lists.push(Vec::new());
                        watch_lists.push(Vec::new());
                        mask.push(false);
                    }
                }
            }
            let pos_table = tape.param(self.ids.pos_emb);
            let mut acc = tape.gather(pos_table, &pos)?;
            for (l, lists) in level_lists.into_iter().enumerate() {
                let t = tape.param(self.ids.level_emb[l]);
                let g = tape.gather_sum(t, lists)?;
                acc = tape.add(acc, g)?;
            }
            let t = tape.param(self.ids.tag_emb);
            let g = tape.gather_sum(t, tag_lists)?;
            acc = tape.add(acc, g)?;
            let t = tape.param(self.ids.watch_emb);
            let g = tape.gather_sum(t, watch_lists)?;
            acc = tape.add(acc, g)?;
            tape.concat_rows(&[stat, acc])?
        };
        let g = tape.param(self.ids.ctx_ln.0);
        let b = tape.param(self.ids.ctx_ln.1);
        let slots = tape.layer_norm(slots, g, b, cfg.ln_eps)?;
        Ok(ContextMemory { slots, mask })
    }

    /// Cross-attention keys/values of `memory` for every block and head.
    pub fn project_memory(&self, tape: &mut Tape, memory: &ContextMemory) -> Result<ProjectedMemory> {
        let dh = self.cfg.head_dim();
        let mut kv = Vec::with_capacity(self.cfg.n_blocks);
        for blk in &self.ids.blocks {
            let wk = tape.param(blk.cross_qkvo[1]);
            let wv = tape.param(blk.cross_qkvo[2]);
            let k = tape.matmul(memory.slots, wk)?;
            let v = tape.matmul(memory.slots, wv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                heads.push((kh, vh));
            }
            kv.push(heads);
        }
        let mask = memory
            .mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_VALUE })
            .collect();
        let mask_row = tape.constant(Tensor::row(mask))?;
        Ok(ProjectedMemory { kv, mask_row })
    }

    fn layer_norm(&self, tape: &mut Tape, x: NodeId, ln: (ParamId, ParamId)) -> Result<NodeId> {
        let g = tape.param(ln.0);
        let b = tape.param(ln.1);
        Ok(tape.layer_norm(x, g, b, self.cfg.ln_eps)?)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        q: NodeId,
        kv: &[(NodeId, NodeId)],
        mask: &AttnMask,
        wo: ParamId,
    ) -> Result<NodeId> {
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as Real).sqrt();
        let mut outs = Vec::with_capacity(kv.len());
        for (h, &(k, v)) in kv.iter().enumerate() {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let s = tape.matmul_bt(qh, k)?;
            let s = tape.scale(s, scale)?;
            let s = match *mask {
                AttnMask::None => s,
                AttnMask::Full(m) => tape.add(s, m)?,
                AttnMask::Row(m) => tape.add_row(s, m)?,
            };
            let p = tape.softmax(s)?;
            outs.push(tape.matmul(p, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = tape.param(wo);
        Ok(tape.matmul(cat, wo)?)
    }

    /// Runs the decoder on `[BOS, prefix...]` and returns level logits for
    /// each requested input position (`position p` predicts level `p + 1`).
    pub fn decode_positions(
        &self,
        tape: &mut Tape,
        prefix: &[u32],
        memory: &ProjectedMemory,
        positions: &[usize],
    ) -> Result<Vec<NodeId>> {
        let depth = self.cfg.depth();
        if prefix.len() >= depth {
            return Err(Error::Model(format!(
                "prefix depth {} leaves no level to predict (depth {depth})",
                prefix.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p > prefix.len()) {
            return Err(Error::Model(format!("position {p} beyond prefix of length {}", prefix.len())));
        }
        for (l, &t) in prefix.iter().enumerate() {
            self.check_token(l, t)?;
        }
        let d = self.cfg.d_model;
        let n = prefix.len() + 1;
        let dh = self.cfg.head_dim();

        let mut rows = vec![tape.param(self.ids.bos)];
        for (l, &t) in prefix.iter().enumerate() {
            let table = tape.param(self.ids.level_emb[l]);
            rows.push(tape.gather(table, &[t as usize])?);
        }
        let x = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
        let dpos = tape.param(self.ids.dec_pos);
        let pos_rows = tape.gather(dpos, &(0..n).collect::<Vec<_>>())?;
        let mut x = tape.add(x, pos_rows)?;

        let causal = if n > 1 {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = MASK_VALUE;
                }
            }
            AttnMask::Full(tape.constant(Tensor::matrix(n, n, m)?)?)
        } else {
            AttnMask::None
        };
        let cross_mask = AttnMask::Row(memory.mask_row);

        for (blk, mem_kv) in self.ids.blocks.iter().zip(&memory.kv) {
            let h = self.layer_norm(tape, x, blk.ln1)?;
            let wq = tape.param(blk.self_qkvo[0]);
            let wk = tape.param(blk.self_qkvo[1]);
            let wv = tape.param(blk.self_qkvo[2]);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut self_kv = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                self_kv.push((tape.slice_cols(k, hd * dh, dh)?, tape.slice_cols(v, hd * dh, dh)?));
            }
            let a = self.attend(tape, q, &self_kv, &causal, blk.self_qkvo[3])?;
            x = tape.add(x, a)?;

            let h = self.layer_norm(tape, x, blk.ln2)?;
            let wq = tape.param(blk.cross_qkvo[0]);
            let q = tape.matmul(h, wq)?;
            let a = self.attend(tape, q, mem_kv, &cross_mask, blk.cross_qkvo[3])?;
            x = tape.add(x, a)?;

            let h = self.layer_norm(tape, x, blk.ln3)?;
            let w1 = tape.param(blk.ffn_w1);
            let b1 = tape.param(blk.ffn_b1);
            let w2 = tape.param(blk.ffn_w2);
            let b2 = tape.param(blk.ffn_b2);
            let f = tape.matmul(h, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            x = tape.add(x, f)?;
        }
        let hf = self.layer_norm(tape, x, self.ids.head_ln)?;
        debug_assert_eq!(tape.value(hf).cols(), d);

        let mut out = Vec::with_capacity(positions.len());
        for &p in positions {
            let row = if n == 1 { hf } else { tape.gather(hf, &[p])? };
            let w = tape.param(self.ids.head_w[p]);
            let b = tape.param(self.ids.head_b[p]);
            let z = tape.matmul(row, w)?;
            let logits = if p == 0 {
                let e1 = tape.param(self.ids.level_emb[0]);
                tape.matmul_bt(z, e1)?
            } else {
                z
            };
            out.push(tape.add_row(logits, b)?);
        }
        Ok(out)
    }

    /// Logits for token `level` (1-based) given the previous `level - 1` tokens.
    pub fn decode_logits(&self, tape: &mut Tape, prefix: &[u32], memory: &ContextMemory, level: usize) -> Result<NodeId> {
        if level == 0 || level > self.cfg.depth() || prefix.len() != level - 1 {
            return Err(Error::Model(format!(
                "level {level} needs a prefix of {} tokens, got {}",
                level.saturating_sub(1),
                prefix.len()
            )));
        }
        let projected = self.project_memory(tape, memory)?;
        let out = self.decode_positions(tape, prefix, &projected, &[level - 1])?;
        Ok(out[0])
    }

    /// Parameters and config as named tensors.
    pub fn to_named(&self) -> NamedTensors {
        let c = &self.cfg;
        let scalar = |v: usize| Tensor::row(vec![v as Real]);
        let vec_t = |v: &[usize]| Tensor::row(v.iter().map(|&x| x as Real).collect());
        let mut out = vec![
            ("config/d_model".to_string(), scalar(c.d_model)),
            ("config/n_blocks".to_string(), scalar(c.n_blocks)),
            ("config/n_heads".to_string(), scalar(c.n_heads)),
            ("config/d_ffn".to_string(), scalar(c.d_ffn)),
            ("config/level_sizes".to_string(), vec_t(&c.level_sizes)),
            ("config/max_history".to_string(), scalar(c.max_history)),
            ("config/static_cardinalities".to_string(), vec_t(&c.static_cardinalities)),
            ("config/n_tags".to_string(), scalar(c.n_tags)),
            ("config/n_watch_buckets".to_string(), scalar(c.n_watch_buckets)),
            ("config/ln_eps".to_string(), Tensor::row(vec![c.ln_eps])),
        ];
        out.extend(self.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())));
        out
    }

    pub fn from_named(named: &NamedTensors) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Model(format!("checkpoint lacks {name}")))
        };
        let us = |name: &str| -> Result<usize> { Ok(get(name)?.item() as usize) };
        let uv = |name: &str| -> Result<Vec<usize>> { Ok(get(name)?.data().iter().map(|&v| v as usize).collect()) };
        let cfg = ModelConfig {
            d_model: us("config/d_model")?,
            n_blocks: us("config/n_blocks")?,
            n_heads: us("config/n_heads")?,
            d_ffn: us("config/d_ffn")?,
            level_sizes: uv("config/level_sizes")?,
            max_history: us("config/max_history")?,
            static_cardinalities: uv("config/static_cardinalities")?,
            n_tags: us("config/n_tags")?,
            n_watch_buckets: us("config/n_watch_buckets")?,
            ln_eps: get("config/ln_eps")?.item(),
        };
        let mut model = Self::new(cfg, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = format!("param/{}", model.params.name(id));
            let t = get(&name)?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Model(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }
}
