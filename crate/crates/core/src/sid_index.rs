//! SID -> item mapping and the prefix trie that keeps decoding inside the corpus.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::quantizer::SidTuple;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("item {item}: token {token} at level {level} outside codebook of size {size}")]
    TokenOutOfRange {
        item: u32,
        level: usize,
        token: u32,
        size: usize,
    },
    #[error("item {item}: SID depth {got}, expected {expected}")]
    Depth { item: u32, got: usize, expected: usize },
    #[error("item {0} listed twice")]
    DuplicateItem(u32),
}

/// One corpus entry for the index.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedItem {
    pub item_id: u32,
    pub sid: SidTuple,
    pub popularity: f64,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    /// Leaf payload, sorted by descending popularity then ascending id.
    items: Vec<(u32, f64)>,
    subtree_items: usize,
}

#[derive(Debug, Clone)]
pub struct SidTrie {
    nodes: Vec<TrieNode>,
    level_sizes: Vec<usize>,
    item_count: usize,
    sid_count: usize,
}

impl SidTrie {
    pub fn build(items: &[IndexedItem], level_sizes: &[usize]) -> Result<Self, IndexError> {
        let depth = level_sizes.len();
        let mut nodes = vec![TrieNode::default()];
        let mut seen = HashSet::new();
        for it in items {
            if !seen.insert(it.item_id) {
                return Err(IndexError::DuplicateItem(it.item_id));
            }
            if it.sid.depth() != depth {
                return Err(IndexError::Depth {
                    item: it.item_id,
                    got: it.sid.depth(),
                    expected: depth,
                });
            }
            for (level, (&t, &size)) in it.sid.tokens().iter().zip(level_sizes).enumerate() {
                if t as usize >= size {
                    return Err(IndexError::TokenOutOfRange {
                        item: it.item_id,
                        level: level + 1,
                        token: t,
                        size,
                    });
                }
            }
            let mut cur = 0;
            nodes[0].subtree_items += 1;
            for &t in it.sid.tokens() {
                let next = match nodes[cur].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(t, n);
                        n
                    }
                };
                cur = next;
                nodes[cur].subtree_items += 1;
            }
            nodes[cur].items.push((it.item_id, it.popularity));
        }
        let mut sid_count = 0;
        for n in &mut nodes {
            if !n.items.is_empty() {
                sid_count += 1;
                n.items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            }
        }
        Ok(Self {
            nodes,
            level_sizes: level_sizes.to_vec(),
            item_count: items.len(),
            sid_count,
        })
    }

    fn walk(&self, prefix: &[u32]) -> Option<usize> {
        let mut cur = 0;
        for t in prefix {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }

    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Number of distinct complete SIDs carried by the corpus.
    pub fn sid_count(&self) -> usize {
        self.sid_count
    }

    /// Up to `k` items carrying `sid`, most popular first.
    pub fn lookup(&self, sid: &SidTuple, k: usize) -> Vec<u32> {
        if sid.depth() != self.depth() {
            return Vec::new();
        }
        match self.walk(sid.tokens()) {
            Some(n) => self.nodes[n].items.iter().take(k).map(|&(id, _)| id).collect(),
            None => Vec::new(),
        }
    }

    /// Tokens that extend `prefix` to a prefix some corpus item carries, ascending.
    pub fn valid_continuations(&self, prefix: &[u32]) -> Vec<u32> {
        if prefix.len() >= self.depth() {
            return Vec::new();
        }
        match self.walk(prefix) {
            Some(n) => self.nodes[n].children.keys().copied().collect(),
            None => Vec::new(),
        }
    }

    /// Number of corpus items under `prefix`.
    pub fn count_under(&self, prefix: &[u32]) -> usize {
        self.walk(prefix).map(|n| self.nodes[n].subtree_items).unwrap_or(0)
    }

    /// Every complete SID in the corpus, in lexicographic order.
    pub fn all_sids(&self) -> Vec<SidTuple> {
        let mut out = Vec::with_capacity(self.sid_count);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            if prefix.len() == self.depth() {
                out.push(SidTuple(prefix));
                continue;
            }
            for (&t, &c) in self.nodes[n].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}
