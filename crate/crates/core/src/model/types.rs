use serde::{Deserialize, Serialize};

use crate::quantizer::SidTuple;

/// One logged interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub item_id: u32,
    pub sid: SidTuple,
    pub timestamp: u64,
    pub clicked: bool,
    pub watch_bucket: u32,
    pub tags: Vec<u32>,
}

/// Static user features plus chronologically ordered history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub user_id: u32,
    /// One categorical id per static feature field.
    pub static_features: Vec<u32>,
    pub history: Vec<ActionRecord>,
}

/// A left-padded slice of history: `len` slots, the last `actions.len()` real.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<'a> {
    pub actions: Vec<&'a ActionRecord>,
    pub len: usize,
}

impl<'a> Window<'a> {
    /// The most recent `len` actions of `history`, left-padded.
    pub fn suffix(history: &'a [ActionRecord], len: usize) -> Self {
        let start = history.len().saturating_sub(len);
        Self {
            actions: history[start..].iter().collect(),
            len,
        }
    }

    pub fn from_actions(actions: Vec<&'a ActionRecord>, len: usize) -> Self {
        assert!(actions.len() <= len, "window overflow: {} > {len}", actions.len());
        Self { actions, len }
    }

    pub fn pad_count(&self) -> usize {
        self.len - self.actions.len()
    }

    /// Slot `i` in `0..len`; `None` for padding.
    pub fn slot(&self, i: usize) -> Option<&'a ActionRecord> {
        let pad = self.pad_count();
        (i >= pad).then(|| self.actions[i - pad])
    }
}
