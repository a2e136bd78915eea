//! Bucket-restricted history for fine-level decoding.
//!
//! Once the level-1 token is fixed, levels 2..L condition on the most recent
//! actions from the full history whose level-1 token matches it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionRecord, ContextMemory, DecoderModel, Window};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BucketSearchConfig {
    /// Most in-bucket actions kept.
    pub cap: usize,
    /// Recent actions used when the bucket has none.
    pub fallback_cap: usize,
}

impl BucketSearchConfig {
    pub fn production() -> Self {
        Self {
            cap: 256,
            fallback_cap: 64,
        }
    }

    pub fn desk() -> Self {
        Self { cap: 32, fallback_cap: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cap == 0 || self.fallback_cap > self.cap {
            return Err(Error::Config(format!(
                "need cap >= 1 and fallback_cap <= cap, got cap {} fallback {}",
                self.cap, self.fallback_cap
            )));
        }
        Ok(())
    }
}

impl Default for BucketSearchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// The most recent `cfg.cap` actions whose level-1 token is `s1`, in order.
pub fn search_in_bucket<'a>(history: &'a [ActionRecord], s1: u32, cfg: &BucketSearchConfig) -> Vec<&'a ActionRecord> {
    let mut out: Vec<&ActionRecord> = history
        .iter()
        .rev()
        .filter(|a| a.sid.level1() == s1)
        .take(cfg.cap)
        .collect();
    out.reverse();
    out
}

/// Fine-level window: the bucket search result, or the most recent
/// `fallback_cap` actions when the bucket is empty. Always `cap` slots.
pub fn fine_window<'a>(history: &'a [ActionRecord], s1: u32, cfg: &BucketSearchConfig) -> Window<'a> {
    let hits = search_in_bucket(history, s1, cfg);
    if hits.is_empty() {
        let start = history.len().saturating_sub(cfg.fallback_cap);
        Window::from_actions(history[start..].iter().collect(), cfg.cap)
    } else {
        Window::from_actions(hits, cfg.cap)
    }
}

pub fn fine_context(
    tape: &mut Tape,
    model: &DecoderModel,
    static_features: &[u32],
    history: &[ActionRecord],
    s1: u32,
    cfg: &BucketSearchConfig,
) -> Result<ContextMemory> {
    model.encode_context(tape, static_features, &fine_window(history, s1, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::SidTuple;

    fn hist(tokens: &[u32]) -> Vec<ActionRecord> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| ActionRecord {
                item_id: i as u32,
                sid: SidTuple(vec![t, 1, 2]),
                timestamp: i as u64,
                clicked: true,
                watch_bucket: 0,
                tags: vec![],
            })
            .collect()
    }

    #[test]
    fn no_bucket_actions_gives_empty_result_and_fallback() {
        let h = hist(&[1, 2, 3, 1, 2]);
        let cfg = BucketSearchConfig { cap: 4, fallback_cap: 2 };
        assert!(search_in_bucket(&h, 9, &cfg).is_empty());
        let w = fine_window(&h, 9, &cfg);
        assert_eq!(w.actions.iter().map(|a| a.item_id).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(w.len, 4);
    }

    #[test]
    fn full_bucket_keeps_last_cap() {
        let h = hist(&[5; 40]);
        let got = search_in_bucket(&h, 5, &BucketSearchConfig { cap: 32, fallback_cap: 8 });
        assert_eq!(got.len(), 32);
        assert_eq!(got[0].item_id, 8);
        assert_eq!(got[31].item_id, 39);
    }

    #[test]
    fn keeps_only_matching_in_order() {
        let h = hist(&[1, 2, 1, 3, 1, 2]);
        let got = search_in_bucket(&h, 1, &BucketSearchConfig { cap: 8, fallback_cap: 1 });
        assert_eq!(got.iter().map(|a| a.item_id).collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn empty_history_falls_back_to_nothing() {
        let w = fine_window(&[], 0, &BucketSearchConfig::desk());
        assert!(w.actions.is_empty());
        assert_eq!(w.len, 32);
    }

    #[test]
    fn config_validation() {
        assert!(BucketSearchConfig { cap: 0, fallback_cap: 0 }.validate().is_err());
        assert!(BucketSearchConfig { cap: 4, fallback_cap: 5 }.validate().is_err());
        assert!(BucketSearchConfig::production().validate().is_ok());
    }
}
