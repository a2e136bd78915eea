//! Dual-branch long/short-term routing.
//!
//! Both windows are pooled over their level-1 SID embeddings. During
//! training the window whose summary is closer (cosine) to the target's
//! level-1 embedding feeds the coarse step; at inference both branches are
//! decoded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionRecord, ContextMemory, DecoderModel, UserContext, Window};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Long,
    Short,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Long => "long",
            Branch::Short => "short",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub long: usize,
    pub short: usize,
}

impl WindowConfig {
    /// Production windows: 1000 long, 64 short.
    pub fn production() -> Self {
        Self { long: 1000, short: 64 }
    }

    pub fn desk() -> Self {
        Self { long: 100, short: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.short == 0 || self.short >= self.long {
            return Err(Error::Config(format!(
                "need 0 < L_short < L_long, got short {} long {}",
                self.short, self.long
            )));
        }
        Ok(())
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteDecision {
    pub branch: Branch,
    pub gamma_long: Real,
    pub gamma_short: Real,
}

/// The most recent `long` and `short` actions, each left-padded.
pub fn make_windows<'a>(history: &'a [ActionRecord], cfg: &WindowConfig) -> (Window<'a>, Window<'a>) {
    (Window::suffix(history, cfg.long), Window::suffix(history, cfg.short))
}

/// Mean level-1 embedding over the real actions of `window`; zero if none.
pub fn summarize(window: &Window, level1: &Tensor) -> Vec<Real> {
    let d = level1.cols();
    let mut acc = vec![0.0; d];
    if window.actions.is_empty() {
        return acc;
    }
    for a in &window.actions {
        for (o, v) in acc.iter_mut().zip(level1.row_slice(a.sid.level1() as usize)) {
            *o += v;
        }
    }
    let n = window.actions.len() as Real;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Hard gate between the two summaries; ties go to the short branch.
pub fn route(target_s1: u32, r_long: &[Real], r_short: &[Real], level1: &Tensor) -> RouteDecision {
    let e = level1.row_slice(target_s1 as usize);
    let gamma_long = cosine(e, r_long);
    let gamma_short = cosine(e, r_short);
    RouteDecision {
        branch: if gamma_short >= gamma_long { Branch::Short } else { Branch::Long },
        gamma_long,
        gamma_short,
    }
}

/// Routes a training target given its history.
pub fn route_history(target_s1: u32, history: &[ActionRecord], cfg: &WindowConfig, level1: &Tensor) -> RouteDecision {
    let (long, short) = make_windows(history, cfg);
    route(target_s1, &summarize(&long, level1), &summarize(&short, level1), level1)
}

/// Encoded long- and short-branch contexts for inference.
pub fn inference_contexts(
    tape: &mut Tape,
    model: &DecoderModel,
    user: &UserContext,
    cfg: &WindowConfig,
) -> Result<(ContextMemory, ContextMemory)> {
    let (long, short) = make_windows(&user.history, cfg);
    let ml = model.encode_context(tape, &user.static_features, &long)?;
    let ms = model.encode_context(tape, &user.static_features, &short)?;
    Ok((ml, ms))
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
                sid: SidTuple(vec![t, 0, 0]),
                timestamp: i as u64,
                clicked: true,
                watch_bucket: 0,
                tags: vec![],
            })
            .collect()
    }

    fn table() -> Tensor {
        Tensor::matrix(8, 3, (0..24).map(|i| ((i * 7 % 11) as Real) - 5.0).collect()).unwrap()
    }

    #[test]
    fn short_history_is_padded() {
        let h = hist(&[1, 2, 3, 4, 5]);
        let (l, s) = make_windows(&h, &WindowConfig { long: 10, short: 3 });
        assert_eq!(l.pad_count(), 5);
        assert_eq!(l.actions.len(), 5);
        assert_eq!(s.actions.iter().map(|a| a.item_id).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(s.pad_count(), 0);
    }

    #[test]
    fn empty_history_is_all_padding() {
        let (l, s) = make_windows(&[], &WindowConfig { long: 10, short: 3 });
        assert_eq!((l.pad_count(), s.pad_count()), (10, 3));
        assert_eq!(summarize(&l, &table()), vec![0.0; 3]);
    }

    #[test]
    fn long_window_is_a_suffix() {
        let h = hist(&vec![0; 2000]);
        let (l, _) = make_windows(&h, &WindowConfig { long: 1000, short: 64 });
        assert_eq!(l.actions.first().unwrap().item_id, 1000);
        assert_eq!(l.actions.last().unwrap().item_id, 1999);
    }

    #[test]
    fn summary_is_the_mean_row() {
        let t = table();
        let h = hist(&[7]);
        assert_eq!(summarize(&Window::suffix(&h, 4), &t), t.row_slice(7).to_vec());
        let h = hist(&[3, 5]);
        let mid: Vec<Real> = t.row_slice(3).iter().zip(t.row_slice(5)).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(summarize(&Window::suffix(&h, 4), &t), mid);
    }

    #[test]
    fn ties_go_short() {
        let t = table();
        let r = t.row_slice(2).to_vec();
        let d = route(4, &r, &r, &t);
        assert_eq!(d.branch, Branch::Short);
        assert_eq!(d.gamma_long, d.gamma_short);
    }

    #[test]
    fn orthogonal_long_summary_routes_short() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = route(0, &[0.0, 3.0], &[2.0, 0.0], &t);
        assert_eq!(d.branch, Branch::Short);
        assert!((d.gamma_short - 1.0).abs() < 1e-12);
        assert_eq!(d.gamma_long, 0.0);
    }

    #[test]
    fn zero_summaries_have_zero_cosine() {
        let t = table();
        let d = route(1, &[0.0; 3], &[0.0; 3], &t);
        assert_eq!((d.gamma_long, d.gamma_short, d.branch), (0.0, 0.0, Branch::Short));
    }

    #[test]
    fn window_config_validation() {
        assert!(WindowConfig { long: 10, short: 10 }.validate().is_err());
        assert!(WindowConfig { long: 10, short: 0 }.validate().is_err());
        assert!(WindowConfig::production().validate().is_ok());
    }
}
