//! Online FDR control over a stream of p-value batches (batch BH).
//!
//! Batch `t` is tested with BH at level
//!
//! ```text
//! α_t = (α Σ_{s≤t} γ_s − Σ_{s<t} α_s n_s / (n_s + Σ_{r<t, r≠s} R_r)) · (n_t + Σ_{s<t} R_s) / n_t
//! ```
//!
//! where `n_s` is the size of batch `s` and `R_s` its rejection count. The
//! batch size stands in for the augmented rejection count `R⁺_s ≤ n_s` of
//! the usual batch BH rule; the spend can only grow, and a batch's own
//! rejections never raise what it is charged, so an extra rejection never
//! lowers a later level.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descendants::bh_threshold;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FdrError {
    #[error("p-value {0} is outside [0, 1]")]
    PValueRange(f64),
    #[error("alpha {0} must lie strictly between 0 and 1")]
    AlphaRange(f64),
    #[error("geometric spending ratio {0} must lie strictly between 0 and 1")]
    RatioRange(f64),
}

/// Deterministic spending sequence `γ_t`, `t = 1, 2, …`, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpendingSequence {
    /// `γ_t = 6 / (π² t²)`
    #[default]
    InverseSquare,
    /// `γ_t = (1 − r) r^{t−1}`
    Geometric { ratio: f64 },
}

impl SpendingSequence {
    pub fn gamma(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        match *self {
            SpendingSequence::InverseSquare => {
                let tf = t as f64;
                6.0 / (core::f64::consts::PI * core::f64::consts::PI * tf * tf)
            }
            SpendingSequence::Geometric { ratio } => (1.0 - ratio) * libm::pow(ratio, (t - 1) as f64),
        }
    }

    pub fn validate(&self) -> Result<(), FdrError> {
        match *self {
            SpendingSequence::InverseSquare => Ok(()),
            SpendingSequence::Geometric { ratio } if ratio > 0.0 && ratio < 1.0 => Ok(()),
            SpendingSequence::Geometric { ratio } => Err(FdrError::RatioRange(ratio)),
        }
    }
}

/// One processed batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// Optional caller tag (the DAG search stores the child gene here).
    pub node: Option<usize>,
    pub size: usize,
    pub alpha: f64,
    pub rejections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDecision {
    pub rejected: Vec<bool>,
    pub alpha_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineFdrState {
    alpha_total: f64,
    spending: SpendingSequence,
    history: Vec<BatchRecord>,
}

impl OnlineFdrState {
    pub fn new(alpha_total: f64, spending: SpendingSequence) -> Result<Self, FdrError> {
        if !(alpha_total > 0.0 && alpha_total < 1.0) {
            return Err(FdrError::AlphaRange(alpha_total));
        }
        spending.validate()?;
        Ok(Self { alpha_total, spending, history: Vec::new() })
    }

    pub fn alpha_total(&self) -> f64 {
        self.alpha_total
    }

    pub fn spending(&self) -> SpendingSequence {
        self.spending
    }

    pub fn history(&self) -> &[BatchRecord] {
        &self.history
    }

    /// Budget already spent by past batches.
    pub fn spent(&self) -> f64 {
        let total_r: usize = self.history.iter().map(|b| b.rejections).sum();
        self.history
            .iter()
            .map(|b| {
                let n = b.size as f64;
                b.alpha * n / (n + (total_r - b.rejections) as f64)
            })
            .sum()
    }

    /// Level the next batch of `size` p-values would be tested at.
    pub fn next_alpha(&self, size: usize) -> f64 {
        if size == 0 {
            return 0.0;
        }
        let t = self.history.len() + 1;
        let scheduled: f64 = (1..=t).map(|s| self.spending.gamma(s)).sum::<f64>() * self.alpha_total;
        let past_r: usize = self.history.iter().map(|b| b.rejections).sum();
        (scheduled - self.spent()) * (size + past_r) as f64 / size as f64
    }

    /// Tests one batch and records it. An empty batch leaves the state
    /// untouched.
    pub fn next_batch(&mut self, node: Option<usize>, pvals: &[f64]) -> Result<BatchDecision, FdrError> {
        if let Some(&bad) = pvals.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
            return Err(FdrError::PValueRange(bad));
        }
        if pvals.is_empty() {
            return Ok(BatchDecision { rejected: Vec::new(), alpha_used: 0.0 });
        }
        let alpha_t = self.next_alpha(pvals.len());
        let threshold = level_threshold(pvals, alpha_t);
        let rejected: Vec<bool> = pvals.iter().map(|&p| threshold > 0.0 && p <= threshold).collect();
        let rejections = rejected.iter().filter(|r| **r).count();
        self.history.push(BatchRecord { node, size: pvals.len(), alpha: alpha_t, rejections });
        Ok(BatchDecision { rejected, alpha_used: alpha_t })
    }

    /// Recomputes every level from the recorded sizes and rejection counts;
    /// returns the first batch whose stored level differs, if any.
    pub fn replay_mismatch(&self) -> Option<usize> {
        let mut fresh = Self { alpha_total: self.alpha_total, spending: self.spending, history: Vec::new() };
        for (t, b) in self.history.iter().enumerate() {
            if fresh.next_alpha(b.size).to_bits() != b.alpha.to_bits() {
                return Some(t);
            }
            fresh.history.push(b.clone());
        }
        None
    }
}

/// BH threshold at level `alpha` (which may exceed 1 in late batches).
fn level_threshold(pvals: &[f64], alpha: f64) -> f64 {
    if alpha <= 0.0 {
        return 0.0;
    }
    bh_threshold(pvals, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_null_batch_spends_scheduled_budget() {
        let mut s = OnlineFdrState::new(0.1, SpendingSequence::default()).unwrap();
        let d = s.next_batch(None, &[1.0, 1.0, 1.0]).unwrap();
        assert!(d.rejected.iter().all(|r| !r));
        assert!((d.alpha_used - 0.1 * 6.0 / (core::f64::consts::PI * core::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_leaves_state() {
        let mut s = OnlineFdrState::new(0.1, SpendingSequence::default()).unwrap();
        s.next_batch(None, &[0.5]).unwrap();
        let before = s.clone();
        let d = s.next_batch(None, &[]).unwrap();
        assert!(d.rejected.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn null_stream_levels_follow_gamma() {
        let mut s = OnlineFdrState::new(0.2, SpendingSequence::Geometric { ratio: 0.5 }).unwrap();
        let mut total = 0.0;
        for t in 1..=30 {
            let d = s.next_batch(None, &[0.99, 0.98]).unwrap();
            let expected = 0.2 * 0.5 * libm::pow(0.5, (t - 1) as f64);
            assert!((d.alpha_used - expected).abs() < 1e-12);
            total += d.alpha_used;
        }
        assert!(total <= 0.2);
        assert_eq!(s.replay_mismatch(), None);
    }

    #[test]
    fn rejections_raise_later_levels() {
        let mut a = OnlineFdrState::new(0.1, SpendingSequence::default()).unwrap();
        let mut b = a.clone();
        a.next_batch(None, &[1e-9, 0.9]).unwrap();
        b.next_batch(None, &[0.9, 0.9]).unwrap();
        assert!(a.next_alpha(2) > b.next_alpha(2));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(OnlineFdrState::new(0.0, SpendingSequence::default()).is_err());
        assert!(OnlineFdrState::new(0.1, SpendingSequence::Geometric { ratio: 1.0 }).is_err());
        let mut s = OnlineFdrState::new(0.1, SpendingSequence::default()).unwrap();
        assert_eq!(s.next_batch(None, &[-0.1]).unwrap_err(), FdrError::PValueRange(-0.1));
    }
}
