//! Adaptive contrastive margin tracked as an exponential moving average of
//! the batch gap between positive similarity and hardest-negative
//! similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, EmbeddingBatch};
use crate::pairing::{PairPlan, ScmMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub alpha: f64,
    /// Put `alpha` on the running value instead of the new batch value.
    pub alpha_on_history: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            alpha: 0.99,
            alpha_on_history: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginState {
    pub m_c: f64,
    pub alpha: f64,
    pub alpha_on_history: bool,
    pub step: u64,
}

impl MarginState {
    pub fn new(alpha: f64) -> Self {
        MarginState {
            m_c: 0.0,
            alpha,
            alpha_on_history: false,
            step: 0,
        }
    }

    pub fn from_config(cfg: &MarginConfig) -> Self {
        MarginState {
            alpha_on_history: cfg.alpha_on_history,
            ..MarginState::new(cfg.alpha)
        }
    }

    /// Fold one batch margin into the running value.
    ///
    /// Default weighting: `m_c <- alpha * m_k + (1 - alpha) * m_c`.
    pub fn update(&mut self, m_k: f64) -> Result<()> {
        *self = ema_update(*self, m_k)?;
        Ok(())
    }
}

pub fn ema_update(state: MarginState, m_k: f64) -> Result<MarginState> {
    if !m_k.is_finite() {
        return Err(Error::NonFinite { context: "batch margin" });
    }
    let a = state.alpha;
    let m_c = if state.alpha_on_history {
        a * state.m_c + (1.0 - a) * m_k
    } else {
        a * m_k + (1.0 - a) * state.m_c
    };
    Ok(MarginState {
        m_c,
        step: state.step + 1,
        ..state
    })
}

/// Mean over first-channel images of `sim(h_i, h_{N+i}) - Maxneg_i`, where
/// `Maxneg_i` is the largest similarity among the anchor's plan negatives.
/// Under the zero mask mode, masked candidates count as similarity 0.
pub fn batch_margin(batch: &EmbeddingBatch, plan: &PairPlan) -> Result<f64> {
    if batch.len() != plan.rows() {
        return Err(Error::DimensionMismatch {
            expected: plan.rows(),
            actual: batch.len(),
        });
    }
    let n = plan.images;
    let mut total = 0.0;
    for i in 0..n {
        let a = plan.anchor(i).ok_or(Error::EmptyPool { anchor: i })?;
        let mut maxneg = a
            .negatives
            .iter()
            .map(|&j| dot(batch.row(i), batch.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        if plan.scm == ScmMode::Zero && !a.masked.is_empty() {
            maxneg = maxneg.max(0.0);
        }
        if maxneg == f64::NEG_INFINITY {
            return Err(Error::EmptyPool { anchor: i });
        }
        total += dot(batch.row(i), batch.row(a.positive)) - maxneg;
    }
    Ok(total / n as f64)
}
