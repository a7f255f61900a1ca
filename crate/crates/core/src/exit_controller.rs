//! Adaptive probability controller over generator exit layers.
//!
//! Once per accuracy window the controller compares the window's RTD
//! accuracy with the previous window's and shifts probability mass along the
//! reassignment scores:
//!
//! ```text
//! diff = clamp(acc_curr - acc_prev, -1, 1)
//! P    = softmax(P + alpha * diff * R)
//! ```
//!
//! With `R` increasing in exit depth, rising accuracy favours deeper exits
//! (harder replacements) and falling accuracy favours shallow ones. Note that
//! the softmax is applied to probabilities, not logits, so repeated updates
//! with `diff = 0` drift towards uniform.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::softmax_in_place;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("window accuracy {0} is outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("initial distribution must be non-negative and sum to 1, got {0:?}")]
    BadDistribution(Vec<f64>),
    #[error("{p} probabilities but {r} reassignment scores")]
    LengthMismatch { p: usize, r: usize },
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub initial_p: Vec<f64>,
    pub reassignment_scores: Vec<f64>,
    pub window: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            initial_p: vec![0.1, 0.2, 0.3, 0.4],
            reassignment_scores: vec![0.0, 1.0, 2.0, 3.0],
            window: 100,
        }
    }
}

/// One applied update, kept for the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitUpdate {
    pub acc_prev: f64,
    pub acc_curr: f64,
    pub diff: f64,
    pub p_before: Vec<f64>,
    pub p_after: Vec<f64>,
}

/// `softmax(p + alpha * clamp(diff, -1, 1) * r)`.
pub fn reassign(p: &[f64], r: &[f64], alpha: f64, diff: f64) -> Vec<f64> {
    let diff = diff.clamp(-1.0, 1.0);
    let mut next: Vec<f64> = p.iter().zip(r).map(|(pi, ri)| pi + alpha * diff * ri).collect();
    softmax_in_place(&mut next);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    p: Vec<f64>,
    r: Vec<f64>,
    alpha: f64,
    last_window_acc: Option<f64>,
    history: Vec<ExitUpdate>,
}

impl ExitDistribution {
    pub fn new(cfg: &ControllerConfig) -> Result<Self, ControllerError> {
        Self::with_state(&cfg.initial_p, &cfg.reassignment_scores, cfg.alpha, None)
    }

    /// Controller resumed at an arbitrary state.
    pub fn with_state(p: &[f64], r: &[f64], alpha: f64, last_window_acc: Option<f64>) -> Result<Self, ControllerError> {
        if p.len() != r.len() {
            return Err(ControllerError::LengthMismatch { p: p.len(), r: r.len() });
        }
        if p.is_empty() || p.iter().any(|x| !x.is_finite() || *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(ControllerError::BadDistribution(p.to_vec()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ControllerError::BadAlpha(alpha));
        }
        Ok(Self {
            p: p.to_vec(),
            r: r.to_vec(),
            alpha,
            last_window_acc,
            history: Vec::new(),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn last_window_acc(&self) -> Option<f64> {
        self.last_window_acc
    }

    pub fn history(&self) -> &[ExitUpdate] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Feeds one window's accuracy. The first window only records its
    /// accuracy; later windows apply [`reassign`] and return the update.
    pub fn update(&mut self, acc_curr: f64) -> Result<Option<ExitUpdate>, ControllerError> {
        if !(0.0..=1.0).contains(&acc_curr) {
            return Err(ControllerError::AccuracyOutOfRange(acc_curr));
        }
        let Some(acc_prev) = self.last_window_acc.replace(acc_curr) else {
            return Ok(None);
        };
        let diff = (acc_curr - acc_prev).clamp(-1.0, 1.0);
        let p_after = reassign(&self.p, &self.r, self.alpha, diff);
        let update = ExitUpdate {
            acc_prev,
            acc_curr,
            diff,
            p_before: std::mem::replace(&mut self.p, p_after.clone()),
            p_after,
        };
        self.history.push(update.clone());
        Ok(Some(update))
    }

    /// Categorical draw of an exit index (0-based) from `P`.
    pub fn sample_exit<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(&self.p).expect("P is a valid distribution").sample(rng)
    }
}
