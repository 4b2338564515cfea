//! Pseudolabel verification and assignment.
//!
//! Every unlabeled pair keeps the predictions of the last `P + 1` retrains.
//! A pair whose prediction never flipped across that window (`N_change = 0`)
//! is eligible for a pseudolabel; among eligible pairs of each predicted
//! class, the ones at median distance to the boundary are chosen.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::comparator::DecisionFunction;
use crate::error::{Error, Result};
use crate::pairs::{PairKey, PairSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SslConfig {
    /// AL iterations per SSL step.
    pub p: usize,
    /// Pseudolabels per SSL step, split evenly between the two classes.
    pub t: usize,
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::validation("P", "must be at least 1"));
        }
        if self.t == 0 || !self.t.is_multiple_of(2) {
            return Err(Error::validation("t", "must be a positive even number"));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.t / 2
    }
}

/// Which part of the verified candidates receives pseudolabels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Median,
    Farthest,
}

/// Rolling window of predictions per unlabeled pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelHistory {
    capacity: usize,
    entries: HashMap<PairKey, VecDeque<bool>>,
}

impl LabelHistory {
    /// A history keeping `p + 1` predictions per pair.
    pub fn new(p: usize) -> Self {
        Self {
            capacity: p + 1,
            entries: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, key: &PairKey) -> Option<&VecDeque<bool>> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self, key: &PairKey) -> bool {
        self.entries.get(key).is_some_and(|e| e.len() == self.capacity)
    }

    /// Appends one prediction per surviving unlabeled pair (from its decision
    /// value) and purges pairs that left S_U.
    pub fn record_decisions(&mut self, unlabeled: &[PairSample], decisions: &[f64]) {
        debug_assert_eq!(unlabeled.len(), decisions.len());
        let mut next = HashMap::with_capacity(unlabeled.len());
        for (s, d) in unlabeled.iter().zip(decisions) {
            let key = s.key();
            let mut entry = self.entries.remove(&key).unwrap_or_default();
            if entry.len() == self.capacity {
                entry.pop_front();
            }
            entry.push_back(*d > 0.0);
            next.insert(key, entry);
        }
        self.entries = next;
    }

    pub fn record_predictions(
        &mut self,
        model: &dyn DecisionFunction,
        unlabeled: &[PairSample],
    ) -> Result<()> {
        let decisions: Vec<f64> = unlabeled
            .iter()
            .map(|s| model.decision(&s.features))
            .collect::<Result<_>>()?;
        self.record_decisions(unlabeled, &decisions);
        Ok(())
    }
}

/// Number of positions in the window where the prediction differs
/// from the previous one. The window must hold exactly `p + 1` labels.
pub fn n_change(window: &[bool], p: usize) -> Result<usize> {
    if window.len() != p + 1 {
        return Err(Error::IncompleteWindow {
            have: window.len(),
            need: p + 1,
        });
    }
    Ok(window.windows(2).filter(|w| w[0] != w[1]).count())
}

/// Candidates chosen for pseudolabels, with the step's bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoSelection {
    /// `(pair, |decision|)` predicted 1, ordered by distance.
    pub positives: Vec<(PairKey, f64)>,
    /// `(pair, |decision|)` predicted 0, ordered by distance.
    pub negatives: Vec<(PairKey, f64)>,
    pub predicted_positive: usize,
    pub predicted_negative: usize,
    pub verified_positive: usize,
    pub verified_negative: usize,
    /// Pairs skipped because their window was incomplete.
    pub incomplete: usize,
}

impl PseudoSelection {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    /// `(pair, pseudolabel)` for every selected pair.
    pub fn labels(&self) -> Vec<(PairKey, bool)> {
        self.positives
            .iter()
            .map(|(k, _)| (*k, true))
            .chain(self.negatives.iter().map(|(k, _)| (*k, false)))
            .collect()
    }
}

/// Start index of a `width`-long window centered in `m` sorted candidates;
/// an odd leftover shifts the window toward the boundary.
pub fn median_window_start(m: usize, width: usize) -> usize {
    (m - width.min(m)) / 2
}

fn pick(mut candidates: Vec<(PairKey, f64)>, want: usize, rule: SelectionRule) -> Vec<(PairKey, f64)> {
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let m = candidates.len();
    let w = want.min(m);
    let start = match rule {
        SelectionRule::Median => median_window_start(m, w),
        SelectionRule::Farthest => m - w,
    };
    candidates.drain(start..start + w).collect()
}

/// Splits S_U by current prediction, keeps pairs with `N_change = 0` over a
/// full window, and selects up to `t / 2` per class by `rule`.
/// `decisions` are the current model's values aligned with `unlabeled`.
pub fn assign_pseudolabels(
    unlabeled: &[PairSample],
    decisions: &[f64],
    history: &LabelHistory,
    cfg: &SslConfig,
    rule: SelectionRule,
) -> Result<PseudoSelection> {
    cfg.validate()?;
    if unlabeled.len() != decisions.len() {
        return Err(Error::InvalidArgument("decisions must align with S_U".into()));
    }
    let p = history.capacity().saturating_sub(1);
    let mut out = PseudoSelection::default();
    let (mut rp, mut rn) = (Vec::new(), Vec::new());
    for (s, &d) in unlabeled.iter().zip(decisions) {
        let positive = d > 0.0;
        if positive {
            out.predicted_positive += 1;
        } else {
            out.predicted_negative += 1;
        }
        let key = s.key();
        let Some(window) = history.get(&key).filter(|w| w.len() == p + 1) else {
            out.incomplete += 1;
            continue;
        };
        let (front, back) = window.as_slices();
        let flat: Vec<bool> = front.iter().chain(back).copied().collect();
        if n_change(&flat, p)? == 0 && flat.last() == Some(&positive) {
            if positive {
                rp.push((key, d.abs()));
            } else {
                rn.push((key, d.abs()));
            }
        }
    }
    out.verified_positive = rp.len();
    out.verified_negative = rn.len();
    out.positives = pick(rp, cfg.half(), rule);
    out.negatives = pick(rn, cfg.half(), rule);
    Ok(out)
}

/// Classic self-training selection: the `t` pairs with the largest
/// `|decision|`, labeled by their prediction, no verification.
pub fn most_confident(unlabeled: &[PairSample], decisions: &[f64], t: usize) -> PseudoSelection {
    let mut all: Vec<(PairKey, f64, bool)> = unlabeled
        .iter()
        .zip(decisions)
        .map(|(s, &d)| (s.key(), d.abs(), d > 0.0))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(t);
    let mut out = PseudoSelection {
        predicted_positive: decisions.iter().filter(|d| **d > 0.0).count(),
        ..Default::default()
    };
    out.predicted_negative = decisions.len() - out.predicted_positive;
    for (k, d, pos) in all {
        if pos {
            out.positives.push((k, d));
        } else {
            out.negatives.push((k, d));
        }
    }
    out
}
