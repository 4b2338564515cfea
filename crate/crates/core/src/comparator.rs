//! The trained pairwise comparator and the learners that produce it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{training_rows, PairSample};
use crate::svm::{self, GridCell, GridSearch, KernelSpec, SmoParams, SvmModel};

/// Anything that maps pair features to a signed score; positive means the
/// left configuration is predicted better.
pub trait DecisionFunction {
    fn decision(&self, features: &[f64]) -> Result<f64>;

    /// Label prediction. An exact zero decision maps to 0.
    fn predict(&self, features: &[f64]) -> Result<bool> {
        Ok(self.decision(features)? > 0.0)
    }
}

/// Linear model `w.x + b`, used as a fast stand-in learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ComparatorModel {
    Svm(SvmModel),
    Linear(LinearModel),
    /// Stand-in after a degenerate training set: always predicts one class.
    Majority { label: bool, dim: usize },
}

impl ComparatorModel {
    pub fn dim(&self) -> Option<usize> {
        match self {
            ComparatorModel::Svm(m) => Some(m.dim()),
            ComparatorModel::Linear(m) => Some(m.weights.len()),
            ComparatorModel::Majority { dim, .. } => Some(*dim),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, ComparatorModel::Majority { .. })
    }
}

impl DecisionFunction for ComparatorModel {
    fn decision(&self, features: &[f64]) -> Result<f64> {
        match self {
            ComparatorModel::Svm(m) => m.decision(features),
            ComparatorModel::Linear(m) => {
                if features.len() != m.weights.len() {
                    return Err(Error::DimensionMismatch {
                        expected: m.weights.len(),
                        actual: features.len(),
                    });
                }
                Ok(m.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + m.bias)
            }
            ComparatorModel::Majority { label, dim } => {
                if features.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        actual: features.len(),
                    });
                }
                Ok(if *label { 1.0 } else { -1.0 })
            }
        }
    }
}

impl DecisionFunction for SvmModel {
    fn decision(&self, features: &[f64]) -> Result<f64> {
        SvmModel::decision(self, features)
    }
}

fn default_c() -> f64 {
    1.0
}

fn default_tol() -> f64 {
    svm::DEFAULT_TOL
}

/// Which learner a session trains, and with what hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearnerSpec {
    Svm {
        /// Defaults to rbf with gamma = 1 / feature_dim.
        #[serde(default)]
        kernel: Option<KernelSpec>,
        #[serde(default = "default_c")]
        c: f64,
        /// When set, (C, gamma) are chosen once on the initial labeled set.
        #[serde(default)]
        grid_search: Option<GridSearch>,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Difference of class means; trains in linear time.
    Centroid,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::Svm {
            kernel: None,
            c: default_c(),
            grid_search: None,
            tol: default_tol(),
        }
    }
}

/// Learner with hyper-parameters fixed for the rest of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Learner {
    Svm { kernel: KernelSpec, c: f64, tol: f64 },
    Centroid,
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        if let LearnerSpec::Svm { kernel, c, grid_search, tol } = self {
            if let Some(k) = kernel {
                k.validate()?;
            }
            if !(*c > 0.0 && c.is_finite()) {
                return Err(Error::validation("learner.c", "must be positive"));
            }
            if tol.is_nan() || *tol <= 0.0 {
                return Err(Error::validation("learner.tol", "must be positive"));
            }
            if let Some(g) = grid_search {
                if g.folds < 2 || g.c_grid.is_empty() {
                    return Err(Error::validation(
                        "learner.grid_search",
                        "needs folds >= 2 and a non-empty C grid",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Resolves defaults and, if requested, runs the one-off grid search on
    /// the initial labeled set. Returns the fixed learner and the grid report.
    pub fn resolve(
        &self,
        initial: &[PairSample],
        feature_dim: usize,
        seed: u64,
    ) -> Result<(Learner, Vec<GridCell>)> {
        match self {
            LearnerSpec::Centroid => Ok((Learner::Centroid, Vec::new())),
            LearnerSpec::Svm { kernel, c, grid_search, tol } => {
                let kernel = kernel.unwrap_or(KernelSpec::Rbf {
                    gamma: 1.0 / feature_dim.max(1) as f64,
                });
                let params = SmoParams { tol: *tol, max_iter: None };
                match grid_search {
                    Some(grid) if initial.len() >= grid.folds => {
                        let linear = matches!(kernel, KernelSpec::Linear);
                        match svm::grid_search_fit(initial, grid, linear, params, seed) {
                            Ok((model, cells)) => Ok((
                                Learner::Svm {
                                    kernel: model.kernel,
                                    c: model.c,
                                    tol: *tol,
                                },
                                cells,
                            )),
                            Err(Error::DegenerateTrainingSet(_)) => {
                                Ok((Learner::Svm { kernel, c: *c, tol: *tol }, Vec::new()))
                            }
                            Err(e) => Err(e),
                        }
                    }
                    _ => Ok((Learner::Svm { kernel, c: *c, tol: *tol }, Vec::new())),
                }
            }
        }
    }
}

impl Learner {
    /// Trains on the swap-augmented version of `labeled`.
    pub fn fit(&self, labeled: &[PairSample], seed: u64) -> Result<ComparatorModel> {
        self.fit_rows(&training_rows(labeled), seed)
    }

    pub fn fit_rows(&self, rows: &[(Vec<f64>, bool)], seed: u64) -> Result<ComparatorModel> {
        match self {
            Learner::Svm { kernel, c, tol } => {
                let params = SmoParams { tol: *tol, max_iter: None };
                svm::fit(rows, *kernel, *c, params, seed).map(ComparatorModel::Svm)
            }
            Learner::Centroid => fit_centroid(rows).map(ComparatorModel::Linear),
        }
    }

    /// As [`fit`](Self::fit), but a degenerate training set yields the
    /// majority-vote stand-in instead of an error. The flag reports whether
    /// the fallback was used.
    pub fn fit_or_fallback(
        &self,
        labeled: &[PairSample],
        feature_dim: usize,
        seed: u64,
    ) -> Result<(ComparatorModel, bool)> {
        match self.fit(labeled, seed) {
            Ok(m) => Ok((m, false)),
            Err(Error::DegenerateTrainingSet(_)) => {
                let ones = labeled.iter().filter(|s| s.label == Some(true)).count();
                let label = 2 * ones > labeled.len();
                Ok((ComparatorModel::Majority { label, dim: feature_dim }, true))
            }
            Err(e) => Err(e),
        }
    }
}

fn fit_centroid(rows: &[(Vec<f64>, bool)]) -> Result<LinearModel> {
    let dim = rows.first().map_or(0, |r| r.0.len());
    let (mut pos, mut neg) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut np, mut nn) = (0usize, 0usize);
    for (x, y) in rows {
        let (acc, n) = if *y { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
        *n += 1;
    }
    if np == 0 || nn == 0 {
        return Err(Error::DegenerateTrainingSet("only one class present".into()));
    }
    pos.iter_mut().for_each(|v| *v /= np as f64);
    neg.iter_mut().for_each(|v| *v /= nn as f64);
    let weights: Vec<f64> = pos.iter().zip(&neg).map(|(p, n)| p - n).collect();
    let bias = -weights
        .iter()
        .zip(pos.iter().zip(&neg))
        .map(|(w, (p, n))| w * (p + n) / 2.0)
        .sum::<f64>();
    Ok(LinearModel { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_tie_convention() {
        let m = ComparatorModel::Linear(LinearModel {
            weights: vec![1.0],
            bias: 0.0,
        });
        assert!(m.predict(&[2.3]).unwrap());
        assert!(!m.predict(&[-0.1]).unwrap());
        assert!(!m.predict(&[0.0]).unwrap());
    }

    #[test]
    fn centroid_separates_means() {
        let rows = vec![(vec![1.0, 0.0], true), (vec![0.0, 1.0], false)];
        let m = fit_centroid(&rows).unwrap();
        let model = ComparatorModel::Linear(m);
        assert!(model.predict(&[1.0, 0.0]).unwrap());
        assert!(!model.predict(&[0.0, 1.0]).unwrap());
    }

    #[test]
    fn fallback_on_single_class() {
        use crate::pairs::LabelSource;
        let s = PairSample {
            left_id: 0,
            right_id: 1,
            features: vec![0.0, 1.0],
            label: Some(true),
            source: LabelSource::Measured,
        };
        // Swap augmentation always yields both classes, so feed rows directly.
        let rows = vec![(s.features.clone(), true), (vec![0.5, 0.5], true)];
        assert!(matches!(
            Learner::Centroid.fit_rows(&rows, 0),
            Err(Error::DegenerateTrainingSet(_))
        ));
        let (m, flagged) = Learner::Centroid.fit_or_fallback(&[], 2, 0).unwrap();
        assert!(flagged && m.is_fallback());
        assert!(!m.predict(&[0.0, 0.0]).unwrap());
    }

    #[test]
    fn model_json_round_trip() {
        let m = ComparatorModel::Linear(LinearModel {
            weights: vec![0.1, -0.3333333333333333],
            bias: 1e-17,
        });
        assert_eq!(ComparatorModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
}
