//! Soft-margin SVM over pair features.
//!
//! The dual problem
//!
//! ```text
//! min_a  1/2 a'Qa - e'a   s.t.  0 <= a_i <= C,  y'a = 0,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! is solved by SMO with second-order working-set selection. Training stops once
//! the maximal violating pair gap drops below `tol`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::{training_rows, PairSample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Rbf { gamma } if !(*gamma > 0.0 && gamma.is_finite()) => Err(
                Error::InvalidArgument(format!("rbf gamma must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoParams {
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    /// Iteration cap; `None` picks `max(1e6, 100 n)`.
    pub max_iter: Option<usize>,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

pub const DEFAULT_TOL: f64 = 1e-5;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub train_size: usize,
    /// Iterations used by the solver and the final KKT gap.
    pub iterations: usize,
    pub gap: f64,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        let dim = self.dim();
        if !self.support_vectors.is_empty() && x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        Ok(self.decision_unchecked(x))
    }

    #[inline]
    pub(crate) fn decision_unchecked(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }

    /// Label 1 iff the decision value is strictly positive.
    pub fn predict(&self, x: &[f64]) -> Result<bool> {
        Ok(self.decision(x)? > 0.0)
    }
}

/// Trains on `(features, label)` rows. Both classes must be present.
pub fn fit(
    rows: &[(Vec<f64>, bool)],
    kernel: KernelSpec,
    c: f64,
    params: SmoParams,
    seed: u64,
) -> Result<SvmModel> {
    kernel.validate()?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    if rows.len() < 2 {
        return Err(Error::DegenerateTrainingSet(format!("{} sample(s)", rows.len())));
    }
    let positives = rows.iter().filter(|r| r.1).count();
    if positives == 0 || positives == rows.len() {
        return Err(Error::DegenerateTrainingSet("only one class present".into()));
    }
    let dim = rows[0].0.len();
    if let Some(bad) = rows.iter().find(|r| r.0.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.0.len(),
        });
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng::stream(seed, "smo_order", rows.len() as u64));
    let xs: Vec<&[f64]> = order.iter().map(|&i| rows[i].0.as_slice()).collect();
    let ys: Vec<f64> = order.iter().map(|&i| if rows[i].1 { 1.0 } else { -1.0 }).collect();

    let sol = Smo::new(&xs, &ys, kernel, c, params).solve();

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(xs[i].to_vec());
            dual_coefs.push(a * ys[i]);
        }
    }
    Ok(SvmModel {
        kernel,
        support_vectors,
        dual_coefs,
        bias: -sol.rho,
        c,
        train_size: rows.len(),
        iterations: sol.iterations,
        gap: sol.gap,
    })
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
    gap: f64,
}

struct Smo<'a> {
    y: &'a [f64],
    /// Full kernel matrix, row-major.
    k: Vec<f64>,
    n: usize,
    c: f64,
    params: SmoParams,
}

impl<'a> Smo<'a> {
    fn new(xs: &[&[f64]], y: &'a [f64], kernel: KernelSpec, c: f64, params: SmoParams) -> Self {
        let n = xs.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = kernel.eval(xs[i], xs[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Self { y, k, n, c, params }
    }

    #[inline]
    fn q(&self, i: usize, j: usize) -> f64 {
        self.y[i] * self.y[j] * self.k[i * self.n + j]
    }

    fn in_up(&self, a: f64, y: f64) -> bool {
        (y > 0.0 && a < self.c) || (y < 0.0 && a > 0.0)
    }

    fn in_low(&self, a: f64, y: f64) -> bool {
        (y > 0.0 && a > 0.0) || (y < 0.0 && a < self.c)
    }

    fn solve(self) -> Solution {
        let n = self.n;
        let c = self.c;
        let y = self.y;
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let max_iter = self.params.max_iter.unwrap_or_else(|| (100 * n).max(1_000_000));
        let mut iterations = 0;
        let mut gap = f64::INFINITY;

        while iterations < max_iter {
            // i: maximal violator in I_up.
            let mut gmax = f64::NEG_INFINITY;
            let mut i = usize::MAX;
            for t in 0..n {
                if self.in_up(alpha[t], y[t]) {
                    let v = -y[t] * grad[t];
                    if v > gmax {
                        gmax = v;
                        i = t;
                    }
                }
            }
            // j: second-order choice in I_low, plus the minimal value for the gap.
            let mut gmin = f64::INFINITY;
            let mut j = usize::MAX;
            let mut best = f64::INFINITY;
            for t in 0..n {
                if !self.in_low(alpha[t], y[t]) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                if i != usize::MAX && v < gmax {
                    let b = gmax - v;
                    let kii = self.k[i * n + i];
                    let ktt = self.k[t * n + t];
                    let kit = self.k[i * n + t];
                    let mut a = kii + ktt - 2.0 * kit;
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -(b * b) / a;
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
            gap = gmax - gmin;
            if i == usize::MAX || j == usize::MAX || gap < self.params.tol {
                break;
            }
            iterations += 1;

            let (old_ai, old_aj) = (alpha[i], alpha[j]);
            let qii = self.q(i, i);
            let qjj = self.q(j, j);
            let qij = self.q(i, j);
            if y[i] != y[j] {
                let mut quad = qii + qjj + 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let mut quad = qii + qjj - 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }

            let dai = alpha[i] - old_ai;
            let daj = alpha[j] - old_aj;
            for (t, g) in grad.iter_mut().enumerate() {
                *g += self.q(t, i) * dai + self.q(t, j) * daj;
            }
        }

        let rho = self.rho(&alpha, &grad);
        Solution {
            alpha,
            rho,
            iterations,
            gap,
        }
    }

    /// Offset: mean of `y_i G_i` over free vectors, else the middle of the
    /// feasible interval.
    fn rho(&self, alpha: &[f64], grad: &[f64]) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum, mut free) = (0.0, 0usize);
        for t in 0..self.n {
            let yg = self.y[t] * grad[t];
            if alpha[t] >= self.c {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if alpha[t] <= 0.0 {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                sum += yg;
            }
        }
        if free > 0 {
            sum / free as f64
        } else {
            (ub + lb) / 2.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub folds: usize,
    pub c_grid: Vec<f64>,
    /// Ignored for the linear kernel.
    pub gamma_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub c: f64,
    pub kernel: KernelSpec,
    pub mean_ca: f64,
}

/// Deterministic fold index for each of `n` samples.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "cv_folds", n as u64));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// k-fold cross-validated CA (percent) of one hyper-parameter cell. Folds
/// split base pairs; training folds are swap-augmented, held-out pairs are
/// scored in their stored orientation.
pub fn cross_validate(
    labeled: &[PairSample],
    folds: usize,
    kernel: KernelSpec,
    c: f64,
    params: SmoParams,
    seed: u64,
) -> Result<f64> {
    let assignment = fold_assignment(labeled.len(), folds, seed);
    let mut scores = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<PairSample> = labeled
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a != f)
            .map(|(s, _)| s.clone())
            .collect();
        let test: Vec<&PairSample> = labeled
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == f)
            .map(|(s, _)| s)
            .collect();
        if test.is_empty() {
            continue;
        }
        let model = fit(&training_rows(&train), kernel, c, params, seed)?;
        let correct = test
            .iter()
            .filter(|s| (model.decision_unchecked(&s.features) > 0.0) == s.label.unwrap_or(false))
            .count();
        scores.push(100.0 * correct as f64 / test.len() as f64);
    }
    if scores.is_empty() {
        return Err(Error::DegenerateTrainingSet("no non-empty fold".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Picks the cell with the highest mean k-fold CA (ties toward smaller C, then
/// smaller gamma) and refits it on all of `labeled`.
pub fn grid_search_fit(
    labeled: &[PairSample],
    grid: &GridSearch,
    linear: bool,
    params: SmoParams,
    seed: u64,
) -> Result<(SvmModel, Vec<GridCell>)> {
    if grid.folds < 2 {
        return Err(Error::InvalidArgument("grid search needs at least 2 folds".into()));
    }
    if grid.c_grid.is_empty() || (!linear && grid.gamma_grid.is_empty()) {
        return Err(Error::InvalidArgument("grid search needs non-empty grids".into()));
    }
    let mut cs = grid.c_grid.clone();
    cs.sort_by(f64::total_cmp);
    let kernels: Vec<KernelSpec> = if linear {
        vec![KernelSpec::Linear]
    } else {
        let mut gs = grid.gamma_grid.clone();
        gs.sort_by(f64::total_cmp);
        gs.into_iter().map(|gamma| KernelSpec::Rbf { gamma }).collect()
    };
    let mut cells = Vec::with_capacity(cs.len() * kernels.len());
    let mut best: Option<usize> = None;
    for &c in &cs {
        for &kernel in &kernels {
            let mean_ca = cross_validate(labeled, grid.folds, kernel, c, params, seed)?;
            cells.push(GridCell { c, kernel, mean_ca });
            // Cells are visited in (C, gamma) ascending order, so a strict
            // improvement test implements the tie rule.
            if best.is_none_or(|b| mean_ca > cells[b].mean_ca) {
                best = Some(cells.len() - 1);
            }
        }
    }
    let chosen = &cells[best.expect("grid is non-empty")];
    let model = fit(&training_rows(labeled), chosen.kernel, chosen.c, params, seed)?;
    Ok((model, cells))
}
