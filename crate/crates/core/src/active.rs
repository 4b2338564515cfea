//! Cluster-based uncertainty sampling.
//!
//! The unlabeled pairs are clustered into `k = q * n` groups, each group is
//! represented by its medoid, and the `q` medoids closest to the decision
//! boundary (smallest `|decision|`) are queried.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comparator::DecisionFunction;
use crate::error::{Error, Result};
use crate::pairs::{PairKey, PairSample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryConfig {
    /// Batch size.
    pub q: usize,
    /// Uncertainty divisor: `k = q * n` clusters are formed.
    pub n: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
}

impl QueryConfig {
    pub fn new(q: usize, n: usize, seed: u64) -> Self {
        Self {
            q,
            n,
            kmeans_max_iter: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::validation("q", "batch size must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::validation("n", "must be at least 1"));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::validation("kmeans_max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Set when the requested `k` exceeded the number of points.
    pub clamped_from: Option<usize>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn inertia(&self, points: &[&[f64]]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &c)| squared_distance(p, &self.centroids[c]))
            .sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn means(points: &[&[f64]], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        if *n > 0 {
            s.iter_mut().for_each(|v| *v /= *n as f64);
        }
    }
    sums
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that can spare one.
fn fill_empty(points: &[&[f64]], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] > 1 {
                let d = squared_distance(p, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let far = far.expect("k <= number of points leaves a donor cluster");
        assignment[far] = empty;
        centroids[empty] = points[far].to_vec();
    }
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Fewer distinct points than k.
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[next] = true;
        let c = points[next].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means with k-means++ seeding and Lloyd iterations until the assignment
/// stops changing (or `max_iter`). `k` larger than the point count is clamped.
pub fn kmeans(points: &[&[f64]], k: usize, max_iter: usize, seed: u64) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let clamped_from = (k > points.len()).then_some(k);
    let k = k.min(points.len());
    let mut rng = rng::stream(seed, "kmeans_pp", k as u64);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        fill_empty(points, &mut assignment, &mut centroids);
        centroids = means(points, &assignment, k);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    fill_empty(points, &mut assignment, &mut centroids);
    centroids = means(points, &assignment, k);
    Ok(Clustering {
        assignment,
        centroids,
        iterations,
        clamped_from,
    })
}

/// For each cluster, the member nearest its centroid (lowest index on ties).
pub fn medoids(points: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> Vec<usize> {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; centroids.len()];
    for (i, (p, &c)) in points.iter().zip(assignment).enumerate() {
        let d = squared_distance(p, &centroids[c]);
        match best[c] {
            Some((bd, _)) if bd <= d => {}
            _ => best[c] = Some((d, i)),
        }
    }
    best.into_iter().flatten().map(|(_, i)| i).collect()
}

/// One query batch with the diagnostics needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub selected: Vec<PairKey>,
    /// `|decision|` of each selected pair, aligned with `selected`.
    pub distances: Vec<f64>,
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    /// Indices into the unlabeled slice of every medoid, by cluster.
    pub medoids: Vec<usize>,
    #[serde(skip)]
    pub assignment: Vec<usize>,
}

fn by_distance_then_key(a: &(f64, PairKey), b: &(f64, PairKey)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Cluster S_U into `q * n` groups, keep the medoids, return the `q`
/// medoids with the smallest `|decision|` (ties by pair id).
pub fn select_queries(
    model: &dyn DecisionFunction,
    unlabeled: &[PairSample],
    cfg: &QueryConfig,
) -> Result<QueryBatch> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::NothingToQuery);
    }
    let points: Vec<&[f64]> = unlabeled.iter().map(|s| s.features.as_slice()).collect();
    let k = cfg.q.saturating_mul(cfg.n).min(points.len());
    let clustering = kmeans(&points, k, cfg.kmeans_max_iter, cfg.seed)?;
    let meds = medoids(&points, &clustering.assignment, &clustering.centroids);
    let mut scored: Vec<(f64, PairKey)> = meds
        .iter()
        .map(|&i| Ok((model.decision(&unlabeled[i].features)?.abs(), unlabeled[i].key())))
        .collect::<Result<_>>()?;
    scored.sort_by(by_distance_then_key);
    scored.truncate(cfg.q);
    Ok(QueryBatch {
        selected: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
        k: clustering.k(),
        cluster_sizes: clustering.sizes(),
        medoids: meds,
        assignment: clustering.assignment,
    })
}

/// Plain uncertainty sampling: the `q` pairs of S_U with the smallest
/// `|decision|`, no clustering.
pub fn select_uncertain(
    model: &dyn DecisionFunction,
    unlabeled: &[PairSample],
    q: usize,
) -> Result<QueryBatch> {
    if unlabeled.is_empty() {
        return Err(Error::NothingToQuery);
    }
    let mut scored: Vec<(f64, PairKey)> = unlabeled
        .iter()
        .map(|s| Ok((model.decision(&s.features)?.abs(), s.key())))
        .collect::<Result<_>>()?;
    scored.sort_by(by_distance_then_key);
    scored.truncate(q);
    Ok(QueryBatch {
        selected: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
        k: 0,
        cluster_sizes: Vec::new(),
        medoids: Vec::new(),
        assignment: Vec::new(),
    })
}

/// `q` pairs of S_U drawn uniformly without replacement.
pub fn select_random(unlabeled: &[PairSample], q: usize, seed: u64) -> Result<QueryBatch> {
    if unlabeled.is_empty() {
        return Err(Error::NothingToQuery);
    }
    let mut r = rng::stream(seed, "passive", unlabeled.len() as u64);
    let picks = rand::seq::index::sample(&mut r, unlabeled.len(), q.min(unlabeled.len()));
    let selected: Vec<PairKey> = picks.iter().map(|i| unlabeled[i].key()).collect();
    Ok(QueryBatch {
        distances: vec![0.0; selected.len()],
        selected,
        k: 0,
        cluster_sizes: Vec::new(),
        medoids: Vec::new(),
        assignment: Vec::new(),
    })
}
