//! Genetic-algorithm configuration search.
//!
//! In comparator mode the only signal is pairwise: fitness is the number of
//! Copeland wins inside the current population. Oracle mode uses the true
//! performance directly and exists as a reference.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparator::DecisionFunction;
use crate::error::{Error, Result};
use crate::metrics::{copeland, pair_score};
use crate::oracle::PerformanceOracle;
use crate::rng;
use crate::space::{ConfigSpace, Configuration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    Uniform,
    OnePoint,
}

fn d_population() -> usize {
    200
}
fn d_crossover() -> f64 {
    0.5
}
fn d_mutation() -> f64 {
    0.015
}
fn d_generations() -> usize {
    30
}
fn d_elitism() -> usize {
    1
}
fn d_kind() -> CrossoverKind {
    CrossoverKind::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    #[serde(default = "d_population")]
    pub population: usize,
    #[serde(default = "d_crossover")]
    pub crossover_rate: f64,
    #[serde(default = "d_mutation")]
    pub mutation_rate: f64,
    #[serde(default = "d_generations")]
    pub generations: usize,
    #[serde(default = "d_elitism")]
    pub elitism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_kind")]
    pub crossover: CrossoverKind,
    /// Compare each individual with this many random opponents instead of
    /// the whole population.
    #[serde(default)]
    pub sampled_opponents: Option<usize>,
}

impl Default for GaConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::validation("ga.population", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::validation("ga.crossover_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::validation("ga.mutation_rate", "must lie in [0, 1]"));
        }
        if self.generations == 0 {
            return Err(Error::validation("ga.generations", "must be at least 1"));
        }
        if self.elitism > self.population {
            return Err(Error::validation("ga.elitism", "cannot exceed the population"));
        }
        if self.sampled_opponents == Some(0) {
            return Err(Error::validation("ga.sampled_opponents", "must be at least 1"));
        }
        Ok(())
    }
}

/// Pairwise preference between two configurations.
pub trait PairwiseJudge: Sync {
    /// Antisymmetric score; positive when `a` is better than `b`.
    fn score(&self, a: &Configuration, b: &Configuration) -> Result<f64>;
}

/// A learned comparator over encoded pairs.
pub struct ModelJudge<'a> {
    pub model: &'a (dyn DecisionFunction + Sync),
    pub space: &'a ConfigSpace,
}

impl PairwiseJudge for ModelJudge<'_> {
    fn score(&self, a: &Configuration, b: &Configuration) -> Result<f64> {
        pair_score(self.model, &self.space.encode(a)?, &self.space.encode(b)?)
    }
}

/// Error-free comparator backed by ground truth.
pub struct OracleJudge<'a>(pub &'a dyn PerformanceOracle);

impl PairwiseJudge for OracleJudge<'_> {
    fn score(&self, a: &Configuration, b: &Configuration) -> Result<f64> {
        Ok(self.0.truth(a)? - self.0.truth(b)?)
    }
}

pub enum Fitness<'a> {
    Comparator(&'a dyn PairwiseJudge),
    Oracle(&'a dyn PerformanceOracle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best: Configuration,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Configuration,
    pub history: Vec<GenerationRecord>,
    pub final_population: Vec<Configuration>,
    pub comparisons: u64,
}

struct Scored {
    fitness: Vec<f64>,
    /// Indices, best first.
    order: Vec<usize>,
}

fn evaluate(
    population: &[Configuration],
    fitness: &Fitness<'_>,
    opponents: Option<usize>,
    rng_seed: u64,
    comparisons: &AtomicU64,
) -> Result<Scored> {
    let n = population.len();
    match fitness {
        Fitness::Oracle(o) => {
            let f: Vec<f64> = population.iter().map(|c| o.truth(c)).collect::<Result<_>>()?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
            Ok(Scored { fitness: f, order })
        }
        Fitness::Comparator(judge) => {
            let mut wins = vec![0usize; n];
            let mut sums = vec![0.0; n];
            match opponents {
                Some(m) if m < n - 1 => {
                    let mut r = rng::stream(rng_seed, "ga_opponents", 0);
                    let draws: Vec<Vec<usize>> = (0..n)
                        .map(|i| {
                            rand::seq::index::sample(&mut r, n - 1, m)
                                .iter()
                                .map(|j| if j >= i { j + 1 } else { j })
                                .collect()
                        })
                        .collect();
                    let rows: Vec<(usize, f64)> = draws
                        .par_iter()
                        .enumerate()
                        .map(|(i, opp)| {
                            let mut w = 0;
                            let mut s = 0.0;
                            for &j in opp {
                                let v = judge.score(&population[i], &population[j])?;
                                s += v;
                                if v > 0.0 {
                                    w += 1;
                                }
                            }
                            Ok((w, s))
                        })
                        .collect::<Result<_>>()?;
                    comparisons.fetch_add((n * m) as u64, Ordering::Relaxed);
                    for (i, (w, s)) in rows.into_iter().enumerate() {
                        wins[i] = w;
                        sums[i] = s;
                    }
                }
                _ => {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .into_par_iter()
                        .map(|i| {
                            (i + 1..n)
                                .map(|j| judge.score(&population[i], &population[j]))
                                .collect::<Result<_>>()
                        })
                        .collect::<Result<_>>()?;
                    comparisons.fetch_add((n * (n - 1) / 2) as u64, Ordering::Relaxed);
                    for (i, row) in rows.iter().enumerate() {
                        for (off, &s) in row.iter().enumerate() {
                            let j = i + 1 + off;
                            sums[i] += s;
                            sums[j] -= s;
                            if s > 0.0 {
                                wins[i] += 1;
                            } else if s < 0.0 {
                                wins[j] += 1;
                            }
                        }
                    }
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| wins[b].cmp(&wins[a]).then(sums[b].total_cmp(&sums[a])).then(a.cmp(&b)));
            Ok(Scored {
                fitness: wins.into_iter().map(|w| w as f64).collect(),
                order,
            })
        }
    }
}

fn tournament(fitness: &[f64], r: &mut impl Rng) -> usize {
    let a = r.random_range(0..fitness.len());
    let b = r.random_range(0..fitness.len());
    match fitness[a].total_cmp(&fitness[b]) {
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Equal => a.min(b),
    }
}

/// Evolves a population and returns the Copeland (or oracle) winner of the
/// final generation.
pub fn evolve(space: &ConfigSpace, fitness: &Fitness<'_>, cfg: &GaConfig) -> Result<GaResult> {
    cfg.validate()?;
    let comparisons = AtomicU64::new(0);
    let genes = space.parameters().len();
    let mut init = rng::stream(cfg.seed, "ga_init", 0);
    let mut population: Vec<Configuration> =
        (0..cfg.population).map(|i| space.random_config(i as u64, &mut init)).collect();
    let mut history = Vec::with_capacity(cfg.generations + 1);

    for generation in 0..=cfg.generations {
        let scored = evaluate(
            &population,
            fitness,
            cfg.sampled_opponents,
            rng::derive_seed(cfg.seed, "ga_eval", generation as u64),
            &comparisons,
        )?;
        let best = scored.order[0];
        history.push(GenerationRecord {
            generation,
            best: population[best].clone(),
            best_fitness: scored.fitness[best],
            mean_fitness: scored.fitness.iter().sum::<f64>() / population.len() as f64,
        });
        if generation == cfg.generations {
            break;
        }

        let mut r = rng::stream(cfg.seed, "ga", generation as u64);
        let mut next: Vec<Configuration> = scored.order[..cfg.elitism]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < cfg.population {
            let a = &population[tournament(&scored.fitness, &mut r)];
            let b = &population[tournament(&scored.fitness, &mut r)];
            let mut values = a.values.clone();
            match cfg.crossover {
                CrossoverKind::Uniform => {
                    for (g, v) in values.iter_mut().enumerate() {
                        if r.random_bool(cfg.crossover_rate) {
                            *v = b.values[g].clone();
                        }
                    }
                }
                CrossoverKind::OnePoint => {
                    if genes > 1 && r.random_bool(cfg.crossover_rate) {
                        let cut = r.random_range(1..genes);
                        values[cut..].clone_from_slice(&b.values[cut..]);
                    }
                }
            }
            for (g, v) in values.iter_mut().enumerate() {
                if r.random_bool(cfg.mutation_rate) {
                    *v = space.resample_value(g, &mut r);
                }
            }
            next.push(Configuration::new(0, values));
        }
        for (i, c) in next.iter_mut().enumerate() {
            c.id = i as u64;
        }
        population = next;
    }

    let best = match fitness {
        Fitness::Oracle(_) => history.last().expect("at least one generation").best.clone(),
        Fitness::Comparator(judge) => {
            // Full round robin on the final population even in sampled mode.
            let ids: Vec<u64> = (0..population.len() as u64).collect();
            let rank = copeland(&ids, |i, j| {
                comparisons.fetch_add(1, Ordering::Relaxed);
                judge.score(&population[i], &population[j])
            })?;
            population[rank.ordering[0] as usize].clone()
        }
    };
    Ok(GaResult {
        best,
        history,
        final_population: population,
        comparisons: comparisons.into_inner(),
    })
}

/// Outcome of tuning with a trained comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best: Configuration,
    /// Parameter name to value of the winner.
    pub values: Vec<(String, String)>,
    /// Ground-truth performance on the objective's own scale.
    pub performance: f64,
    /// Ground truth on the internal higher-is-better scale.
    pub internal_performance: f64,
    pub history: Vec<GenerationRecord>,
    pub comparisons: u64,
    /// One evaluation measurement of the winner.
    pub simulated_cost_s: f64,
}

/// Runs the GA with `model` as the only fitness signal, then consults the
/// oracle once to report how good the winner really is.
pub fn tune(
    model: &(dyn DecisionFunction + Sync),
    space: &ConfigSpace,
    oracle: &dyn PerformanceOracle,
    cfg: &GaConfig,
    measurement_cost_s: f64,
) -> Result<TuneReport> {
    let judge = ModelJudge { model, space };
    let result = evolve(space, &Fitness::Comparator(&judge), cfg)?;
    let internal = oracle.truth(&result.best)?;
    Ok(TuneReport {
        values: space
            .parameters()
            .iter()
            .zip(&result.best.values)
            .map(|(p, v)| (p.name.clone(), v.to_string()))
            .collect(),
        best: result.best,
        performance: space.to_raw(internal),
        internal_performance: internal,
        history: result.history,
        comparisons: result.comparisons,
        simulated_cost_s: measurement_cost_s,
    })
}
