//! Classification accuracy, rank extraction and rank accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::comparator::DecisionFunction;
use crate::error::{Error, Result};
use crate::oracle::PerformanceOracle;
use crate::pairs::{label_of, LabelSource, PairSample};
use crate::space::{sample_uniform_from, ConfigSpace, Configuration};

/// Ids of held-out configurations start here so they never collide with
/// candidate ids.
pub const TEST_ID_BASE: u64 = 1 << 32;

/// Percentage of matching predictions.
pub fn classification_accuracy(predictions: &[bool], truths: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `value / baseline`; the normalization used for ablation tables.
pub fn normalize(value: f64, baseline: f64) -> f64 {
    value / baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    /// Configuration ids, best first.
    pub ordering: Vec<u64>,
    pub win_counts: BTreeMap<u64, usize>,
    /// Sum of the antisymmetric pair scores of each id against all others.
    pub score_sums: BTreeMap<u64, f64>,
}

impl RankResult {
    /// 1-based position of every id in the ordering.
    pub fn ranks(&self) -> HashMap<u64, usize> {
        self.ordering.iter().enumerate().map(|(i, id)| (*id, i + 1)).collect()
    }
}

/// Copeland ranking from an antisymmetric pair score: `score(a, b) > 0` means
/// `a` beats `b`. Called once per unordered pair with `a` before `b` in input
/// order. Ordering: wins desc, score sum desc, id asc.
pub fn copeland<F>(ids: &[u64], mut score: F) -> Result<RankResult>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let n = ids.len();
    let mut wins = vec![0usize; n];
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = score(i, j)?;
            sums[i] += s;
            sums[j] -= s;
            if s > 0.0 {
                wins[i] += 1;
            } else if s < 0.0 {
                wins[j] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        wins[b]
            .cmp(&wins[a])
            .then(sums[b].total_cmp(&sums[a]))
            .then(ids[a].cmp(&ids[b]))
    });
    Ok(RankResult {
        ordering: order.iter().map(|&i| ids[i]).collect(),
        win_counts: ids.iter().zip(&wins).map(|(id, w)| (*id, *w)).collect(),
        score_sums: ids.iter().zip(&sums).map(|(id, s)| (*id, *s)).collect(),
    })
}

/// Orientation-averaged comparator score `(d(a|b) - d(b|a)) / 2` of two
/// encoded configurations.
pub fn pair_score(model: &dyn DecisionFunction, a: &[f64], b: &[f64]) -> Result<f64> {
    let mut ab = Vec::with_capacity(a.len() + b.len());
    ab.extend_from_slice(a);
    ab.extend_from_slice(b);
    let forward = model.decision(&ab)?;
    ab.clear();
    ab.extend_from_slice(b);
    ab.extend_from_slice(a);
    let backward = model.decision(&ab)?;
    Ok((forward - backward) / 2.0)
}

/// Ranks configurations by Copeland wins under the learned comparator.
pub fn rank_by_comparator(
    model: &dyn DecisionFunction,
    configs: &[Configuration],
    space: &ConfigSpace,
) -> Result<RankResult> {
    if configs.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least 2 configurations".into()));
    }
    let encoded: Vec<Vec<f64>> = configs.iter().map(|c| space.encode(c)).collect::<Result<_>>()?;
    let ids: Vec<u64> = configs.iter().map(|c| c.id).collect();
    copeland(&ids, |i, j| pair_score(model, &encoded[i], &encoded[j]))
}

/// Ranks by descending performance; tied values share the smallest rank.
pub fn true_ranks(performances: &HashMap<u64, f64>) -> HashMap<u64, usize> {
    let mut items: Vec<(u64, f64)> = performances.iter().map(|(k, v)| (*k, *v)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ranks = HashMap::with_capacity(items.len());
    let mut current = 0;
    for (i, (id, v)) in items.iter().enumerate() {
        if i == 0 || *v != items[i - 1].1 {
            current = i + 1;
        }
        ranks.insert(*id, current);
    }
    ranks
}

/// Mean absolute difference between true and predicted ranks.
pub fn rank_accuracy(predicted: &RankResult, truth: &HashMap<u64, f64>) -> Result<f64> {
    let pred = predicted.ranks();
    if pred.len() != truth.len() || truth.keys().any(|k| !pred.contains_key(k)) {
        return Err(Error::IdMismatch(format!(
            "{} ranked ids vs {} true performances",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("rank accuracy of an empty set".into()));
    }
    let truth_ranks = true_ranks(truth);
    let total: usize = truth_ranks.iter().map(|(id, r)| r.abs_diff(pred[id])).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Held-out configurations with their true performance and truth-labeled pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub configs: Vec<Configuration>,
    pub performances: HashMap<u64, f64>,
    pub pairs: Vec<PairSample>,
    pub seed: u64,
}

impl TestSuite {
    /// Builds fixtures from given held-out configurations. Fails if any of
    /// them shares an id or its values with a training configuration.
    pub fn from_configs(
        oracle: &dyn PerformanceOracle,
        space: &ConfigSpace,
        configs: Vec<Configuration>,
        training: &[Configuration],
        seed: u64,
    ) -> Result<Self> {
        if configs.len() < 2 {
            return Err(Error::InvalidArgument("a test suite needs at least 2 configurations".into()));
        }
        let train_ids: HashSet<u64> = training.iter().map(|c| c.id).collect();
        for c in &configs {
            if train_ids.contains(&c.id) || training.iter().any(|t| t.same_values(c)) {
                return Err(Error::TestOverlap(c.id));
            }
        }
        let encoded: Vec<Vec<f64>> = configs.iter().map(|c| space.encode(c)).collect::<Result<_>>()?;
        let perf: Vec<f64> = configs.iter().map(|c| oracle.truth(c)).collect::<Result<_>>()?;
        let mut pairs = Vec::with_capacity(configs.len() * (configs.len() - 1) / 2);
        for i in 0..configs.len() {
            for j in i + 1..configs.len() {
                let mut features = encoded[i].clone();
                features.extend_from_slice(&encoded[j]);
                pairs.push(PairSample {
                    left_id: configs[i].id,
                    right_id: configs[j].id,
                    features,
                    label: Some(label_of(perf[i], perf[j])?),
                    source: LabelSource::Measured,
                });
            }
        }
        let performances = configs.iter().zip(&perf).map(|(c, p)| (c.id, *p)).collect();
        Ok(Self {
            configs,
            performances,
            pairs,
            seed,
        })
    }

    /// Evaluates CA over all fixture pairs and RA over the held-out set.
    pub fn evaluate(&self, model: &dyn DecisionFunction, space: &ConfigSpace) -> Result<Evaluation> {
        let predictions: Vec<bool> = self
            .pairs
            .iter()
            .map(|p| model.predict(&p.features))
            .collect::<Result<_>>()?;
        let truths: Vec<bool> = self.pairs.iter().map(|p| p.label.unwrap_or(false)).collect();
        let ca = classification_accuracy(&predictions, &truths)?;
        let ranking = rank_by_comparator(model, &self.configs, space)?;
        let ra = rank_accuracy(&ranking, &self.performances)?;
        Ok(Evaluation { ca, ra })
    }

    /// CA only; cheaper than [`evaluate`](Self::evaluate).
    pub fn accuracy(&self, model: &dyn DecisionFunction) -> Result<f64> {
        let predictions: Vec<bool> = self
            .pairs
            .iter()
            .map(|p| model.predict(&p.features))
            .collect::<Result<_>>()?;
        let truths: Vec<bool> = self.pairs.iter().map(|p| p.label.unwrap_or(false)).collect();
        classification_accuracy(&predictions, &truths)
    }
}

/// Samples `n` held-out configurations and builds their fixtures.
pub fn build_test_suite(
    oracle: &dyn PerformanceOracle,
    space: &ConfigSpace,
    n: usize,
    seed: u64,
    training: &[Configuration],
) -> Result<TestSuite> {
    if n < 2 {
        return Err(Error::InvalidArgument("test suite size must be at least 2".into()));
    }
    let configs = sample_uniform_from(space, n, seed, TEST_ID_BASE)?;
    TestSuite::from_configs(oracle, space, configs, training, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ca: f64,
    pub ra: f64,
}

/// Metrics report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ca: f64,
    pub ra: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_ra: Option<f64>,
    pub fixture_seed: u64,
    pub fixture_pairs: usize,
}

impl MetricsReport {
    pub fn new(eval: Evaluation, suite: &TestSuite) -> Self {
        Self {
            ca: eval.ca,
            ra: eval.ra,
            baseline: None,
            normalized_ca: None,
            normalized_ra: None,
            fixture_seed: suite.seed,
            fixture_pairs: suite.pairs.len(),
        }
    }

    pub fn against(mut self, name: impl Into<String>, baseline: Evaluation) -> Self {
        self.baseline = Some(name.into());
        self.normalized_ca = Some(normalize(self.ca, baseline.ca));
        self.normalized_ra = Some(normalize(self.ra, baseline.ra));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{SurfaceKind, SyntheticOracle, SyntheticSurfaceSpec};
    use crate::space::{sample_uniform, Direction, Objective, ParameterDef};
    use rand::seq::SliceRandom;

    #[test]
    fn ca_examples() {
        assert_eq!(classification_accuracy(&[true; 10], &[true; 10]).unwrap(), 100.0);
        let mut p = [true; 10];
        p[..3].fill(false);
        assert_eq!(classification_accuracy(&p, &[true; 10]).unwrap(), 70.0);
        assert!(classification_accuracy(&[], &[]).is_err());
        let a = 80.0;
        assert!((normalize(1.18 * a, a) - 1.18).abs() < 1e-12);
    }

    fn table(pairs: &[((usize, usize), f64)]) -> impl FnMut(usize, usize) -> Result<f64> + '_ {
        move |i, j| {
            Ok(pairs
                .iter()
                .find(|((a, b), _)| (*a, *b) == (i, j))
                .map(|(_, s)| *s)
                .unwrap())
        }
    }

    #[test]
    fn copeland_transitive() {
        let scores = [((0, 1), 1.0), ((0, 2), 1.0), ((1, 2), 1.0)];
        let r = copeland(&[10, 11, 12], table(&scores)).unwrap();
        assert_eq!(r.ordering, vec![10, 11, 12]);
        assert_eq!(r.win_counts.values().copied().collect::<Vec<_>>(), vec![2, 1, 0]);
    }

    #[test]
    fn copeland_cycle_uses_score_sums() {
        // a>b (0.5), b>c (2.0), c>a (1.0): sums a=-0.5, b=1.5, c=-1.0.
        let scores = [((0, 1), 0.5), ((1, 2), 2.0), ((0, 2), -1.0)];
        let r = copeland(&[1, 2, 3], table(&scores)).unwrap();
        assert!(r.win_counts.values().all(|&w| w == 1));
        assert_eq!(r.ordering, vec![2, 1, 3]);
    }

    #[test]
    fn rank_accuracy_examples() {
        let truth: HashMap<u64, f64> = [(1, 4.0), (2, 3.0), (3, 2.0), (4, 1.0)].into();
        let same = RankResult {
            ordering: vec![1, 2, 3, 4],
            win_counts: BTreeMap::new(),
            score_sums: BTreeMap::new(),
        };
        assert_eq!(rank_accuracy(&same, &truth).unwrap(), 0.0);
        let reversed = RankResult {
            ordering: vec![4, 3, 2, 1],
            ..same.clone()
        };
        assert_eq!(rank_accuracy(&reversed, &truth).unwrap(), 2.0);
        let other: HashMap<u64, f64> = [(1, 4.0), (2, 3.0), (3, 2.0), (9, 1.0)].into();
        assert!(matches!(rank_accuracy(&same, &other), Err(Error::IdMismatch(_))));
    }

    #[test]
    fn ties_share_smaller_rank() {
        let t: HashMap<u64, f64> = [(1, 5.0), (2, 7.0), (3, 5.0), (4, 1.0)].into();
        let r = true_ranks(&t);
        assert_eq!((r[&2], r[&1], r[&3], r[&4]), (1, 2, 2, 4));
    }

    #[test]
    fn random_permutation_ra_matches_closed_form() {
        let n = 50u64;
        let truth: HashMap<u64, f64> = (0..n).map(|i| (i, -(i as f64))).collect();
        let mut r = crate::rng::stream(1, "perm", 0);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut ordering: Vec<u64> = (0..n).collect();
            ordering.shuffle(&mut r);
            let rr = RankResult {
                ordering,
                win_counts: BTreeMap::new(),
                score_sums: BTreeMap::new(),
            };
            total += rank_accuracy(&rr, &truth).unwrap();
        }
        let expected = (n * n - 1) as f64 / (3 * n) as f64;
        assert!((total / trials as f64 - expected).abs() <= 0.3);
    }

    struct Perfect {
        spec: SyntheticSurfaceSpec,
    }

    impl DecisionFunction for Perfect {
        fn decision(&self, x: &[f64]) -> Result<f64> {
            let h = x.len() / 2;
            Ok(self.spec.value_at(&x[..h]) - self.spec.value_at(&x[h..]))
        }
    }

    fn bowl_setup() -> (ConfigSpace, SyntheticOracle, Perfect) {
        let space = ConfigSpace::new(
            vec![
                ParameterDef::continuous("a", 0.0, 1.0).unwrap(),
                ParameterDef::continuous("b", 0.0, 1.0).unwrap(),
            ],
            Objective {
                name: "y".into(),
                direction: Direction::HigherIsBetter,
            },
        )
        .unwrap();
        let spec = SyntheticSurfaceSpec::random(SurfaceKind::QuadraticBowl, 2, 3);
        let oracle = SyntheticOracle::new(space.clone(), spec.clone(), 1.0).unwrap();
        (space, oracle, Perfect { spec })
    }

    #[test]
    fn perfect_comparator_reproduces_true_order() {
        let (space, oracle, perfect) = bowl_setup();
        let configs = sample_uniform(&space, 20, 8).unwrap();
        let ranking = rank_by_comparator(&perfect, &configs, &space).unwrap();
        let mut brute: Vec<&Configuration> = configs.iter().collect();
        brute.sort_by(|a, b| oracle.truth(b).unwrap().total_cmp(&oracle.truth(a).unwrap()));
        assert_eq!(ranking.ordering, brute.iter().map(|c| c.id).collect::<Vec<_>>());

        let suite = TestSuite::from_configs(&oracle, &space, configs, &[], 8).unwrap();
        let e = suite.evaluate(&perfect, &space).unwrap();
        assert_eq!((e.ca, e.ra), (100.0, 0.0));
    }

    #[test]
    fn copeland_ignores_relabeling_of_ids() {
        let (space, _, perfect) = bowl_setup();
        let configs = sample_uniform(&space, 12, 5).unwrap();
        let a = rank_by_comparator(&perfect, &configs, &space).unwrap();
        let mut shuffled: Vec<Configuration> = configs.iter().rev().cloned().collect();
        for (i, c) in shuffled.iter_mut().enumerate() {
            c.id = 100 + i as u64;
        }
        let b = rank_by_comparator(&perfect, &shuffled, &space).unwrap();
        let to_values = |r: &RankResult, cs: &[Configuration]| -> Vec<Vec<crate::space::ParamValue>> {
            r.ordering
                .iter()
                .map(|id| cs.iter().find(|c| c.id == *id).unwrap().values.clone())
                .collect()
        };
        assert_eq!(to_values(&a, &configs), to_values(&b, &shuffled));
    }

    #[test]
    fn test_suite_shape_and_overlap() {
        let (space, oracle, _) = bowl_setup();
        let s = build_test_suite(&oracle, &space, 50, 4, &[]).unwrap();
        assert_eq!(s.pairs.len(), 1225);
        assert_eq!(s, build_test_suite(&oracle, &space, 50, 4, &[]).unwrap());
        assert_eq!(build_test_suite(&oracle, &space, 2, 4, &[]).unwrap().pairs.len(), 1);
        let training = vec![s.configs[3].clone()];
        assert!(matches!(
            build_test_suite(&oracle, &space, 50, 4, &training),
            Err(Error::TestOverlap(_))
        ));
    }
}
