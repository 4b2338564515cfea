//! Ground-truth performance and the simulated expert.
//!
//! Performance values handed out here are always on the internal
//! higher-is-better scale; lower-is-better objectives are negated once, when a
//! recorded value is ingested.

use std::collections::HashMap;
use std::io::Read;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::label_of;
use crate::rng;
use crate::space::{ConfigSpace, Configuration, ParamValue};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub config_id: u64,
    pub performance: f64,
    pub wall_cost: f64,
}

/// Source of performance values for configurations.
pub trait PerformanceOracle: Send + Sync {
    /// One (possibly noisy) measurement. `replicate` distinguishes repeated
    /// runs of the same configuration.
    fn measure(&self, config: &Configuration, replicate: u64) -> Result<Measurement>;

    /// Noise-free performance, used for ground-truth labels and evaluation.
    fn truth(&self, config: &Configuration) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    QuadraticBowl,
    Interaction,
    PlateauStep,
}

fn default_peak() -> f64 {
    10.0
}

fn default_levels() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSurfaceSpec {
    pub kind: SurfaceKind,
    pub weights: Vec<f64>,
    pub optimum: Vec<f64>,
    #[serde(default)]
    pub interaction_pairs: Vec<(usize, usize, f64)>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Surface value at the optimum of a bowl.
    #[serde(default = "default_peak")]
    pub peak: f64,
    /// Quantization levels per unit distance for `plateau_step`.
    #[serde(default = "default_levels")]
    pub levels: u32,
}

impl SyntheticSurfaceSpec {
    /// A random surface of the given kind over `dim` encoded coordinates.
    pub fn random(kind: SurfaceKind, dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "surface", 0);
        let weights = (0..dim).map(|_| rng.random_range(2.0..10.0)).collect();
        let optimum = (0..dim).map(|_| rng.random_range(0.15..0.85)).collect();
        let interaction_pairs = if kind == SurfaceKind::Interaction && dim >= 2 {
            (0..dim)
                .map(|_| {
                    let a = rng.random_range(0..dim);
                    let b = (a + rng.random_range(1..dim)) % dim;
                    (a, b, rng.random_range(-6.0..6.0))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind,
            weights,
            optimum,
            interaction_pairs,
            noise_sigma: 0.0,
            seed,
            peak: default_peak(),
            levels: default_levels(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.optimum.len() != dim || self.weights.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "surface weights/optimum must have length {dim} (got {}/{})",
                self.weights.len(),
                self.optimum.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be a finite value >= 0".into()));
        }
        if self.interaction_pairs.iter().any(|(a, b, _)| *a >= dim || *b >= dim) {
            return Err(Error::InvalidArgument("interaction pair index out of range".into()));
        }
        if self.kind == SurfaceKind::PlateauStep && self.levels == 0 {
            return Err(Error::InvalidArgument("plateau_step needs levels >= 1".into()));
        }
        Ok(())
    }

    /// Noise-free value at an encoded point.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let sq = |i: usize| {
            let d = x[i] - self.optimum[i];
            d * d
        };
        match self.kind {
            SurfaceKind::QuadraticBowl => {
                self.peak - (0..x.len()).map(|i| self.weights[i] * sq(i)).sum::<f64>()
            }
            SurfaceKind::Interaction => {
                let bowl: f64 = (0..x.len()).map(|i| self.weights[i] * sq(i)).sum();
                let cross: f64 = self
                    .interaction_pairs
                    .iter()
                    .map(|&(a, b, c)| c * (x[a] - self.optimum[a]) * (x[b] - self.optimum[b]))
                    .sum();
                self.peak - bowl + cross
            }
            SurfaceKind::PlateauStep => {
                let levels = f64::from(self.levels);
                self.peak
                    - (0..x.len())
                        .map(|i| {
                            let d = (x[i] - self.optimum[i]).abs();
                            self.weights[i] * (d * levels).floor() / levels
                        })
                        .sum::<f64>()
            }
        }
    }

    /// The largest value the surface attains, where it is known in closed form.
    pub fn optimum_value(&self) -> Option<f64> {
        match self.kind {
            SurfaceKind::QuadraticBowl | SurfaceKind::PlateauStep => Some(self.peak),
            SurfaceKind::Interaction => None,
        }
    }
}

pub struct SyntheticOracle {
    space: ConfigSpace,
    spec: SyntheticSurfaceSpec,
    cost_s: f64,
}

impl SyntheticOracle {
    pub fn new(space: ConfigSpace, spec: SyntheticSurfaceSpec, cost_s: f64) -> Result<Self> {
        spec.check(space.encoded_dim())?;
        Ok(Self {
            space,
            spec,
            cost_s,
        })
    }

    pub fn spec(&self) -> &SyntheticSurfaceSpec {
        &self.spec
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }
}

impl PerformanceOracle for SyntheticOracle {
    fn measure(&self, config: &Configuration, replicate: u64) -> Result<Measurement> {
        let x = self.space.encode(config)?;
        let mut performance = self.spec.value_at(&x);
        if self.spec.noise_sigma > 0.0 {
            let key = rng::hash_f64s(&x) ^ replicate.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut r = rng::stream(self.spec.seed, "measurement_noise", key);
            let normal = Normal::new(0.0, self.spec.noise_sigma).expect("sigma checked");
            performance += normal.sample(&mut r);
        }
        Ok(Measurement {
            config_id: config.id,
            performance,
            wall_cost: self.cost_s,
        })
    }

    fn truth(&self, config: &Configuration) -> Result<f64> {
        Ok(self.spec.value_at(&self.space.encode(config)?))
    }
}

fn value_key(values: &[ParamValue]) -> String {
    values
        .iter()
        .map(|v| match v {
            ParamValue::Number(x) => format!("n{:016x}", x.to_bits()),
            ParamValue::Category(c) => format!("c{c}"),
        })
        .collect::<Vec<_>>()
        .join("|")
}

/// Recorded configuration/performance pairs loaded from CSV.
pub struct DatasetOracle {
    space: ConfigSpace,
    configs: Vec<Configuration>,
    by_values: HashMap<String, f64>,
    cost_s: f64,
}

impl DatasetOracle {
    /// Reads a CSV with one column per parameter plus a final `performance`
    /// column. Rows receive ids in file order; repeated rows are averaged.
    pub fn from_csv(space: ConfigSpace, reader: impl Read, cost_s: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected: Vec<&str> = space
            .parameters()
            .iter()
            .map(|p| p.name.as_str())
            .chain(std::iter::once("performance"))
            .collect();
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expected {
            return Err(Error::InvalidArgument(format!(
                "dataset header {got:?} does not match {expected:?}"
            )));
        }
        let mut configs = Vec::new();
        let mut sums: HashMap<String, (f64, usize)> = HashMap::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let mut values = Vec::with_capacity(space.parameters().len());
            for (p, cell) in space.parameters().iter().zip(record.iter()) {
                values.push(p.parse_value(cell)?);
            }
            let raw: f64 = record[space.parameters().len()].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("row {}: unparsable performance", row + 1))
            })?;
            if !raw.is_finite() {
                return Err(Error::NonFinite(raw));
            }
            let config = Configuration::new(row as u64, values);
            if let Some(v) = space.validate(&config).into_iter().next() {
                return Err(Error::validation(v.parameter, format!("row {}: {}", row + 1, v.reason)));
            }
            let key = value_key(&config.values);
            let entry = sums.entry(key).or_insert((0.0, 0));
            if entry.1 == 0 {
                configs.push(config);
            }
            entry.0 += space.to_internal(raw);
            entry.1 += 1;
        }
        // Re-number after de-duplication so ids stay dense.
        for (i, c) in configs.iter_mut().enumerate() {
            c.id = i as u64;
        }
        let by_values = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        Ok(Self {
            space,
            configs,
            by_values,
            cost_s,
        })
    }

    pub fn configurations(&self) -> &[Configuration] {
        &self.configs
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    fn lookup(&self, config: &Configuration) -> Result<f64> {
        self.by_values
            .get(&value_key(&config.values))
            .copied()
            .ok_or(Error::Unmeasured(config.id))
    }
}

impl PerformanceOracle for DatasetOracle {
    fn measure(&self, config: &Configuration, _replicate: u64) -> Result<Measurement> {
        Ok(Measurement {
            config_id: config.id,
            performance: self.lookup(config)?,
            wall_cost: self.cost_s,
        })
    }

    fn truth(&self, config: &Configuration) -> Result<f64> {
        self.lookup(config)
    }
}

/// Writes configurations and raw objective values as a dataset CSV.
pub fn write_dataset_csv(
    space: &ConfigSpace,
    rows: &[(Configuration, f64)],
    writer: impl std::io::Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = space.parameters().iter().map(|p| p.name.clone()).collect();
    header.push("performance".into());
    w.write_record(&header)?;
    for (c, internal) in rows {
        let mut rec: Vec<String> = c.values.iter().map(ToString::to_string).collect();
        rec.push(space.to_raw(*internal).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn default_abstain() -> f64 {
    0.03
}

fn default_latency() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub accuracy: f64,
    #[serde(default = "default_abstain")]
    pub abstain_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_latency")]
    pub latency: f64,
}

impl ExpertSpec {
    pub fn new(accuracy: f64, seed: u64) -> Self {
        Self {
            accuracy,
            abstain_prob: default_abstain(),
            seed,
            latency: default_latency(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.accuracy) {
            return Err(Error::validation("expert.accuracy", "must lie in [0.5, 1.0]"));
        }
        if !(0.0..=0.05).contains(&self.abstain_prob) {
            return Err(Error::validation("expert.abstain_prob", "must lie in [0, 0.05]"));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(Error::validation("expert.latency", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// An expert's reply to a pairwise query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertAnswer {
    LeftBetter,
    RightBetter,
    CannotTell,
}

impl ExpertAnswer {
    /// Comparison label, or `None` for an abstention.
    pub fn label(self) -> Option<bool> {
        match self {
            ExpertAnswer::LeftBetter => Some(true),
            ExpertAnswer::RightBetter => Some(false),
            ExpertAnswer::CannotTell => None,
        }
    }

    pub fn from_label(label: bool) -> Self {
        if label {
            ExpertAnswer::LeftBetter
        } else {
            ExpertAnswer::RightBetter
        }
    }
}

/// Answer of a simulated expert to its `query_index`-th query: abstain with
/// probability `abstain_prob`, otherwise report `truth` with probability
/// `accuracy` and its negation otherwise.
pub fn expert_label(spec: &ExpertSpec, query_index: u64, truth: bool) -> ExpertAnswer {
    let mut r = rng::stream(spec.seed, "expert", query_index);
    let abstain: f64 = r.random();
    let correct: f64 = r.random();
    if abstain < spec.abstain_prob {
        return ExpertAnswer::CannotTell;
    }
    ExpertAnswer::from_label(if correct < spec.accuracy { truth } else { !truth })
}

/// A simulated expert owning its query counter.
#[derive(Debug, Clone)]
pub struct SimulatedExpert {
    spec: ExpertSpec,
    asked: u64,
}

impl SimulatedExpert {
    pub fn new(spec: ExpertSpec) -> Self {
        Self { spec, asked: 0 }
    }

    pub fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    pub fn asked(&self) -> u64 {
        self.asked
    }

    pub fn answer(&mut self, truth: bool) -> ExpertAnswer {
        let a = expert_label(&self.spec, self.asked, truth);
        self.asked += 1;
        a
    }
}

/// Measures both endpoints of an abstained pair and labels it from the measurements.
pub fn resolve_abstention(
    oracle: &dyn PerformanceOracle,
    left: &Configuration,
    right: &Configuration,
    replicate: u64,
) -> Result<(bool, Measurement, Measurement)> {
    let ml = oracle.measure(left, replicate)?;
    let mr = oracle.measure(right, replicate)?;
    Ok((label_of(ml.performance, mr.performance)?, ml, mr))
}
