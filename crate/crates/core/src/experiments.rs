//! Multi-run harnesses: the variant ablation and the expert-accuracy sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comparator::LearnerSpec;
use crate::driver::{run, DriverConfig, Problem, SessionResult, Variant};
use crate::ga::{tune, GaConfig};
use crate::error::{Error, Result};
use crate::oracle::{ExpertSpec, SimulatedExpert, SurfaceKind, SyntheticSurfaceSpec};
use crate::rng;
use crate::space::{ConfigSpace, Direction, Objective, ParameterDef};
use crate::svm::DEFAULT_TOL;

/// A named synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCase {
    pub name: String,
    pub space: ConfigSpace,
    pub surface: SyntheticSurfaceSpec,
}

fn numeric_space(dims: usize, direction: Direction) -> ConfigSpace {
    let params = (0..dims)
        .map(|i| ParameterDef::continuous(format!("x{i}"), 0.0, 1.0).expect("valid bounds"))
        .collect();
    ConfigSpace::new(
        params,
        Objective {
            name: "performance".into(),
            direction,
        },
    )
    .expect("valid space")
}

fn mixed_space() -> ConfigSpace {
    ConfigSpace::new(
        vec![
            ParameterDef::continuous("buffer_mb", 16.0, 512.0).expect("valid"),
            ParameterDef::integer("threads", 1, 32).expect("valid"),
            ParameterDef::continuous("ratio", 0.0, 1.0).expect("valid"),
            ParameterDef::categorical("codec", ["none", "lz4", "zstd"]).expect("valid"),
        ],
        Objective {
            name: "throughput".into(),
            direction: Direction::HigherIsBetter,
        },
    )
    .expect("valid space")
}

/// Five noiseless surfaces covering every surface kind and a mixed space.
pub fn standard_surfaces(seed: u64) -> Vec<SurfaceCase> {
    let mk = |name: &str, space: ConfigSpace, kind: SurfaceKind, index: u64| {
        let surface = SyntheticSurfaceSpec::random(kind, space.encoded_dim(), rng::derive_seed(seed, name, index));
        SurfaceCase {
            name: name.into(),
            space,
            surface,
        }
    };
    vec![
        mk("bowl-3d", numeric_space(3, Direction::HigherIsBetter), SurfaceKind::QuadraticBowl, 0),
        mk("bowl-5d", numeric_space(5, Direction::HigherIsBetter), SurfaceKind::QuadraticBowl, 1),
        mk("interaction-4d", numeric_space(4, Direction::HigherIsBetter), SurfaceKind::Interaction, 2),
        mk("plateau-3d", numeric_space(3, Direction::HigherIsBetter), SurfaceKind::PlateauStep, 3),
        mk("mixed-bowl", mixed_space(), SurfaceKind::QuadraticBowl, 4),
    ]
}

/// Everything shared by the runs of a harness except variant, seed and
/// expert accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBase {
    #[serde(default)]
    pub driver: DriverConfig,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default = "default_abstain")]
    pub abstain_prob: f64,
}

fn default_test_n() -> usize {
    30
}

fn default_abstain() -> f64 {
    0.03
}

impl Default for ExperimentBase {
    /// Harness defaults: 10 clusters per query slot and a hard-margin-leaning
    /// C, which gave every AL variant its best CA in a sweep over C and n.
    fn default() -> Self {
        Self {
            driver: DriverConfig {
                n: 10,
                learner: LearnerSpec::Svm {
                    kernel: None,
                    c: 100.0,
                    grid_search: None,
                    tol: DEFAULT_TOL,
                },
                ..DriverConfig::default()
            },
            test_n: default_test_n(),
            abstain_prob: default_abstain(),
        }
    }
}

/// Result of one (surface, variant, seed, accuracy) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub surface: String,
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub ca: f64,
    pub ra: f64,
    pub labels_charged: usize,
    pub pseudolabels: usize,
    pub pseudolabel_errors: usize,
    pub ssl_steps: usize,
}

/// Runs one variant on one surface with a simulated expert and returns the
/// problem it ran on alongside the full result.
pub fn run_session(
    case: &SurfaceCase,
    variant: Variant,
    seed: u64,
    accuracy: f64,
    base: &ExperimentBase,
) -> Result<(Problem, SessionResult)> {
    let problem = Problem::synthetic(
        case.space.clone(),
        case.surface.clone(),
        base.driver.candidates,
        base.test_n,
        seed,
    )?;
    let cfg = DriverConfig {
        variant,
        seed,
        ..base.driver.clone()
    };
    let spec = ExpertSpec {
        abstain_prob: base.abstain_prob,
        ..ExpertSpec::new(accuracy, rng::derive_seed(seed, "expert", 0))
    };
    spec.validate()?;
    let result = run(&problem, cfg, &mut SimulatedExpert::new(spec))?;
    Ok((problem, result))
}

/// As [`run_session`], reduced to the headline numbers.
pub fn run_case(
    case: &SurfaceCase,
    variant: Variant,
    seed: u64,
    accuracy: f64,
    base: &ExperimentBase,
) -> Result<RunOutcome> {
    let (_, result) = run_session(case, variant, seed, accuracy, base)?;
    let eval = result
        .final_eval
        .ok_or_else(|| Error::State("run finished without a test suite".into()))?;
    Ok(RunOutcome {
        surface: case.name.clone(),
        variant,
        seed,
        accuracy,
        ca: eval.ca,
        ra: eval.ra,
        labels_charged: result.ledger.labels_charged,
        pseudolabels: result.ledger.pseudolabels,
        pseudolabel_errors: result.ledger.pseudolabel_errors,
        ssl_steps: result.ssl_steps,
    })
}

/// Mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Standard error of the mean, from the sample variance.
pub fn std_err(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let (mean, _) = mean_var(xs);
    let n = xs.len() as f64;
    let s2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (s2 / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub surface: String,
    pub variant: Variant,
    /// Per-seed CA divided by the passive CA of the same seed, in seed order.
    pub normalized: Vec<f64>,
    pub mean: f64,
    /// Population variance across seeds.
    pub variance: f64,
    pub mean_ca: f64,
    pub mean_ra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub surfaces: Vec<String>,
    pub cells: Vec<AblationCell>,
    /// Mean over surfaces of the per-surface normalized means.
    pub avr: BTreeMap<Variant, f64>,
    /// Population variance over surfaces of the per-surface normalized means.
    pub var: BTreeMap<Variant, f64>,
    pub runs: Vec<RunOutcome>,
}

impl AblationReport {
    pub fn cell(&self, surface: &str, variant: Variant) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.surface == surface && c.variant == variant)
    }

    /// Table with one row per surface plus `AVR` and `VAR`, one column per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("surface");
        for v in &self.variants {
            out.push(',');
            out.push_str(v.name());
        }
        out.push('\n');
        for s in &self.surfaces {
            out.push_str(s);
            for v in &self.variants {
                let m = self.cell(s, *v).map_or(f64::NAN, |c| c.mean);
                out.push_str(&format!(",{m:.4}"));
            }
            out.push('\n');
        }
        for (name, row) in [("AVR", &self.avr), ("VAR", &self.var)] {
            out.push_str(name);
            for v in &self.variants {
                out.push_str(&format!(",{:.4}", row[v]));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every variant on every surface and seed. The passive baseline is
/// always run so that CA can be normalized against it.
pub fn ablation_suite(
    cases: &[SurfaceCase],
    seeds: &[u64],
    variants: &[Variant],
    accuracy: f64,
    base: &ExperimentBase,
) -> Result<AblationReport> {
    if seeds.len() < 2 {
        return Err(Error::validation("seeds", "an ablation needs at least 2 seeds"));
    }
    let mut variants: Vec<Variant> = variants.to_vec();
    if !variants.contains(&Variant::PassiveSvm) {
        variants.insert(0, Variant::PassiveSvm);
    }
    let jobs: Vec<(usize, Variant, u64)> = (0..cases.len())
        .flat_map(|c| variants.iter().flat_map(move |v| seeds.iter().map(move |s| (c, *v, *s))))
        .collect();
    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(c, v, s)| run_case(&cases[c], v, s, accuracy, base))
        .collect::<Result<_>>()?;

    let mut by_key: BTreeMap<(String, Variant, u64), &RunOutcome> = BTreeMap::new();
    for r in &runs {
        by_key.insert((r.surface.clone(), r.variant, r.seed), r);
    }
    let mut cells = Vec::new();
    for case in cases {
        for &v in &variants {
            let mut normalized = Vec::with_capacity(seeds.len());
            let (mut ca, mut ra) = (Vec::new(), Vec::new());
            for &s in seeds {
                let r = by_key[&(case.name.clone(), v, s)];
                let p = by_key[&(case.name.clone(), Variant::PassiveSvm, s)];
                normalized.push(if v == Variant::PassiveSvm { 1.0 } else { r.ca / p.ca });
                ca.push(r.ca);
                ra.push(r.ra);
            }
            let (mean, variance) = mean_var(&normalized);
            cells.push(AblationCell {
                surface: case.name.clone(),
                variant: v,
                normalized,
                mean,
                variance,
                mean_ca: mean_var(&ca).0,
                mean_ra: mean_var(&ra).0,
            });
        }
    }
    let mut avr = BTreeMap::new();
    let mut var = BTreeMap::new();
    for &v in &variants {
        let means: Vec<f64> = cells.iter().filter(|c| c.variant == v).map(|c| c.mean).collect();
        let (m, s2) = mean_var(&means);
        avr.insert(v, m);
        var.insert(v, s2);
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        variants,
        surfaces: cases.iter().map(|c| c.name.clone()).collect(),
        cells,
        avr,
        var,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub surface: String,
    pub accuracy: f64,
    pub mean_ca: f64,
    pub std_err: f64,
    pub mean_ra: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub variant: Variant,
    pub rows: Vec<SensitivityRow>,
    pub runs: Vec<RunOutcome>,
}

impl SensitivityReport {
    pub fn row(&self, surface: &str, accuracy: f64) -> Option<&SensitivityRow> {
        self.rows.iter().find(|r| r.surface == surface && r.accuracy == accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("surface,accuracy,mean_ca,std_err,mean_ra,seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{}\n",
                r.surface, r.accuracy, r.mean_ca, r.std_err, r.mean_ra, r.seeds
            ));
        }
        out
    }
}

/// CA of one variant across expert accuracies, one row per (surface, accuracy).
pub fn sensitivity_sweep(
    cases: &[SurfaceCase],
    seeds: &[u64],
    accuracies: &[f64],
    variant: Variant,
    base: &ExperimentBase,
) -> Result<SensitivityReport> {
    if seeds.is_empty() || accuracies.is_empty() {
        return Err(Error::validation("accuracies", "need at least one seed and one accuracy"));
    }
    for &a in accuracies {
        if !(0.5..=1.0).contains(&a) {
            return Err(Error::validation("accuracies", format!("{a} is outside [0.5, 1]")));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = (0..cases.len())
        .flat_map(|c| (0..accuracies.len()).flat_map(move |a| seeds.iter().map(move |s| (c, a, *s))))
        .collect();
    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(c, a, s)| run_case(&cases[c], variant, s, accuracies[a], base))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for case in cases {
        for &a in accuracies {
            let sel: Vec<&RunOutcome> = runs.iter().filter(|r| r.surface == case.name && r.accuracy == a).collect();
            let ca: Vec<f64> = sel.iter().map(|r| r.ca).collect();
            let ra: Vec<f64> = sel.iter().map(|r| r.ra).collect();
            rows.push(SensitivityRow {
                surface: case.name.clone(),
                accuracy: a,
                mean_ca: mean_var(&ca).0,
                std_err: std_err(&ca),
                mean_ra: mean_var(&ra).0,
                seeds: sel.len(),
            });
        }
    }
    Ok(SensitivityReport { variant, rows, runs })
}

/// Ground-truth performance reached by the GA when driven by a comparator
/// trained with `variant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub surface: String,
    pub variant: Variant,
    pub seed: u64,
    /// Internal (higher-is-better) scale.
    pub performance: f64,
    pub comparisons: u64,
}

/// Trains one comparator per (surface, variant, seed) and tunes with it.
/// The GA seed is shared across variants so only the comparator differs.
pub fn tuning_comparison(
    cases: &[SurfaceCase],
    seeds: &[u64],
    variants: &[Variant],
    accuracy: f64,
    base: &ExperimentBase,
    ga: &GaConfig,
) -> Result<Vec<TuneOutcome>> {
    ga.validate()?;
    let jobs: Vec<(usize, Variant, u64)> = (0..cases.len())
        .flat_map(|c| variants.iter().flat_map(move |v| seeds.iter().map(move |s| (c, *v, *s))))
        .collect();
    jobs.par_iter()
        .map(|&(c, v, s)| {
            let (problem, result) = run_session(&cases[c], v, s, accuracy, base)?;
            let cfg = GaConfig {
                seed: rng::derive_seed(s, "ga", 0),
                ..ga.clone()
            };
            let report = tune(&result.model, &problem.space, problem.oracle.as_ref(), &cfg, 0.0)?;
            Ok(TuneOutcome {
                surface: cases[c].name.clone(),
                variant: v,
                seed: s,
                performance: report.internal_performance,
                comparisons: report.comparisons,
            })
        })
        .collect()
}
