use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use pairtune_core::comparator::{ComparatorModel, DecisionFunction, LearnerSpec};
use pairtune_core::driver::{trace_to_jsonl, DriverConfig, Ledger, Problem, Session, Variant};
use pairtune_core::experiments::{
    ablation_suite, sensitivity_sweep, standard_surfaces, ExperimentBase, RunOutcome,
};
use pairtune_core::ga::{tune, GaConfig};
use pairtune_core::metrics::{Evaluation, MetricsReport};
use pairtune_core::oracle::{
    write_dataset_csv, ExpertSpec, PerformanceOracle, SimulatedExpert, SurfaceKind, SyntheticOracle,
    SyntheticSurfaceSpec,
};
use pairtune_core::rng::derive_seed;
use pairtune_core::runconfig::{DatasetSource, OracleSource, RunConfig, TestSuiteSpec};
use pairtune_core::space::{sample_uniform, ConfigSpace, Direction, Objective, ParameterDef};
use pairtune_core::Error;
use pairtune_service::{fold, read_log, SessionStore, StoreConfig};

use crate::cli::*;
use crate::output::{read_input, CliError, CliResult, Output};

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_input(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| invalid(format!("{}: {} at `{}`", path.display(), e.inner(), e.path())))
}

fn load_space(path: &Path) -> CliResult<ConfigSpace> {
    ConfigSpace::from_json(&read_input(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn apply_driver(d: &mut DriverConfig, a: &DriverArgs) {
    if let Some(v) = a.budget {
        d.budget = v;
    }
    if let Some(v) = a.q {
        d.q = v;
    }
    if let Some(v) = a.n {
        d.n = v;
    }
    if let Some(v) = a.p {
        d.p = v;
    }
    if let Some(v) = a.t {
        d.t = v;
    }
    if let Some(v) = a.initial {
        d.initial_measured = v;
    }
    match a.learner {
        Some(LearnerKind::Centroid) => d.learner = LearnerSpec::Centroid,
        Some(LearnerKind::Svm) if !matches!(d.learner, LearnerSpec::Svm { .. }) => d.learner = LearnerSpec::default(),
        _ => {}
    }
    if let (Some(c), LearnerSpec::Svm { c: slot, .. }) = (a.c, &mut d.learner) {
        *slot = c;
    }
}

/// Resolves a run config from either `--config` or the loose problem flags.
/// Dataset files are inlined so the written config stands alone.
fn resolve_problem(p: &ProblemArgs, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = if let Some(path) = &p.config {
        let mut cfg = RunConfig::from_json(&read_input(path)?)?;
        if let OracleSource::Dataset(DatasetSource { path: Some(rel), .. }) = &cfg.oracle {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            cfg.oracle = OracleSource::Dataset(DatasetSource {
                path: None,
                csv: Some(read_input(&full)?),
            });
        }
        cfg
    } else {
        let space_path = p.space.as_ref().ok_or_else(|| invalid("give --config, or --space with --surface or --dataset"))?;
        let space = load_space(space_path)?;
        let oracle = match (&p.surface, &p.dataset) {
            (Some(s), None) => OracleSource::Surface(parse_json(s)?),
            (None, Some(d)) => OracleSource::Dataset(DatasetSource {
                path: None,
                csv: Some(read_input(d)?),
            }),
            _ => return Err(invalid("give exactly one of --surface or --dataset")),
        };
        RunConfig {
            space,
            oracle,
            expert: None,
            driver: DriverConfig::default(),
            test_suite: TestSuiteSpec::default(),
        }
    };
    if let Some(s) = seed {
        cfg.driver.seed = s;
    }
    if let Some(c) = p.candidates {
        cfg.driver.candidates = c;
    }
    if let Some(n) = p.test_n {
        cfg.test_suite.n = n;
    }
    Ok(cfg)
}

pub fn gen(a: &GenArgs, out: &mut Output) -> CliResult<()> {
    let seed = a.common.seed();
    if a.noise < 0.0 || !a.noise.is_finite() {
        return Err(invalid("--noise must be a finite non-negative number"));
    }
    if a.rows < 4 {
        return Err(invalid("--rows must be at least 4"));
    }
    let space = match &a.space {
        Some(p) => load_space(p)?,
        None => {
            if a.dims == 0 {
                return Err(invalid("--dims must be at least 1"));
            }
            let params = (0..a.dims)
                .map(|i| ParameterDef::continuous(format!("x{i}"), 0.0, 1.0))
                .collect::<Result<Vec<_>, _>>()?;
            ConfigSpace::new(
                params,
                Objective {
                    name: "performance".into(),
                    direction: Direction::HigherIsBetter,
                },
            )?
        }
    };
    let kind = match a.kind {
        Kind::QuadraticBowl => SurfaceKind::QuadraticBowl,
        Kind::Interaction => SurfaceKind::Interaction,
        Kind::PlateauStep => SurfaceKind::PlateauStep,
    };
    let surface = SyntheticSurfaceSpec {
        noise_sigma: a.noise,
        ..SyntheticSurfaceSpec::random(kind, space.encoded_dim(), derive_seed(seed, "gen_surface", 0))
    };
    let oracle = SyntheticOracle::new(space.clone(), surface.clone(), 0.0)?;
    let configs = sample_uniform(&space, a.rows, derive_seed(seed, "gen_rows", 0))?;
    let rows = configs
        .into_iter()
        .map(|c| {
            let m = oracle.measure(&c, 0)?;
            Ok((c, m.performance))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mut csv = Vec::new();
    write_dataset_csv(&space, &rows, &mut csv)?;

    let run = RunConfig {
        space: space.clone(),
        oracle: OracleSource::Surface(surface.clone()),
        expert: None,
        driver: DriverConfig {
            seed,
            ..DriverConfig::default()
        },
        test_suite: TestSuiteSpec::default(),
    };
    out.write_json("space.json", &space)?;
    out.write_json("surface.json", &surface)?;
    out.write("dataset.csv", csv)?;
    out.write_json("run.json", &run)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    variant: Variant,
    al_iterations: usize,
    ssl_steps: usize,
    tail_batches: usize,
    ledger: &'a Ledger,
    final_eval: Option<Evaluation>,
}

pub fn train(a: &TrainArgs, out: &mut Output) -> CliResult<()> {
    let mut cfg = resolve_problem(&a.problem, a.common.seed)?;
    apply_driver(&mut cfg.driver, &a.driver);
    if let Some(v) = &a.variant {
        cfg.driver.variant = Variant::parse(v)?;
    }
    if a.expert_accuracy.is_some() || a.abstain.is_some() {
        let mut e = cfg
            .expert
            .clone()
            .unwrap_or_else(|| ExpertSpec::new(1.0, derive_seed(cfg.driver.seed, "expert", 0)));
        if let Some(acc) = a.expert_accuracy {
            e.accuracy = acc;
        }
        if let Some(ab) = a.abstain {
            e.abstain_prob = ab;
        }
        cfg.expert = Some(e);
    }
    cfg.validate()?;
    let problem = cfg.build_problem(None)?;
    let mut session = Session::start(&problem, cfg.driver.clone())?;
    let mut expert = SimulatedExpert::new(cfg.expert_or_default());
    if !session.drive(&mut expert)? {
        return Err(CliError::Runtime("the simulated expert stopped answering".into()));
    }
    let mut pairs = Vec::new();
    session.dataset().write_csv(&mut pairs)?;
    let result = session.into_result()?;
    tracing::info!(
        al = result.al_iterations,
        ssl = result.ssl_steps,
        labels = result.ledger.labels_charged,
        "training finished"
    );

    out.write_json("run.json", &cfg)?;
    out.write("trace.jsonl", trace_to_jsonl(&result.trace))?;
    out.write("model.json", result.model.to_json()?)?;
    out.write("pairs.csv", pairs)?;
    out.write_json(
        "result.json",
        &TrainSummary {
            variant: cfg.driver.variant,
            al_iterations: result.al_iterations,
            ssl_steps: result.ssl_steps,
            tail_batches: result.tail_batches,
            ledger: &result.ledger,
            final_eval: result.final_eval,
        },
    )?;
    if let (Some(eval), Some(suite)) = (result.final_eval, &problem.test_suite) {
        out.write_json("metrics.json", &MetricsReport::new(eval, suite))?;
    }
    Ok(())
}

/// Ground-truth comparator over the configurations it was built from.
struct Perfect {
    half: usize,
    truth: HashMap<Vec<u64>, f64>,
}

impl Perfect {
    fn new(problem: &Problem) -> CliResult<Self> {
        let suite = problem.test_suite.as_ref().ok_or_else(|| invalid("evaluation needs --test-n of at least 2"))?;
        let mut truth = HashMap::new();
        for c in &suite.configs {
            let key = problem.space.encode(c)?.iter().map(|x| x.to_bits()).collect();
            truth.insert(key, problem.oracle.truth(c)?);
        }
        Ok(Self {
            half: problem.space.encoded_dim(),
            truth,
        })
    }

    fn lookup(&self, x: &[f64]) -> pairtune_core::Result<f64> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        self.truth
            .get(&key)
            .copied()
            .ok_or_else(|| Error::InvalidArgument("configuration outside the evaluation set".into()))
    }
}

impl DecisionFunction for Perfect {
    fn decision(&self, features: &[f64]) -> pairtune_core::Result<f64> {
        if features.len() != 2 * self.half {
            return Err(Error::InvalidArgument("feature width mismatch".into()));
        }
        Ok(self.lookup(&features[..self.half])? - self.lookup(&features[self.half..])?)
    }
}

fn load_model(path: &Path, space: &ConfigSpace) -> CliResult<ComparatorModel> {
    let model = ComparatorModel::from_json(&read_input(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Some(d) = model.dim() {
        if d != 2 * space.encoded_dim() {
            return Err(invalid(format!(
                "{}: model expects {d} features, the space encodes pairs as {}",
                path.display(),
                2 * space.encoded_dim()
            )));
        }
    }
    Ok(model)
}

pub fn eval(a: &EvalArgs, out: &mut Output) -> CliResult<()> {
    let cfg = resolve_problem(&a.problem, a.common.seed)?;
    cfg.validate()?;
    let problem = cfg.build_problem(None)?;
    let suite = problem.test_suite.as_ref().ok_or_else(|| invalid("evaluation needs --test-n of at least 2"))?;
    let eval = if a.model == "perfect" {
        suite.evaluate(&Perfect::new(&problem)?, &problem.space)?
    } else {
        suite.evaluate(&load_model(Path::new(&a.model), &problem.space)?, &problem.space)?
    };
    let mut report = MetricsReport::new(eval, suite);
    if let Some(b) = &a.baseline {
        let base = suite.evaluate(&load_model(b, &problem.space)?, &problem.space)?;
        report = report.against(b.display().to_string(), base);
    }
    out.write_json("metrics.json", &report)?;
    Ok(())
}

pub fn tune_cmd(a: &TuneArgs, out: &mut Output) -> CliResult<()> {
    let mut cfg = resolve_problem(&a.problem, a.common.seed)?;
    // Tuning needs no held-out suite.
    cfg.test_suite.n = 0;
    cfg.validate()?;
    let problem = cfg.build_problem(None)?;
    let model = load_model(&a.model, &problem.space)?;
    let mut ga = GaConfig {
        seed: a.common.seed(),
        ..GaConfig::default()
    };
    if let Some(v) = a.population {
        ga.population = v;
    }
    if let Some(v) = a.generations {
        ga.generations = v;
    }
    if let Some(v) = a.crossover_rate {
        ga.crossover_rate = v;
    }
    if let Some(v) = a.mutation_rate {
        ga.mutation_rate = v;
    }
    if let Some(v) = a.elitism {
        ga.elitism = v;
    }
    ga.validate()?;
    let report = tune(
        &model,
        &problem.space,
        problem.oracle.as_ref(),
        &ga,
        cfg.driver.budgets.measurement_cost_s,
    )?;
    let mut history = csv::Writer::from_writer(Vec::new());
    history
        .write_record(["generation", "best_id", "best_fitness", "mean_fitness"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for g in &report.history {
        history
            .write_record([
                g.generation.to_string(),
                g.best.id.to_string(),
                g.best_fitness.to_string(),
                g.mean_fitness.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let history = history.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;

    #[derive(Serialize)]
    struct TuneDoc<'a> {
        ga: &'a GaConfig,
        best: &'a pairtune_core::space::Configuration,
        values: &'a [(String, String)],
        performance: f64,
        comparisons: u64,
        simulated_cost_s: f64,
    }
    out.write_json(
        "tune.json",
        &TuneDoc {
            ga: &ga,
            best: &report.best,
            values: &report.values,
            performance: report.performance,
            comparisons: report.comparisons,
            simulated_cost_s: report.simulated_cost_s,
        },
    )?;
    out.write("history.csv", history)?;
    Ok(())
}

fn experiment_base(a: &ExperimentArgs) -> CliResult<(ExperimentBase, Vec<u64>)> {
    let mut base = ExperimentBase::default();
    apply_driver(&mut base.driver, &a.driver);
    if let Some(n) = a.test_n {
        base.test_n = n;
    }
    if let Some(p) = a.abstain {
        base.abstain_prob = p;
    }
    if let Some(c) = a.candidates {
        base.driver.candidates = c;
    }
    if base.test_n < 2 {
        return Err(invalid("--test-n must be at least 2 for experiments"));
    }
    base.driver.validate()?;
    if a.seeds == 0 {
        return Err(invalid("--seeds must be at least 1"));
    }
    Ok((base, (1..=a.seeds as u64).collect()))
}

fn runs_csv(runs: &[RunOutcome]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in runs {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn ablate(a: &AblateArgs, out: &mut Output) -> CliResult<()> {
    let (base, seeds) = experiment_base(&a.experiment)?;
    let variants = if a.variants.trim() == "all" {
        Variant::ALL.to_vec()
    } else {
        a.variants.split(',').map(|s| Variant::parse(s.trim())).collect::<Result<Vec<_>, _>>()?
    };
    if !(0.5..=1.0).contains(&a.expert_accuracy) {
        return Err(invalid("--expert-accuracy must lie in [0.5, 1]"));
    }
    let cases = standard_surfaces(a.common.seed());
    let report = ablation_suite(&cases, &seeds, &variants, a.expert_accuracy, &base)?;
    out.write("ablation.csv", report.to_csv())?;
    out.write("runs.csv", runs_csv(&report.runs)?)?;
    out.write_json("report.json", &report)?;
    Ok(())
}

pub fn sensitivity(a: &SensitivityArgs, out: &mut Output) -> CliResult<()> {
    let (base, seeds) = experiment_base(&a.experiment)?;
    let variant = Variant::parse(&a.variant)?;
    let cases = standard_surfaces(a.common.seed());
    let report = sensitivity_sweep(&cases, &seeds, &a.accuracies, variant, &base)?;
    out.write("sensitivity.csv", report.to_csv())?;
    out.write("runs.csv", runs_csv(&report.runs)?)?;
    Ok(())
}

pub fn serve(a: &ServeArgs, out: &mut Output) -> CliResult<()> {
    let label_timeout = match a.label_timeout {
        Some(s) if !(s.is_finite() && s > 0.0) => return Err(invalid("--label-timeout must be positive")),
        Some(s) => Some(Duration::from_secs_f64(s)),
        None => None,
    };
    let store = SessionStore::open(StoreConfig {
        dir: Some(out.dir().join("sessions")),
        label_timeout,
    })?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime
        .block_on(pairtune_service::serve(Arc::new(store), a.addr, async {
            let _ = tokio::signal::ctrl_c().await;
        }))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.addr)))?;
    out.adopt_tree()
}

pub fn replay(a: &ReplayArgs, out: &mut Output) -> CliResult<()> {
    let records = read_log(&a.log).map_err(|e| invalid(format!("{}: {e}", a.log.display())))?;
    let folded = fold(&records)?;
    let trace = trace_to_jsonl(folded.session.trace());
    out.write("trace.jsonl", &trace)?;
    let reference: Option<PathBuf> = match &a.trace {
        Some(p) => Some(p.clone()),
        None => a
            .log
            .parent()
            .map(|d| d.join("trace.jsonl"))
            .filter(|p| p.exists()),
    };
    if let Some(r) = reference {
        let expected = read_input(&r)?;
        if expected != trace {
            let line = expected
                .lines()
                .zip(trace.lines())
                .position(|(x, y)| x != y)
                .unwrap_or_else(|| expected.lines().count().min(trace.lines().count()));
            return Err(CliError::Runtime(format!(
                "replayed trace differs from {} at line {}",
                r.display(),
                line + 1
            )));
        }
    }
    Ok(())
}
