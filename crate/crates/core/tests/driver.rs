use pairtune_core::comparator::{DecisionFunction, Learner, LearnerSpec};
use pairtune_core::svm::KernelSpec;
use pairtune_core::driver::{
    run, trace_to_jsonl, AnswerStatus, DriverConfig, Expert, PerfectExpert, Problem, Query, Session, TraceRecord,
    Variant,
};
use pairtune_core::oracle::{ExpertAnswer, ExpertSpec, SimulatedExpert, SurfaceKind, SyntheticSurfaceSpec};
use pairtune_core::space::{ConfigSpace, Direction, Objective, ParameterDef};
use pairtune_core::Error;

fn space() -> ConfigSpace {
    ConfigSpace::new(
        vec![
            ParameterDef::continuous("a", 0.0, 1.0).unwrap(),
            ParameterDef::continuous("b", 0.0, 1.0).unwrap(),
            ParameterDef::integer("c", 1, 8).unwrap(),
        ],
        Objective {
            name: "y".into(),
            direction: Direction::HigherIsBetter,
        },
    )
    .unwrap()
}

fn problem(candidates: usize, seed: u64) -> Problem {
    let s = space();
    let spec = SyntheticSurfaceSpec::random(SurfaceKind::QuadraticBowl, s.encoded_dim(), 11);
    Problem::synthetic(s, spec, candidates, 12, seed).unwrap()
}

fn cfg(budget: usize, q: usize, p: usize, variant: Variant) -> DriverConfig {
    DriverConfig {
        budget,
        q,
        p,
        t: 6,
        variant,
        seed: 5,
        candidates: 40,
        initial_measured: 6,
        learner: LearnerSpec::Centroid,
        ..DriverConfig::default()
    }
}

fn count<F: Fn(&TraceRecord) -> bool>(trace: &[TraceRecord], f: F) -> usize {
    trace.iter().filter(|r| f(r)).count()
}

#[test]
fn default_plan_has_no_tail() {
    let r = run(&problem(40, 1), cfg(200, 10, 5, Variant::CmCasl), &mut PerfectExpert).unwrap();
    assert_eq!((r.al_iterations, r.ssl_steps, r.tail_batches), (20, 4, 0));
    assert_eq!(r.ledger.labels_charged, 200);
}

#[test]
fn remainder_goes_to_the_tail_loop() {
    let r = run(&problem(40, 1), cfg(150, 10, 4, Variant::CmCasl), &mut PerfectExpert).unwrap();
    assert_eq!((r.al_iterations, r.ssl_steps, r.tail_batches), (15, 3, 3));
    assert_eq!(r.ledger.labels_charged, 150);
    // SSL steps follow iterations 4, 8 and 12.
    let mut al = 0;
    let mut after = Vec::new();
    for rec in &r.trace {
        match rec {
            TraceRecord::Labeled { .. } => al += 1,
            TraceRecord::Ssl { .. } => after.push(al),
            _ => {}
        }
    }
    assert_eq!(after, vec![4, 8, 12]);
}

#[test]
fn variant_definitions_hold() {
    let p = problem(40, 2);
    let al_ir = run(&p, cfg(60, 10, 2, Variant::AlIr), &mut PerfectExpert).unwrap();
    assert_eq!(al_ir.ledger.pseudolabels, 0);
    assert_eq!(al_ir.ssl_steps, 0);

    let ssl = run(&p, cfg(60, 10, 2, Variant::SslOnly), &mut PerfectExpert).unwrap();
    assert_eq!(ssl.ledger.labels_charged, 0);
    assert_eq!(ssl.ssl_steps, 3);
    assert_eq!(ssl.ledger.pseudolabels, 18);

    let passive = run(&p, cfg(60, 10, 2, Variant::PassiveSvm), &mut PerfectExpert).unwrap();
    assert_eq!(passive.ssl_steps, 0);
    assert_eq!(passive.ledger.labels_charged, 60);
    assert_eq!(count(&passive.trace, |r| matches!(r, TraceRecord::Query { k, .. } if *k > 0)), 0);
    let retrains = count(&passive.trace, |r| matches!(r, TraceRecord::Labeled { retrained: true, .. }));
    assert_eq!(retrains, 1);

    let al_i = run(&p, cfg(60, 10, 2, Variant::AlI), &mut PerfectExpert).unwrap();
    assert_eq!(count(&al_i.trace, |r| matches!(r, TraceRecord::Query { k, .. } if *k > 0)), 0);
}

#[test]
fn budget_ledger_and_set_algebra() {
    let mut c = cfg(100, 10, 3, Variant::CmCasl);
    c.budgets.time_constraint_s = Some(1e6);
    let spec = ExpertSpec {
        abstain_prob: 0.05,
        ..ExpertSpec::new(0.9, 77)
    };
    let r = run(&problem(40, 3), c.clone(), &mut SimulatedExpert::new(spec)).unwrap();
    let l = r.ledger;
    assert!(l.abstentions > 0, "seed should produce at least one abstention");
    let expected = 6.0 * c.budgets.measurement_cost_s
        + l.labels_charged as f64 * c.budgets.label_cost_s
        + l.abstentions as f64 * 2.0 * c.budgets.measurement_cost_s;
    assert!((l.cost_s - expected).abs() < 1e-9);
    assert!(l.labels_charged <= c.budget + l.abstentions);

    let total = 40 * 39 / 2;
    let mut last = 0;
    for rec in &r.trace {
        let (labeled, unlabeled, grew) = match rec {
            TraceRecord::Init { labeled, unlabeled, .. } => (*labeled, *unlabeled, true),
            TraceRecord::Labeled { labeled, unlabeled, .. } => (*labeled, *unlabeled, true),
            TraceRecord::Ssl {
                labeled,
                unlabeled,
                pairs,
                ..
            } => (*labeled, *unlabeled, !pairs.is_empty()),
            _ => continue,
        };
        assert_eq!(labeled + unlabeled, total);
        if grew {
            assert!(labeled > last || last == 0);
        }
        last = labeled;
    }
    let measured = count(&r.trace, |rec| {
        matches!(rec, TraceRecord::Labeled { abstentions, .. } if *abstentions > 0)
    });
    assert!(measured > 0);
}

#[test]
fn refuses_to_start_over_time_budget() {
    let mut c = cfg(100, 10, 3, Variant::CmCasl);
    c.budgets.time_constraint_s = Some(5.0 * c.budgets.measurement_cost_s);
    match Session::start(&problem(40, 1), c) {
        Err(Error::Budget { cost, limit }) => assert!(cost > limit),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("session should not start"),
    }
}

#[test]
fn trace_is_reproducible() {
    let p = problem(40, 4);
    let mk = || {
        let spec = ExpertSpec::new(0.8, 9);
        run(&p, cfg(100, 10, 3, Variant::CmCasl), &mut SimulatedExpert::new(spec)).unwrap()
    };
    assert_eq!(trace_to_jsonl(&mk().trace), trace_to_jsonl(&mk().trace));
}

#[test]
fn answers_are_idempotent_and_conflicts_rejected() {
    let mut s = Session::start(&problem(40, 1), cfg(30, 5, 2, Variant::CmCasl)).unwrap();
    let batch = s.pending().unwrap().clone();
    assert_eq!(batch.queries.len(), 5);
    assert!(s.advance().is_err());
    let k = batch.queries[0].key;
    assert_eq!(s.answer(k, ExpertAnswer::LeftBetter).unwrap(), AnswerStatus::Recorded);
    assert_eq!(s.answer(k, ExpertAnswer::LeftBetter).unwrap(), AnswerStatus::Duplicate);
    assert!(s.answer(k, ExpertAnswer::RightBetter).is_err());
    for q in &batch.queries[1..] {
        s.answer(q.key, ExpertAnswer::RightBetter).unwrap();
    }
    s.advance().unwrap();
    assert_eq!(s.ledger().labels_charged, 5);
    assert_ne!(s.pending().unwrap().iteration, batch.iteration);
}

#[test]
fn flat_surface_run_completes() {
    let s = space();
    let mut spec = SyntheticSurfaceSpec::random(SurfaceKind::QuadraticBowl, s.encoded_dim(), 1);
    spec.weights.iter_mut().for_each(|w| *w = 0.0);
    let p = Problem::synthetic(s, spec, 40, 0, 1).unwrap();
    let r = run(&p, cfg(20, 5, 2, Variant::CmCasl), &mut PerfectExpert).unwrap();
    assert_eq!(r.al_iterations, 4);
}

#[test]
fn empty_training_set_yields_majority_stub() {
    for learner in [Learner::Centroid, Learner::Svm { kernel: KernelSpec::Linear, c: 1.0, tol: 1e-3 }] {
        let (model, fallback) = learner.fit_or_fallback(&[], 4, 0).unwrap();
        assert!(fallback);
        assert!(model.is_fallback());
        assert!(!model.predict(&[0.0; 4]).unwrap());
    }
}

/// Gives up after a fixed number of answers, like a timed-out human.
struct Flaky {
    left: usize,
}

impl Expert for Flaky {
    fn respond(&mut self, _q: &Query, truth: bool) -> Option<ExpertAnswer> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        Some(ExpertAnswer::from_label(truth))
    }
}

#[test]
fn suspended_session_resumes_to_the_same_trace() {
    let p = problem(40, 6);
    let c = cfg(60, 10, 2, Variant::CmCasl);
    let full = run(&p, c.clone(), &mut PerfectExpert).unwrap();

    let mut s = Session::start(&p, c).unwrap();
    assert!(!s.drive(&mut Flaky { left: 23 }).unwrap());
    assert_eq!(s.pending().unwrap().answered(), 3);
    assert!(s.drive(&mut PerfectExpert).unwrap());
    let resumed = s.into_result().unwrap();
    assert_eq!(trace_to_jsonl(&full.trace), trace_to_jsonl(&resumed.trace));
}

#[test]
fn lower_is_better_objective_flips_nothing_downstream() {
    // The driver only ever sees internal higher-is-better values, so an
    // objective's direction must not change the trace shape.
    let s = ConfigSpace::new(
        space().parameters().to_vec(),
        Objective {
            name: "latency".into(),
            direction: Direction::LowerIsBetter,
        },
    )
    .unwrap();
    let spec = SyntheticSurfaceSpec::random(SurfaceKind::Interaction, s.encoded_dim(), 3);
    let p = Problem::synthetic(s, spec, 30, 0, 2).unwrap();
    let mut c = cfg(40, 5, 2, Variant::AsslH);
    c.candidates = 30;
    let r = run(&p, c, &mut PerfectExpert).unwrap();
    assert_eq!(r.al_iterations, 8);
    assert!(r.final_eval.is_none());
}
