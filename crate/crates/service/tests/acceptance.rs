//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//! Pass substrings as arguments to run a subset.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pairtune_core::active::{select_queries, squared_distance, QueryConfig};
use pairtune_core::comparator::{DecisionFunction, LearnerSpec};
use pairtune_core::driver::{run, trace_to_jsonl, DriverConfig, PerfectExpert, Problem, Variant};
use pairtune_core::experiments::{
    ablation_suite, run_case, sensitivity_sweep, standard_surfaces, tuning_comparison, ExperimentBase,
};
use pairtune_core::ga::{evolve, Fitness, GaConfig, OracleJudge};
use pairtune_core::metrics::{classification_accuracy, copeland, rank_accuracy};
use pairtune_core::oracle::{
    ExpertSpec, PerformanceOracle, SimulatedExpert, SurfaceKind, SyntheticOracle, SyntheticSurfaceSpec,
};
use pairtune_core::pairs::{label_of, LabelSource, PairKey, PairSample};
use pairtune_core::runconfig::{OracleSource, RunConfig, TestSuiteSpec};
use pairtune_core::space::{ConfigSpace, Direction, Objective, ParameterDef};
use pairtune_core::ssl::n_change;
use pairtune_core::svm::{self, KernelSpec, SmoParams};
use pairtune_service::{read_log, Phase, SessionStore, StoreConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: pairtune_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- formulas

const FORMULA_INSTANCES: usize = 10_000;

/// Dyadic rationals so every value and difference is exact in f64.
fn dyadic(rng: &mut StdRng) -> (i64, f64) {
    let n = rng.random_range(-64i64..=64);
    (n, n as f64 / 8.0)
}

fn formula_exactness() -> Check {
    let mut rng = StdRng::seed_from_u64(1);

    let mut ties = 0;
    for _ in 0..FORMULA_INSTANCES {
        let (a, fa) = dyadic(&mut rng);
        let (b, fb) = dyadic(&mut rng);
        ties += usize::from(a == b);
        let got = core(label_of(fa, fb))?;
        ensure(got == (a - b > 0), || format!("label_of({fa}, {fb}) = {got}"))?;
    }

    for _ in 0..FORMULA_INSTANCES {
        let n = rng.random_range(1..=200usize);
        let pred: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let hits = (0..n).filter(|&i| pred[i] == truth[i]).count() as u64;
        // 100*hits and n are exact, so one correctly rounded division is the exact ratio.
        let want = (100 * hits) as f64 / n as f64;
        let got = core(classification_accuracy(&pred, &truth))?;
        ensure(got == want, || format!("CA {got} != {want} for {hits}/{n}"))?;
    }

    for _ in 0..FORMULA_INSTANCES {
        let p = rng.random_range(1..=10usize);
        let window: Vec<bool> = (0..=p).map(|_| rng.random_bool(0.3)).collect();
        let mut want = 0;
        for i in 1..=p {
            if window[i] != window[i - 1] {
                want += 1;
            }
        }
        let got = core(n_change(&window, p))?;
        ensure(got == want, || format!("n_change {window:?} = {got}, want {want}"))?;
        ensure(n_change(&window[..p], p).is_err(), || "short window accepted".into())?;
    }

    for _ in 0..FORMULA_INSTANCES {
        let n = rng.random_range(2..=12usize);
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + rng.random_range(0..7)).collect();
        ids.reverse();
        let perf: Vec<i64> = (0..n).map(|_| rng.random_range(0..6)).collect();
        // Antisymmetric integer scores, zeros included.
        let mut s = vec![vec![0i64; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                s[i][j] = rng.random_range(-3..=3);
                s[j][i] = -s[i][j];
            }
        }
        let ranked = core(copeland(&ids, |i, j| Ok(s[i][j] as f64)))?;

        let wins: Vec<usize> = (0..n).map(|i| (0..n).filter(|&j| s[i][j] > 0).count()).collect();
        let sums: Vec<i64> = (0..n).map(|i| s[i].iter().sum()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| wins[b].cmp(&wins[a]).then(sums[b].cmp(&sums[a])).then(ids[a].cmp(&ids[b])));
        let want_order: Vec<u64> = order.iter().map(|&i| ids[i]).collect();
        ensure(ranked.ordering == want_order, || format!("copeland {:?} != {want_order:?}", ranked.ordering))?;

        let pred_rank: HashMap<u64, usize> = want_order.iter().enumerate().map(|(r, id)| (*id, r + 1)).collect();
        let mut total = 0usize;
        for i in 0..n {
            let true_rank = 1 + (0..n).filter(|&j| perf[j] > perf[i]).count();
            total += true_rank.abs_diff(pred_rank[&ids[i]]);
        }
        let want = total as f64 / n as f64;
        let truth: HashMap<u64, f64> = ids.iter().zip(&perf).map(|(id, p)| (*id, *p as f64)).collect();
        let got = core(rank_accuracy(&ranked, &truth))?;
        ensure(got == want, || format!("RA {got} != {want}"))?;
    }
    Ok(format!(
        "{FORMULA_INSTANCES} instances per formula, exact equality ({ties} label ties)"
    ))
}

// --------------------------------------------------------- query selection

const RANDOM_SELECTION_INSTANCES: usize = 150;
const BLOB_INSTANCES: usize = 60;
const EXHAUSTIVE_MAX_POINTS: usize = 10;

struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl DecisionFunction for Linear {
    fn decision(&self, x: &[f64]) -> pairtune_core::Result<f64> {
        Ok(self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b)
    }
}

fn reference_centroids(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

fn sse(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let c = reference_centroids(points, assignment, k);
    points.iter().zip(assignment).map(|(p, &a)| squared_distance(p, &c[a])).sum()
}

/// Minimum SSE over every partition into exactly `k` non-empty blocks.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
    fn rec(i: usize, used: usize, k: usize, a: &mut Vec<usize>, pts: &[Vec<f64>], best: &mut (f64, Vec<usize>)) {
        if i == pts.len() {
            if used == k {
                let v = sse(pts, a, k);
                if v < best.0 {
                    *best = (v, a.clone());
                }
            }
            return;
        }
        if k - used > pts.len() - i {
            return;
        }
        for c in 0..=used.min(k - 1) {
            a.push(c);
            rec(i + 1, used.max(c + 1), k, a, pts, best);
            a.pop();
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(0, 0, k, &mut Vec::new(), points, &mut best);
    best
}

/// Canonical block labels: first appearance order.
fn canonical(assignment: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    assignment
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

struct SelectionInstance {
    samples: Vec<PairSample>,
    model: Linear,
    cfg: QueryConfig,
}

fn make_samples(points: Vec<Vec<f64>>, rng: &mut StdRng) -> Vec<PairSample> {
    let base = rng.random_range(0..1000u64);
    points
        .into_iter()
        .enumerate()
        .map(|(i, features)| PairSample {
            left_id: base + i as u64,
            right_id: base + 2000 + (i as u64 * 37) % 101,
            features,
            label: None,
            source: LabelSource::None,
        })
        .collect()
}

fn random_instance(rng: &mut StdRng) -> SelectionInstance {
    let m = rng.random_range(2..=40usize);
    let dim = rng.random_range(2..=6usize);
    let coarse = rng.random_bool(0.3);
    let points: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let v: f64 = rng.random_range(0.0..1.0);
                    if coarse {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    // Integer weights on coarse grids produce |decision| ties.
    let w = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
    SelectionInstance {
        samples: make_samples(points, rng),
        model: Linear { w, b: 0.0 },
        cfg: QueryConfig::new(rng.random_range(1..=6), rng.random_range(1..=4), rng.random()),
    }
}

fn blob_instance(rng: &mut StdRng) -> (SelectionInstance, Vec<usize>) {
    let blobs = rng.random_range(2..=4usize);
    let m = rng.random_range(blobs..=EXHAUSTIVE_MAX_POINTS);
    let dim = rng.random_range(2..=4usize);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for i in 0..m {
        let b = if i < blobs { i } else { rng.random_range(0..blobs) };
        points.push((0..dim).map(|d| if d == b % dim { 1000.0 * (b + 1) as f64 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect());
        truth.push(b);
    }
    let w = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (q, n) = if rng.random_bool(0.5) { (blobs, 1) } else { (1, blobs) };
    (
        SelectionInstance {
            samples: make_samples(points, rng),
            model: Linear { w, b: 0.1 },
            cfg: QueryConfig::new(q, n, rng.random()),
        },
        truth,
    )
}

/// Audits one selection against exhaustive scans. Returns the assignment.
fn audit_selection(inst: &SelectionInstance) -> Result<Vec<usize>, String> {
    let batch = core(select_queries(&inst.model, &inst.samples, &inst.cfg))?;
    let points: Vec<Vec<f64>> = inst.samples.iter().map(|s| s.features.clone()).collect();
    let m = points.len();
    let k = (inst.cfg.q * inst.cfg.n).min(m);
    ensure(batch.k == k, || format!("k = {}, want {k}", batch.k))?;
    ensure(batch.assignment.len() == m, || "assignment length".into())?;

    let mut sizes = vec![0usize; k];
    for &c in &batch.assignment {
        ensure(c < k, || format!("cluster index {c} >= k"))?;
        sizes[c] += 1;
    }
    ensure(sizes.iter().all(|&s| s > 0), || "empty cluster".into())?;
    ensure(batch.cluster_sizes == sizes, || "cluster sizes disagree with assignment".into())?;

    // Lloyd fixpoint: everyone sits in a nearest cluster, up to exact ties.
    let cents = reference_centroids(&points, &batch.assignment, k);
    for (i, p) in points.iter().enumerate() {
        let own = squared_distance(p, &cents[batch.assignment[i]]);
        let best = cents.iter().map(|c| squared_distance(p, c)).fold(f64::INFINITY, f64::min);
        ensure(own <= best + 1e-12 * (1.0 + best), || format!("point {i} not at a nearest centroid"))?;
    }

    // Medoid per cluster by exhaustive scan, lowest index among ties.
    ensure(batch.medoids.len() == k, || "one medoid per cluster".into())?;
    for (c, &med) in batch.medoids.iter().enumerate() {
        let members: Vec<usize> = (0..m).filter(|&i| batch.assignment[i] == c).collect();
        let dists: Vec<f64> = members.iter().map(|&i| squared_distance(&points[i], &cents[c])).collect();
        let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let want = members[dists.iter().position(|&d| d == best).expect("non-empty")];
        let med_d = squared_distance(&points[med], &cents[c]);
        let tied = batch.assignment[med] == c && med_d <= best + 1e-12 * (1.0 + best);
        ensure(med == want || tied, || format!("cluster {c}: medoid {med}, want {want}"))?;
    }

    // Minimum |decision| over the medoids, ties by pair id.
    let mut scored: Vec<(f64, PairKey)> = batch
        .medoids
        .iter()
        .map(|&i| (inst.model.decision(&points[i]).unwrap().abs(), inst.samples[i].key()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(inst.cfg.q);
    let want: Vec<PairKey> = scored.iter().map(|s| s.1).collect();
    ensure(batch.selected == want, || format!("selected {:?}, want {want:?}", batch.selected))?;
    ensure(
        batch.distances == scored.iter().map(|s| s.0).collect::<Vec<_>>(),
        || "distances differ".into(),
    )?;
    Ok(batch.assignment)
}

fn query_selection_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let mut exhaustive_checked = 0;
    for n in 0..RANDOM_SELECTION_INSTANCES {
        let inst = random_instance(&mut rng);
        let assignment = audit_selection(&inst).map_err(|e| format!("random instance {n}: {e}"))?;
        if inst.samples.len() <= EXHAUSTIVE_MAX_POINTS {
            let points: Vec<Vec<f64>> = inst.samples.iter().map(|s| s.features.clone()).collect();
            let k = (inst.cfg.q * inst.cfg.n).min(points.len());
            let (opt, _) = exhaustive_optimum(&points, k);
            let got = sse(&points, &assignment, k);
            ensure(got >= opt - 1e-9, || format!("instance {n}: SSE below the exhaustive optimum"))?;
            exhaustive_checked += 1;
        }
    }
    for n in 0..BLOB_INSTANCES {
        let (inst, truth) = blob_instance(&mut rng);
        let assignment = audit_selection(&inst).map_err(|e| format!("blob instance {n}: {e}"))?;
        let points: Vec<Vec<f64>> = inst.samples.iter().map(|s| s.features.clone()).collect();
        let (_, opt) = exhaustive_optimum(&points, inst.cfg.q * inst.cfg.n);
        ensure(canonical(&opt) == canonical(&truth), || format!("blob instance {n}: generator broke"))?;
        ensure(canonical(&assignment) == canonical(&opt), || {
            format!("blob instance {n}: partition differs from the exhaustive optimum")
        })?;
    }
    Ok(format!(
        "{} instances audited; {} random and {BLOB_INSTANCES} separable partitions checked exhaustively",
        RANDOM_SELECTION_INSTANCES + BLOB_INSTANCES,
        exhaustive_checked
    ))
}

// ---------------------------------------------------------------- driver

const DRIVER_TRIPLES: usize = 20;

fn unit_space(dims: usize) -> ConfigSpace {
    ConfigSpace::new(
        (0..dims)
            .map(|i| ParameterDef::continuous(format!("x{i}"), 0.0, 1.0).unwrap())
            .collect(),
        Objective {
            name: "y".into(),
            direction: Direction::HigherIsBetter,
        },
    )
    .unwrap()
}

fn driver_arithmetic() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    let space = unit_space(3);
    let spec = SyntheticSurfaceSpec::random(SurfaceKind::QuadraticBowl, 3, 31);
    let problem = core(Problem::synthetic(space, spec, 60, 0, 9))?;
    let mut tails = 0;
    for _ in 0..DRIVER_TRIPLES {
        let (budget, q, p) = (rng.random_range(100..=200), rng.random_range(5..=20), rng.random_range(1..=5));
        let cfg = DriverConfig {
            budget,
            q,
            p,
            t: 2,
            candidates: 60,
            seed: rng.random(),
            variant: Variant::CmCasl,
            learner: LearnerSpec::Centroid,
            ..DriverConfig::default()
        };
        let r = core(run(&problem, cfg, &mut PerfectExpert))?;
        let m = budget / q;
        let t = m / p;
        let want = (m, t, m - p * t, q * m);
        let got = (r.al_iterations, r.ssl_steps, r.tail_batches, r.ledger.labels_charged);
        ensure(got == want, || format!("Q={budget} q={q} P={p}: got {got:?}, want {want:?}"))?;
        tails += usize::from(want.2 > 0);
    }
    Ok(format!("{DRIVER_TRIPLES} (Q, q, P) triples exact, {tails} with a tail loop"))
}

// ------------------------------------------------------------------- svm

const SVM_PROBLEMS: usize = 50;
const SVM_TOLERANCE: f64 = 1e-4;

/// Dual solved by cyclic exact two-variable updates over every index pair,
/// independent of the production working-set selection.
fn reference_dual(xs: &[Vec<f64>], ys: &[f64], kernel: KernelSpec, c: f64) -> (Vec<f64>, f64) {
    let n = xs.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| ys[i] * ys[j] * kernel.eval(&xs[i], &xs[j])).collect())
        .collect();
    let mut a = vec![0.0; n];
    let mut g = vec![-1.0; n];
    for _sweep in 0..200_000 {
        for i in 0..n {
            for j in i + 1..n {
                let (ai, aj) = (a[i], a[j]);
                if ys[i] != ys[j] {
                    let quad = (q[i][i] + q[j][j] + 2.0 * q[i][j]).max(1e-12);
                    let delta = (-g[i] - g[j]) / quad;
                    let diff = a[i] - a[j];
                    a[i] += delta;
                    a[j] += delta;
                    if diff > 0.0 {
                        if a[j] < 0.0 {
                            a[j] = 0.0;
                            a[i] = diff;
                        }
                    } else if a[i] < 0.0 {
                        a[i] = 0.0;
                        a[j] = -diff;
                    }
                    if diff > 0.0 {
                        if a[i] > c {
                            a[i] = c;
                            a[j] = c - diff;
                        }
                    } else if a[j] > c {
                        a[j] = c;
                        a[i] = c + diff;
                    }
                } else {
                    let quad = (q[i][i] + q[j][j] - 2.0 * q[i][j]).max(1e-12);
                    let delta = (g[i] - g[j]) / quad;
                    let sum = a[i] + a[j];
                    a[i] -= delta;
                    a[j] += delta;
                    if sum > c {
                        if a[i] > c {
                            a[i] = c;
                            a[j] = sum - c;
                        }
                        if a[j] > c {
                            a[j] = c;
                            a[i] = sum - c;
                        }
                    } else {
                        if a[j] < 0.0 {
                            a[j] = 0.0;
                            a[i] = sum;
                        }
                        if a[i] < 0.0 {
                            a[i] = 0.0;
                            a[j] = sum;
                        }
                    }
                }
                let (di, dj) = (a[i] - ai, a[j] - aj);
                if di != 0.0 || dj != 0.0 {
                    for k in 0..n {
                        g[k] += q[k][i] * di + q[k][j] * dj;
                    }
                }
            }
        }
        // KKT gap over the feasible directions.
        let mut up = f64::NEG_INFINITY;
        let mut low = f64::INFINITY;
        for t in 0..n {
            let v = -ys[t] * g[t];
            let in_up = (ys[t] > 0.0 && a[t] < c) || (ys[t] < 0.0 && a[t] > 0.0);
            let in_low = (ys[t] > 0.0 && a[t] > 0.0) || (ys[t] < 0.0 && a[t] < c);
            if in_up {
                up = up.max(v);
            }
            if in_low {
                low = low.min(v);
            }
        }
        if up - low < 1e-12 {
            break;
        }
    }
    // Clipping arithmetic can leave a bounded multiplier an ulp inside its box.
    for v in a.iter_mut() {
        if *v < 1e-10 * c {
            *v = 0.0;
        } else if *v > c * (1.0 - 1e-10) {
            *v = c;
        }
    }
    // Bias: mean over free vectors, else the midpoint of the feasible interval.
    let mut free = Vec::new();
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..n {
        let yg = ys[t] * g[t];
        if a[t] > 0.0 && a[t] < c {
            free.push(yg);
        } else if (ys[t] > 0.0) != (a[t] >= c) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free.is_empty() {
        (ub + lb) / 2.0
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    (a, -rho)
}

fn svm_reference() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for n in 0..SVM_PROBLEMS {
        let m = rng.random_range(4..=50usize);
        let dim = rng.random_range(1..=6usize);
        let kernel = if rng.random_bool(0.5) {
            KernelSpec::Linear
        } else {
            KernelSpec::Rbf {
                gamma: rng.random_range(0.1..2.0),
            }
        };
        let c = 10f64.powf(rng.random_range(-1.0..2.0));
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rows: Vec<(Vec<f64>, bool)> = (0..m)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.3..0.3);
                (x, s > 0.0)
            })
            .collect();
        rows[0].1 = true;
        rows[1].1 = false;
        let model = core(svm::fit(&rows, kernel, c, SmoParams::default(), n as u64))?;
        let xs: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| if r.1 { 1.0 } else { -1.0 }).collect();
        let (alpha, bias) = reference_dual(&xs, &ys, kernel, c);
        let reference = |x: &[f64]| -> f64 {
            xs.iter().zip(&alpha).zip(&ys).map(|((xi, a), y)| a * y * kernel.eval(xi, x)).sum::<f64>() + bias
        };
        let probes: Vec<Vec<f64>> = xs
            .iter()
            .cloned()
            .chain((0..50).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()))
            .collect();
        for x in &probes {
            let diff = (core(model.decision(x))? - reference(x)).abs();
            worst = worst.max(diff);
            ensure(diff <= SVM_TOLERANCE, || {
                format!(
                    "problem {n} (m={m}, {kernel:?}, C={c:.3}): decision differs by {diff:.2e} (bias {} vs {bias})",
                    model.bias
                )
            })?;
        }
    }
    Ok(format!("{SVM_PROBLEMS} problems, max |decision difference| {worst:.2e} <= {SVM_TOLERANCE:.0e}"))
}

// ------------------------------------------------------- trend reproduction

const TREND_SEEDS: u64 = 10;
const TREND_ACCURACY: f64 = 0.9;
const ALPHA: f64 = 0.05;

fn seeds() -> Vec<u64> {
    (1..=TREND_SEEDS).collect()
}

/// One-sided paired t-test of `a > b`; returns the p-value.
fn paired_greater(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var / n).sqrt();
    1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t)
}

fn ablation_trend() -> Check {
    let cases = standard_surfaces(2024);
    let base = ExperimentBase::default();
    let variants = [Variant::PassiveSvm, Variant::AlI, Variant::AlIr, Variant::CmCasl];
    let report = core(ablation_suite(&cases, &seeds(), &variants, TREND_ACCURACY, &base))?;
    let ca = |surface: &str, v: Variant| -> Vec<f64> {
        let mut runs: Vec<_> = report.runs.iter().filter(|r| r.surface == surface && r.variant == v).collect();
        runs.sort_by_key(|r| r.seed);
        runs.iter().map(|r| r.ca).collect()
    };
    let mut improved = 0;
    let mut lower_var = 0;
    let mut detail = Vec::new();
    for case in &cases {
        let p = paired_greater(&ca(&case.name, Variant::CmCasl), &ca(&case.name, Variant::PassiveSvm));
        improved += usize::from(p < ALPHA);
        let vi = report.cell(&case.name, Variant::AlI).unwrap().variance;
        let vir = report.cell(&case.name, Variant::AlIr).unwrap().variance;
        lower_var += usize::from(vir <= vi);
        detail.push(format!("{} p={p:.3}", case.name));
    }
    let avr = |v| report.avr[&v];
    let summary = format!(
        "AVR cm-casl {:.4} al-ir {:.4} al-i {:.4}; paired improvement {improved}/5 [{}]; var(al-ir)<=var(al-i) {lower_var}/5",
        avr(Variant::CmCasl),
        avr(Variant::AlIr),
        avr(Variant::AlI),
        detail.join(", ")
    );
    let ok = avr(Variant::CmCasl) > 1.0
        && improved >= 4
        && avr(Variant::CmCasl) >= avr(Variant::AlIr)
        && lower_var >= 3;
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

const PSEUDOLABEL_MAX_ERROR: f64 = 0.05;

fn pseudolabel_reliability() -> Check {
    let cases = standard_surfaces(2024);
    let base = ExperimentBase::default();
    let (mut labels, mut errors) = (0, 0);
    for case in &cases {
        for s in seeds() {
            let r = core(run_case(case, Variant::CmCasl, s, 1.0, &base))?;
            labels += r.pseudolabels;
            errors += r.pseudolabel_errors;
        }
    }
    ensure(labels > 0, || "no pseudolabels assigned".into())?;
    let rate = errors as f64 / labels as f64;
    let msg = format!("{errors} wrong of {labels} pseudolabels ({:.2}%)", 100.0 * rate);
    if rate <= PSEUDOLABEL_MAX_ERROR {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn expert_sensitivity() -> Check {
    let cases = standard_surfaces(2024);
    let accuracies = [1.0, 0.9, 0.7];
    let report = core(sensitivity_sweep(&cases, &seeds(), &accuracies, Variant::CmCasl, &ExperimentBase::default()))?;
    let mut lines = Vec::new();
    let mut violations = Vec::new();
    for case in &cases {
        let rows: Vec<_> = accuracies.iter().map(|a| report.row(&case.name, *a).unwrap()).collect();
        for w in rows.windows(2) {
            let (hi, lo) = (w[0], w[1]);
            if hi.mean_ca < lo.mean_ca {
                let slack = hi.std_err.max(lo.std_err);
                if lo.mean_ca - hi.mean_ca > slack {
                    violations.push(format!("{} {}<{}", case.name, hi.accuracy, lo.accuracy));
                }
            }
        }
        lines.push(format!(
            "{} {:.1}/{:.1}/{:.1}",
            case.name, rows[0].mean_ca, rows[1].mean_ca, rows[2].mean_ca
        ));
    }
    let msg = format!("CA at 1.0/0.9/0.7: {}", lines.join(", "));
    if violations.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; violations beyond 1 SE: {}", violations.join(", ")))
    }
}

const GA_RELATIVE_GAP: f64 = 0.01;

fn tuning_reduction() -> Check {
    let space = unit_space(2);
    let ga = GaConfig {
        population: 64,
        generations: 30,
        ..GaConfig::default()
    };
    let mut worst: f64 = 0.0;
    for s in seeds() {
        let spec = SyntheticSurfaceSpec::random(SurfaceKind::QuadraticBowl, 2, 100 + s);
        let opt = spec.optimum_value().unwrap();
        let oracle = core(SyntheticOracle::new(space.clone(), spec, 0.0))?;
        let judge = OracleJudge(&oracle);
        let r = core(evolve(&space, &Fitness::Comparator(&judge), &GaConfig { seed: s, ..ga.clone() }))?;
        let gap = (opt - core(oracle.truth(&r.best))?) / opt.abs();
        worst = worst.max(gap);
        ensure(gap <= GA_RELATIVE_GAP, || format!("seed {s}: {:.3}% short of the optimum", 100.0 * gap))?;
    }

    let cases = standard_surfaces(2024);
    let outcomes = core(tuning_comparison(
        &cases,
        &seeds(),
        &[Variant::PassiveSvm, Variant::CmCasl],
        TREND_ACCURACY,
        &ExperimentBase::default(),
        &ga,
    ))?;
    let mean = |surface: &str, v: Variant| {
        let xs: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.surface == surface && o.variant == v)
            .map(|o| o.performance)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for case in &cases {
        let (cm, pa) = (mean(&case.name, Variant::CmCasl), mean(&case.name, Variant::PassiveSvm));
        wins += usize::from(cm >= pa);
        lines.push(format!("{} {cm:.3} vs {pa:.3}", case.name));
    }
    let msg = format!(
        "perfect comparator worst gap {:.3}% over 10 seeds; cm-casl >= passive on {wins}/5 ({})",
        100.0 * worst,
        lines.join(", ")
    );
    if wins >= 4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- replay

const REPLAY_SESSIONS: usize = 20;

fn random_run_config(rng: &mut StdRng) -> RunConfig {
    let dims = rng.random_range(2..=4usize);
    let space = unit_space(dims);
    let kind = [SurfaceKind::QuadraticBowl, SurfaceKind::Interaction, SurfaceKind::PlateauStep][rng.random_range(0..3)];
    let mut surface = SyntheticSurfaceSpec::random(kind, dims, rng.random());
    if rng.random_bool(0.3) {
        surface.noise_sigma = 0.05;
    }
    let variant = Variant::ALL[rng.random_range(0..Variant::ALL.len())];
    let learner = if rng.random_bool(0.5) {
        LearnerSpec::Centroid
    } else {
        LearnerSpec::default()
    };
    RunConfig {
        space,
        oracle: OracleSource::Surface(surface),
        expert: Some(ExpertSpec {
            abstain_prob: rng.random_range(0.0..0.05),
            ..ExpertSpec::new(rng.random_range(0.7..=1.0), rng.random())
        }),
        driver: DriverConfig {
            budget: rng.random_range(20..=60),
            q: rng.random_range(3..=10),
            p: rng.random_range(1..=3),
            t: 2 * rng.random_range(1..=3),
            candidates: rng.random_range(20..=40),
            initial_measured: rng.random_range(4..=8),
            seed: rng.random(),
            variant,
            learner,
            ..DriverConfig::default()
        },
        test_suite: TestSuiteSpec {
            n: match rng.random_range(0..=12usize) {
                1 => 0,
                n => n,
            },
        },
    }
}

fn determinism_and_replay() -> Check {
    let mut rng = StdRng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store_cfg = StoreConfig {
        dir: Some(dir.path().to_path_buf()),
        label_timeout: None,
    };
    let mut variants = BTreeMap::new();
    for n in 0..REPLAY_SESSIONS {
        let cfg = random_run_config(&mut rng);
        *variants.entry(cfg.driver.variant.name()).or_insert(0) += 1;
        let doc = serde_json::to_string(&cfg).map_err(|e| e.to_string())?;

        let batch_run = || -> Result<String, String> {
            let problem = core(cfg.build_problem(None))?;
            let r = core(run(&problem, cfg.driver.clone(), &mut SimulatedExpert::new(cfg.expert_or_default())))?;
            Ok(trace_to_jsonl(&r.trace))
        };
        let reference = batch_run()?;
        ensure(batch_run()? == reference, || format!("session {n}: rerun differs"))?;

        // Same session through the service, restarting it from disk between batches.
        let id = SessionStore::open(store_cfg.clone())
            .and_then(|s| s.create(&doc).map(|h| h.id().to_string()))
            .map_err(|e| e.to_string())?;
        let mut restarts = 0;
        loop {
            let store = SessionStore::open(store_cfg.clone()).map_err(|e| e.to_string())?;
            let h = store.get(&id).map_err(|e| e.to_string())?;
            if h.view().phase == Phase::Done {
                break;
            }
            h.auto_advance(rng.random_range(1..=3)).map_err(|e| e.to_string())?;
            restarts += 1;
            ensure(restarts < 1000, || "session never finished".into())?;
        }
        let session_dir = dir.path().join(&id);
        let served = std::fs::read_to_string(session_dir.join("trace.jsonl")).map_err(|e| e.to_string())?;
        ensure(served == reference, || format!("session {n} ({id}): service trace differs from rerun"))?;

        let log = read_log(&session_dir.join("events.jsonl")).map_err(|e| e.to_string())?;
        let folded = pairtune_service::fold(&log).map_err(|e| e.to_string())?;
        ensure(trace_to_jsonl(folded.session.trace()) == reference, || {
            format!("session {n} ({id}): refolded trace differs")
        })?;
    }
    Ok(format!(
        "{REPLAY_SESSIONS} sessions byte-identical across rerun, restarted service and refold; variants {variants:?}"
    ))
}

// ------------------------------------------------------------------ main

struct Criterion {
    name: &'static str,
    limit: Duration,
    check: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "formula-exactness",
            limit: Duration::from_secs(10),
            check: formula_exactness,
        },
        Criterion {
            name: "query-selection-oracle",
            limit: Duration::from_secs(60),
            check: query_selection_oracle,
        },
        Criterion {
            name: "driver-arithmetic",
            limit: Duration::from_secs(5 * 60),
            check: driver_arithmetic,
        },
        Criterion {
            name: "svm-reference",
            limit: Duration::from_secs(2 * 60),
            check: svm_reference,
        },
        Criterion {
            name: "ablation-trend",
            limit: Duration::from_secs(30 * 60),
            check: ablation_trend,
        },
        Criterion {
            name: "pseudolabel-reliability",
            limit: Duration::from_secs(10 * 60),
            check: pseudolabel_reliability,
        },
        Criterion {
            name: "expert-sensitivity",
            limit: Duration::from_secs(30 * 60),
            check: expert_sensitivity,
        },
        Criterion {
            name: "tuning-reduction",
            limit: Duration::from_secs(20 * 60),
            check: tuning_reduction,
        },
        Criterion {
            name: "determinism-and-replay",
            limit: Duration::from_secs(10 * 60),
            check: determinism_and_replay,
        },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(msg) if elapsed > c.limit => Err(format!("{msg}; exceeded the {}s limit", c.limit.as_secs())),
            other => other,
        };
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} {:<24} {:>8.1}s  {msg}", c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
