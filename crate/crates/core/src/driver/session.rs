//! One CM-CASL run as an explicit state machine.
//!
//! A session alternates between issuing a query batch and folding the
//! expert's answers back in. Everything between two batches (retraining,
//! prediction bookkeeping, SSL steps) happens in [`Session::advance`], so the
//! same code serves both the synchronous runner and the HTTP service.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{self, QueryBatch, QueryConfig};
use crate::comparator::{ComparatorModel, DecisionFunction, Learner};
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, TestSuite};
use crate::oracle::{resolve_abstention, ExpertAnswer, PerformanceOracle};
use crate::pairs::{build_pairs, label_of, LabelSource, PairDataset, PairKey};
use crate::rng;
use crate::space::{ConfigSpace, Configuration};
use crate::ssl::{self, LabelHistory, SelectionRule, SslConfig};

use super::config::{DriverConfig, Plan, Variant};

/// Candidate configurations, their oracle, and optional held-out fixtures.
#[derive(Clone)]
pub struct Problem {
    pub space: ConfigSpace,
    pub oracle: Arc<dyn PerformanceOracle>,
    pub candidates: Vec<Configuration>,
    pub test_suite: Option<Arc<TestSuite>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    /// AL iteration inside the `T` SSL rounds.
    Al,
    /// AL iteration after the last SSL step.
    Tail,
    /// Randomly chosen pairs (passive baseline).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub key: PairKey,
    /// `|decision|` under the model that chose the batch.
    pub distance: f64,
    pub answer: Option<ExpertAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    /// 1-based AL iteration index.
    pub iteration: usize,
    pub kind: BatchKind,
    pub queries: Vec<PendingQuery>,
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
}

impl PendingBatch {
    pub fn is_complete(&self) -> bool {
        self.queries.iter().all(|q| q.answer.is_some())
    }

    pub fn answered(&self) -> usize {
        self.queries.iter().filter(|q| q.answer.is_some()).count()
    }
}

/// Outcome of recording one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStatus {
    Recorded,
    /// The same answer was already recorded; nothing changed.
    Duplicate,
    /// The batch is now fully answered and waits for [`Session::advance`].
    BatchComplete,
}

/// One line of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceRecord {
    Init {
        variant: Variant,
        plan: Plan,
        measured: Vec<u64>,
        labeled: usize,
        unlabeled: usize,
        learner: Learner,
        fallback: bool,
        cost_s: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        held_out_ca: Option<f64>,
    },
    Query {
        iteration: usize,
        kind: BatchKind,
        pairs: Vec<PairKey>,
        distances: Vec<f64>,
        k: usize,
        cluster_sizes: Vec<usize>,
    },
    Labeled {
        iteration: usize,
        labels: Vec<bool>,
        sources: Vec<LabelSource>,
        abstentions: usize,
        labeled: usize,
        unlabeled: usize,
        retrained: bool,
        fallback: bool,
        cost_s: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        held_out_ca: Option<f64>,
    },
    Ssl {
        step: usize,
        predicted_positive: usize,
        predicted_negative: usize,
        verified_positive: usize,
        verified_negative: usize,
        pairs: Vec<PairKey>,
        labels: Vec<bool>,
        distances: Vec<f64>,
        /// Pseudolabels agreeing with ground truth; audit only.
        correct: usize,
        labeled: usize,
        unlabeled: usize,
        fallback: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        held_out_ca: Option<f64>,
    },
    Done {
        al_iterations: usize,
        ssl_steps: usize,
        tail_batches: usize,
        labels_charged: usize,
        abstentions: usize,
        pseudolabels: usize,
        pseudolabel_errors: usize,
        cost_s: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        final_ca: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        final_ra: Option<f64>,
    },
}

/// Serializes a trace as line-delimited JSON.
pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub labels_charged: usize,
    pub abstentions: usize,
    pub measurements: usize,
    pub pseudolabels: usize,
    pub pseudolabel_errors: usize,
    pub cost_s: f64,
    pub fallback_fits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub q_used: usize,
    pub q_budget: usize,
    pub al_done: usize,
    pub al_total: usize,
    pub ssl_done: usize,
    pub ssl_total: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub cost_s: f64,
    pub last_held_out_ca: Option<f64>,
}

/// Final output of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub model: ComparatorModel,
    pub trace: Vec<TraceRecord>,
    pub ledger: Ledger,
    pub al_iterations: usize,
    pub ssl_steps: usize,
    pub tail_batches: usize,
    pub final_eval: Option<Evaluation>,
}

pub struct Session {
    cfg: DriverConfig,
    plan: Plan,
    space: ConfigSpace,
    oracle: Arc<dyn PerformanceOracle>,
    configs: HashMap<u64, Configuration>,
    test_suite: Option<Arc<TestSuite>>,
    learner: Learner,
    data: PairDataset,
    model: ComparatorModel,
    history: LabelHistory,
    feature_dim: usize,
    fits: u64,
    al_done: usize,
    ssl_done: usize,
    tail_done: usize,
    pending: Option<PendingBatch>,
    ledger: Ledger,
    trace: Vec<TraceRecord>,
    last_held_out: Option<f64>,
    done: bool,
}

impl Session {
    /// Measures the initial configurations, trains the first model and issues
    /// the first query batch (or runs to completion for variants without an
    /// expert).
    pub fn start(problem: &Problem, cfg: DriverConfig) -> Result<Self> {
        cfg.validate()?;
        let initial = cfg.effective_initial_measured();
        if initial > problem.candidates.len() {
            return Err(Error::validation(
                "driver.initial_measured",
                format!("{initial} exceeds the {} candidates", problem.candidates.len()),
            ));
        }
        let initial_cost = initial as f64 * cfg.budgets.measurement_cost_s;
        if let Some(limit) = cfg.budgets.time_constraint_s {
            if initial_cost > limit {
                return Err(Error::Budget {
                    cost: initial_cost,
                    limit,
                });
            }
        }

        let mut order: Vec<usize> = (0..problem.candidates.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(cfg.seed, "initial", 0));
        let mut measured_ids: Vec<u64> = order[..initial].iter().map(|&i| problem.candidates[i].id).collect();
        measured_ids.sort_unstable();
        let mut measurements = HashMap::with_capacity(initial);
        for id in &measured_ids {
            let c = problem.candidates.iter().find(|c| c.id == *id).expect("id from candidates");
            measurements.insert(*id, problem.oracle.measure(c, 0)?.performance);
        }
        let data = build_pairs(&problem.space, &problem.candidates, &measurements)?;
        let feature_dim = 2 * problem.space.encoded_dim();
        let (learner, _grid) =
            cfg.learner
                .resolve(&data.labeled, feature_dim, rng::derive_seed(cfg.seed, "grid", 0))?;

        let mut session = Session {
            plan: cfg.plan(),
            space: problem.space.clone(),
            oracle: problem.oracle.clone(),
            configs: problem.candidates.iter().map(|c| (c.id, c.clone())).collect(),
            test_suite: problem.test_suite.clone(),
            learner,
            history: LabelHistory::new(cfg.p),
            model: ComparatorModel::Majority {
                label: false,
                dim: feature_dim,
            },
            data,
            feature_dim,
            fits: 0,
            al_done: 0,
            ssl_done: 0,
            tail_done: 0,
            pending: None,
            ledger: Ledger {
                measurements: initial,
                cost_s: initial_cost,
                ..Ledger::default()
            },
            trace: Vec::new(),
            last_held_out: None,
            done: false,
            cfg,
        };
        let fallback = session.retrain()?;
        if session.cfg.variant.verified_ssl() {
            session.record_history()?;
        }
        let held_out_ca = session.held_out()?;
        session.trace.push(TraceRecord::Init {
            variant: session.cfg.variant,
            plan: session.plan,
            measured: measured_ids,
            labeled: session.data.labeled.len(),
            unlabeled: session.data.unlabeled.len(),
            learner: session.learner.clone(),
            fallback,
            cost_s: session.ledger.cost_s,
            held_out_ca,
        });
        session.plan_next()?;
        Ok(session)
    }

    pub fn config(&self) -> &DriverConfig {
        &self.cfg
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    pub fn plan(&self) -> Plan {
        self.plan
    }

    pub fn model(&self) -> &ComparatorModel {
        &self.model
    }

    pub fn dataset(&self) -> &PairDataset {
        &self.data
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn pending(&self) -> Option<&PendingBatch> {
        self.pending.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn test_suite(&self) -> Option<&TestSuite> {
        self.test_suite.as_deref()
    }

    pub fn configuration(&self, id: u64) -> Option<&Configuration> {
        self.configs.get(&id)
    }

    pub fn progress(&self) -> Progress {
        Progress {
            q_used: self.ledger.labels_charged,
            q_budget: self.cfg.budget,
            al_done: self.al_done,
            al_total: if self.cfg.variant.uses_expert() {
                self.plan.al_iterations
            } else {
                0
            },
            ssl_done: self.ssl_done,
            ssl_total: match self.cfg.variant {
                Variant::CmCasl | Variant::AsslH | Variant::SslOnly => self.plan.ssl_steps,
                _ => 0,
            },
            labeled: self.data.labeled.len(),
            unlabeled: self.data.unlabeled.len(),
            cost_s: self.ledger.cost_s,
            last_held_out_ca: self.last_held_out,
        }
    }

    /// Ground-truth label of a pair, for simulated experts.
    pub fn truth_label(&self, key: PairKey) -> Result<bool> {
        let l = self.configs.get(&key.left).ok_or(Error::Unmeasured(key.left))?;
        let r = self.configs.get(&key.right).ok_or(Error::Unmeasured(key.right))?;
        label_of(self.oracle.truth(l)?, self.oracle.truth(r)?)
    }

    /// Records the expert's answer to one pending query.
    pub fn answer(&mut self, key: PairKey, answer: ExpertAnswer) -> Result<AnswerStatus> {
        let batch = self
            .pending
            .as_mut()
            .ok_or_else(|| Error::State("no query batch is pending".into()))?;
        let q = batch
            .queries
            .iter_mut()
            .find(|q| q.key == key)
            .ok_or_else(|| Error::State(format!("pair ({}, {}) is not pending", key.left, key.right)))?;
        match q.answer {
            Some(prev) if prev == answer => return Ok(AnswerStatus::Duplicate),
            Some(prev) => {
                return Err(Error::State(format!(
                    "pair ({}, {}) was already answered with {prev:?}",
                    key.left, key.right
                )))
            }
            None => q.answer = Some(answer),
        }
        Ok(if batch.is_complete() {
            AnswerStatus::BatchComplete
        } else {
            AnswerStatus::Recorded
        })
    }

    /// Folds a completely answered batch into S_L, retrains, runs a due SSL
    /// step, and issues the next batch (or finishes).
    pub fn advance(&mut self) -> Result<()> {
        let batch = match &self.pending {
            Some(b) if b.is_complete() => self.pending.take().expect("checked"),
            Some(_) => return Err(Error::State("the pending batch is not fully answered".into())),
            None => return Err(Error::State("no query batch is pending".into())),
        };
        let mut labels = Vec::with_capacity(batch.queries.len());
        let mut sources = Vec::with_capacity(batch.queries.len());
        let mut abstentions = 0;
        for q in &batch.queries {
            match q.answer.and_then(ExpertAnswer::label) {
                Some(l) => {
                    labels.push((q.key, l));
                    sources.push(LabelSource::Expert);
                }
                None => {
                    let left = &self.configs[&q.key.left];
                    let right = &self.configs[&q.key.right];
                    let replicate = 1 + self.ledger.abstentions as u64;
                    let (l, _, _) = resolve_abstention(self.oracle.as_ref(), left, right, replicate)?;
                    self.ledger.abstentions += 1;
                    self.ledger.measurements += 2;
                    self.ledger.cost_s += 2.0 * self.cfg.budgets.measurement_cost_s;
                    abstentions += 1;
                    labels.push((q.key, l));
                    sources.push(LabelSource::Measured);
                }
            }
        }
        self.ledger.labels_charged += batch.queries.len();
        self.ledger.cost_s += batch.queries.len() as f64 * self.cfg.budgets.label_cost_s;

        // Expert answers and measurement-resolved abstentions keep their own source.
        let (expert, measured): (Vec<_>, Vec<_>) = labels
            .iter()
            .zip(&sources)
            .partition(|(_, s)| **s == LabelSource::Expert);
        let expert: Vec<(PairKey, bool)> = expert.into_iter().map(|(l, _)| *l).collect();
        let measured: Vec<(PairKey, bool)> = measured.into_iter().map(|(l, _)| *l).collect();
        self.data.transfer(&expert, LabelSource::Expert)?;
        self.data.transfer(&measured, LabelSource::Measured)?;
        // Restore batch order inside S_L so the trace and training are order-stable.
        let start = self.data.labeled.len() - labels.len();
        let order: HashMap<PairKey, usize> = labels.iter().enumerate().map(|(i, (k, _))| (*k, i)).collect();
        self.data.labeled[start..].sort_by_key(|s| order[&s.key()]);

        self.al_done += 1;
        if batch.kind == BatchKind::Tail {
            self.tail_done += 1;
        }

        let random = batch.kind == BatchKind::Random;
        let last_random = random && (self.al_done == self.plan.al_iterations || self.data.unlabeled.is_empty());
        let retrain = !random || last_random;
        let fallback = if retrain { self.retrain()? } else { false };
        if retrain && self.cfg.variant.verified_ssl() {
            self.record_history()?;
        }
        let held_out_ca = if retrain { self.held_out()? } else { None };
        self.trace.push(TraceRecord::Labeled {
            iteration: batch.iteration,
            labels: labels.iter().map(|l| l.1).collect(),
            sources,
            abstentions,
            labeled: self.data.labeled.len(),
            unlabeled: self.data.unlabeled.len(),
            retrained: retrain,
            fallback,
            cost_s: self.ledger.cost_s,
            held_out_ca,
        });

        if self.cfg.variant.verified_ssl()
            && self.ssl_done < self.plan.ssl_steps
            && self.al_done == self.cfg.p * (self.ssl_done + 1)
        {
            self.ssl_step()?;
        }
        self.plan_next()
    }

    /// Answers every pending batch with `expert` until the session finishes or
    /// the expert gives up. Returns `false` if it stopped early.
    pub fn drive(&mut self, expert: &mut dyn super::Expert) -> Result<bool> {
        while let Some(batch) = &self.pending {
            let open: Vec<PairKey> = batch
                .queries
                .iter()
                .filter(|q| q.answer.is_none())
                .map(|q| q.key)
                .collect();
            let iteration = batch.iteration;
            for key in open {
                let query = super::Query {
                    key,
                    iteration,
                    left: self.configs[&key.left].clone(),
                    right: self.configs[&key.right].clone(),
                };
                let truth = self.truth_label(key)?;
                match expert.respond(&query, truth) {
                    Some(a) => {
                        self.answer(key, a)?;
                    }
                    None => return Ok(false),
                }
            }
            self.advance()?;
        }
        Ok(true)
    }

    pub fn into_result(self) -> Result<SessionResult> {
        if !self.done {
            return Err(Error::State("session has not finished".into()));
        }
        let final_eval = match &self.test_suite {
            Some(s) => Some(s.evaluate(&self.model, &self.space)?),
            None => None,
        };
        Ok(SessionResult {
            model: self.model,
            trace: self.trace,
            ledger: self.ledger,
            al_iterations: self.al_done,
            ssl_steps: self.ssl_done,
            tail_batches: self.tail_done,
            final_eval,
        })
    }

    fn retrain(&mut self) -> Result<bool> {
        let seed = rng::derive_seed(self.cfg.seed, "fit", self.fits);
        self.fits += 1;
        let (model, fallback) = self
            .learner
            .fit_or_fallback(&self.data.labeled, self.feature_dim, seed)?;
        if fallback {
            self.ledger.fallback_fits += 1;
        }
        self.model = model;
        Ok(fallback)
    }

    fn unlabeled_decisions(&self) -> Result<Vec<f64>> {
        let model = &self.model;
        self.data
            .unlabeled
            .par_iter()
            .map(|s| model.decision(&s.features))
            .collect()
    }

    fn record_history(&mut self) -> Result<()> {
        let d = self.unlabeled_decisions()?;
        self.history.record_decisions(&self.data.unlabeled, &d);
        Ok(())
    }

    fn held_out(&mut self) -> Result<Option<f64>> {
        if !self.cfg.track_held_out {
            return Ok(None);
        }
        let ca = match &self.test_suite {
            Some(s) => Some(s.accuracy(&self.model)?),
            None => None,
        };
        self.last_held_out = ca;
        Ok(ca)
    }

    fn ssl_step(&mut self) -> Result<()> {
        let decisions = self.unlabeled_decisions()?;
        let cfg = SslConfig {
            p: self.cfg.p,
            t: self.cfg.t,
        };
        let selection = match self.cfg.variant {
            Variant::SslOnly => ssl::most_confident(&self.data.unlabeled, &decisions, self.cfg.t),
            Variant::AsslH => {
                ssl::assign_pseudolabels(&self.data.unlabeled, &decisions, &self.history, &cfg, SelectionRule::Farthest)?
            }
            _ => ssl::assign_pseudolabels(&self.data.unlabeled, &decisions, &self.history, &cfg, SelectionRule::Median)?,
        };
        self.ssl_done += 1;
        let labels = selection.labels();
        let mut correct = 0;
        for (k, l) in &labels {
            if self.truth_label(*k)? == *l {
                correct += 1;
            }
        }
        let mut fallback = false;
        let mut held_out_ca = None;
        if !labels.is_empty() {
            self.data.transfer(&labels, LabelSource::Pseudo)?;
            self.ledger.pseudolabels += labels.len();
            self.ledger.pseudolabel_errors += labels.len() - correct;
            fallback = self.retrain()?;
            held_out_ca = self.held_out()?;
        }
        if self.cfg.variant.verified_ssl() {
            // Seeds the next verification window.
            self.record_history()?;
        }
        let distances = selection
            .positives
            .iter()
            .chain(&selection.negatives)
            .map(|p| p.1)
            .collect();
        self.trace.push(TraceRecord::Ssl {
            step: self.ssl_done,
            predicted_positive: selection.predicted_positive,
            predicted_negative: selection.predicted_negative,
            verified_positive: selection.verified_positive,
            verified_negative: selection.verified_negative,
            pairs: labels.iter().map(|l| l.0).collect(),
            labels: labels.iter().map(|l| l.1).collect(),
            distances,
            correct,
            labeled: self.data.labeled.len(),
            unlabeled: self.data.unlabeled.len(),
            fallback,
            held_out_ca,
        });
        Ok(())
    }

    /// Issues the next batch, or finishes the session.
    fn plan_next(&mut self) -> Result<()> {
        if self.cfg.variant == Variant::SslOnly {
            while self.ssl_done < self.plan.ssl_steps && !self.data.unlabeled.is_empty() {
                self.ssl_step()?;
            }
            return self.finish();
        }
        if self.al_done >= self.plan.al_iterations || self.data.unlabeled.is_empty() {
            return self.finish();
        }
        let iteration = self.al_done + 1;
        let kind = match self.cfg.variant {
            Variant::PassiveSvm => BatchKind::Random,
            _ if self.cfg.variant.verified_ssl() && iteration > self.cfg.p * self.plan.ssl_steps => {
                BatchKind::Tail
            }
            _ => BatchKind::Al,
        };
        let batch: QueryBatch = match self.cfg.variant {
            Variant::PassiveSvm => active::select_random(
                &self.data.unlabeled,
                self.cfg.q,
                rng::derive_seed(self.cfg.seed, "passive", iteration as u64),
            )?,
            Variant::AlI => active::select_uncertain(&self.model, &self.data.unlabeled, self.cfg.q)?,
            _ => {
                let qc = QueryConfig {
                    q: self.cfg.q,
                    n: self.cfg.n,
                    kmeans_max_iter: self.cfg.kmeans_max_iter,
                    seed: rng::derive_seed(self.cfg.seed, "kmeans", iteration as u64),
                };
                active::select_queries(&self.model, &self.data.unlabeled, &qc)?
            }
        };
        self.trace.push(TraceRecord::Query {
            iteration,
            kind,
            pairs: batch.selected.clone(),
            distances: batch.distances.clone(),
            k: batch.k,
            cluster_sizes: batch.cluster_sizes.clone(),
        });
        self.pending = Some(PendingBatch {
            iteration,
            kind,
            queries: batch
                .selected
                .iter()
                .zip(&batch.distances)
                .map(|(k, d)| PendingQuery {
                    key: *k,
                    distance: *d,
                    answer: None,
                })
                .collect(),
            k: batch.k,
            cluster_sizes: batch.cluster_sizes,
        });
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if self.done {
            return Ok(());
        }
        self.done = true;
        let final_eval = match &self.test_suite {
            Some(s) => Some(s.evaluate(&self.model, &self.space)?),
            None => None,
        };
        self.trace.push(TraceRecord::Done {
            al_iterations: self.al_done,
            ssl_steps: self.ssl_done,
            tail_batches: self.tail_done,
            labels_charged: self.ledger.labels_charged,
            abstentions: self.ledger.abstentions,
            pseudolabels: self.ledger.pseudolabels,
            pseudolabel_errors: self.ledger.pseudolabel_errors,
            cost_s: self.ledger.cost_s,
            final_ca: final_eval.map(|e| e.ca),
            final_ra: final_eval.map(|e| e.ra),
        });
        Ok(())
    }
}
