//! Session driver: initial measurements, AL/SSL alternation and the trace.

mod config;
mod session;

use std::sync::Arc;

use rand::seq::SliceRandom;

pub use config::{Budgets, DriverConfig, Plan, Variant};
pub use session::{
    trace_to_jsonl, AnswerStatus, BatchKind, Ledger, PendingBatch, PendingQuery, Problem, Progress, Session,
    SessionResult, TraceRecord,
};

use crate::error::{Error, Result};
use crate::metrics::{build_test_suite, TestSuite};
use crate::oracle::{DatasetOracle, ExpertAnswer, SimulatedExpert, SyntheticOracle, SyntheticSurfaceSpec};
use crate::pairs::PairKey;
use crate::rng;
use crate::space::{sample_uniform, ConfigSpace, Configuration};

/// A pair put to the expert.
#[derive(Debug, Clone)]
pub struct Query {
    pub key: PairKey,
    pub iteration: usize,
    pub left: Configuration,
    pub right: Configuration,
}

/// Anything that can answer comparison queries. `truth` is the ground-truth
/// label, available to simulated experts only. `None` means the expert gave
/// up (a timeout), which suspends the session.
pub trait Expert {
    fn respond(&mut self, query: &Query, truth: bool) -> Option<ExpertAnswer>;
}

impl Expert for SimulatedExpert {
    fn respond(&mut self, _query: &Query, truth: bool) -> Option<ExpertAnswer> {
        Some(self.answer(truth))
    }
}

/// Always answers with the ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectExpert;

impl Expert for PerfectExpert {
    fn respond(&mut self, _query: &Query, truth: bool) -> Option<ExpertAnswer> {
        Some(ExpertAnswer::from_label(truth))
    }
}

impl Problem {
    /// Candidates drawn uniformly from `space`, plus `test_n` held-out
    /// configurations (0 disables the test suite).
    pub fn synthetic(
        space: ConfigSpace,
        spec: SyntheticSurfaceSpec,
        candidates: usize,
        test_n: usize,
        seed: u64,
    ) -> Result<Self> {
        let oracle = SyntheticOracle::new(space.clone(), spec, 0.0)?;
        let configs = sample_uniform(&space, candidates, rng::derive_seed(seed, "candidates", 0))?;
        let test_suite = if test_n > 0 {
            Some(Arc::new(build_test_suite(
                &oracle,
                &space,
                test_n,
                rng::derive_seed(seed, "test_suite", 0),
                &configs,
            )?))
        } else {
            None
        };
        Ok(Self {
            space,
            oracle: Arc::new(oracle),
            candidates: configs,
            test_suite,
        })
    }

    /// Splits dataset rows after a seeded shuffle: the first `test_n` rows
    /// become the held-out suite, up to `candidates` of the rest are candidates.
    pub fn from_dataset(oracle: DatasetOracle, candidates: Option<usize>, test_n: usize, seed: u64) -> Result<Self> {
        let mut rows = oracle.configurations().to_vec();
        rows.shuffle(&mut rng::stream(seed, "dataset_split", 0));
        if test_n == 1 || test_n + 2 > rows.len() {
            return Err(Error::validation(
                "test_suite.n",
                format!("cannot hold out {test_n} of {} rows", rows.len()),
            ));
        }
        let rest = rows.split_off(test_n);
        let mut pool = rest;
        if let Some(c) = candidates {
            pool.truncate(c);
        }
        pool.sort_by_key(|c| c.id);
        let space = oracle.space().clone();
        let test_suite = if test_n > 0 {
            rows.sort_by_key(|c| c.id);
            Some(Arc::new(TestSuite::from_configs(&oracle, &space, rows, &pool, seed)?))
        } else {
            None
        };
        Ok(Self {
            space,
            oracle: Arc::new(oracle),
            candidates: pool,
            test_suite,
        })
    }
}

/// Runs a whole session against `expert`.
pub fn run(problem: &Problem, cfg: DriverConfig, expert: &mut dyn Expert) -> Result<SessionResult> {
    let mut session = Session::start(problem, cfg)?;
    if !session.drive(expert)? {
        return Err(Error::State("the expert stopped answering".into()));
    }
    session.into_result()
}
