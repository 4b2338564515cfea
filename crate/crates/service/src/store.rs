//! Session registry, per-session single writer and lock-free status views.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use pairtune_core::comparator::ComparatorModel;
use pairtune_core::driver::{DriverConfig, Ledger, Progress, Session, TraceRecord};
use pairtune_core::metrics::Evaluation;
use pairtune_core::oracle::{expert_label, ExpertAnswer, ExpertSpec};
use pairtune_core::runconfig::{OracleSource, RunConfig};
use pairtune_core::space::ParamValue;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::events::{derived_events, fold, pending_key, query_id, Event, EventLog};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, Default)]
pub struct StoreConfig {
    /// Root directory for session logs; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    /// Idle time after which a session awaiting labels is suspended.
    pub label_timeout: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabels,
    Computing,
    SslStep,
    Done,
    Suspended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigView {
    pub id: u64,
    pub values: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuery {
    pub query_id: String,
    pub iteration: usize,
    pub left: ConfigView,
    pub right: ConfigView,
    /// Parameters whose values differ between the two sides.
    pub differing: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<ExpertAnswer>,
    pub issued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub phase: Phase,
    pub driver: DriverConfig,
    pub pending: Vec<LabelQuery>,
    pub progress: Progress,
    pub ledger: Ledger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<Evaluation>,
    pub trace: Vec<TraceRecord>,
    #[serde(skip)]
    pub model: Option<Arc<ComparatorModel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub query_id: String,
    pub answer: ExpertAnswer,
    pub batch_complete: bool,
}

struct Inner {
    session: Session,
    log: EventLog,
    dir: Option<PathBuf>,
    expert: ExpertSpec,
    simulated: u64,
    acks: HashMap<String, LabelAck>,
    issued: HashMap<usize, DateTime<Utc>>,
    emitted: usize,
    suspended: bool,
    last_activity: Instant,
}

impl Inner {
    fn append(&mut self, event: Event) -> Result<(), ServiceError> {
        let iteration = match &event {
            Event::Queried { iteration, .. } => Some(*iteration),
            _ => None,
        };
        self.log.append(event)?;
        if let Some(it) = iteration {
            let at = self.log.records().last().expect("just appended").at;
            self.issued.insert(it, at);
        }
        Ok(())
    }

    /// Logs events for trace records produced since the last call.
    fn emit(&mut self) -> Result<(), ServiceError> {
        let fresh = derived_events(&self.session.trace()[self.emitted..]);
        self.emitted = self.session.trace().len();
        for e in fresh {
            self.append(e)?;
        }
        if self.session.is_done() {
            if let Some(d) = &self.dir {
                fs::write(d.join(TRACE_FILE), pairtune_core::driver::trace_to_jsonl(self.session.trace()))?;
            }
        }
        Ok(())
    }

    fn record_answer(&mut self, qid: &str, answer: ExpertAnswer, simulated: bool) -> Result<LabelAck, ServiceError> {
        let key = pending_key(&self.session, qid).ok_or_else(|| ServiceError::Conflict(format!("query {qid} is not pending")))?;
        self.session.answer(key, answer)?;
        self.append(Event::Labeled {
            query_id: qid.to_string(),
            answer,
            simulated,
        })?;
        let ack = LabelAck {
            query_id: qid.to_string(),
            answer,
            batch_complete: self.session.pending().is_some_and(|b| b.is_complete()),
        };
        self.acks.insert(qid.to_string(), ack.clone());
        self.last_activity = Instant::now();
        Ok(ack)
    }

    fn resume(&mut self) -> Result<(), ServiceError> {
        if self.suspended {
            self.suspended = false;
            self.append(Event::Resumed)?;
            tracing::info!("session resumed");
        }
        Ok(())
    }

    fn ssl_due(&self) -> bool {
        let p = self.session.progress();
        p.ssl_done < p.ssl_total && p.al_done + 1 == self.session.config().p * (p.ssl_done + 1)
    }

    fn phase(&self) -> Phase {
        if self.session.is_done() {
            Phase::Done
        } else if self.suspended {
            Phase::Suspended
        } else {
            match self.session.pending() {
                Some(b) if !b.is_complete() => Phase::AwaitingLabels,
                _ if self.ssl_due() => Phase::SslStep,
                _ => Phase::Computing,
            }
        }
    }

    fn pending_queries(&self) -> Vec<LabelQuery> {
        let Some(batch) = self.session.pending() else {
            return Vec::new();
        };
        let space = self.session.space();
        let issued_at = self.issued.get(&batch.iteration).copied().unwrap_or_else(Utc::now);
        batch
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let side = |id: u64| {
                    let c = self.session.configuration(id).expect("queried configurations are known");
                    ConfigView {
                        id,
                        values: space
                            .parameters()
                            .iter()
                            .zip(&c.values)
                            .map(|(p, v)| (p.name.clone(), v.clone()))
                            .collect(),
                    }
                };
                let left = side(q.key.left);
                let right = side(q.key.right);
                let differing = space
                    .parameters()
                    .iter()
                    .map(|p| &p.name)
                    .filter(|n| left.values.get(*n) != right.values.get(*n))
                    .cloned()
                    .collect();
                LabelQuery {
                    query_id: query_id(batch.iteration, i),
                    iteration: batch.iteration,
                    left,
                    right,
                    differing,
                    answer: q.answer,
                    issued_at,
                }
            })
            .collect()
    }

    fn view(&self, id: &str) -> SessionView {
        let phase = self.phase();
        let done = self.session.is_done();
        let final_eval = self.session.trace().iter().rev().find_map(|r| match r {
            TraceRecord::Done {
                final_ca: Some(ca),
                final_ra: Some(ra),
                ..
            } => Some(Evaluation { ca: *ca, ra: *ra }),
            _ => None,
        });
        SessionView {
            session_id: id.to_string(),
            phase,
            driver: self.session.config().clone(),
            pending: if phase == Phase::AwaitingLabels {
                self.pending_queries()
            } else {
                Vec::new()
            },
            progress: self.session.progress(),
            ledger: *self.session.ledger(),
            final_eval,
            trace: self.session.trace().to_vec(),
            model: done.then(|| Arc::new(self.session.model().clone())),
        }
    }
}

/// One session: a mutex-guarded writer plus a published read-only view.
pub struct SessionHandle {
    id: String,
    inner: Mutex<Inner>,
    view: RwLock<Arc<SessionView>>,
}

impl SessionHandle {
    fn new(id: String, inner: Inner) -> Self {
        let view = RwLock::new(Arc::new(inner.view(&id)));
        Self {
            id,
            inner: Mutex::new(inner),
            view,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Latest published state; never waits on the writer.
    pub fn view(&self) -> Arc<SessionView> {
        self.view.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn publish(&self, inner: &Inner) {
        let v = Arc::new(inner.view(&self.id));
        if let Some(d) = &inner.dir {
            if let Err(e) = write_snapshot(d, &v) {
                tracing::warn!(session = %self.id, "snapshot failed: {e}");
            }
        }
        *self.view.write().unwrap_or_else(|e| e.into_inner()) = v;
    }

    /// Publishes the pre-advance phase so readers see `computing` during a retrain.
    fn publish_phase(&self, inner: &Inner) {
        let mut v = (*self.view()).clone();
        v.phase = inner.phase();
        v.pending.clear();
        *self.view.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(v);
    }

    /// Records an expert answer. Returns the ack and whether the batch is now
    /// complete and waiting for [`SessionHandle::complete_batch`].
    pub fn submit(&self, qid: &str, answer: ExpertAnswer) -> Result<(LabelAck, bool), ServiceError> {
        let mut inner = self.lock();
        if let Some(prev) = inner.acks.get(qid) {
            if prev.answer == answer {
                return Ok((prev.clone(), false));
            }
            return Err(ServiceError::Conflict(format!(
                "query {qid} was already answered {:?}",
                prev.answer
            )));
        }
        inner.resume()?;
        let ack = inner.record_answer(qid, answer, false)?;
        let complete = ack.batch_complete;
        if complete {
            self.publish_phase(&inner);
        } else {
            self.publish(&inner);
        }
        Ok((ack, complete))
    }

    /// Advances the driver if the pending batch is fully answered.
    pub fn complete_batch(&self) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        if inner.session.pending().is_some_and(|b| b.is_complete()) {
            inner.session.advance()?;
            inner.emit()?;
        }
        self.publish(&inner);
        Ok(())
    }

    /// Answers up to `batches` pending batches with the run's simulated expert.
    pub fn auto_advance(&self, batches: usize) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        inner.resume()?;
        for _ in 0..batches {
            let Some(batch) = inner.session.pending().cloned() else {
                break;
            };
            for (i, q) in batch.queries.iter().enumerate() {
                if q.answer.is_some() {
                    continue;
                }
                let truth = inner.session.truth_label(q.key)?;
                let answer = expert_label(&inner.expert, inner.simulated, truth);
                inner.simulated += 1;
                inner.record_answer(&query_id(batch.iteration, i), answer, true)?;
            }
            self.publish_phase(&inner);
            inner.session.advance()?;
            inner.emit()?;
        }
        self.publish(&inner);
        Ok(())
    }

    /// Serialized final model; conflict until the session is done.
    pub fn model(&self) -> Result<Arc<ComparatorModel>, ServiceError> {
        self.view()
            .model
            .clone()
            .ok_or_else(|| ServiceError::Conflict(format!("session {} is not done", self.id)))
    }

    /// Suspends the session if it has waited on labels for longer than `timeout`.
    /// Busy sessions are skipped.
    pub fn suspend_if_idle(&self, timeout: Duration) -> Result<bool, ServiceError> {
        let Ok(mut inner) = self.inner.try_lock() else {
            return Ok(false);
        };
        if inner.phase() != Phase::AwaitingLabels || inner.last_activity.elapsed() < timeout {
            return Ok(false);
        }
        inner.suspended = true;
        inner.append(Event::Suspended {
            reason: format!("no label for {}s", timeout.as_secs_f64()),
        })?;
        self.publish(&inner);
        tracing::info!(session = %self.id, "suspended after label timeout");
        Ok(true)
    }

    /// Copy of the event log.
    pub fn events(&self) -> Vec<crate::events::LogRecord> {
        self.lock().log.records().to_vec()
    }
}

fn write_snapshot(dir: &Path, view: &SessionView) -> Result<(), ServiceError> {
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(view)?)?;
    fs::rename(tmp, dir.join(SNAPSHOT_FILE))?;
    Ok(())
}

pub struct SessionStore {
    cfg: StoreConfig,
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

fn session_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl SessionStore {
    /// Opens the store, replaying every session log found under `cfg.dir`.
    pub fn open(cfg: StoreConfig) -> Result<Self, ServiceError> {
        let mut sessions = BTreeMap::new();
        let mut max = 0;
        if let Some(root) = &cfg.dir {
            fs::create_dir_all(root)?;
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(EVENTS_FILE).is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                let handle = restore(&d)?;
                max = max.max(session_number(handle.id()).unwrap_or(0));
                sessions.insert(handle.id().to_string(), Arc::new(handle));
            }
            if !sessions.is_empty() {
                tracing::info!(count = sessions.len(), "restored sessions");
            }
        }
        Ok(Self {
            cfg,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(max + 1),
        })
    }

    pub fn in_memory() -> Self {
        Self::open(StoreConfig::default()).expect("no filesystem access")
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    /// Validates a run-config document and starts a session from it.
    pub fn create(&self, doc: &str) -> Result<Arc<SessionHandle>, ServiceError> {
        self.create_from(RunConfig::from_json(doc)?)
    }

    pub fn create_from(&self, mut config: RunConfig) -> Result<Arc<SessionHandle>, ServiceError> {
        config.validate()?;
        // Logs must be self-contained, so dataset files are inlined.
        if let OracleSource::Dataset(d) = &mut config.oracle {
            if let Some(p) = d.path.take() {
                d.csv = Some(fs::read_to_string(&p).map_err(|e| ServiceError::Invalid {
                    field: Some("oracle.dataset.path".into()),
                    message: format!("{}: {e}", p.display()),
                })?);
            }
        }
        let problem = config.build_problem(None)?;
        let session = Session::start(&problem, config.driver.clone())?;

        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let (log, dir) = match &self.cfg.dir {
            Some(root) => {
                let d = root.join(&id);
                fs::create_dir_all(&d)?;
                (EventLog::create(&d.join(EVENTS_FILE))?, Some(d))
            }
            None => (EventLog::in_memory(), None),
        };
        let mut inner = Inner {
            session,
            log,
            dir,
            expert: config.expert_or_default(),
            simulated: 0,
            acks: HashMap::new(),
            issued: HashMap::new(),
            emitted: 0,
            suspended: false,
            last_activity: Instant::now(),
        };
        inner.append(Event::Created {
            session_id: id.clone(),
            config: Box::new(config),
        })?;
        inner.emit()?;
        let handle = SessionHandle::new(id.clone(), inner);
        if let Some(d) = &handle.lock().dir {
            write_snapshot(d, &handle.view())?;
        }
        let handle = Arc::new(handle);
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), handle.clone());
        tracing::info!(session = %id, "created");
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    /// Suspends idle sessions; returns how many were suspended.
    pub fn sweep_timeouts(&self) -> usize {
        let Some(timeout) = self.cfg.label_timeout else {
            return 0;
        };
        let handles: Vec<_> = self.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        handles
            .iter()
            .filter(|h| match h.suspend_if_idle(timeout) {
                Ok(s) => s,
                Err(e) => {
                    tracing::error!(session = %h.id(), "suspend failed: {e}");
                    false
                }
            })
            .count()
    }
}

/// Rebuilds a session from its directory and appends any derived events a
/// crash left unwritten.
fn restore(dir: &Path) -> Result<SessionHandle, ServiceError> {
    let log = EventLog::reopen(&dir.join(EVENTS_FILE))?;
    let folded = fold(log.records())?;
    let mut acks = HashMap::new();
    let mut issued = HashMap::new();
    let mut logged_derived = 0;
    for r in log.records() {
        match &r.event {
            Event::Labeled { query_id, answer, .. } => {
                acks.insert(
                    query_id.clone(),
                    LabelAck {
                        query_id: query_id.clone(),
                        answer: *answer,
                        batch_complete: false,
                    },
                );
            }
            Event::Queried { iteration, .. } => {
                issued.insert(*iteration, r.at);
            }
            _ => {}
        }
        if r.event.is_derived() {
            logged_derived += 1;
        }
    }
    // Batch completion is recomputed from the replayed batches.
    mark_completing_acks(log.records(), &mut acks);
    let mut inner = Inner {
        session: folded.session,
        log,
        dir: Some(dir.to_path_buf()),
        expert: folded.config.expert_or_default(),
        simulated: folded.simulated_answers,
        acks,
        issued,
        emitted: 0,
        suspended: folded.suspended,
        last_activity: Instant::now(),
    };
    let missing = derived_events(inner.session.trace()).split_off(logged_derived);
    for e in missing {
        inner.append(e)?;
    }
    inner.emitted = inner.session.trace().len();
    Ok(SessionHandle::new(folded.session_id, inner))
}

/// Sets `batch_complete` on the acks of answers that closed a batch.
fn mark_completing_acks(records: &[crate::events::LogRecord], acks: &mut HashMap<String, LabelAck>) {
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    let mut answered: HashMap<usize, usize> = HashMap::new();
    for r in records {
        match &r.event {
            Event::Queried { iteration, queries } => {
                sizes.insert(*iteration, queries.len());
            }
            Event::Labeled { query_id, .. } => {
                let Some(it) = query_id
                    .strip_prefix('q')
                    .and_then(|s| s.split('-').next())
                    .and_then(|s| s.parse::<usize>().ok())
                else {
                    continue;
                };
                let n = answered.entry(it).or_default();
                *n += 1;
                if sizes.get(&it) == Some(n) {
                    if let Some(a) = acks.get_mut(query_id) {
                        a.batch_complete = true;
                    }
                }
            }
            _ => {}
        }
    }
}
