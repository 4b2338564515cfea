//! Append-only per-session event log and the fold that rebuilds a session.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use pairtune_core::driver::{Session, TraceRecord};
use pairtune_core::oracle::ExpertAnswer;
use pairtune_core::pairs::PairKey;
use pairtune_core::runconfig::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRef {
    pub query_id: String,
    pub left: u64,
    pub right: u64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        config: Box<RunConfig>,
    },
    Measured {
        configuration_ids: Vec<u64>,
        cost_s: f64,
    },
    Queried {
        iteration: usize,
        queries: Vec<QueryRef>,
    },
    Labeled {
        query_id: String,
        answer: ExpertAnswer,
        /// Answered by the simulated expert rather than a person.
        simulated: bool,
    },
    Retrained {
        iteration: usize,
        labeled: usize,
        unlabeled: usize,
        fallback: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        held_out_ca: Option<f64>,
    },
    Pseudolabeled {
        step: usize,
        count: usize,
        verified_positive: usize,
        verified_negative: usize,
    },
    Suspended {
        reason: String,
    },
    Resumed,
    Done {
        labels_charged: usize,
        pseudolabels: usize,
        cost_s: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_ca: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_ra: Option<f64>,
    },
}

impl Event {
    /// Events that are recomputed by the fold rather than replayed.
    pub fn is_derived(&self) -> bool {
        matches!(
            self,
            Event::Measured { .. }
                | Event::Queried { .. }
                | Event::Retrained { .. }
                | Event::Pseudolabeled { .. }
                | Event::Done { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    #[serde(with = "utc_millis")]
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: Event,
}

mod utc_millis {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

/// Query id of the `index`-th pair of AL iteration `iteration`.
pub fn query_id(iteration: usize, index: usize) -> String {
    format!("q{iteration}-{index}")
}

/// Events implied by new trace records.
pub fn derived_events(records: &[TraceRecord]) -> Vec<Event> {
    let mut out = Vec::new();
    for r in records {
        match r {
            TraceRecord::Init {
                measured,
                cost_s,
                labeled,
                unlabeled,
                fallback,
                held_out_ca,
                ..
            } => {
                out.push(Event::Measured {
                    configuration_ids: measured.clone(),
                    cost_s: *cost_s,
                });
                out.push(Event::Retrained {
                    iteration: 0,
                    labeled: *labeled,
                    unlabeled: *unlabeled,
                    fallback: *fallback,
                    held_out_ca: *held_out_ca,
                });
            }
            TraceRecord::Query {
                iteration,
                pairs,
                distances,
                ..
            } => out.push(Event::Queried {
                iteration: *iteration,
                queries: pairs
                    .iter()
                    .zip(distances)
                    .enumerate()
                    .map(|(i, (k, d))| QueryRef {
                        query_id: query_id(*iteration, i),
                        left: k.left,
                        right: k.right,
                        distance: *d,
                    })
                    .collect(),
            }),
            TraceRecord::Labeled {
                iteration,
                labeled,
                unlabeled,
                retrained: true,
                fallback,
                held_out_ca,
                ..
            } => out.push(Event::Retrained {
                iteration: *iteration,
                labeled: *labeled,
                unlabeled: *unlabeled,
                fallback: *fallback,
                held_out_ca: *held_out_ca,
            }),
            TraceRecord::Labeled { .. } => {}
            TraceRecord::Ssl {
                step,
                pairs,
                verified_positive,
                verified_negative,
                ..
            } => out.push(Event::Pseudolabeled {
                step: *step,
                count: pairs.len(),
                verified_positive: *verified_positive,
                verified_negative: *verified_negative,
            }),
            TraceRecord::Done {
                labels_charged,
                pseudolabels,
                cost_s,
                final_ca,
                final_ra,
                ..
            } => out.push(Event::Done {
                labels_charged: *labels_charged,
                pseudolabels: *pseudolabels,
                cost_s: *cost_s,
                final_ca: *final_ca,
                final_ra: *final_ra,
            }),
        }
    }
    out
}

/// Event sink: a JSONL file, or memory only.
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            records: Vec::new(),
        }
    }

    pub fn create(path: &Path) -> Result<Self, ServiceError> {
        let file = OpenOptions::new().create_new(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            records: Vec::new(),
        })
    }

    /// Reopens an existing log for appending.
    pub fn reopen(path: &Path) -> Result<Self, ServiceError> {
        let records = read_log(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            records,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn append(&mut self, event: Event) -> Result<(), ServiceError> {
        let rec = LogRecord {
            seq: self.records.len() as u64,
            at: Utc::now(),
            event,
        };
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, ServiceError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Internal(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// A session rebuilt from its log.
pub struct Folded {
    pub session_id: String,
    pub config: RunConfig,
    pub session: Session,
    pub simulated_answers: u64,
    pub suspended: bool,
}

/// Rebuilds a session by replaying the creation and every answer in order;
/// derived events are recomputed and must match the log.
pub fn fold(records: &[LogRecord]) -> Result<Folded, ServiceError> {
    let Some(first) = records.first() else {
        return Err(ServiceError::Internal("empty event log".into()));
    };
    let Event::Created { session_id, config } = &first.event else {
        return Err(ServiceError::Internal("event log must start with `created`".into()));
    };
    let problem = config.build_problem(None)?;
    let mut session = Session::start(&problem, config.driver.clone())?;
    let mut simulated_answers = 0;
    let mut suspended = false;
    for rec in &records[1..] {
        match &rec.event {
            Event::Labeled {
                query_id: qid,
                answer,
                simulated,
            } => {
                let key = pending_key(&session, qid)
                    .ok_or_else(|| ServiceError::Internal(format!("replayed answer to unknown query {qid}")))?;
                session.answer(key, *answer)?;
                if *simulated {
                    simulated_answers += 1;
                }
                if session.pending().is_some_and(|b| b.is_complete()) {
                    session.advance()?;
                }
                suspended = false;
            }
            Event::Suspended { .. } => suspended = true,
            Event::Resumed => suspended = false,
            _ => {}
        }
    }
    let logged: Vec<&Event> = records.iter().map(|r| &r.event).filter(|e| e.is_derived()).collect();
    let replayed = derived_events(session.trace());
    // A crash can cut the log short of the last derived events, never ahead.
    if logged.len() > replayed.len() || logged.iter().zip(&replayed).any(|(a, b)| *a != b) {
        return Err(ServiceError::Internal(format!(
            "session {session_id}: replayed events diverge from the log"
        )));
    }
    Ok(Folded {
        session_id: session_id.clone(),
        config: (**config).clone(),
        session,
        simulated_answers,
        suspended,
    })
}

pub fn pending_key(session: &Session, qid: &str) -> Option<PairKey> {
    let batch = session.pending()?;
    batch
        .queries
        .iter()
        .enumerate()
        .find(|(i, _)| query_id(batch.iteration, *i) == qid)
        .map(|(_, q)| q.key)
}
