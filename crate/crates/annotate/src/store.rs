//! The service state behind a single writer, persisted as an append-only
//! event log plus periodic snapshots.
//!
//! `events.jsonl` holds one [`LogLine`] per accepted mutation and is never
//! rewritten. `snapshot.json` holds the compacted state after the first
//! `seq` events; on open the snapshot is restored and later events replayed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use fluentcap::corpus::{BilingualExample, FluencyExample};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::eval::{
    EvalEvent, EvalItem, EvalProgress, EvalSet, EvalState, RatingAck, RatingRecord,
    RatingSubmission, SystemReport,
};
use crate::grading::{
    Assignment, GradeRecord, GradeSubmission, GradingEvent, GradingProgress, GradingState,
};

pub const EVENT_LOG: &str = "events.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Grading(GradingEvent),
    Eval(EvalEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub seq: u64,
    pub at: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    assignments: Vec<(String, String)>,
    grades: Vec<GradeRecord>,
    served: Vec<(String, String)>,
    ratings: Vec<RatingRecord>,
}

#[derive(Debug, Clone)]
pub struct State {
    pub grading: GradingState,
    pub eval: EvalState,
}

impl State {
    fn apply(&mut self, event: &Event) -> ServiceResult<()> {
        match event {
            Event::Grading(e) => self.grading.apply(e),
            Event::Eval(e) => self.eval.apply(e),
        }
    }

    fn snapshot(&self, seq: u64) -> Snapshot {
        let own = |(a, b): (&str, &str)| (a.to_string(), b.to_string());
        Snapshot {
            seq,
            assignments: self.grading.assignments().map(own).collect(),
            grades: self.grading.grades().cloned().collect(),
            served: self.eval.served().map(own).collect(),
            ratings: self.eval.records().to_vec(),
        }
    }

    fn restore(&mut self, snap: &Snapshot) -> ServiceResult<()> {
        for (sentence_id, annotator) in &snap.assignments {
            self.apply(&Event::Grading(GradingEvent::Assigned {
                sentence_id: sentence_id.clone(),
                annotator: annotator.clone(),
            }))?;
        }
        for g in &snap.grades {
            self.apply(&Event::Grading(GradingEvent::Graded(g.clone())))?;
        }
        for (image_id, rater) in &snap.served {
            self.apply(&Event::Eval(EvalEvent::Served {
                image_id: image_id.clone(),
                rater: rater.clone(),
            }))?;
        }
        for group in snap
            .ratings
            .chunk_by(|a, b| a.image_id == b.image_id && a.rater == b.rater)
        {
            self.apply(&Event::Eval(EvalEvent::Rated {
                records: group.to_vec(),
            }))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub items: Vec<BilingualExample>,
    pub annotators: Vec<String>,
    pub eval: EvalSet,
    pub raters: Vec<String>,
    pub seed: u64,
    /// Directory for the event log and snapshots; `None` keeps state in memory.
    pub data_dir: Option<PathBuf>,
    pub snapshot_every: u64,
}

struct Journal {
    dir: PathBuf,
    log: File,
    snapshot_every: u64,
}

impl Journal {
    fn log_path(&self) -> PathBuf {
        self.dir.join(EVENT_LOG)
    }

    fn append(&mut self, line: &LogLine) -> ServiceResult<()> {
        let path = self.log_path();
        let mut text = serde_json::to_string(line).expect("log lines serialize");
        text.push('\n');
        self.log
            .write_all(text.as_bytes())
            .and_then(|()| self.log.sync_data())
            .map_err(|e| ServiceError::io(&path, e))
    }

    fn write_snapshot(&self, snap: &Snapshot) -> ServiceResult<()> {
        let path = self.dir.join(SNAPSHOT);
        let tmp = self.dir.join(format!("{SNAPSHOT}.tmp"));
        let text = serde_json::to_string(snap).expect("snapshots serialize");
        fs::write(&tmp, text).map_err(|e| ServiceError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| ServiceError::io(&path, e))
    }
}

struct Writer {
    state: State,
    seq: u64,
    journal: Option<Journal>,
}

/// The annotation service. Mutations are serialized through one writer;
/// readers clone the most recently published state without waiting on it.
pub struct Service {
    writer: Mutex<Writer>,
    published: RwLock<Arc<State>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads the log, dropping a final line torn by a crash mid-write.
fn read_log(path: &Path) -> ServiceResult<Vec<LogLine>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::io(path, e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, raw) in lines.iter().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogLine>(raw) {
            Ok(l) => out.push(l),
            Err(_) if i + 1 == lines.len() && !complete => {
                let keep = text.len() - raw.len();
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| ServiceError::io(path, e))?;
                f.set_len(keep as u64)
                    .map_err(|e| ServiceError::io(path, e))?;
            }
            Err(e) => {
                return Err(ServiceError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl Service {
    pub fn open(cfg: ServiceConfig) -> ServiceResult<Self> {
        let mut state = State {
            grading: GradingState::new(cfg.items, cfg.annotators)?,
            eval: EvalState::new(cfg.eval, cfg.raters, cfg.seed)?,
        };
        let mut seq = 0;
        let journal = match cfg.data_dir {
            None => None,
            Some(dir) => {
                fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
                let snap_path = dir.join(SNAPSHOT);
                if snap_path.exists() {
                    let text = fs::read_to_string(&snap_path)
                        .map_err(|e| ServiceError::io(&snap_path, e))?;
                    let snap: Snapshot =
                        serde_json::from_str(&text).map_err(|e| ServiceError::Corrupt {
                            path: snap_path.clone(),
                            line: e.line(),
                            message: e.to_string(),
                        })?;
                    state.restore(&snap)?;
                    seq = snap.seq;
                }
                let log_path = dir.join(EVENT_LOG);
                for line in read_log(&log_path)? {
                    if line.seq <= seq {
                        continue;
                    }
                    if line.seq != seq + 1 {
                        return Err(ServiceError::Corrupt {
                            path: log_path,
                            line: line.seq as usize,
                            message: format!("expected event {} next", seq + 1),
                        });
                    }
                    state.apply(&line.event)?;
                    seq = line.seq;
                }
                let log = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&log_path)
                    .map_err(|e| ServiceError::io(&log_path, e))?;
                Some(Journal {
                    dir,
                    log,
                    snapshot_every: cfg.snapshot_every.max(1),
                })
            }
        };
        let published = RwLock::new(Arc::new(state.clone()));
        Ok(Service {
            writer: Mutex::new(Writer {
                state,
                seq,
                journal,
            }),
            published,
        })
    }

    pub fn in_memory(
        items: Vec<BilingualExample>,
        annotators: Vec<String>,
        eval: EvalSet,
        raters: Vec<String>,
        seed: u64,
    ) -> ServiceResult<Self> {
        Self::open(ServiceConfig {
            items,
            annotators,
            eval,
            raters,
            seed,
            data_dir: None,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        })
    }

    /// The latest committed state.
    pub fn snapshot(&self) -> Arc<State> {
        self.published.read().expect("published state lock").clone()
    }

    /// Plans against the writer's state, then logs and applies the event.
    fn commit<T>(
        &self,
        plan: impl FnOnce(&State, u64) -> ServiceResult<(T, Option<Event>)>,
    ) -> ServiceResult<T> {
        let mut w = self.writer.lock().expect("writer lock");
        let at = now_ms();
        let (out, event) = plan(&w.state, at)?;
        let Some(event) = event else {
            return Ok(out);
        };
        let mut next = w.state.clone();
        next.apply(&event)?;
        let seq = w.seq + 1;
        if let Some(j) = w.journal.as_mut() {
            j.append(&LogLine { seq, at, event })?;
            if seq.is_multiple_of(j.snapshot_every) {
                j.write_snapshot(&next.snapshot(seq))?;
            }
        }
        w.seq = seq;
        *self.published.write().expect("published state lock") = Arc::new(next.clone());
        w.state = next;
        Ok(out)
    }

    pub fn next_assignment(&self, annotator: &str) -> ServiceResult<Option<Assignment>> {
        self.commit(|s, _| {
            Ok(match s.grading.plan_assignment(annotator)? {
                None => (None, None),
                Some((a, ev)) => (Some(a), ev.map(Event::Grading)),
            })
        })
    }

    pub fn submit_grade(&self, sub: &GradeSubmission) -> ServiceResult<GradeRecord> {
        self.commit(|s, at| {
            let (rec, ev) = s.grading.plan_grade(sub, at)?;
            Ok((rec, ev.map(Event::Grading)))
        })
    }

    pub fn next_eval_item(&self, rater: &str) -> ServiceResult<Option<EvalItem>> {
        self.commit(|s, _| {
            Ok(match s.eval.plan_item(rater)? {
                None => (None, None),
                Some((item, ev)) => (Some(item), ev.map(Event::Eval)),
            })
        })
    }

    pub fn submit_rating(&self, sub: &RatingSubmission) -> ServiceResult<RatingAck> {
        self.commit(|s, _| {
            let (ack, ev) = s.eval.plan_rating(sub)?;
            Ok((ack, ev.map(Event::Eval)))
        })
    }

    pub fn consensus_export(&self) -> Vec<FluencyExample> {
        self.snapshot().grading.consensus_export()
    }

    pub fn report(&self) -> Vec<SystemReport> {
        self.snapshot().eval.report()
    }

    pub fn progress(&self) -> Progress {
        let s = self.snapshot();
        Progress {
            grading: s.grading.progress(),
            eval: s.eval.progress(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub grading: GradingProgress,
    pub eval: EvalProgress,
}
