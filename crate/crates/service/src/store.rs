//! Session store backed by one append-only JSON-lines event log per session.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::protocol::TrialSpec;
use crate::session::{ScreeningSession, SessionError, SessionSummary, Thresholds, TrialRecord};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created {
        session_id: String,
        seed: u64,
        trials_per_test: usize,
        trials: Vec<TrialSpec>,
    },
    Response {
        record: TrialRecord,
    },
}

type Shared = Arc<Mutex<ScreeningSession>>;

pub struct SessionStore {
    dir: PathBuf,
    thresholds: Thresholds,
    sessions: Mutex<HashMap<String, Shared>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl SessionStore {
    /// Open `dir` (created if missing) and replay every session log in it.
    pub fn open(dir: &Path, thresholds: Thresholds) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut logs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        let mut sessions = HashMap::new();
        for path in logs {
            let s = replay(&path, &thresholds)?;
            sessions.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(SessionStore {
            dir: dir.to_path_buf(),
            thresholds,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn log_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    fn append(&self, session_id: &str, event: &Event) -> Result<(), StoreError> {
        let path = self.log_path(session_id);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let line = serde_json::to_string(event).expect("event serializes") + "\n";
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))
    }

    fn get(&self, session_id: &str) -> Result<Shared, StoreError> {
        self.sessions
            .lock()
            .expect("store lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()).into())
    }

    pub fn create(&self, trials_per_test: usize, seed: u64) -> Result<ScreeningSession, StoreError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = ScreeningSession::new(id.clone(), trials_per_test, seed)?;
        self.append(
            &id,
            &Event::Created {
                session_id: id.clone(),
                seed,
                trials_per_test,
                trials: session.trials.clone(),
            },
        )?;
        self.sessions
            .lock()
            .expect("store lock")
            .insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    /// A copy of the current session state.
    pub fn snapshot(&self, session_id: &str) -> Result<ScreeningSession, StoreError> {
        Ok(self.get(session_id)?.lock().expect("session lock").clone())
    }

    /// Validate, persist, then apply a response; the session stays locked
    /// throughout so responses to one session are serialized.
    pub fn respond(
        &self,
        session_id: &str,
        trial_id: &str,
        response: &str,
        stimulus_onset_ms: f64,
        response_ms: f64,
    ) -> Result<TrialRecord, StoreError> {
        let shared = self.get(session_id)?;
        let mut session = shared.lock().expect("session lock");
        let record = session.check_response(trial_id, response, stimulus_onset_ms, response_ms, &self.thresholds)?;
        self.append(session_id, &Event::Response { record: record.clone() })?;
        session.apply(record.clone());
        Ok(record)
    }

    pub fn summary(&self, session_id: &str) -> Result<SessionSummary, StoreError> {
        Ok(self.get(session_id)?.lock().expect("session lock").summary(&self.thresholds)?)
    }
}

fn replay(path: &Path, thresholds: &Thresholds) -> Result<ScreeningSession, StoreError> {
    let reader = BufReader::new(File::open(path).map_err(io(path))?);
    let corrupt = |line: usize, message: String| StoreError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut session: Option<ScreeningSession> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        match (event, session.as_mut()) {
            (
                Event::Created {
                    session_id,
                    seed,
                    trials_per_test,
                    trials,
                },
                None,
            ) => {
                let mut s = ScreeningSession::new(session_id, trials_per_test, seed)?;
                if s.trials != trials {
                    return Err(corrupt(i + 1, "stored trials differ from the seeded sequence".into()));
                }
                s.trials = trials;
                session = Some(s);
            }
            (Event::Response { record }, Some(s)) => {
                let checked = s
                    .check_response(&record.trial_id, &String::from(record.response), record.stimulus_onset_ms, record.response_ms, thresholds)
                    .map_err(|e| corrupt(i + 1, e.to_string()))?;
                if checked != record {
                    return Err(corrupt(i + 1, "stored record does not re-score identically".into()));
                }
                s.apply(record);
            }
            (Event::Created { .. }, Some(_)) => return Err(corrupt(i + 1, "second creation event".into())),
            (Event::Response { .. }, None) => return Err(corrupt(i + 1, "response before creation".into())),
        }
    }
    session.ok_or_else(|| corrupt(0, "empty log".into()))
}
