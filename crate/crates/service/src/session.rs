//! Screening sessions: issued trials, recorded responses and scoring.

use serde::{Deserialize, Serialize};

use crate::protocol::{generate_trials, Answer, TestKind, TrialSpec};

pub const DISCLAIMER: &str = "Screening aid only, not a diagnosis. The review thresholds are operating defaults and are not clinically validated.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("bad session config: {0}")]
    BadConfig(String),
    #[error("no session {0}")]
    UnknownSession(String),
    #[error("session has no trial {0}")]
    UnknownTrial(String),
    #[error("trial {0} was already answered")]
    DuplicateResponse(String),
    #[error("reaction time {0} ms is not positive")]
    NonPositiveReactionTime(f64),
    #[error("reaction time {rt_ms} ms exceeds the {cap_ms} ms cap")]
    ImplausibleReactionTime { rt_ms: f64, cap_ms: f64 },
    #[error("response {response:?} is outside the answer domain of a {kind:?} trial")]
    OutOfDomainResponse { response: String, kind: TestKind },
    #[error("session has {remaining} unanswered trials")]
    SessionIncomplete { remaining: usize },
}

impl SessionError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::BadConfig(_) => "bad_config",
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::UnknownTrial(_) => "unknown_trial",
            SessionError::DuplicateResponse(_) => "duplicate_response",
            SessionError::NonPositiveReactionTime(_) => "non_positive_reaction_time",
            SessionError::ImplausibleReactionTime { .. } => "implausible_reaction_time",
            SessionError::OutOfDomainResponse { .. } => "out_of_domain_response",
            SessionError::SessionIncomplete { .. } => "session_incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_accuracy: f64,
    pub max_median_rt_ms: f64,
    /// Longest reaction time accepted at all.
    pub max_rt_ms: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_accuracy: 0.8,
            max_median_rt_ms: 1500.0,
            max_rt_ms: 60_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub response: Answer,
    pub correct: bool,
    pub stimulus_onset_ms: f64,
    pub response_ms: f64,
    pub reaction_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSession {
    pub session_id: String,
    pub seed: u64,
    pub trials_per_test: usize,
    pub trials: Vec<TrialSpec>,
    pub records: Vec<TrialRecord>,
    pub status: Status,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Typical,
    ReviewRecommended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test_kind: TestKind,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub median_rt_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub tests: Vec<TestSummary>,
    pub flag: Flag,
    pub thresholds: Thresholds,
    pub disclaimer: String,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

impl ScreeningSession {
    pub fn new(session_id: String, trials_per_test: usize, seed: u64) -> Result<Self, SessionError> {
        if trials_per_test == 0 {
            return Err(SessionError::BadConfig("trials_per_test must be at least 1".into()));
        }
        Ok(ScreeningSession {
            session_id,
            seed,
            trials_per_test,
            trials: generate_trials(trials_per_test, seed),
            records: Vec::new(),
            status: Status::Active,
        })
    }

    fn answered(&self, trial_id: &str) -> bool {
        self.records.iter().any(|r| r.trial_id == trial_id)
    }

    /// First unanswered trial in issue order.
    pub fn next_trial(&self) -> Option<&TrialSpec> {
        self.trials.iter().find(|t| !self.answered(&t.trial_id))
    }

    /// Score a response without recording it.
    pub fn check_response(
        &self,
        trial_id: &str,
        response: &str,
        stimulus_onset_ms: f64,
        response_ms: f64,
        thresholds: &Thresholds,
    ) -> Result<TrialRecord, SessionError> {
        let trial = self
            .trials
            .iter()
            .find(|t| t.trial_id == trial_id)
            .ok_or_else(|| SessionError::UnknownTrial(trial_id.to_string()))?;
        if self.answered(trial_id) {
            return Err(SessionError::DuplicateResponse(trial_id.to_string()));
        }
        let answer = Answer::try_from(response.to_string())
            .ok()
            .filter(|a| a.fits(trial.test_kind))
            .ok_or_else(|| SessionError::OutOfDomainResponse {
                response: response.to_string(),
                kind: trial.test_kind,
            })?;
        let rt = response_ms - stimulus_onset_ms;
        if !(rt > 0.0) {
            return Err(SessionError::NonPositiveReactionTime(rt));
        }
        if rt > thresholds.max_rt_ms {
            return Err(SessionError::ImplausibleReactionTime {
                rt_ms: rt,
                cap_ms: thresholds.max_rt_ms,
            });
        }
        Ok(TrialRecord {
            trial_id: trial_id.to_string(),
            response: answer,
            correct: answer == trial.correct_answer,
            stimulus_onset_ms,
            response_ms,
            reaction_time_ms: rt,
        })
    }

    /// Append a record produced by [`ScreeningSession::check_response`].
    pub fn apply(&mut self, record: TrialRecord) {
        self.records.push(record);
        if self.records.len() == self.trials.len() {
            self.status = Status::Complete;
        }
    }

    pub fn summary(&self, thresholds: &Thresholds) -> Result<SessionSummary, SessionError> {
        if self.status != Status::Complete {
            return Err(SessionError::SessionIncomplete {
                remaining: self.trials.len() - self.records.len(),
            });
        }
        let tests: Vec<TestSummary> = TestKind::ALL
            .iter()
            .map(|&kind| {
                let records: Vec<&TrialRecord> = self
                    .records
                    .iter()
                    .filter(|r| self.trials.iter().any(|t| t.trial_id == r.trial_id && t.test_kind == kind))
                    .collect();
                let correct = records.iter().filter(|r| r.correct).count();
                let rts: Vec<f64> = records.iter().map(|r| r.reaction_time_ms).collect();
                TestSummary {
                    test_kind: kind,
                    trials: records.len(),
                    correct,
                    accuracy: correct as f64 / records.len() as f64,
                    median_rt_ms: median(&rts).expect("every block has trials"),
                }
            })
            .collect();
        let review = tests
            .iter()
            .any(|t| t.accuracy < thresholds.min_accuracy || t.median_rt_ms > thresholds.max_median_rt_ms);
        Ok(SessionSummary {
            session_id: self.session_id.clone(),
            tests,
            flag: if review { Flag::ReviewRecommended } else { Flag::Typical },
            thresholds: thresholds.clone(),
            disclaimer: DISCLAIMER.to_string(),
        })
    }
}
