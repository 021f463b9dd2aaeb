//! Screening service: a seeded three-part timed test protocol with
//! persisted sessions, plus an EEG inference endpoint backed by a trained
//! scalogram classifier.
//!
//! Routes (JSON unless noted):
//!
//! | method | path                                  |                                    |
//! |--------|---------------------------------------|------------------------------------|
//! | POST   | `/api/v1/sessions`                    | `{trials_per_test?, seed?}`        |
//! | GET    | `/api/v1/sessions/{id}`               | progress                           |
//! | GET    | `/api/v1/sessions/{id}/trials/next`   | next trial, answer withheld        |
//! | POST   | `/api/v1/sessions/{id}/responses`     | `{trial_id, response, stimulus_onset_ms, response_ms}` |
//! | GET    | `/api/v1/sessions/{id}/summary`       | per-test accuracy, median RT, flag |
//! | POST   | `/api/v1/infer?model_id=`             | EEG-CSV body, `text/plain`         |
//! | GET    | `/api/v1/assets`, `/api/v1/assets/{image_id}` | icon manifest, SVG         |
//! | GET    | `/`                                   | browser UI (HTML)                  |

pub mod api;
pub mod assets;
pub mod protocol;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState, ServiceConfig, ServiceError};
