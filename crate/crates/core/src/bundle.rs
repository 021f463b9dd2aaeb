//! A trained model together with the preprocessing it expects.
//!
//! On disk a bundle is a directory holding `weights.wgts` and `model.json`;
//! the latter records the network shape and the pipeline parameters so a
//! raw recording can be scored without further configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{label_from_proba, views, ClassifierError, ModelConfig, ResNet};
use crate::eeg_io::{EegIoError, Label, Recording};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};

pub const WEIGHTS_FILE: &str = "weights.wgts";
pub const CARD_FILE: &str = "model.json";
const CARD_FORMAT: &str = "adhd-eeg-model/1";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] EegIoError),
    #[error("model card: {0}")]
    Card(String),
    #[error("model expects {expected:?} scalograms but the pipeline yields {found:?}")]
    Incompatible { expected: (usize, usize), found: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub format: String,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentVote {
    pub segment_index: usize,
    pub p_adhd: f64,
    pub label: Label,
}

/// Recording-level output: the mean per-segment ADHD probability plus every
/// segment's own vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingInference {
    pub subject_id: String,
    pub n_segments: usize,
    pub p_control: f64,
    pub p_adhd: f64,
    pub label: Label,
    pub votes: Vec<SegmentVote>,
}

pub struct ModelBundle {
    pub model: ResNet,
    pipeline: Pipeline,
}

impl ModelBundle {
    pub fn new(model: ResNet, pipeline_cfg: PipelineConfig) -> Result<Self, BundleError> {
        let expected = model.config().input_hw;
        let found = (pipeline_cfg.n_scales, crate::cwt::POOLED_TIME_BINS);
        if expected != found {
            return Err(BundleError::Incompatible { expected, found });
        }
        Ok(ModelBundle {
            model,
            pipeline: Pipeline::new(pipeline_cfg)?,
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn card(&self) -> ModelCard {
        ModelCard {
            format: CARD_FORMAT.to_string(),
            model: self.model.config().clone(),
            pipeline: self.pipeline.config().clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        std::fs::create_dir_all(dir).map_err(|e| EegIoError::io(dir, e))?;
        self.model.save_wgts(&dir.join(WEIGHTS_FILE))?;
        let card = serde_json::to_string_pretty(&self.card()).expect("model card serializes");
        let path = dir.join(CARD_FILE);
        std::fs::write(&path, card + "\n").map_err(|e| EegIoError::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let path = dir.join(CARD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| EegIoError::io(&path, e))?;
        let card: ModelCard = serde_json::from_str(&text).map_err(|e| BundleError::Card(format!("{}: {e}", path.display())))?;
        if card.format != CARD_FORMAT {
            return Err(BundleError::Card(format!("unsupported format {:?}", card.format)));
        }
        let model = ResNet::load_wgts(card.model, &dir.join(WEIGHTS_FILE))?;
        ModelBundle::new(model, card.pipeline)
    }

    /// Filter, segment, transform and classify one recording.
    pub fn infer(&self, rec: &Recording) -> Result<RecordingInference, BundleError> {
        let set = self.pipeline.scalograms(rec)?;
        let proba = self.model.predict_proba(&views(&set))?;
        let votes: Vec<SegmentVote> = set
            .iter()
            .zip(&proba)
            .map(|(s, p)| SegmentVote {
                segment_index: s.segment_index,
                p_adhd: p[Label::Adhd.as_index()],
                label: label_from_proba(p),
            })
            .collect();
        let p_adhd = votes.iter().map(|v| v.p_adhd).sum::<f64>() / votes.len() as f64;
        Ok(RecordingInference {
            subject_id: rec.subject_id.clone(),
            n_segments: votes.len(),
            p_control: 1.0 - p_adhd,
            p_adhd,
            label: if p_adhd > 0.5 { Label::Adhd } else { Label::Control },
            votes,
        })
    }
}
