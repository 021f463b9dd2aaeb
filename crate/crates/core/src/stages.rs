//! File-based pipeline stages.
//!
//! Each stage reads the directory written by the previous one and writes
//! its own, always including `stamp.json` (stage name, crate version and
//! the full configuration), so any stage can be re-run in isolation.
//! Artifacts carry no timestamps or absolute output paths: identical
//! inputs and flags give byte-identical files.
//!
//! | stage        | input                     | output                                   |
//! |--------------|---------------------------|------------------------------------------|
//! | `synth`      | config                    | `*.csv`, `manifest.json`                 |
//! | `preprocess` | `manifest.json`           | `seg*.csv`, `segments.json`              |
//! | `scalogram`  | segments dir              | `sc*.sclg`, `scalograms.json`            |
//! | `train`      | scalogram dir             | model bundle, `train_log.jsonl`          |
//! | `evaluate`   | scalogram dir (+ model)   | `report.json`, `report.txt`, importance  |
//! | `importance` | model + scalogram dir     | `importance.json`, `importance.tsv`      |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleError, ModelBundle};
use crate::classifier::{log_to_jsonl, ClassifierError, ModelConfig, ResNet, TrainConfig};
use crate::eeg_io::{load_manifest, load_recording, write_recording, ChannelName, EegIoError, Label, Recording};
use crate::evaluation::{
    confusion, cross_validate_with, make_folds_for_set, predict_set, report as metrics_report, subject_votes, CrossValidation, EvaluationError,
    FoldGranularity, MetricsReport,
};
use crate::importance::{channel_importance, ImportanceConfig, ImportanceError, ImportanceResult};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};
use crate::preprocess::Segment;
use crate::scalogram::{read_sclg, write_sclg, Scalogram, ScalogramError};
use crate::synth::{write_synth_dataset, SynthConfig};

pub const STAMP_FILE: &str = "stamp.json";
pub const SEGMENTS_INDEX: &str = "segments.json";
pub const SCALOGRAMS_INDEX: &str = "scalograms.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const IMPORTANCE_TSV: &str = "importance.tsv";

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] EegIoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scalogram(#[from] ScalogramError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{path}: {message}")]
    Index { path: PathBuf, message: String },
}

impl StageError {
    /// Whether the error stems from the request itself (flags, configs)
    /// rather than from running it.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            StageError::Invalid(_)
                | StageError::Classifier(ClassifierError::BadConfig(_))
                | StageError::Evaluation(EvaluationError::BadK(_) | EvaluationError::TooFewSubjects { .. })
                | StageError::Importance(ImportanceError::NoRepeats | ImportanceError::TooFewForShuffle)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub version: String,
    pub config: serde_json::Value,
}

pub fn write_stamp(dir: &Path, stage: &str, config: &impl Serialize) -> Result<(), StageError> {
    let stamp = Stamp {
        stage: stage.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config).expect("stage config serializes"),
    };
    write_json(&dir.join(STAMP_FILE), &stamp)
}

pub fn read_stamp(dir: &Path) -> Result<Stamp, StageError> {
    read_json(&dir.join(STAMP_FILE))
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    std::fs::write(path, text).map_err(|e| EegIoError::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), StageError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    let text = std::fs::read_to_string(path).map_err(|e| EegIoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| StageError::Index {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<(), StageError> {
    std::fs::create_dir_all(dir).map_err(|e| EegIoError::io(dir, e).into())
}

fn check_pipeline(cfg: &PipelineConfig) -> Result<Pipeline, StageError> {
    Pipeline::new(cfg.clone()).map_err(|e| StageError::Invalid(e.to_string()))
}

// ---------------------------------------------------------------- synth

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<usize, StageError> {
    cfg.validate().map_err(|e| StageError::Invalid(e.to_string()))?;
    create_dir(out)?;
    let manifest = write_synth_dataset(cfg, out)?;
    write_stamp(out, "synth", cfg)?;
    Ok(manifest.entries.len())
}

// ----------------------------------------------------------- preprocess

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub file: String,
    pub subject_id: String,
    pub label: Option<Label>,
    pub segment_index: usize,
    pub start_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentIndex {
    pub pipeline: PipelineConfig,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Serialize)]
struct PreprocessStamp<'a> {
    manifest: &'a Path,
    pipeline: &'a PipelineConfig,
}

/// Filter and window every recording in the manifest; each window is
/// written as an EEG-CSV document of its own.
pub fn preprocess(manifest_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<usize, StageError> {
    let pipeline = check_pipeline(cfg)?;
    let manifest = load_manifest(manifest_path)?;
    create_dir(out)?;
    let mut segments = Vec::new();
    for entry in &manifest.entries {
        let mut rec = load_recording(&entry.path)?;
        // the manifest is authoritative for identity and label
        rec.subject_id = entry.subject_id.clone();
        rec.label = Some(entry.label);
        for seg in pipeline.segments(&rec)? {
            let file = format!("seg{:06}.csv", segments.len());
            let as_rec = Recording::new(seg.subject_id.clone(), seg.label, seg.sample_rate_hz, seg.data)?;
            write_recording(&as_rec, out.join(&file))?;
            segments.push(SegmentEntry {
                file,
                subject_id: seg.subject_id,
                label: seg.label,
                segment_index: seg.segment_index,
                start_sample: seg.start_sample,
            });
        }
    }
    let n = segments.len();
    write_json(
        &out.join(SEGMENTS_INDEX),
        &SegmentIndex {
            pipeline: cfg.clone(),
            segments,
        },
    )?;
    write_stamp(
        out,
        "preprocess",
        &PreprocessStamp {
            manifest: manifest_path,
            pipeline: cfg,
        },
    )?;
    Ok(n)
}

pub fn load_segments(dir: &Path) -> Result<(PipelineConfig, Vec<Segment>), StageError> {
    let index: SegmentIndex = read_json(&dir.join(SEGMENTS_INDEX))?;
    let segments = index
        .segments
        .iter()
        .map(|e| {
            let rec = load_recording(dir.join(&e.file))?;
            Ok(Segment {
                subject_id: e.subject_id.clone(),
                label: e.label,
                segment_index: e.segment_index,
                start_sample: e.start_sample,
                sample_rate_hz: rec.sample_rate_hz,
                data: rec.data,
            })
        })
        .collect::<Result<_, StageError>>()?;
    Ok((index.pipeline, segments))
}

// ------------------------------------------------------------ scalogram

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalogramIndex {
    pub pipeline: PipelineConfig,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct ScalogramStamp<'a> {
    segments: &'a Path,
    pipeline: &'a PipelineConfig,
}

/// Scalograms of every segment in `segments_dir`. The filter and window
/// settings of `cfg` must match those the segments were cut with.
pub fn scalogram(segments_dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<usize, StageError> {
    let pipeline = check_pipeline(cfg)?;
    let (cut_with, segments) = load_segments(segments_dir)?;
    let same_cut = cut_with.low_hz == cfg.low_hz
        && cut_with.high_hz == cfg.high_hz
        && cut_with.window_s == cfg.window_s
        && cut_with.hop_s == cfg.hop_s;
    if !same_cut {
        return Err(StageError::Invalid(format!(
            "segments were cut with {}–{} Hz, {} s windows, {} s hop; requested {}–{} Hz, {} s, {} s",
            cut_with.low_hz, cut_with.high_hz, cut_with.window_s, cut_with.hop_s, cfg.low_hz, cfg.high_hz, cfg.window_s, cfg.hop_s
        )));
    }
    create_dir(out)?;
    let set = pipeline.scalograms_of_segments(&segments)?;
    let mut files = Vec::with_capacity(set.len());
    for (i, sc) in set.iter().enumerate() {
        let file = format!("sc{i:06}.sclg");
        write_sclg(sc, out.join(&file))?;
        files.push(file);
    }
    write_json(
        &out.join(SCALOGRAMS_INDEX),
        &ScalogramIndex {
            pipeline: cfg.clone(),
            files,
        },
    )?;
    write_stamp(
        out,
        "scalogram",
        &ScalogramStamp {
            segments: segments_dir,
            pipeline: cfg,
        },
    )?;
    Ok(set.len())
}

pub fn load_scalograms(dir: &Path) -> Result<(PipelineConfig, Vec<Scalogram>), StageError> {
    let index: ScalogramIndex = read_json(&dir.join(SCALOGRAMS_INDEX))?;
    let set = index
        .files
        .iter()
        .map(|f| read_sclg(dir.join(f)))
        .collect::<Result<_, _>>()?;
    Ok((index.pipeline, set))
}

// ---------------------------------------------------------------- train

/// Network shape chosen on the command line; the input size follows the
/// scalograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub width_factor: f64,
    pub blocks_per_stage: usize,
    pub init_seed: u64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            width_factor: 0.25,
            blocks_per_stage: 2,
            init_seed: 0,
        }
    }
}

impl ModelOptions {
    pub fn model_config(&self, pipeline: &PipelineConfig) -> Result<ModelConfig, StageError> {
        if !(self.width_factor > 0.0 && self.width_factor.is_finite()) {
            return Err(StageError::Invalid(format!("width factor {} must be positive", self.width_factor)));
        }
        let cfg = ModelConfig {
            blocks_per_stage: self.blocks_per_stage,
            ..ModelConfig::default()
        }
        .with_width_factor(self.width_factor)
        .with_input_hw(pipeline.n_scales, crate::cwt::POOLED_TIME_BINS);
        cfg.validate().map_err(|e| StageError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct TrainStamp<'a> {
    scalograms: &'a Path,
    model: &'a ModelOptions,
    train: &'a TrainConfig,
}

/// Train on every scalogram in `sclg_dir` and save a model bundle.
pub fn train(sclg_dir: &Path, opts: &ModelOptions, train_cfg: &TrainConfig, out: &Path) -> Result<Vec<crate::classifier::EpochLog>, StageError> {
    train_cfg.validate().map_err(|e| StageError::Invalid(e.to_string()))?;
    let (pipeline, set) = load_scalograms(sclg_dir)?;
    let mut model = ResNet::new(opts.model_config(&pipeline)?, opts.init_seed)?;
    let log = model.train(&set, train_cfg)?;
    create_dir(out)?;
    ModelBundle::new(model, pipeline)?.save(out)?;
    write_text(&out.join("train_log.jsonl"), &log_to_jsonl(&log))?;
    write_stamp(
        out,
        "train",
        &TrainStamp {
            scalograms: sclg_dir,
            model: opts,
            train: train_cfg,
        },
    )?;
    Ok(log)
}

// ------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub fold_seed: u64,
    pub granularity: FoldGranularity,
    /// Per-fold channel importance on each test split, if set.
    pub importance: Option<ImportanceConfig>,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 5,
            fold_seed: 0,
            granularity: FoldGranularity::Subject,
            importance: None,
        }
    }
}

/// Channel ranking aggregated over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    /// Mean over folds of each channel's `mean_drop`, largest first.
    pub mean_drop: Vec<(ChannelName, f64)>,
    pub top4_per_fold: Vec<Vec<ChannelName>>,
}

impl ImportanceSummary {
    pub fn from_folds(folds: &[ImportanceResult]) -> Self {
        let mut sums: BTreeMap<ChannelName, f64> = BTreeMap::new();
        for r in folds {
            for c in &r.per_channel {
                *sums.entry(c.channel).or_default() += c.mean_drop;
            }
        }
        let mut mean_drop: Vec<(ChannelName, f64)> = ChannelName::ALL
            .iter()
            .map(|ch| (*ch, sums.get(ch).copied().unwrap_or(0.0) / folds.len().max(1) as f64))
            .collect();
        mean_drop.sort_by(|a, b| b.1.total_cmp(&a.1));
        ImportanceSummary {
            mean_drop,
            top4_per_fold: folds.iter().map(|r| r.top(4)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Segment-level metrics over the predictions of all folds together.
    pub pooled_segment: MetricsReport,
    pub cross_validation: CrossValidation,
    pub importance: Option<ImportanceSummary>,
}

#[derive(Serialize)]
struct EvaluateStamp<'a> {
    scalograms: &'a Path,
    model: &'a ModelOptions,
    train: &'a TrainConfig,
    cv: &'a CvOptions,
}

/// k-fold cross-validation over the scalograms in `sclg_dir`.
pub fn cross_validate(
    sclg_dir: &Path,
    opts: &ModelOptions,
    train_cfg: &TrainConfig,
    cv: &CvOptions,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<CvReport, StageError> {
    train_cfg.validate().map_err(|e| StageError::Invalid(e.to_string()))?;
    if let Some(imp) = &cv.importance {
        if imp.repeats == 0 {
            return Err(ImportanceError::NoRepeats.into());
        }
    }
    let (pipeline, set) = load_scalograms(sclg_dir)?;
    let model_cfg = opts.model_config(&pipeline)?;
    let plan = make_folds_for_set(&set, cv.k, cv.fold_seed, cv.granularity)?;
    create_dir(out)?;
    let mut importance = Vec::new();
    let result = cross_validate_with(&set, &plan, &model_cfg, train_cfg, |fold, model, test| {
        progress(&format!("fold {fold}: trained on {} segments, testing {}", set.len() - test.len(), test.len()));
        if let Some(imp) = &cv.importance {
            let r = channel_importance(model, test, imp)?;
            progress(&format!("fold {fold}: top channels {:?}", r.top(4)));
            importance.push(r);
        }
        Ok::<_, StageError>(())
    })?;
    for (fold, r) in importance.iter().enumerate() {
        write_text(&out.join(format!("importance_fold{fold}.json")), &(r.to_json() + "\n"))?;
        write_text(&out.join(format!("importance_fold{fold}.tsv")), &r.to_tsv())?;
    }
    for f in &result.folds {
        write_text(&out.join(format!("train_log_fold{}.jsonl", f.fold)), &log_to_jsonl(&f.training_log))?;
    }
    let report = CvReport {
        pooled_segment: result.pooled_segment_report()?,
        importance: cv.importance.as_ref().map(|_| ImportanceSummary::from_folds(&importance)),
        cross_validation: result,
    };
    write_json(&out.join(REPORT_JSON), &report)?;
    write_text(&out.join(REPORT_TXT), &render_cv_report(&report))?;
    write_stamp(
        out,
        "evaluate",
        &EvaluateStamp {
            scalograms: sclg_dir,
            model: opts,
            train: train_cfg,
            cv,
        },
    )?;
    Ok(report)
}

/// Metrics of an already trained model on a labelled scalogram set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub segment: MetricsReport,
    pub subject: MetricsReport,
}

#[derive(Serialize)]
struct ModelEvaluateStamp<'a> {
    model: &'a Path,
    scalograms: &'a Path,
}

fn load_compatible(model_dir: &Path, sclg_dir: &Path) -> Result<(ModelBundle, Vec<Scalogram>), StageError> {
    let bundle = ModelBundle::load(model_dir)?;
    let (pipeline, set) = load_scalograms(sclg_dir)?;
    if &pipeline != bundle.pipeline().config() {
        return Err(StageError::Invalid(format!(
            "{} was built with different pipeline settings than the model in {}",
            sclg_dir.display(),
            model_dir.display()
        )));
    }
    Ok((bundle, set))
}

pub fn evaluate_model(model_dir: &Path, sclg_dir: &Path, out: &Path) -> Result<ModelReport, StageError> {
    let (bundle, set) = load_compatible(model_dir, sclg_dir)?;
    let (labels, preds) = predict_set(&bundle.model, &set)?;
    let (subj_labels, subj_preds) = subject_votes(&set, &preds)?;
    let result = ModelReport {
        segment: metrics_report(&confusion(&labels, &preds)?),
        subject: metrics_report(&confusion(&subj_labels, &subj_preds)?),
    };
    create_dir(out)?;
    write_json(&out.join(REPORT_JSON), &result)?;
    let text = format!(
        "Segment level\n{}\nSubject level (majority vote)\n{}",
        result.segment.to_table(),
        result.subject.to_table()
    );
    write_text(&out.join(REPORT_TXT), &text)?;
    write_stamp(
        out,
        "evaluate",
        &ModelEvaluateStamp {
            model: model_dir,
            scalograms: sclg_dir,
        },
    )?;
    Ok(result)
}

// ----------------------------------------------------------- importance

#[derive(Serialize)]
struct ImportanceStamp<'a> {
    model: &'a Path,
    scalograms: &'a Path,
    importance: &'a ImportanceConfig,
}

pub fn importance(model_dir: &Path, sclg_dir: &Path, cfg: &ImportanceConfig, out: &Path) -> Result<ImportanceResult, StageError> {
    if cfg.repeats == 0 {
        return Err(ImportanceError::NoRepeats.into());
    }
    let (bundle, set) = load_compatible(model_dir, sclg_dir)?;
    let result = channel_importance(&bundle.model, &set, cfg)?;
    create_dir(out)?;
    write_text(&out.join(IMPORTANCE_JSON), &(result.to_json() + "\n"))?;
    write_text(&out.join(IMPORTANCE_TSV), &result.to_tsv())?;
    write_stamp(
        out,
        "importance",
        &ImportanceStamp {
            model: model_dir,
            scalograms: sclg_dir,
            importance: cfg,
        },
    )?;
    Ok(result)
}

// --------------------------------------------------------------- report

pub fn render_cv_report(r: &CvReport) -> String {
    let cv = &r.cross_validation;
    let mut out = format!(
        "{}-fold cross-validation, {} folds by {:?}\n\nSegment level, all folds pooled\n{}",
        cv.plan.k,
        cv.folds.len(),
        cv.plan.granularity,
        r.pooled_segment.to_table()
    );
    out.push_str(&format!("\nSegment level, mean over folds\n{}", cv.segment.to_table()));
    out.push_str(&format!("\nSubject level (majority vote), mean over folds\n{}", cv.subject.to_table()));
    out.push_str("\nPer fold      segment acc  subject acc\n");
    for f in &cv.folds {
        out.push_str(&format!("fold {:<8} {:>11.4} {:>12.4}\n", f.fold, f.segment.accuracy, f.subject.accuracy));
    }
    if let Some(imp) = &r.importance {
        out.push_str("\nChannel importance (mean accuracy drop over folds)\n");
        for (ch, d) in &imp.mean_drop {
            out.push_str(&format!("{:<4} {:>8.4}\n", ch.as_str(), d));
        }
        out.push_str("\nTop 4 per fold\n");
        for (fold, top) in imp.top4_per_fold.iter().enumerate() {
            let names: Vec<&str> = top.iter().map(|c| c.as_str()).collect();
            out.push_str(&format!("fold {fold}: {}\n", names.join(", ")));
        }
    }
    out
}

/// Human-readable report of an `evaluate` or `importance` output directory.
pub fn report(dir: &Path) -> Result<String, StageError> {
    let json_path = dir.join(REPORT_JSON);
    if json_path.is_file() {
        if let Ok(cv) = read_json::<CvReport>(&json_path) {
            return Ok(render_cv_report(&cv));
        }
        let m: ModelReport = read_json(&json_path)?;
        return Ok(format!(
            "Segment level\n{}\nSubject level (majority vote)\n{}",
            m.segment.to_table(),
            m.subject.to_table()
        ));
    }
    let imp_path = dir.join(IMPORTANCE_JSON);
    if imp_path.is_file() {
        let r: ImportanceResult = read_json(&imp_path)?;
        let mut out = format!("Baseline accuracy {:.4} ({:?}, {} repeats)\n", r.baseline_accuracy, r.mode, r.per_channel[0].repeats);
        out.push_str(&r.to_tsv());
        return Ok(out);
    }
    Err(StageError::Invalid(format!(
        "{} holds neither {REPORT_JSON} nor {IMPORTANCE_JSON}",
        dir.display()
    )))
}
