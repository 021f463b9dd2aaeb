//! Subject-grouped k-fold cross-validation and binary classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::classifier::{views, ClassifierError, ModelConfig, ResNet, ScalogramClassifier, TrainConfig, EpochLog};
use crate::eeg_io::{DatasetManifest, Label};
use crate::scalogram::Scalogram;

#[derive(Debug, thiserror::Error)]
pub enum EvaluationError {
    #[error("need at least {k} subjects per class for {k} folds, class {label:?} has {found}")]
    TooFewSubjects { k: usize, label: Label, found: usize },
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("labels and predictions differ in length ({labels} vs {preds})")]
    LengthMismatch { labels: usize, preds: usize },
    #[error("no labelled samples to score")]
    Empty,
    #[error("subject {0} appears in both the training and the test split")]
    SubjectLeakage(String),
    #[error("subject {0} has no fold assignment")]
    Unassigned(String),
    #[error("fold {0} has no test samples")]
    EmptyFold(usize),
    #[error("scalogram of subject {0} has no label")]
    Unlabelled(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldGranularity {
    /// Every segment of a subject lands in the same fold.
    Subject,
    /// Segments are assigned individually; overlapping windows of one
    /// subject can straddle train and test.
    Segment,
}

/// Fold assignment keyed by subject id, or by `subject_id#segment_index`
/// at segment granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub granularity: FoldGranularity,
    pub assignments: BTreeMap<String, usize>,
}

fn segment_key(s: &Scalogram) -> String {
    format!("{}#{}", s.subject_id, s.segment_index)
}

impl FoldPlan {
    pub fn fold_of(&self, s: &Scalogram) -> Option<usize> {
        match self.granularity {
            FoldGranularity::Subject => self.assignments.get(&s.subject_id).copied(),
            FoldGranularity::Segment => self.assignments.get(&segment_key(s)).copied(),
        }
    }

    /// Number of keys per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin,
/// and the dealing position carries over from one class to the next so
/// fold totals stay within one of each other.
fn stratify(mut items: Vec<(String, Label)>, k: usize, seed: u64, per_class_min: usize) -> Result<BTreeMap<String, usize>, EvaluationError> {
    if k < 2 {
        return Err(EvaluationError::BadK(k));
    }
    items.sort();
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for label in [Label::Adhd, Label::Control] {
        let mut class: Vec<&String> = items.iter().filter(|(_, l)| *l == label).map(|(id, _)| id).collect();
        if class.len() < per_class_min {
            return Err(EvaluationError::TooFewSubjects {
                k,
                label,
                found: class.len(),
            });
        }
        class.shuffle(&mut rng);
        for id in class {
            assignments.insert(id.clone(), next);
            next = (next + 1) % k;
        }
    }
    Ok(assignments)
}

/// Subject-level stratified folds.
pub fn make_folds(subjects: &[(String, Label)], k: usize, seed: u64) -> Result<FoldPlan, EvaluationError> {
    Ok(FoldPlan {
        k,
        seed,
        granularity: FoldGranularity::Subject,
        assignments: stratify(subjects.to_vec(), k, seed, k)?,
    })
}

pub fn make_folds_for_manifest(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan, EvaluationError> {
    let subjects: Vec<_> = manifest.entries.iter().map(|e| (e.subject_id.clone(), e.label)).collect();
    make_folds(&subjects, k, seed)
}

/// Folds over a scalogram set at either granularity.
pub fn make_folds_for_set(set: &[Scalogram], k: usize, seed: u64, granularity: FoldGranularity) -> Result<FoldPlan, EvaluationError> {
    let mut keyed = BTreeSet::new();
    for s in set {
        let label = s.label.ok_or_else(|| EvaluationError::Unlabelled(s.subject_id.clone()))?;
        let key = match granularity {
            FoldGranularity::Subject => s.subject_id.clone(),
            FoldGranularity::Segment => segment_key(s),
        };
        keyed.insert((key, label));
    }
    Ok(FoldPlan {
        k,
        seed,
        granularity,
        assignments: stratify(keyed.into_iter().collect(), k, seed, k)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// Counts with ADHD as the positive class.
pub fn confusion(labels: &[Label], preds: &[Label]) -> Result<ConfusionMatrix, EvaluationError> {
    if labels.len() != preds.len() {
        return Err(EvaluationError::LengthMismatch {
            labels: labels.len(),
            preds: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (l, p) in labels.iter().zip(preds) {
        match (l, p) {
            (Label::Control, Label::Control) => cm.tn += 1,
            (Label::Control, Label::Adhd) => cm.fp += 1,
            (Label::Adhd, Label::Control) => cm.fn_ += 1,
            (Label::Adhd, Label::Adhd) => cm.tp += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed by class: control first, then ADHD.
    pub per_class: [ClassMetrics; 2],
    pub accuracy: f64,
    pub macro_avg: AveragedMetrics,
    pub weighted_avg: AveragedMetrics,
    /// Metrics forced to 0 by a zero denominator, e.g. `precision[1]`.
    pub zero_division: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        flags.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Build the report from per-class values and supports.
pub fn report_from_class_metrics(per_class: [ClassMetrics; 2], accuracy: f64, zero_division: Vec<String>) -> MetricsReport {
    let macro_avg = AveragedMetrics {
        precision: (per_class[0].precision + per_class[1].precision) / 2.0,
        recall: (per_class[0].recall + per_class[1].recall) / 2.0,
        f1: (per_class[0].f1 + per_class[1].f1) / 2.0,
    };
    let total = per_class[0].support + per_class[1].support;
    let w = |f: fn(&ClassMetrics) -> f64| {
        if total == 0.0 {
            0.0
        } else {
            per_class.iter().map(|c| f(c) * c.support).sum::<f64>() / total
        }
    };
    let weighted_avg = AveragedMetrics {
        precision: w(|c| c.precision),
        recall: w(|c| c.recall),
        f1: w(|c| c.f1),
    };
    MetricsReport {
        per_class,
        accuracy,
        macro_avg,
        weighted_avg,
        zero_division,
    }
}

pub fn report(cm: &ConfusionMatrix) -> MetricsReport {
    let mut flags = Vec::new();
    // (true positives, predicted positives, actual positives) per class
    let counts = [
        (cm.tn, cm.tn + cm.fn_, cm.tn + cm.fp),
        (cm.tp, cm.tp + cm.fp, cm.tp + cm.fn_),
    ];
    let per_class = [0, 1].map(|c| {
        let (hit, predicted, actual) = counts[c];
        let precision = ratio(hit as f64, predicted as f64, &format!("precision[{c}]"), &mut flags);
        let recall = ratio(hit as f64, actual as f64, &format!("recall[{c}]"), &mut flags);
        ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: actual as f64,
        }
    });
    let accuracy = (cm.tn + cm.tp) as f64 / cm.total().max(1) as f64;
    report_from_class_metrics(per_class, accuracy, flags)
}

impl MetricsReport {
    /// Field-wise mean; supports become mean supports and flags are merged.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let n = reports.len() as f64;
        if reports.is_empty() {
            return None;
        }
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let class = |c: usize| ClassMetrics {
            precision: avg(&|r| r.per_class[c].precision),
            recall: avg(&|r| r.per_class[c].recall),
            f1: avg(&|r| r.per_class[c].f1),
            support: avg(&|r| r.per_class[c].support),
        };
        let averaged = |g: fn(&MetricsReport) -> &AveragedMetrics| AveragedMetrics {
            precision: avg(&|r| g(r).precision),
            recall: avg(&|r| g(r).recall),
            f1: avg(&|r| g(r).f1),
        };
        let flags: BTreeSet<String> = reports.iter().flat_map(|r| r.zero_division.iter().cloned()).collect();
        Some(MetricsReport {
            per_class: [class(0), class(1)],
            accuracy: avg(&|r| r.accuracy),
            macro_avg: averaged(|r| &r.macro_avg),
            weighted_avg: averaged(|r| &r.weighted_avg),
            zero_division: flags.into_iter().collect(),
        })
    }

    /// Aligned text table with the rows and columns of the published
    /// metrics table, values to two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, cells: [Option<f64>; 3]| {
            let _ = write!(out, "{name:<14}");
            for c in cells {
                match c {
                    Some(v) => {
                        let _ = write!(out, "{v:>11.2}");
                    }
                    None => {
                        let _ = write!(out, "{:>11}", "-");
                    }
                }
            }
            out.push('\n');
        };
        let _ = writeln!(out, "{:<14}{:>11}{:>11}{:>11}", "", "Precision", "Recall", "F1-Score");
        let names = ["0 (No ADHD)", "1 (ADHD)"];
        for (name, c) in names.iter().zip(&self.per_class) {
            row(&mut out, name, [Some(c.precision), Some(c.recall), Some(c.f1)]);
        }
        row(&mut out, "Accuracy", [None, None, Some(self.accuracy)]);
        let m = &self.macro_avg;
        row(&mut out, "Macro avg", [Some(m.precision), Some(m.recall), Some(m.f1)]);
        let w = &self.weighted_avg;
        row(&mut out, "Weighted avg", [Some(w.precision), Some(w.recall), Some(w.f1)]);
        out
    }
}

/// Ground truth and predictions of `model` on a labelled set.
pub fn predict_set<M: ScalogramClassifier + ?Sized>(model: &M, set: &[Scalogram]) -> Result<(Vec<Label>, Vec<Label>), EvaluationError> {
    let labels = set
        .iter()
        .map(|s| s.label.ok_or_else(|| EvaluationError::Unlabelled(s.subject_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = model.predict_labels(&views(set))?;
    Ok((labels, preds))
}

/// Segment-level accuracy of `model` on a labelled set.
pub fn accuracy<M: ScalogramClassifier + ?Sized>(model: &M, set: &[Scalogram]) -> Result<f64, EvaluationError> {
    let (labels, preds) = predict_set(model, set)?;
    Ok(report(&confusion(&labels, &preds)?).accuracy)
}

/// Majority vote over segment predictions; ties go to control.
pub fn majority_vote(preds: &[Label]) -> Label {
    let adhd = preds.iter().filter(|&&p| p == Label::Adhd).count();
    if 2 * adhd > preds.len() {
        Label::Adhd
    } else {
        Label::Control
    }
}

/// Per-subject labels and majority-vote predictions, in subject-id order.
pub fn subject_votes(set: &[Scalogram], preds: &[Label]) -> Result<(Vec<Label>, Vec<Label>), EvaluationError> {
    let mut by_subject: BTreeMap<&str, (Label, Vec<Label>)> = BTreeMap::new();
    for (s, &p) in set.iter().zip(preds) {
        let label = s.label.ok_or_else(|| EvaluationError::Unlabelled(s.subject_id.clone()))?;
        by_subject.entry(&s.subject_id).or_insert((label, Vec::new())).1.push(p);
    }
    Ok(by_subject.into_values().map(|(l, p)| (l, majority_vote(&p))).unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub subject_id: String,
    pub segment_index: usize,
    pub label: Label,
    pub pred: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub segment: MetricsReport,
    pub subject: MetricsReport,
    pub training_log: Vec<EpochLog>,
    pub predictions: Vec<SegmentPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold segment-level reports.
    pub segment: MetricsReport,
    /// Mean of the per-fold subject-level (majority vote) reports.
    pub subject: MetricsReport,
}

/// Train one model per fold on the out-of-fold segments and score it on the
/// in-fold ones. `on_fold` sees each trained model with its test split,
/// e.g. to compute channel importance.
pub fn cross_validate_with<E>(
    dataset: &[Scalogram],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_fold: impl FnMut(usize, &ResNet, &[Scalogram]) -> Result<(), E>,
) -> Result<CrossValidation, E>
where
    E: From<EvaluationError>,
{
    let folds_of: Vec<usize> = dataset
        .iter()
        .map(|s| plan.fold_of(s).ok_or_else(|| EvaluationError::Unassigned(segment_key(s))))
        .collect::<Result<_, EvaluationError>>()?;
    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let (test, train): (Vec<_>, Vec<_>) = dataset.iter().zip(&folds_of).partition(|(_, &f)| f == fold);
        let test: Vec<Scalogram> = test.into_iter().map(|(s, _)| s.clone()).collect();
        let train: Vec<Scalogram> = train.into_iter().map(|(s, _)| s.clone()).collect();
        if test.is_empty() {
            return Err(EvaluationError::EmptyFold(fold).into());
        }
        let train_subjects: BTreeSet<String> = train.iter().map(|s| s.subject_id.clone()).collect();
        let test_subjects: BTreeSet<String> = test.iter().map(|s| s.subject_id.clone()).collect();
        if plan.granularity == FoldGranularity::Subject {
            if let Some(leak) = train_subjects.intersection(&test_subjects).next() {
                return Err(EvaluationError::SubjectLeakage(leak.clone()).into());
            }
        }

        let fold_seed = train_cfg.seed.wrapping_add(fold as u64);
        let mut model = ResNet::new(model_cfg.clone(), fold_seed).map_err(EvaluationError::from)?;
        let log = model.train(
            &train,
            &TrainConfig {
                seed: fold_seed,
                ..train_cfg.clone()
            },
        )
        .map_err(EvaluationError::from)?;
        let (labels, preds) = predict_set(&model, &test)?;
        let segment = report(&confusion(&labels, &preds)?);
        let (subj_labels, subj_preds) = subject_votes(&test, &preds)?;
        let subject = report(&confusion(&subj_labels, &subj_preds)?);
        on_fold(fold, &model, &test)?;
        folds.push(FoldResult {
            fold,
            train_subjects: train_subjects.into_iter().collect(),
            test_subjects: test_subjects.into_iter().collect(),
            segment,
            subject,
            training_log: log,
            predictions: test
                .iter()
                .zip(labels.iter().zip(&preds))
                .map(|(s, (&label, &pred))| SegmentPrediction {
                    subject_id: s.subject_id.clone(),
                    segment_index: s.segment_index,
                    label,
                    pred,
                })
                .collect(),
        });
    }
    let seg: Vec<_> = folds.iter().map(|f| f.segment.clone()).collect();
    let subj: Vec<_> = folds.iter().map(|f| f.subject.clone()).collect();
    Ok(CrossValidation {
        plan: plan.clone(),
        segment: MetricsReport::mean(&seg).expect("k ≥ 2 folds"),
        subject: MetricsReport::mean(&subj).expect("k ≥ 2 folds"),
        folds,
    })
}

impl CrossValidation {
    /// Segment-level report over the predictions of every fold pooled together.
    pub fn pooled_segment_report(&self) -> Result<MetricsReport, EvaluationError> {
        let (labels, preds): (Vec<Label>, Vec<Label>) = self
            .folds
            .iter()
            .flat_map(|f| f.predictions.iter().map(|p| (p.label, p.pred)))
            .unzip();
        Ok(report(&confusion(&labels, &preds)?))
    }
}

pub fn cross_validate(
    dataset: &[Scalogram],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CrossValidation, EvaluationError> {
    cross_validate_with(dataset, plan, model_cfg, train_cfg, |_, _, _| Ok::<_, EvaluationError>(()))
}
