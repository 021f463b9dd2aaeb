//! Subject-grouped cross-validation with a Precision / Recall / F1 report.
//!
//! `cargo run --release --example cross_validation`

use adhd_eeg::classifier::{ModelConfig, TrainConfig};
use adhd_eeg::evaluation::{cross_validate, make_folds_for_set, FoldGranularity};
use adhd_eeg::pipeline::{Pipeline, PipelineConfig};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let set = pipeline.dataset(&synth_dataset(&SynthConfig::default().with_subjects(24))?)?;
    let plan = make_folds_for_set(&set, 3, 0, FoldGranularity::Subject)?;
    println!("fold sizes (subjects): {:?}", plan.fold_sizes());

    let model = ModelConfig::default().with_width_factor(0.25);
    let cv = cross_validate(&set, &plan, &model, &TrainConfig { epochs: 10, ..TrainConfig::default() })?;
    for f in &cv.folds {
        println!("fold {}: segment acc {:.3}, subject acc {:.3}", f.fold, f.segment.accuracy, f.subject.accuracy);
    }
    println!("\nAll folds pooled\n{}", cv.pooled_segment_report()?.to_table());
    Ok(())
}
