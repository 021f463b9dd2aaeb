//! Channel permutation importance of a trained model.
//!
//! `cargo run --release --example channel_importance`

use adhd_eeg::classifier::{ModelConfig, ResNet, TrainConfig};
use adhd_eeg::importance::{channel_importance, ImportanceConfig};
use adhd_eeg::pipeline::{Pipeline, PipelineConfig};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let train = pipeline.dataset(&synth_dataset(&SynthConfig::default().with_subjects(24))?)?;
    let test = pipeline.dataset(&synth_dataset(&SynthConfig { seed: 2, ..SynthConfig::default().with_subjects(8) })?)?;

    let mut model = ResNet::new(ModelConfig::default().with_width_factor(0.25), 0)?;
    model.train(&train, &TrainConfig { epochs: 10, ..TrainConfig::default() })?;

    let r = channel_importance(&model, &test, &ImportanceConfig { repeats: 9, ..ImportanceConfig::default() })?;
    println!("baseline accuracy {:.3}; planted: Fp1 Fp2 O1 O2\n", r.baseline_accuracy);
    print!("{}", r.to_tsv());
    Ok(())
}
