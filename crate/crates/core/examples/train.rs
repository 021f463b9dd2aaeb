//! Train a quarter-width network on planted-signal scalograms and save it.
//!
//! `cargo run --release --example train`

use adhd_eeg::bundle::ModelBundle;
use adhd_eeg::classifier::{ModelConfig, ResNet, TrainConfig};
use adhd_eeg::pipeline::{Pipeline, PipelineConfig};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pipeline_cfg = PipelineConfig::default();
    let pipeline = Pipeline::new(pipeline_cfg.clone())?;
    let recordings = synth_dataset(&SynthConfig::default().with_subjects(8))?;
    let set = pipeline.dataset(&recordings)?;

    let cfg = ModelConfig::default().with_width_factor(0.25);
    let mut model = ResNet::new(cfg, 0)?;
    println!("{} scalograms, {} parameters", set.len(), model.param_count());
    for e in model.train(&set, &TrainConfig { epochs: 5, ..TrainConfig::default() })? {
        println!("epoch {}  loss {:.4}  train acc {:.3}", e.epoch, e.mean_loss, e.train_acc);
    }

    let dir = std::env::temp_dir().join("adhd-eeg-example-model");
    let bundle = ModelBundle::new(model, pipeline_cfg)?;
    bundle.save(&dir)?;
    let r = ModelBundle::load(&dir)?.infer(&recordings[0])?;
    println!("saved to {}; {} ({:?}) -> p_adhd {:.3} over {} segments", dir.display(), r.subject_id, recordings[0].label, r.p_adhd, r.n_segments);
    Ok(())
}
