//! Morlet scalogram of an 8 Hz tone, then of a whole recording.
//!
//! `cargo run --example scalogram`

use std::f64::consts::PI;

use adhd_eeg::cwt::{cwt_transform, ScaleGrid, WaveletSpec};
use adhd_eeg::pipeline::{Pipeline, PipelineConfig};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let wavelet = WaveletSpec::default();
    let grid = ScaleGrid::log_spaced(64, 1.0, 30.0, &wavelet)?;
    let tone: Vec<f64> = (0..384).map(|t| (2.0 * PI * 8.0 * t as f64 / 128.0).sin()).collect();
    let w = cwt_transform(&tone, 128.0, &wavelet, &grid)?;
    let column = w.column(192);
    let (best, _) = column
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .unwrap();
    println!("8 Hz tone: strongest row {best} at {:.2} Hz", grid.freqs_hz[best]);
    for j in (0..grid.len()).step_by(8) {
        println!("  {:>6.2} Hz  |W| {:.4}", grid.freqs_hz[j], column[j].norm());
    }

    let pipeline = Pipeline::new(PipelineConfig::default())?;
    let rec = synth_dataset(&SynthConfig::default().with_subjects(1))?.remove(0);
    let scalograms = pipeline.scalograms(&rec)?;
    let dims = scalograms[0].values.dim();
    println!("\n{}: {} scalograms of {} x {} x {}", rec.subject_id, scalograms.len(), dims.0, dims.1, dims.2);
    Ok(())
}
