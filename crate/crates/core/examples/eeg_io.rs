//! Write a synthetic recording as EEG-CSV and read it back.
//!
//! `cargo run --example eeg_io`

use adhd_eeg::eeg_io::{parse_recording, to_eegcsv};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig { duration_s: 4.0, ..SynthConfig::default().with_subjects(2) };
    for rec in synth_dataset(&cfg)? {
        let text = to_eegcsv(&rec);
        let back = parse_recording(&text)?;
        println!(
            "{} ({:?}): {} channels x {} samples at {} Hz, {} bytes of EEG-CSV, round trip exact: {}",
            back.subject_id,
            back.label,
            back.data.nrows(),
            back.data.ncols(),
            back.sample_rate_hz,
            text.len(),
            back == rec
        );
    }
    let first = to_eegcsv(&synth_dataset(&cfg)?[0]);
    let head: Vec<&str> = first.lines().take(3).collect();
    println!("\n{}", head.join("\n"));
    Ok(())
}
