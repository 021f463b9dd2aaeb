//! Design the 1-30 Hz band-pass, print its response and window a recording.
//!
//! `cargo run --example bandpass`

use adhd_eeg::preprocess::{apply_filter, design_bandpass, segment};
use adhd_eeg::synth::{synth_dataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = design_bandpass(128.0, 1.0, 30.0)?;
    println!(
        "{} taps, transitions {} Hz / {} Hz, group delay {} samples",
        spec.taps,
        spec.low_transition_hz,
        spec.high_transition_hz,
        spec.group_delay_samples()
    );
    for f in [0.0, 0.2, 0.5, 1.0, 4.0, 10.0, 20.0, 30.0, 33.75, 40.0, 45.0, 64.0] {
        println!("{f:>6.2} Hz  {:>8.2} dB", 20.0 * spec.magnitude_at(f).log10());
    }

    let rec = synth_dataset(&SynthConfig::default().with_subjects(1))?.remove(0);
    let filtered = apply_filter(&rec, &spec)?;
    let segments = segment(&filtered, 3.0, 1.0)?;
    println!(
        "\n{:.0} s recording -> {} windows of {} samples",
        rec.duration_s(),
        segments.len(),
        segments[0].data.ncols()
    );
    Ok(())
}
