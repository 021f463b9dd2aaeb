//! Band-pass filtering and overlapping windowing of recordings.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::eeg_io::{Label, Recording, N_CHANNELS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("band edges must satisfy 0 < low < high (got {low_hz} Hz, {high_hz} Hz)")]
    BadBand { low_hz: f64, high_hz: f64 },
    #[error("high edge {high_hz} Hz is not below Nyquist ({nyquist_hz} Hz)")]
    NyquistViolation { high_hz: f64, nyquist_hz: f64 },
    #[error("filter designed for {filter_hz} Hz applied to a {recording_hz} Hz recording")]
    RateMismatch { filter_hz: f64, recording_hz: f64 },
    #[error("recording has {samples} samples, filter needs at least {taps}")]
    TooShort { samples: usize, taps: usize },
    #[error("recording lasts {duration_s} s, shorter than one {window_s} s window")]
    InsufficientLength { duration_s: f64, window_s: f64 },
    #[error("window {window_s} s / hop {hop_s} s is not representable at {sample_rate_hz} Hz")]
    BadWindow {
        window_s: f64,
        hop_s: f64,
        sample_rate_hz: f64,
    },
}

/// Linear-phase FIR band-pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
    pub low_transition_hz: f64,
    pub high_transition_hz: f64,
    pub taps: usize,
    pub coefficients: Vec<f64>,
}

impl FilterSpec {
    /// Magnitude of the frequency response at `freq_hz`.
    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let (re, im) = self
            .coefficients
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, &h)| {
                let phase = w * k as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            });
        re.hypot(im)
    }

    pub fn group_delay_samples(&self) -> usize {
        (self.taps - 1) / 2
    }
}

/// Transition width rule of common EEG toolboxes: a quarter of the edge
/// frequency, at least 2 Hz, but never past DC or Nyquist.
fn transition_widths(sample_rate_hz: f64, low_hz: f64, high_hz: f64) -> (f64, f64) {
    let low = (0.25 * low_hz).max(2.0).min(low_hz);
    let high = (0.25 * high_hz).max(2.0).min(sample_rate_hz / 2.0 - high_hz);
    (low, high)
}

fn hamming_lowpass(cutoff_hz: f64, sample_rate_hz: f64, taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate_hz;
    let center = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as f64 - center;
            let sinc = if n == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * n).sin() / (PI * n)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);
    h
}

/// Hamming-windowed sinc band-pass.
///
/// Each cutoff sits in the middle of its transition band, so `low_hz` and
/// `high_hz` are the edges of the flat passband. The length is the smallest
/// odd integer at least `3.3 · fs / min(transition)`. The design is the
/// difference of two unit-DC-gain low-passes, which rejects DC exactly up to
/// rounding.
pub fn design_bandpass(
    sample_rate_hz: f64,
    low_hz: f64,
    high_hz: f64,
) -> Result<FilterSpec, PreprocessError> {
    if !(low_hz > 0.0 && high_hz > low_hz) {
        return Err(PreprocessError::BadBand { low_hz, high_hz });
    }
    let nyquist_hz = sample_rate_hz / 2.0;
    if high_hz >= nyquist_hz {
        return Err(PreprocessError::NyquistViolation { high_hz, nyquist_hz });
    }
    let (low_tb, high_tb) = transition_widths(sample_rate_hz, low_hz, high_hz);
    let mut taps = (3.3 * sample_rate_hz / low_tb.min(high_tb)).ceil() as usize;
    if taps % 2 == 0 {
        taps += 1;
    }
    let upper = hamming_lowpass(high_hz + high_tb / 2.0, sample_rate_hz, taps);
    let lower = hamming_lowpass(low_hz - low_tb / 2.0, sample_rate_hz, taps);
    let mut coefficients: Vec<f64> = upper.iter().zip(&lower).map(|(u, l)| u - l).collect();
    // exact symmetry; the two halves only differ by rounding
    for i in 0..taps / 2 {
        let avg = 0.5 * (coefficients[i] + coefficients[taps - 1 - i]);
        coefficients[i] = avg;
        coefficients[taps - 1 - i] = avg;
    }
    Ok(FilterSpec {
        low_hz,
        high_hz,
        sample_rate_hz,
        low_transition_hz: low_tb,
        high_transition_hz: high_tb,
        taps,
        coefficients,
    })
}

/// Zero-delay filtering of one channel with reflect padding (`x[-k] = x[k]`).
fn filter_row(x: ArrayView1<f64>, h: &[f64], out: &mut [f64]) {
    let n = x.len();
    let half = (h.len() - 1) / 2;
    let mut padded = Vec::with_capacity(n + 2 * half);
    padded.extend((1..=half).rev().map(|k| x[k]));
    padded.extend(x.iter().copied());
    padded.extend((0..half).map(|k| x[n - 2 - k]));
    for (i, o) in out.iter_mut().enumerate() {
        *o = padded[i..i + h.len()]
            .iter()
            .zip(h)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Filter every channel; output is time-aligned with the input.
pub fn apply_filter(rec: &Recording, spec: &FilterSpec) -> Result<Recording, PreprocessError> {
    if (spec.sample_rate_hz - rec.sample_rate_hz).abs() > 1e-9 * rec.sample_rate_hz {
        return Err(PreprocessError::RateMismatch {
            filter_hz: spec.sample_rate_hz,
            recording_hz: rec.sample_rate_hz,
        });
    }
    let n = rec.n_samples();
    if n < spec.taps {
        return Err(PreprocessError::TooShort {
            samples: n,
            taps: spec.taps,
        });
    }
    let mut data = Array2::<f64>::zeros((N_CHANNELS, n));
    let mut row_out = vec![0.0; n];
    for ch in 0..N_CHANNELS {
        filter_row(rec.data.row(ch), &spec.coefficients, &mut row_out);
        data.row_mut(ch)
            .iter_mut()
            .zip(&row_out)
            .for_each(|(d, v)| *d = *v);
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        label: rec.label,
        sample_rate_hz: rec.sample_rate_hz,
        data,
    })
}

/// One window of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub label: Option<Label>,
    pub segment_index: usize,
    pub start_sample: usize,
    pub sample_rate_hz: f64,
    /// `[19 × W]` microvolts.
    pub data: Array2<f64>,
}

/// Window geometry in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windowing {
    pub window: usize,
    pub hop: usize,
}

impl Windowing {
    pub fn new(window_s: f64, hop_s: f64, sample_rate_hz: f64) -> Result<Self, PreprocessError> {
        let window = (window_s * sample_rate_hz).round();
        let hop = (hop_s * sample_rate_hz).round();
        if !(window >= 1.0 && hop >= 1.0 && window.is_finite() && hop.is_finite()) {
            return Err(PreprocessError::BadWindow {
                window_s,
                hop_s,
                sample_rate_hz,
            });
        }
        Ok(Windowing {
            window: window as usize,
            hop: hop as usize,
        })
    }

    /// Number of full windows in `n` samples.
    pub fn count(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            (n - self.window) / self.hop + 1
        }
    }
}

/// Cut a recording into overlapping windows; a trailing partial window is
/// dropped.
pub fn segment(rec: &Recording, window_s: f64, hop_s: f64) -> Result<Vec<Segment>, PreprocessError> {
    let geometry = Windowing::new(window_s, hop_s, rec.sample_rate_hz)?;
    let n = rec.n_samples();
    if n < geometry.window {
        return Err(PreprocessError::InsufficientLength {
            duration_s: rec.duration_s(),
            window_s,
        });
    }
    Ok((0..geometry.count(n))
        .map(|i| {
            let start = i * geometry.hop;
            Segment {
                subject_id: rec.subject_id.clone(),
                label: rec.label,
                segment_index: i,
                start_sample: start,
                sample_rate_hz: rec.sample_rate_hz,
                data: rec
                    .data
                    .slice(s![.., start..start + geometry.window])
                    .to_owned(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recording(n: usize, f: impl Fn(usize, usize) -> f64) -> Recording {
        let data = Array2::from_shape_fn((N_CHANNELS, n), |(c, t)| f(c, t));
        Recording::new("s", Some(Label::Control), 128.0, data).unwrap()
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn default_band_length_and_symmetry() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        assert_eq!(spec.taps, 423);
        assert_eq!(spec.low_transition_hz, 1.0);
        assert_eq!(spec.high_transition_hz, 7.5);
        let h = &spec.coefficients;
        for i in 0..h.len() {
            assert!((h[i] - h[h.len() - 1 - i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn band_errors() {
        assert!(matches!(
            design_bandpass(128.0, 30.0, 1.0),
            Err(PreprocessError::BadBand { .. })
        ));
        assert!(matches!(
            design_bandpass(128.0, 0.0, 30.0),
            Err(PreprocessError::BadBand { .. })
        ));
        assert!(matches!(
            design_bandpass(128.0, 1.0, 64.0),
            Err(PreprocessError::NyquistViolation { .. })
        ));
    }

    #[test]
    fn dc_rejected_relative_to_passband() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        let dc = spec.coefficients.iter().sum::<f64>().abs();
        assert!(dc <= 0.01 * spec.magnitude_at(10.0));
        assert!(spec.magnitude_at(0.0) <= 0.01 * spec.magnitude_at(10.0));
    }

    #[test]
    fn magnitude_response_targets() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        assert!(db(spec.magnitude_at(0.2)) <= -20.0);
        assert!(db(spec.magnitude_at(45.0)) <= -20.0);
        let pass: Vec<f64> = (0..=160)
            .map(|i| db(spec.magnitude_at(4.0 + 0.1 * i as f64)))
            .collect();
        let ripple = pass.iter().cloned().fold(f64::MIN, f64::max)
            - pass.iter().cloned().fold(f64::MAX, f64::min);
        assert!(ripple <= 1.0, "ripple {ripple} dB");
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        let out = apply_filter(&recording(600, |_, _| 0.0), &spec).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_hz_tone_passes_with_unit_gain() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        let rec = recording(1280, |_, t| (2.0 * PI * 10.0 * t as f64 / 128.0).sin());
        let out = apply_filter(&rec, &spec).unwrap();
        // steady state: skip one filter length at each end
        let interior = out.data.slice(s![.., 423..1280 - 423]);
        let peak = interior.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() <= 0.05, "peak {peak}");
        // delay compensated: output tracks input sample by sample
        for t in 423..1280 - 423 {
            assert!((out.data[[0, t]] - rec.data[[0, t]]).abs() < 0.05);
        }
    }

    #[test]
    fn dc_offset_removed() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        let out = apply_filter(&recording(1280, |_, _| 5.0), &spec).unwrap();
        let interior = out.data.slice(s![.., 211..1280 - 211]);
        assert!(interior.iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn filter_preconditions() {
        let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
        assert!(matches!(
            apply_filter(&recording(422, |_, _| 0.0), &spec),
            Err(PreprocessError::TooShort { samples: 422, taps: 423 })
        ));
        let mut rec = recording(500, |_, _| 0.0);
        rec.sample_rate_hz = 256.0;
        assert!(matches!(
            apply_filter(&rec, &spec),
            Err(PreprocessError::RateMismatch { .. })
        ));
    }

    #[test]
    fn segmentation_examples() {
        let segs = segment(&recording(1280, |c, t| (c * 10_000 + t) as f64), 3.0, 1.0).unwrap();
        assert_eq!(segs.len(), 8);
        let starts: Vec<usize> = segs.iter().map(|s| s.start_sample).collect();
        assert_eq!(starts, (0..8).map(|i| i * 128).collect::<Vec<_>>());
        assert!(segs.iter().all(|s| s.data.dim() == (N_CHANNELS, 384)));
        assert_eq!(segs[2].data[[1, 0]], (10_000 + 256) as f64);

        assert_eq!(segment(&recording(384, |_, _| 0.0), 3.0, 1.0).unwrap().len(), 1);
        assert!(matches!(
            segment(&recording(371, |_, _| 0.0), 3.0, 1.0),
            Err(PreprocessError::InsufficientLength { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn filter_is_linear(
            seed_a in proptest::collection::vec(-50.0f64..50.0, 8),
            seed_b in proptest::collection::vec(-50.0f64..50.0, 8),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let spec = design_bandpass(128.0, 1.0, 30.0).unwrap();
            let gen = |seed: &[f64]| recording(500, |c, t| seed[(c + t) % 8] * ((t as f64) * 0.37 + c as f64).sin());
            let (x, y) = (gen(&seed_a), gen(&seed_b));
            let mut mix = x.clone();
            mix.data = &x.data * alpha + &y.data * beta;
            let lhs = apply_filter(&mix, &spec).unwrap().data;
            let rhs = apply_filter(&x, &spec).unwrap().data * alpha + apply_filter(&y, &spec).unwrap().data * beta;
            let scale = rhs.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn segments_tile_the_source(n in 384usize..2000) {
            let rec = recording(n, |c, t| (c * 100_000 + t) as f64);
            let segs = segment(&rec, 3.0, 1.0).unwrap();
            prop_assert_eq!(segs.len(), (n - 384) / 128 + 1);
            for pair in segs.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                prop_assert_eq!(b.start_sample - a.start_sample, 128);
                prop_assert_eq!(a.data.slice(s![.., 128..]), b.data.slice(s![.., ..256]));
            }
            for seg in &segs {
                prop_assert_eq!(seg.start_sample, seg.segment_index * 128);
                prop_assert_eq!(seg.data.view(), rec.data.slice(s![.., seg.start_sample..seg.start_sample + 384]));
            }
        }
    }
}
