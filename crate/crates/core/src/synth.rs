//! Planted-signal EEG generator.
//!
//! Every channel carries independent background activity: a first-order
//! autoregressive process (smooth, low-frequency dominated) plus white
//! noise, each with a per-subject gain. ADHD-labelled subjects additionally
//! carry a sinusoid at `planted_freq_hz` on every planted channel. The
//! recording is cut into blocks of `burst_s` seconds; in each block every
//! planted channel is independently strong (with probability
//! `strong_probability`, amplitude uniform over `strong_amplitude_uv`) or
//! weak (`weak_amplitude_uv`, silent by default), and at least one is strong. Every stretch of
//! an ADHD recording is thus detectable, but no single channel carries the
//! class everywhere, so a classifier has to watch all planted channels.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::eeg_io::{write_manifest, write_recording, ChannelName, DatasetManifest, EegIoError, Label, ManifestEntry, Recording, N_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_adhd: usize,
    pub n_control: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
    pub planted_channels: Vec<ChannelName>,
    pub planted_freq_hz: f64,
    /// `(min, max)` planted amplitude of a strong channel, microvolts.
    pub strong_amplitude_uv: (f64, f64),
    /// `(min, max)` planted amplitude of a weak channel, microvolts.
    pub weak_amplitude_uv: (f64, f64),
    pub strong_probability: f64,
    /// Block length over which strong and weak channels are redrawn.
    pub burst_s: f64,
    pub ar_coeff: f64,
    /// Innovation standard deviation of the autoregressive background.
    pub ar_noise_uv: f64,
    pub white_noise_uv: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_adhd: 20,
            n_control: 20,
            duration_s: 10.0,
            sample_rate_hz: 128.0,
            seed: 1,
            planted_channels: vec![ChannelName::Fp1, ChannelName::Fp2, ChannelName::O1, ChannelName::O2],
            planted_freq_hz: 8.0,
            strong_amplitude_uv: (12.0, 20.0),
            weak_amplitude_uv: (0.0, 0.0),
            strong_probability: 0.3,
            burst_s: 3.0,
            ar_coeff: 0.95,
            ar_noise_uv: 3.0,
            white_noise_uv: 2.0,
        }
    }
}

impl SynthConfig {
    /// Split `subjects` evenly between the classes (ADHD gets the odd one).
    pub fn with_subjects(mut self, subjects: usize) -> Self {
        self.n_control = subjects / 2;
        self.n_adhd = subjects - self.n_control;
        self
    }

    pub fn validate(&self) -> Result<(), EegIoError> {
        let bad = |m: String| Err(EegIoError::BadHeader(m));
        if self.n_adhd + self.n_control == 0 {
            return bad("synthetic dataset needs at least one subject".into());
        }
        if !(self.sample_rate_hz > 0.0 && self.duration_s > 0.0) {
            return bad(format!(
                "duration {} s at {} Hz is not a recording",
                self.duration_s, self.sample_rate_hz
            ));
        }
        if (self.duration_s * self.sample_rate_hz).round() < 1.0 {
            return bad("recording would have no samples".into());
        }
        for (lo, hi) in [self.strong_amplitude_uv, self.weak_amplitude_uv] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("planted amplitude range ({lo}, {hi}) must be non-negative and ordered"));
            }
        }
        if !(self.strong_probability > 0.0 && self.strong_probability <= 1.0) {
            return bad(format!("strong_probability {} must lie in (0, 1]", self.strong_probability));
        }
        if !(self.burst_s > 0.0 && self.burst_s.is_finite()) {
            return bad(format!("burst length {} s must be positive", self.burst_s));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) {
            return bad(format!("AR coefficient {} is not stable", self.ar_coeff));
        }
        Ok(())
    }

    /// Subject ids and labels in generation order.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let adhd = (0..self.n_adhd).map(|i| (format!("adhd{:03}", i + 1), Label::Adhd));
        let control = (0..self.n_control).map(|i| (format!("ctrl{:03}", i + 1), Label::Control));
        adhd.chain(control).collect()
    }
}

/// One synthetic recording; `rng` drives every random choice.
pub fn synth_recording<R: Rng>(
    subject_id: &str,
    label: Label,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Recording, EegIoError> {
    cfg.validate()?;
    let n = (cfg.duration_s * cfg.sample_rate_hz).round() as usize;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Array2::<f64>::zeros((N_CHANNELS, n));
    let stationary = (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt();
    for mut row in data.rows_mut() {
        let ar_gain = cfg.ar_noise_uv * rng.random_range(0.7..1.3);
        let white_gain = cfg.white_noise_uv * rng.random_range(0.7..1.3);
        let mut state = ar_gain / stationary * std_normal.sample(rng);
        for v in row.iter_mut() {
            state = cfg.ar_coeff * state + ar_gain * std_normal.sample(rng);
            *v = state + white_gain * std_normal.sample(rng);
        }
    }
    if label == Label::Adhd {
        let omega = 2.0 * std::f64::consts::PI * cfg.planted_freq_hz / cfg.sample_rate_hz;
        let phases: Vec<f64> = cfg
            .planted_channels
            .iter()
            .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
            .collect();
        let block = ((cfg.burst_s * cfg.sample_rate_hz).round() as usize).max(1);
        for start in (0..n).step_by(block) {
            let strong = loop {
                let draw: Vec<bool> = cfg
                    .planted_channels
                    .iter()
                    .map(|_| rng.random_bool(cfg.strong_probability))
                    .collect();
                if draw.contains(&true) || draw.is_empty() {
                    break draw;
                }
            };
            for ((ch, &is_strong), phase) in cfg.planted_channels.iter().zip(&strong).zip(&phases) {
                let (lo, hi) = if is_strong {
                    cfg.strong_amplitude_uv
                } else {
                    cfg.weak_amplitude_uv
                };
                let amp = lo + rng.random::<f64>() * (hi - lo);
                let mut row = data.row_mut(ch.index());
                for t in start..(start + block).min(n) {
                    row[t] += amp * (omega * t as f64 + phase).sin();
                }
            }
        }
    }
    Recording::new(subject_id, Some(label), cfg.sample_rate_hz, data)
}

/// The whole planted-signal cohort. Each subject draws from its own stream,
/// seeded from the master seed and the subject id, so changing the cohort
/// size leaves existing subjects unchanged.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Recording>, EegIoError> {
    cfg.validate()?;
    cfg.subjects()
        .iter()
        .map(|(id, label)| {
            let mut rng = SplitMix64::seed_from_u64(cfg.seed ^ fnv1a(id.as_bytes()));
            synth_recording(id, *label, cfg, &mut rng)
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Write every recording as EEG-CSV plus `manifest.json` into `dir`.
pub fn write_synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest, EegIoError> {
    std::fs::create_dir_all(dir).map_err(|e| EegIoError::io(dir, e))?;
    let mut entries = Vec::new();
    for rec in synth_dataset(cfg)? {
        let file = PathBuf::from(format!("{}.csv", rec.subject_id));
        write_recording(&rec, dir.join(&file))?;
        entries.push(ManifestEntry {
            path: file,
            subject_id: rec.subject_id.clone(),
            label: rec.label.expect("synthetic recordings are labelled"),
        });
    }
    let manifest = DatasetManifest { entries };
    write_manifest(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_shape_and_determinism() {
        let cfg = SynthConfig {
            duration_s: 4.0,
            ..SynthConfig::default().with_subjects(5)
        };
        let a = synth_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().filter(|r| r.label == Some(Label::Adhd)).count(), 3);
        assert!(a.iter().all(|r| r.n_samples() == 512));
        assert_eq!(a, synth_dataset(&cfg).unwrap());
        let bigger = synth_dataset(&SynthConfig { n_adhd: 4, ..cfg.clone() }).unwrap();
        assert_eq!(bigger[0], a[0]);
        let other = synth_dataset(&SynthConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a[0].data, other[0].data);
    }

    #[test]
    fn planted_tone_only_in_adhd_planted_channels() {
        // With background switched off the tone is all that remains.
        let cfg = SynthConfig {
            ar_noise_uv: 0.0,
            white_noise_uv: 0.0,
            duration_s: 2.0,
            ..SynthConfig::default()
        };
        let mut rng = SplitMix64::seed_from_u64(3);
        let adhd = synth_recording("a", Label::Adhd, &cfg, &mut rng).unwrap();
        let ctrl = synth_recording("c", Label::Control, &cfg, &mut rng).unwrap();
        assert!(ctrl.data.iter().all(|&v| v == 0.0));
        for ch in ChannelName::ALL {
            let row = adhd.data.row(ch.index());
            let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if cfg.planted_channels.contains(&ch) {
                assert!(peak <= cfg.strong_amplitude_uv.1, "{ch}: {peak}");
            } else {
                assert_eq!(peak, 0.0, "{ch}");
            }
        }
    }

    #[test]
    fn every_block_has_a_strong_channel() {
        let cfg = SynthConfig {
            ar_noise_uv: 0.0,
            white_noise_uv: 0.0,
            duration_s: 1.0,
            ..SynthConfig::default()
        };
        let floor = 0.9 * cfg.strong_amplitude_uv.0;
        let mut rng = SplitMix64::seed_from_u64(8);
        let mut strong_counts = [0usize; 4];
        for i in 0..200 {
            let rec = synth_recording(&format!("a{i}"), Label::Adhd, &cfg, &mut rng).unwrap();
            let peaks: Vec<f64> = cfg
                .planted_channels
                .iter()
                .map(|ch| rec.data.row(ch.index()).iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .collect();
            assert!(peaks.iter().any(|&p| p >= floor), "{peaks:?}");
            for (c, p) in strong_counts.iter_mut().zip(&peaks) {
                *c += (*p >= floor) as usize;
            }
        }
        // P(strong | at least one strong) = 0.3 / (1 - 0.7^4) ≈ 0.39
        assert!(strong_counts.iter().all(|&c| (55..105).contains(&c)), "{strong_counts:?}");
    }

    #[test]
    fn strong_channels_are_redrawn_per_block() {
        let cfg = SynthConfig {
            ar_noise_uv: 0.0,
            white_noise_uv: 0.0,
            duration_s: 30.0,
            ..SynthConfig::default()
        };
        let mut rng = SplitMix64::seed_from_u64(5);
        let rec = synth_recording("a", Label::Adhd, &cfg, &mut rng).unwrap();
        let block = 384;
        let floor = 0.9 * cfg.strong_amplitude_uv.0;
        let patterns: std::collections::BTreeSet<Vec<bool>> = (0..10)
            .map(|b| {
                let pattern: Vec<bool> = cfg
                    .planted_channels
                    .iter()
                    .map(|ch| {
                        let row = rec.data.row(ch.index());
                        row.iter().skip(b * block).take(block).fold(0.0f64, |m, v| m.max(v.abs())) >= floor
                    })
                    .collect();
                assert!(pattern.contains(&true), "block {b}");
                pattern
            })
            .collect();
        assert!(patterns.len() >= 3, "{patterns:?}");
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { n_adhd: 0, n_control: 0, ..SynthConfig::default() },
            SynthConfig { strong_amplitude_uv: (3.0, 1.0), ..SynthConfig::default() },
            SynthConfig { strong_probability: 0.0, ..SynthConfig::default() },
            SynthConfig { ar_coeff: 1.0, ..SynthConfig::default() },
            SynthConfig { burst_s: 0.0, ..SynthConfig::default() },
            SynthConfig { duration_s: 0.0, ..SynthConfig::default() },
        ] {
            assert!(synth_dataset(&cfg).is_err(), "{cfg:?}");
        }
    }
}
