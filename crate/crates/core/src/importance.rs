//! Per-channel permutation importance in scalogram space.

use ndarray::{s, Array2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierError, ScalogramClassifier};
use crate::eeg_io::{ChannelName, Label, N_CHANNELS};
use crate::evaluation::{self, EvaluationError};
use crate::scalogram::Scalogram;

#[derive(Debug, thiserror::Error)]
pub enum ImportanceError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("shuffle mode needs at least two test samples")]
    TooFewForShuffle,
    #[error("model looks untrained (all-zero output layer)")]
    UntrainedModel,
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Channel planes permuted across samples.
    Shuffle,
    /// Channel planes replaced by standard-normal values.
    Noise,
}

impl std::str::FromStr for PerturbationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shuffle" => Ok(PerturbationMode::Shuffle),
            "noise" => Ok(PerturbationMode::Noise),
            other => Err(format!("unknown perturbation mode {other:?} (shuffle|noise)")),
        }
    }
}

/// Replacement for one channel across a whole test set.
#[derive(Debug, Clone, PartialEq)]
pub enum Replacement {
    /// Sample `i` takes the plane of sample `perm[i]`.
    Permutation(Vec<usize>),
    /// Every sample's plane is redrawn from a seeded standard normal,
    /// sample after sample in row-major order.
    Noise { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPerturbation {
    pub channel: usize,
    pub replacement: Replacement,
}

/// Standard-normal planes `[n × h × w]` flattened per sample.
pub fn noise_planes(n: usize, h: usize, w: usize, seed: u64) -> Vec<Array2<f32>> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..n)
        .map(|_| Array2::from_shape_simple_fn((h, w), || StandardNormal.sample(&mut rng)))
        .collect()
}

/// Copies of `inputs` with one channel replaced.
pub fn apply_perturbation(inputs: &[ArrayView3<'_, f32>], p: &ChannelPerturbation) -> Vec<ndarray::Array3<f32>> {
    let mut out: Vec<_> = inputs.iter().map(|x| x.to_owned()).collect();
    match &p.replacement {
        Replacement::Permutation(perm) => {
            for (dst, &src) in out.iter_mut().zip(perm) {
                dst.slice_mut(s![p.channel, .., ..]).assign(&inputs[src].slice(s![p.channel, .., ..]));
            }
        }
        Replacement::Noise { seed } => {
            if let Some(first) = inputs.first() {
                let (_, h, w) = first.dim();
                for (dst, plane) in out.iter_mut().zip(noise_planes(inputs.len(), h, w, *seed)) {
                    dst.slice_mut(s![p.channel, .., ..]).assign(&plane);
                }
            }
        }
    }
    out
}

/// Reference implementation for [`ScalogramClassifier::predict_perturbed`]:
/// materialize each perturbed set and classify it.
pub fn predict_perturbed_by_copy<M: ScalogramClassifier + ?Sized>(
    model: &M,
    inputs: &[ArrayView3<'_, f32>],
    perturbations: &[ChannelPerturbation],
) -> Result<Vec<Vec<Label>>, ClassifierError> {
    perturbations
        .par_iter()
        .map(|p| {
            let owned = apply_perturbation(inputs, p);
            let views: Vec<_> = owned.iter().map(|a| a.view()).collect();
            model.predict_labels(&views)
        })
        .collect()
}

fn channel_seed(seed: u64, channel: usize) -> u64 {
    seed ^ (channel as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `repeats` replacements of one channel, drawn from a stream seeded by
/// `(seed, channel)`.
fn replacements(n: usize, channel: usize, mode: PerturbationMode, repeats: usize, seed: u64) -> Vec<Replacement> {
    let mut rng = SplitMix64::seed_from_u64(channel_seed(seed, channel));
    (0..repeats)
        .map(|_| match mode {
            PerturbationMode::Shuffle => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                Replacement::Permutation(perm)
            }
            PerturbationMode::Noise => Replacement::Noise {
                seed: rand::Rng::random(&mut rng),
            },
        })
        .collect()
}

/// A perturbed copy of the test set: channel `c` permuted across samples or
/// replaced by noise, all other planes untouched. The permutation is a
/// plain seeded shuffle, so samples may keep their own plane.
pub fn permute_channel(
    test_set: &[Scalogram],
    channel: ChannelName,
    mode: PerturbationMode,
    seed: u64,
) -> Result<Vec<Scalogram>, ImportanceError> {
    if test_set.is_empty() {
        return Err(ImportanceError::EmptyTestSet);
    }
    let replacement = replacements(test_set.len(), channel.index(), mode, 1, seed).remove(0);
    let views: Vec<_> = test_set.iter().map(|s| s.values.view()).collect();
    let perturbed = apply_perturbation(
        &views,
        &ChannelPerturbation {
            channel: channel.index(),
            replacement,
        },
    );
    Ok(test_set
        .iter()
        .zip(perturbed)
        .map(|(s, values)| Scalogram { values, ..s.clone() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub repeats: usize,
    pub mode: PerturbationMode,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            repeats: 19,
            mode: PerturbationMode::Shuffle,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub channel: ChannelName,
    /// Baseline accuracy minus mean perturbed accuracy.
    pub mean_drop: f64,
    /// Population standard deviation of the per-repeat drops.
    pub std_drop: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub baseline_accuracy: f64,
    pub mode: PerturbationMode,
    pub seed: u64,
    /// All 19 channels, largest `mean_drop` first; ties keep montage order.
    pub per_channel: Vec<ChannelImportance>,
}

impl ImportanceResult {
    pub fn get(&self, channel: ChannelName) -> Option<&ChannelImportance> {
        self.per_channel.iter().find(|c| c.channel == channel)
    }

    /// Channels of the `n` largest drops.
    pub fn top(&self, n: usize) -> Vec<ChannelName> {
        self.per_channel.iter().take(n).map(|c| c.channel).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("importance serializes")
    }

    /// Bar-chart data: `channel<TAB>mean_drop<TAB>std_drop` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("channel\tmean_drop\tstd_drop\n");
        for c in &self.per_channel {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", c.channel, c.mean_drop, c.std_drop));
        }
        out
    }
}

/// Accuracy drop per channel when that channel is perturbed, averaged over
/// `repeats` independent perturbations.
pub fn channel_importance<M: ScalogramClassifier + ?Sized>(
    model: &M,
    test_set: &[Scalogram],
    cfg: &ImportanceConfig,
) -> Result<ImportanceResult, ImportanceError> {
    if test_set.is_empty() {
        return Err(ImportanceError::EmptyTestSet);
    }
    if cfg.mode == PerturbationMode::Shuffle && test_set.len() < 2 {
        return Err(ImportanceError::TooFewForShuffle);
    }
    if cfg.repeats == 0 {
        return Err(ImportanceError::NoRepeats);
    }
    if model.looks_untrained() {
        return Err(ImportanceError::UntrainedModel);
    }
    let (labels, preds) = evaluation::predict_set(model, test_set)?;
    let score = |p: &[Label]| labels.iter().zip(p).filter(|(l, q)| l == q).count() as f64 / labels.len() as f64;
    let baseline = score(&preds);

    let perturbations: Vec<ChannelPerturbation> = (0..N_CHANNELS)
        .flat_map(|channel| {
            replacements(test_set.len(), channel, cfg.mode, cfg.repeats, cfg.seed)
                .into_iter()
                .map(move |replacement| ChannelPerturbation { channel, replacement })
        })
        .collect();
    let views: Vec<_> = test_set.iter().map(|s| s.values.view()).collect();
    let predicted = model.predict_perturbed(&views, &perturbations)?;

    let mut per_channel: Vec<ChannelImportance> = predicted
        .chunks(cfg.repeats)
        .zip(ChannelName::ALL)
        .map(|(runs, channel)| {
            let drops: Vec<f64> = runs.iter().map(|p| baseline - score(p)).collect();
            let mean = drops.iter().sum::<f64>() / drops.len() as f64;
            let var = drops.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / drops.len() as f64;
            ChannelImportance {
                channel,
                mean_drop: mean,
                std_drop: var.sqrt(),
                repeats: cfg.repeats,
            }
        })
        .collect();
    // stable sort keeps montage order among equal drops
    per_channel.sort_by(|a, b| b.mean_drop.total_cmp(&a.mean_drop));
    Ok(ImportanceResult {
        baseline_accuracy: baseline,
        mode: cfg.mode,
        seed: cfg.seed,
        per_channel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn set(n: usize) -> Vec<Scalogram> {
        (0..n)
            .map(|i| Scalogram {
                subject_id: format!("s{i}"),
                label: Some(if i % 2 == 0 { Label::Control } else { Label::Adhd }),
                segment_index: 0,
                values: Array3::from_shape_fn((N_CHANNELS, 4, 5), |(c, a, b)| (i * 1000 + c * 20 + a * 5 + b) as f32),
                freqs_hz: vec![1.0, 2.0, 3.0, 4.0],
            })
            .collect()
    }

    #[test]
    fn perturbation_is_local() {
        let data = set(6);
        for mode in [PerturbationMode::Shuffle, PerturbationMode::Noise] {
            let out = permute_channel(&data, ChannelName::Cz, mode, 3).unwrap();
            for (a, b) in data.iter().zip(&out) {
                for ch in ChannelName::ALL {
                    if ch != ChannelName::Cz {
                        assert_eq!(a.plane(ch), b.plane(ch), "{mode:?} touched {ch}");
                    }
                }
            }
            assert_ne!(data, out);
        }
    }

    #[test]
    fn shuffle_moves_whole_planes() {
        let data = set(5);
        let out = permute_channel(&data, ChannelName::O2, PerturbationMode::Shuffle, 9).unwrap();
        let mut sources: Vec<usize> = out
            .iter()
            .map(|s| data.iter().position(|d| d.plane(ChannelName::O2) == s.plane(ChannelName::O2)).unwrap())
            .collect();
        sources.sort_unstable();
        assert_eq!(sources, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_sample_shuffle_is_identity() {
        let data = set(1);
        let out = permute_channel(&data, ChannelName::Fp1, PerturbationMode::Shuffle, 1).unwrap();
        assert_eq!(out, data);
        assert!(matches!(
            permute_channel(&[], ChannelName::Fp1, PerturbationMode::Shuffle, 1),
            Err(ImportanceError::EmptyTestSet)
        ));
    }

    #[test]
    fn noise_is_standard_normal() {
        let planes = noise_planes(20, 10, 10, 4);
        let v: Vec<f64> = planes.iter().flat_map(|p| p.iter().map(|&x| x as f64)).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() <= 0.1, "{mean}");
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }
}
