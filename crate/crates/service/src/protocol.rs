//! Stimulus generation for the three screening tests.
//!
//! 1. Color pair: two circles, same or different color.
//! 2. Line orientation: a line at one of eight angles, answered with its
//!    number on the reference map (1 = horizontal, then clockwise in
//!    22.5° steps).
//! 3. Image–word: an icon and a word that names it or names another icon.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::assets::ICONS;

/// Smallest Euclidean RGB distance between the circles of a "different" trial.
pub const MIN_COLOR_DISTANCE: f64 = 120.0;
pub const ORIENTATION_STEP_DEG: f64 = 22.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    ColorPair,
    LineOrientation,
    ImageWord,
}

impl TestKind {
    /// Block order within a session.
    pub const ALL: [TestKind; 3] = [TestKind::ColorPair, TestKind::LineOrientation, TestKind::ImageWord];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stimulus {
    ColorPair { left_color: String, right_color: String },
    LineOrientation { angle_deg: f64 },
    ImageWord { image_id: String, word: String },
}

/// A response or correct answer. Travels as a string: `same`, `different`,
/// `1`–`8`, `match` or `mismatch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Answer {
    Same,
    Different,
    Orientation(u8),
    Match,
    Mismatch,
}

impl From<Answer> for String {
    fn from(a: Answer) -> String {
        match a {
            Answer::Same => "same".into(),
            Answer::Different => "different".into(),
            Answer::Orientation(i) => i.to_string(),
            Answer::Match => "match".into(),
            Answer::Mismatch => "mismatch".into(),
        }
    }
}

impl TryFrom<String> for Answer {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" => Ok(Answer::Same),
            "different" => Ok(Answer::Different),
            "match" => Ok(Answer::Match),
            "mismatch" => Ok(Answer::Mismatch),
            other => match other.parse::<u8>() {
                Ok(i) => Ok(Answer::Orientation(i)),
                Err(_) => Err(format!("unrecognized answer {s:?}")),
            },
        }
    }
}

impl Answer {
    pub fn fits(self, kind: TestKind) -> bool {
        match kind {
            TestKind::ColorPair => matches!(self, Answer::Same | Answer::Different),
            TestKind::LineOrientation => matches!(self, Answer::Orientation(1..=8)),
            TestKind::ImageWord => matches!(self, Answer::Match | Answer::Mismatch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: String,
    pub test_kind: TestKind,
    pub stimulus: Stimulus,
    pub correct_answer: Answer,
}

/// What the participant's client sees: the trial without its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialView {
    pub trial_id: String,
    pub test_kind: TestKind,
    pub stimulus: Stimulus,
}

impl TrialSpec {
    pub fn view(&self) -> TrialView {
        TrialView {
            trial_id: self.trial_id.clone(),
            test_kind: self.test_kind,
            stimulus: self.stimulus.clone(),
        }
    }

    /// The answer follows from the stimulus alone.
    pub fn is_consistent(&self) -> bool {
        match (&self.stimulus, self.correct_answer) {
            (Stimulus::ColorPair { left_color, right_color }, a) => {
                self.test_kind == TestKind::ColorPair
                    && a == if left_color == right_color { Answer::Same } else { Answer::Different }
            }
            (Stimulus::LineOrientation { angle_deg }, Answer::Orientation(i)) => {
                self.test_kind == TestKind::LineOrientation && (1..=8).contains(&i) && *angle_deg == (i - 1) as f64 * ORIENTATION_STEP_DEG
            }
            (Stimulus::ImageWord { image_id, word }, a) => {
                let canonical = ICONS.iter().find(|i| i.image_id == image_id).map(|i| i.word);
                self.test_kind == TestKind::ImageWord
                    && canonical.is_some()
                    && a == if canonical == Some(word.as_str()) { Answer::Match } else { Answer::Mismatch }
            }
            _ => false,
        }
    }
}

pub fn hex_color(rgb: [u8; 3]) -> String {
    format!("#{:02X}{:02X}{:02X}", rgb[0], rgb[1], rgb[2])
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `n` booleans, half true (the odd one decided by a coin), shuffled.
fn balanced(n: usize, rng: &mut SplitMix64) -> Vec<bool> {
    let mut trues = n / 2;
    if n % 2 == 1 && rng.random_bool(0.5) {
        trues += 1;
    }
    let mut v: Vec<bool> = (0..n).map(|i| i < trues).collect();
    v.shuffle(rng);
    v
}

/// Trials of all three blocks in order; identical for identical inputs.
pub fn generate_trials(trials_per_test: usize, seed: u64) -> Vec<TrialSpec> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(3 * trials_per_test);
    let push = |kind: TestKind, stimulus: Stimulus, correct_answer: Answer, trials: &mut Vec<TrialSpec>| {
        trials.push(TrialSpec {
            trial_id: format!("t{:03}", trials.len() + 1),
            test_kind: kind,
            stimulus,
            correct_answer,
        })
    };

    for same in balanced(trials_per_test, &mut rng) {
        let left: [u8; 3] = rng.random();
        let right = if same {
            left
        } else {
            loop {
                let c: [u8; 3] = rng.random();
                if color_distance(left, c) >= MIN_COLOR_DISTANCE {
                    break c;
                }
            }
        };
        let stimulus = Stimulus::ColorPair {
            left_color: hex_color(left),
            right_color: hex_color(right),
        };
        push(TestKind::ColorPair, stimulus, if same { Answer::Same } else { Answer::Different }, &mut trials);
    }

    for _ in 0..trials_per_test {
        let index: u8 = rng.random_range(1..=8);
        let stimulus = Stimulus::LineOrientation {
            angle_deg: (index - 1) as f64 * ORIENTATION_STEP_DEG,
        };
        push(TestKind::LineOrientation, stimulus, Answer::Orientation(index), &mut trials);
    }

    for matching in balanced(trials_per_test, &mut rng) {
        let image = rng.random_range(0..ICONS.len());
        let word_of = if matching {
            image
        } else {
            (image + rng.random_range(1..ICONS.len())) % ICONS.len()
        };
        let stimulus = Stimulus::ImageWord {
            image_id: ICONS[image].image_id.to_string(),
            word: ICONS[word_of].word.to_string(),
        };
        push(TestKind::ImageWord, stimulus, if matching { Answer::Match } else { Answer::Mismatch }, &mut trials);
    }
    trials
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fifteen_trials_in_block_order() {
        let trials = generate_trials(5, 7);
        assert_eq!(trials.len(), 15);
        let kinds: Vec<TestKind> = trials.iter().map(|t| t.test_kind).collect();
        for (i, k) in kinds.iter().enumerate() {
            assert_eq!(*k, TestKind::ALL[i / 5]);
        }
        assert_eq!(trials, generate_trials(5, 7));
        assert_ne!(trials, generate_trials(5, 8));
    }

    #[test]
    fn answers_travel_as_strings() {
        for (a, s) in [(Answer::Same, "\"same\""), (Answer::Orientation(3), "\"3\""), (Answer::Mismatch, "\"mismatch\"")] {
            assert_eq!(serde_json::to_string(&a).unwrap(), s);
            assert_eq!(serde_json::from_str::<Answer>(s).unwrap(), a);
        }
        assert!(!Answer::Orientation(9).fits(TestKind::LineOrientation));
        assert!(!Answer::Same.fits(TestKind::ImageWord));
        assert!(serde_json::from_str::<Answer>("\"maybe\"").is_err());
    }

    proptest! {
        #[test]
        fn every_trial_is_consistent_and_balanced(seed: u64, n in 1usize..40) {
            let trials = generate_trials(n, seed);
            prop_assert_eq!(trials.len(), 3 * n);
            prop_assert!(trials.iter().all(TrialSpec::is_consistent));
            for (kind, yes) in [(TestKind::ColorPair, Answer::Same), (TestKind::ImageWord, Answer::Match)] {
                let count = trials.iter().filter(|t| t.test_kind == kind && t.correct_answer == yes).count();
                prop_assert!(count == n / 2 || count == n.div_ceil(2));
            }
            for t in &trials {
                if let Stimulus::ColorPair { left_color, right_color } = &t.stimulus {
                    let parse = |s: &str| -> [u8; 3] {
                        let v = u32::from_str_radix(&s[1..], 16).unwrap();
                        [(v >> 16) as u8, (v >> 8) as u8, v as u8]
                    };
                    let d = color_distance(parse(left_color), parse(right_color));
                    prop_assert!(d == 0.0 || d >= MIN_COLOR_DISTANCE);
                }
            }
        }
    }
}
