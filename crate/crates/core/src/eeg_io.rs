//! Portable EEG interchange formats.
//!
//! Recordings travel as EEG-CSV v1 text files:
//!
//! ```text
//! #eegcsv v1 sample_rate_hz=128 subject=s01 label=1
//! Fz,Cz,Pz,C3,C4,T3,T4,Fp1,Fp2,F3,F4,F7,F8,P3,P4,T5,T6,O1,O2
//! 1.25,-3.5,...
//! ```
//!
//! The header's `label` is `0` (control), `1` (ADHD) or `?` (unknown).
//! Columns may arrive in any order and under legacy or modern 10-20 names;
//! loaded recordings always hold their rows in [`ChannelName::ALL`] order.
//! Amplitudes are microvolts.
//!
//! A dataset is described by a JSON manifest with a top-level `entries`
//! array of `{path, subject_id, label}` objects. Relative paths resolve
//! against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const N_CHANNELS: usize = 19;

#[derive(Debug, thiserror::Error)]
pub enum EegIoError {
    #[error("unknown channel name {0:?}")]
    UnknownChannel(String),
    #[error("channel {0} is missing")]
    MissingChannel(ChannelName),
    #[error("channel {0} appears more than once")]
    DuplicateChannel(ChannelName),
    #[error("line {line}: expected {expected} values, found {found}")]
    RaggedRows {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite sample at row {row}, column {col}")]
    NonFiniteSample { row: usize, col: usize },
    #[error("line {line}, column {col}: cannot parse {text:?} as a number")]
    BadNumber {
        line: usize,
        col: usize,
        text: String,
    },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("expected 19 channel rows, got {0}")]
    ChannelCount(usize),
    #[error("recording has no samples")]
    EmptyRecording,
    #[error("invalid sample rate {0}")]
    BadSampleRate(f64),
    #[error("subject {0:?} listed more than once")]
    DuplicateSubject(String),
    #[error("file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("bad label {0} (expected 0 or 1)")]
    BadLabel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl EegIoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EegIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One of the 19 electrodes of the 10-20 montage used by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelName {
    Fz,
    Cz,
    Pz,
    C3,
    C4,
    T3,
    T4,
    Fp1,
    Fp2,
    F3,
    F4,
    F7,
    F8,
    P3,
    P4,
    T5,
    T6,
    O1,
    O2,
}

impl ChannelName {
    /// Canonical channel order. Every channel-indexed tensor in the crate
    /// follows it.
    pub const ALL: [ChannelName; N_CHANNELS] = [
        ChannelName::Fz,
        ChannelName::Cz,
        ChannelName::Pz,
        ChannelName::C3,
        ChannelName::C4,
        ChannelName::T3,
        ChannelName::T4,
        ChannelName::Fp1,
        ChannelName::Fp2,
        ChannelName::F3,
        ChannelName::F4,
        ChannelName::F7,
        ChannelName::F8,
        ChannelName::P3,
        ChannelName::P4,
        ChannelName::T5,
        ChannelName::T6,
        ChannelName::O1,
        ChannelName::O2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ChannelName> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelName::Fz => "Fz",
            ChannelName::Cz => "Cz",
            ChannelName::Pz => "Pz",
            ChannelName::C3 => "C3",
            ChannelName::C4 => "C4",
            ChannelName::T3 => "T3",
            ChannelName::T4 => "T4",
            ChannelName::Fp1 => "Fp1",
            ChannelName::Fp2 => "Fp2",
            ChannelName::F3 => "F3",
            ChannelName::F4 => "F4",
            ChannelName::F7 => "F7",
            ChannelName::F8 => "F8",
            ChannelName::P3 => "P3",
            ChannelName::P4 => "P4",
            ChannelName::T5 => "T5",
            ChannelName::T6 => "T6",
            ChannelName::O1 => "O1",
            ChannelName::O2 => "O2",
        }
    }
}

impl fmt::Display for ChannelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelName {
    type Err = EegIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        normalize_channel_name(s)
    }
}

/// Modern 10-20 names that map onto the legacy labels used by the dataset.
const ALIASES: [(&str, ChannelName); 4] = [
    ("P7", ChannelName::T5),
    ("P8", ChannelName::T6),
    ("T7", ChannelName::T3),
    ("T8", ChannelName::T4),
];

/// Case-insensitive lookup of a channel label, accepting the modern aliases
/// P7/P8 (and T7/T8).
pub fn normalize_channel_name(raw: &str) -> Result<ChannelName, EegIoError> {
    let trimmed = raw.trim();
    if let Some(ch) = ChannelName::ALL
        .iter()
        .find(|c| c.as_str().eq_ignore_ascii_case(trimmed))
    {
        return Ok(*ch);
    }
    ALIASES
        .iter()
        .find(|(alias, _)| alias.eq_ignore_ascii_case(trimmed))
        .map(|(_, ch)| *ch)
        .ok_or_else(|| EegIoError::UnknownChannel(raw.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Control = 0,
    Adhd = 1,
}

impl Label {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Control),
            1 => Some(Label::Adhd),
            _ => None,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_index(v as usize).ok_or_else(|| format!("bad label {v}"))
    }
}

/// A multichannel EEG recording with rows in canonical channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub label: Option<Label>,
    pub sample_rate_hz: f64,
    /// `[19 × N]` microvolts.
    pub data: Array2<f64>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        label: Option<Label>,
        sample_rate_hz: f64,
        data: Array2<f64>,
    ) -> Result<Self, EegIoError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(EegIoError::BadSampleRate(sample_rate_hz));
        }
        let (rows, cols) = data.dim();
        if rows != N_CHANNELS {
            return Err(EegIoError::ChannelCount(rows));
        }
        if cols == 0 {
            return Err(EegIoError::EmptyRecording);
        }
        if let Some(((ch, t), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(EegIoError::NonFiniteSample { row: t, col: ch });
        }
        let subject_id = subject_id.into();
        validate_subject_id(&subject_id)?;
        Ok(Recording {
            subject_id,
            label,
            sample_rate_hz,
            data,
        })
    }

    pub fn channels(&self) -> &'static [ChannelName; N_CHANNELS] {
        &ChannelName::ALL
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }
}

fn validate_subject_id(id: &str) -> Result<(), EegIoError> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(EegIoError::BadHeader(format!(
            "subject id {id:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<(f64, String, Option<Label>), EegIoError> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#eegcsv") || tokens.next() != Some("v1") {
        return Err(EegIoError::BadHeader(format!(
            "expected '#eegcsv v1', got {line:?}"
        )));
    }
    let (mut rate, mut subject, mut label) = (None, None, None);
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| EegIoError::BadHeader(format!("malformed field {tok:?}")))?;
        match key {
            "sample_rate_hz" => {
                let r: f64 = value
                    .parse()
                    .map_err(|_| EegIoError::BadHeader(format!("bad sample rate {value:?}")))?;
                if !(r.is_finite() && r > 0.0) {
                    return Err(EegIoError::BadSampleRate(r));
                }
                rate = Some(r);
            }
            "subject" => subject = Some(value.to_string()),
            "label" => {
                label = Some(match value {
                    "0" => Some(Label::Control),
                    "1" => Some(Label::Adhd),
                    "?" => None,
                    other => return Err(EegIoError::BadLabel(other.to_string())),
                })
            }
            other => return Err(EegIoError::BadHeader(format!("unknown field {other:?}"))),
        }
    }
    let rate = rate.ok_or_else(|| EegIoError::BadHeader("missing sample_rate_hz".into()))?;
    let subject = subject.ok_or_else(|| EegIoError::BadHeader("missing subject".into()))?;
    let label = label.ok_or_else(|| EegIoError::BadHeader("missing label".into()))?;
    validate_subject_id(&subject)?;
    Ok((rate, subject, label))
}

/// Parse an EEG-CSV v1 document.
pub fn parse_recording(text: &str) -> Result<Recording, EegIoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| EegIoError::BadHeader("empty document".into()))?;
    let (sample_rate_hz, subject_id, label) = parse_header(header.trim_end())?;

    let (_, names) = lines
        .next()
        .ok_or_else(|| EegIoError::BadHeader("missing channel line".into()))?;
    let mut column_of = [usize::MAX; N_CHANNELS];
    let mut n_cols = 0;
    for (col, raw) in names.trim_end().split(',').enumerate() {
        let ch = normalize_channel_name(raw)?;
        if column_of[ch.index()] != usize::MAX {
            return Err(EegIoError::DuplicateChannel(ch));
        }
        column_of[ch.index()] = col;
        n_cols += 1;
    }
    if let Some(missing) = ChannelName::ALL
        .iter()
        .find(|c| column_of[c.index()] == usize::MAX)
    {
        return Err(EegIoError::MissingChannel(*missing));
    }

    let mut samples: Vec<f64> = Vec::new();
    let mut row = 0usize;
    let mut values = Vec::with_capacity(n_cols);
    for (lineno, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        values.clear();
        for (col, field) in line.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| EegIoError::BadNumber {
                line: lineno + 1,
                col,
                text: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(EegIoError::NonFiniteSample { row, col });
            }
            values.push(v);
        }
        if values.len() != n_cols {
            return Err(EegIoError::RaggedRows {
                line: lineno + 1,
                expected: n_cols,
                found: values.len(),
            });
        }
        samples.extend(column_of.iter().map(|&c| values[c]));
        row += 1;
    }
    if row == 0 {
        return Err(EegIoError::EmptyRecording);
    }
    // samples is [N × 19]; store as [19 × N]
    let by_time = Array2::from_shape_vec((row, N_CHANNELS), samples)
        .expect("row-major sample buffer has N·19 entries");
    Recording::new(
        subject_id,
        label,
        sample_rate_hz,
        by_time.reversed_axes().as_standard_layout().into_owned(),
    )
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording, EegIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EegIoError::io(path, e))?;
    parse_recording(&text)
}

/// Serialize as EEG-CSV v1 with columns in canonical order. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn to_eegcsv(rec: &Recording) -> String {
    let label = match rec.label {
        Some(Label::Control) => "0",
        Some(Label::Adhd) => "1",
        None => "?",
    };
    let mut out = String::with_capacity(rec.n_samples() * N_CHANNELS * 8 + 128);
    let _ = writeln!(
        out,
        "#eegcsv v1 sample_rate_hz={} subject={} label={}",
        rec.sample_rate_hz, rec.subject_id, label
    );
    let names: Vec<&str> = ChannelName::ALL.iter().map(|c| c.as_str()).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for t in 0..rec.n_samples() {
        for ch in 0..N_CHANNELS {
            if ch > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", rec.data[[ch, t]]);
        }
        out.push('\n');
    }
    out
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<(), EegIoError> {
    let path = path.as_ref();
    std::fs::write(path, to_eegcsv(rec)).map_err(|e| EegIoError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawManifest {
    entries: Vec<RawEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    path: PathBuf,
    subject_id: String,
    label: serde_json::Value,
}

impl DatasetManifest {
    /// Validate and resolve relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, EegIoError> {
        let raw: RawManifest = serde_json::from_str(text)?;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(raw.entries.len());
        for e in raw.entries {
            let label = e
                .label
                .as_u64()
                .and_then(|v| Label::from_index(v as usize))
                .ok_or_else(|| EegIoError::BadLabel(e.label.to_string()))?;
            if !seen.insert(e.subject_id.clone()) {
                return Err(EegIoError::DuplicateSubject(e.subject_id));
            }
            let path = if e.path.is_absolute() {
                e.path
            } else {
                base_dir.join(e.path)
            };
            if !path.is_file() {
                return Err(EegIoError::MissingFile(path));
            }
            entries.push(ManifestEntry {
                path,
                subject_id: e.subject_id,
                label,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, EegIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EegIoError::io(path, e))?;
    DatasetManifest::from_json(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), EegIoError> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_json()).map_err(|e| EegIoError::io(path, e))
}
