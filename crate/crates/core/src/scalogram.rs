//! Fixed-size scalogram tensors and their SCLG v1 file format.
//!
//! A scalogram stacks one `[n_scales × 100]` time-frequency plane per
//! channel: `|CWT|`, pooled to 100 time bins, `log1p`-compressed, then
//! standardized over the whole tensor.
//!
//! SCLG v1 layout: 8-byte magic `SCLG0001`, three little-endian `u32`
//! dimensions `(channels, scales, time)`, the payload as little-endian `f32`
//! in `[channel][scale][time]` order, then a UTF-8 JSON footer holding
//! `subject_id`, `label`, `segment_index` and `freqs_hz`.

use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::cwt::{pool_time, CwtError, CwtPlan, ScaleGrid, WaveletSpec, POOLED_TIME_BINS};
use crate::eeg_io::{ChannelName, EegIoError, Label, N_CHANNELS};
use crate::preprocess::Segment;

pub const SCLG_MAGIC: &[u8; 8] = b"SCLG0001";

#[derive(Debug, thiserror::Error)]
pub enum ScalogramError {
    #[error(transparent)]
    Cwt(#[from] CwtError),
    #[error("bad SCLG file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] EegIoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    pub subject_id: String,
    pub label: Option<Label>,
    pub segment_index: usize,
    /// `[19 × n_scales × 100]`.
    pub values: Array3<f32>,
    pub freqs_hz: Vec<f64>,
}

impl Scalogram {
    pub fn n_scales(&self) -> usize {
        self.values.dim().1
    }

    pub fn plane(&self, ch: ChannelName) -> ndarray::ArrayView2<'_, f32> {
        self.values.slice(s![ch.index(), .., ..])
    }
}

/// Turns segments of one length into scalograms, reusing a [`CwtPlan`].
pub struct ScalogramBuilder {
    plan: CwtPlan,
    sample_rate_hz: f64,
    freqs_hz: Vec<f64>,
}

impl ScalogramBuilder {
    pub fn new(
        segment_len: usize,
        sample_rate_hz: f64,
        wavelet: &WaveletSpec,
        grid: &ScaleGrid,
    ) -> Result<Self, ScalogramError> {
        Ok(ScalogramBuilder {
            plan: CwtPlan::new(segment_len, sample_rate_hz, wavelet, grid)?,
            sample_rate_hz,
            freqs_hz: grid.freqs_hz.clone(),
        })
    }

    /// Pooled `log1p |CWT|` before standardization, `[19 × S × 100]`.
    pub fn raw_planes(&self, seg: &Segment) -> Result<Array3<f64>, ScalogramError> {
        if (seg.sample_rate_hz - self.sample_rate_hz).abs() > 1e-9 * self.sample_rate_hz {
            return Err(CwtError::BadGrid(format!(
                "plan built for {} Hz, segment sampled at {} Hz",
                self.sample_rate_hz, seg.sample_rate_hz
            ))
            .into());
        }
        let n_scales = self.plan.n_scales();
        let mut raw = Array3::<f64>::zeros((N_CHANNELS, n_scales, POOLED_TIME_BINS));
        let mut row = Vec::with_capacity(seg.data.ncols());
        for ch in 0..N_CHANNELS {
            row.clear();
            row.extend(seg.data.row(ch).iter().copied());
            let pooled = pool_time(&self.plan.magnitude(&row)?)?;
            raw.slice_mut(s![ch, .., ..])
                .assign(&pooled.mapv(f64::ln_1p));
        }
        Ok(raw)
    }

    pub fn build(&self, seg: &Segment) -> Result<Scalogram, ScalogramError> {
        let raw = self.raw_planes(seg)?;
        Ok(Scalogram {
            subject_id: seg.subject_id.clone(),
            label: seg.label,
            segment_index: seg.segment_index,
            values: standardize(&raw),
            freqs_hz: self.freqs_hz.clone(),
        })
    }
}

/// Zero mean, unit population standard deviation over the whole tensor; a
/// constant tensor maps to zeros.
pub fn standardize(raw: &Array3<f64>) -> Array3<f32> {
    let n = raw.len() as f64;
    let mean = raw.sum() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Array3::zeros(raw.raw_dim());
    }
    raw.mapv(|v| ((v - mean) / std) as f32)
}

pub fn scalogram_from_segment(
    seg: &Segment,
    wavelet: &WaveletSpec,
    grid: &ScaleGrid,
) -> Result<Scalogram, ScalogramError> {
    ScalogramBuilder::new(seg.data.ncols(), seg.sample_rate_hz, wavelet, grid)?.build(seg)
}

#[derive(Serialize, Deserialize)]
struct Footer {
    subject_id: String,
    label: Option<Label>,
    segment_index: usize,
    freqs_hz: Vec<f64>,
}

pub fn encode_sclg(sc: &Scalogram) -> Vec<u8> {
    let (c, s, t) = sc.values.dim();
    let mut out = Vec::with_capacity(20 + 4 * sc.values.len() + 256);
    out.extend_from_slice(SCLG_MAGIC);
    for d in [c, s, t] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in sc.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let footer = Footer {
        subject_id: sc.subject_id.clone(),
        label: sc.label,
        segment_index: sc.segment_index,
        freqs_hz: sc.freqs_hz.clone(),
    };
    out.extend(serde_json::to_vec(&footer).expect("footer serializes"));
    out
}

pub fn decode_sclg(bytes: &[u8]) -> Result<Scalogram, ScalogramError> {
    let bad = |m: &str| ScalogramError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != SCLG_MAGIC {
        return Err(bad("missing SCLG0001 magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, s, t) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(s)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let payload_end = 20 + 4 * count;
    if bytes.len() < payload_end {
        return Err(bad("truncated payload"));
    }
    let values: Vec<f32> = bytes[20..payload_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let footer: Footer = serde_json::from_slice(&bytes[payload_end..])
        .map_err(|e| ScalogramError::Format(format!("footer: {e}")))?;
    if footer.freqs_hz.len() != s {
        return Err(bad("footer frequency count does not match scale dimension"));
    }
    Ok(Scalogram {
        subject_id: footer.subject_id,
        label: footer.label,
        segment_index: footer.segment_index,
        values: Array3::from_shape_vec((c, s, t), values).expect("length checked"),
        freqs_hz: footer.freqs_hz,
    })
}

pub fn write_sclg(sc: &Scalogram, path: impl AsRef<Path>) -> Result<(), ScalogramError> {
    let path = path.as_ref();
    std::fs::write(path, encode_sclg(sc)).map_err(|e| EegIoError::io(path, e).into())
}

pub fn read_sclg(path: impl AsRef<Path>) -> Result<Scalogram, ScalogramError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| EegIoError::io(path, e))?;
    decode_sclg(&bytes)
}
