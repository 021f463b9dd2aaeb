//! Recording → filtered segments → scalograms, with fixed parameters.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cwt::{CwtError, ScaleGrid, WaveletSpec};
use crate::eeg_io::Recording;
use crate::preprocess::{apply_filter, design_bandpass, segment, FilterSpec, PreprocessError, Segment, Windowing};
use crate::scalogram::{Scalogram, ScalogramBuilder, ScalogramError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Scalogram(#[from] ScalogramError),
    #[error(transparent)]
    Cwt(#[from] CwtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub window_s: f64,
    pub hop_s: f64,
    pub omega0: f64,
    pub n_scales: usize,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            low_hz: 1.0,
            high_hz: 30.0,
            window_s: 3.0,
            hop_s: 1.0,
            omega0: 6.0,
            n_scales: 64,
            min_freq_hz: 1.0,
            max_freq_hz: 30.0,
        }
    }
}

impl PipelineConfig {
    pub fn wavelet(&self) -> Result<WaveletSpec, CwtError> {
        WaveletSpec::morlet(self.omega0)
    }

    pub fn grid(&self) -> Result<ScaleGrid, CwtError> {
        ScaleGrid::log_spaced(self.n_scales, self.min_freq_hz, self.max_freq_hz, &self.wavelet()?)
    }
}

/// Runs the preprocessing and scalogram stages, caching the filter design
/// and CWT plan per sample rate.
pub struct Pipeline {
    cfg: PipelineConfig,
    wavelet: WaveletSpec,
    grid: ScaleGrid,
    filters: Mutex<HashMap<u64, FilterSpec>>,
    builders: Mutex<HashMap<(u64, usize), std::sync::Arc<ScalogramBuilder>>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let wavelet = cfg.wavelet()?;
        let grid = cfg.grid()?;
        Ok(Pipeline {
            cfg,
            wavelet,
            grid,
            filters: Mutex::new(HashMap::new()),
            builders: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    fn filter(&self, fs: f64) -> Result<FilterSpec, PipelineError> {
        let mut cache = self.filters.lock().expect("filter cache lock");
        if let Some(f) = cache.get(&fs.to_bits()) {
            return Ok(f.clone());
        }
        let f = design_bandpass(fs, self.cfg.low_hz, self.cfg.high_hz)?;
        cache.insert(fs.to_bits(), f.clone());
        Ok(f)
    }

    fn builder(&self, fs: f64, len: usize) -> Result<std::sync::Arc<ScalogramBuilder>, PipelineError> {
        let mut cache = self.builders.lock().expect("builder cache lock");
        if let Some(b) = cache.get(&(fs.to_bits(), len)) {
            return Ok(b.clone());
        }
        let b = std::sync::Arc::new(ScalogramBuilder::new(len, fs, &self.wavelet, &self.grid)?);
        cache.insert((fs.to_bits(), len), b.clone());
        Ok(b)
    }

    /// Band-pass filter then cut into windows.
    pub fn segments(&self, rec: &Recording) -> Result<Vec<Segment>, PipelineError> {
        let geometry = Windowing::new(self.cfg.window_s, self.cfg.hop_s, rec.sample_rate_hz)?;
        if rec.n_samples() < geometry.window {
            return Err(PreprocessError::InsufficientLength {
                duration_s: rec.duration_s(),
                window_s: self.cfg.window_s,
            }
            .into());
        }
        let filtered = apply_filter(rec, &self.filter(rec.sample_rate_hz)?)?;
        Ok(segment(&filtered, self.cfg.window_s, self.cfg.hop_s)?)
    }

    pub fn scalograms_of_segments(&self, segments: &[Segment]) -> Result<Vec<Scalogram>, PipelineError> {
        segments
            .par_iter()
            .map(|seg| Ok(self.builder(seg.sample_rate_hz, seg.data.ncols())?.build(seg)?))
            .collect()
    }

    pub fn scalograms(&self, rec: &Recording) -> Result<Vec<Scalogram>, PipelineError> {
        self.scalograms_of_segments(&self.segments(rec)?)
    }

    /// Scalograms of every recording, concatenated in input order.
    pub fn dataset(&self, recordings: &[Recording]) -> Result<Vec<Scalogram>, PipelineError> {
        let per: Vec<Vec<Scalogram>> = recordings
            .par_iter()
            .map(|r| self.scalograms(r))
            .collect::<Result<_, _>>()?;
        Ok(per.into_iter().flatten().collect())
    }
}
