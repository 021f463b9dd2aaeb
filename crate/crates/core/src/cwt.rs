//! Continuous wavelet transform with the analytic (complex) Morlet wavelet.
//!
//! For scale `a` (seconds) and translation `b` on the sample grid,
//!
//! ```text
//! W(a, b) = a^(-1/2) · Σ_t x(t) · conj(ψ((t − b) / a)) · Δt
//! ψ(u)    = π^(-1/4) · exp(i·ω0·u) · exp(−u²/2)
//! ```
//!
//! with the signal taken as zero outside its support. The wavelet with
//! centre angular frequency `ω0` at scale `a` is tuned to
//! `f = ω0 / (2π·a)` Hz. The sum is evaluated as one FFT convolution per
//! scale; [`CwtPlan`] caches the wavelet spectra for a fixed signal length.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CwtError {
    #[error("signal must have at least 2 samples (got {0})")]
    EmptySignal(usize),
    #[error("bad scale grid: {0}")]
    BadGrid(String),
    #[error("bad wavelet: {0}")]
    BadWavelet(String),
    #[error("need at least {needed} time points to pool, got {got}")]
    TooFewTimePoints { needed: usize, got: usize },
    #[error("signal length {got} does not match plan length {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaveletFamily {
    ComplexMorlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub family: WaveletFamily,
    pub omega0: f64,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        WaveletSpec {
            family: WaveletFamily::ComplexMorlet,
            omega0: 6.0,
        }
    }
}

impl WaveletSpec {
    pub fn morlet(omega0: f64) -> Result<Self, CwtError> {
        let spec = WaveletSpec {
            family: WaveletFamily::ComplexMorlet,
            omega0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CwtError> {
        // below ~5 the Morlet without correction term has a visible DC leak
        if !(self.omega0 >= 5.0 && self.omega0.is_finite()) {
            return Err(CwtError::BadWavelet(format!(
                "omega0 must be >= 5, got {}",
                self.omega0
            )));
        }
        Ok(())
    }

    /// ψ(u).
    pub fn psi(&self, u: f64) -> Complex64 {
        let envelope = PI.powf(-0.25) * (-0.5 * u * u).exp();
        Complex64::from_polar(envelope, self.omega0 * u)
    }

    pub fn scale_for_frequency(&self, freq_hz: f64) -> f64 {
        self.omega0 / (2.0 * PI * freq_hz)
    }

    /// Scale at which `|W|` of a pure tone at `freq_hz` is largest.
    ///
    /// The `a^(-1/2)` normalization weights the response by `√a`, which
    /// moves the maximum of `√a·exp(−(2πf·a − ω0)²/2)` to
    /// `2πf·a = (ω0 + √(ω0² + 2)) / 2`, slightly above the nominal scale.
    pub fn peak_response_scale(&self, freq_hz: f64) -> f64 {
        let w0 = self.omega0;
        (w0 + (w0 * w0 + 2.0).sqrt()) / 2.0 / (2.0 * PI * freq_hz)
    }
}

/// Analysis frequencies and the matching wavelet scales (in seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub freqs_hz: Vec<f64>,
    pub scales_s: Vec<f64>,
}

impl ScaleGrid {
    /// `n` frequencies log-spaced from `low_hz` to `high_hz` inclusive,
    /// ascending.
    pub fn log_spaced(
        n: usize,
        low_hz: f64,
        high_hz: f64,
        wavelet: &WaveletSpec,
    ) -> Result<Self, CwtError> {
        if n == 0 {
            return Err(CwtError::BadGrid("need at least one scale".into()));
        }
        if !(low_hz > 0.0 && high_hz >= low_hz && high_hz.is_finite()) {
            return Err(CwtError::BadGrid(format!(
                "frequency range [{low_hz}, {high_hz}] is invalid"
            )));
        }
        if n > 1 && high_hz == low_hz {
            return Err(CwtError::BadGrid("range collapses to one frequency".into()));
        }
        let freqs: Vec<f64> = if n == 1 {
            vec![low_hz]
        } else {
            let ratio = (high_hz / low_hz).ln();
            (0..n)
                .map(|j| low_hz * (ratio * j as f64 / (n - 1) as f64).exp())
                .collect()
        };
        Self::from_frequencies(freqs, wavelet)
    }

    pub fn from_frequencies(freqs_hz: Vec<f64>, wavelet: &WaveletSpec) -> Result<Self, CwtError> {
        wavelet.validate()?;
        if freqs_hz.is_empty() {
            return Err(CwtError::BadGrid("need at least one scale".into()));
        }
        if freqs_hz.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(CwtError::BadGrid("frequencies must be positive".into()));
        }
        let ascending = freqs_hz.windows(2).all(|w| w[1] > w[0]);
        let descending = freqs_hz.windows(2).all(|w| w[1] < w[0]);
        if !(ascending || descending) {
            return Err(CwtError::BadGrid("frequencies must be strictly monotone".into()));
        }
        let scales_s = freqs_hz
            .iter()
            .map(|&f| wavelet.scale_for_frequency(f))
            .collect();
        Ok(ScaleGrid { freqs_hz, scales_s })
    }

    pub fn len(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs_hz.is_empty()
    }

    /// Index of the grid scale closest to `scale_s` on a log axis.
    pub fn nearest_scale_index(&self, scale_s: f64) -> usize {
        let target = scale_s.ln();
        (0..self.len())
            .min_by(|&a, &b| {
                (self.scales_s[a].ln() - target)
                    .abs()
                    .total_cmp(&(self.scales_s[b].ln() - target).abs())
            })
            .expect("grid is non-empty")
    }

    /// Index of the grid frequency closest to `freq_hz` on a log axis.
    pub fn nearest_index(&self, freq_hz: f64) -> usize {
        let target = freq_hz.ln();
        self.freqs_hz
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (a.ln() - target)
                    .abs()
                    .total_cmp(&(b.ln() - target).abs())
            })
            .map(|(i, _)| i)
            .expect("grid is non-empty")
    }
}

/// Precomputed FFT plans and wavelet spectra for signals of one length.
pub struct CwtPlan {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernels: Vec<Vec<Complex64>>,
}

impl CwtPlan {
    pub fn new(
        len: usize,
        sample_rate_hz: f64,
        wavelet: &WaveletSpec,
        grid: &ScaleGrid,
    ) -> Result<Self, CwtError> {
        if len < 2 {
            return Err(CwtError::EmptySignal(len));
        }
        wavelet.validate()?;
        if grid.is_empty() || grid.scales_s.iter().any(|a| !(*a > 0.0)) {
            return Err(CwtError::BadGrid("scales must be positive".into()));
        }
        let fft_len = 2 * len;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let dt = 1.0 / sample_rate_hz;
        let lag_max = len as isize - 1;

        let kernels = grid
            .scales_s
            .iter()
            .map(|&a| {
                // W(b) = Σ_t x[t]·g[t−b] with g[m] = conj(ψ(m·Δt/a))·Δt/√a,
                // i.e. the linear convolution of x with r[m] = g[−m].
                let norm = dt / a.sqrt();
                let mut r = vec![Complex64::new(0.0, 0.0); fft_len];
                for m in -lag_max..=lag_max {
                    let g = wavelet.psi((-m) as f64 * dt / a).conj() * norm;
                    r[m.rem_euclid(fft_len as isize) as usize] = g;
                }
                forward.process(&mut r);
                // fold the inverse FFT's 1/L into the kernel
                let scale = 1.0 / fft_len as f64;
                r.iter_mut().for_each(|v| *v *= scale);
                r
            })
            .collect();

        Ok(CwtPlan {
            len,
            fft_len,
            forward,
            inverse,
            kernels,
        })
    }

    pub fn signal_len(&self) -> usize {
        self.len
    }

    pub fn n_scales(&self) -> usize {
        self.kernels.len()
    }

    /// Complex coefficients, `[n_scales × len]`.
    pub fn transform(&self, signal: &[f64]) -> Result<Array2<Complex64>, CwtError> {
        let mut out = Array2::zeros((self.n_scales(), self.len));
        self.for_each_scale(signal, |j, row| {
            out.row_mut(j)
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = *v);
        })?;
        Ok(out)
    }

    /// `|W(a, b)|`, `[n_scales × len]`.
    pub fn magnitude(&self, signal: &[f64]) -> Result<Array2<f64>, CwtError> {
        let mut out = Array2::zeros((self.n_scales(), self.len));
        self.for_each_scale(signal, |j, row| {
            out.row_mut(j)
                .iter_mut()
                .zip(row)
                .for_each(|(o, v)| *o = v.norm());
        })?;
        Ok(out)
    }

    fn for_each_scale(
        &self,
        signal: &[f64],
        mut sink: impl FnMut(usize, &[Complex64]),
    ) -> Result<(), CwtError> {
        if signal.len() != self.len {
            return Err(CwtError::LengthMismatch {
                expected: self.len,
                got: signal.len(),
            });
        }
        let mut spectrum = vec![Complex64::new(0.0, 0.0); self.fft_len];
        spectrum
            .iter_mut()
            .zip(signal)
            .for_each(|(s, &x)| *s = Complex64::new(x, 0.0));
        self.forward.process(&mut spectrum);

        let mut work = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for (j, kernel) in self.kernels.iter().enumerate() {
            work.iter_mut()
                .zip(spectrum.iter().zip(kernel))
                .for_each(|(w, (s, k))| *w = s * k);
            self.inverse.process_with_scratch(&mut work, &mut scratch);
            sink(j, &work[..self.len]);
        }
        Ok(())
    }
}

/// One-shot transform; builds a [`CwtPlan`] for the signal's length.
pub fn cwt_transform(
    signal: &[f64],
    sample_rate_hz: f64,
    wavelet: &WaveletSpec,
    grid: &ScaleGrid,
) -> Result<Array2<Complex64>, CwtError> {
    CwtPlan::new(signal.len(), sample_rate_hz, wavelet, grid)?.transform(signal)
}

pub const POOLED_TIME_BINS: usize = 100;

/// Average pooling of the time axis into [`POOLED_TIME_BINS`] equal
/// fractional bins. Samples straddling a bin edge contribute in proportion
/// to their overlap.
pub fn pool_time(mag: &Array2<f64>) -> Result<Array2<f64>, CwtError> {
    pool_time_to(mag, POOLED_TIME_BINS)
}

pub fn pool_time_to(mag: &Array2<f64>, bins: usize) -> Result<Array2<f64>, CwtError> {
    let (rows, width) = mag.dim();
    if width < bins || bins == 0 {
        return Err(CwtError::TooFewTimePoints {
            needed: bins,
            got: width,
        });
    }
    let step = width as f64 / bins as f64;
    // (first sample, per-sample weights) for every bin
    let spans: Vec<(usize, Vec<f64>)> = (0..bins)
        .map(|k| {
            let lo = k as f64 * step;
            let hi = if k + 1 == bins { width as f64 } else { (k + 1) as f64 * step };
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(width);
            let weights = (first..last)
                .map(|t| (hi.min(t as f64 + 1.0) - lo.max(t as f64)).max(0.0))
                .collect();
            (first, weights)
        })
        .collect();

    let mut out = Array2::zeros((rows, bins));
    for r in 0..rows {
        let row = mag.row(r);
        for (k, (first, weights)) in spans.iter().enumerate() {
            // mean taken relative to the first sample so constant runs
            // come back bit-exact
            let anchor = row[*first];
            let total: f64 = weights.iter().sum();
            let offset: f64 = weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * (row[first + i] - anchor))
                .sum();
            out[[r, k]] = anchor + offset / total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct evaluation of the defining sum, one (a, b) pair at a time.
    fn direct_cwt(x: &[f64], fs: f64, omega0: f64, a: f64) -> Vec<Complex64> {
        let dt = 1.0 / fs;
        (0..x.len())
            .map(|b| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (t, &xt) in x.iter().enumerate() {
                    let u = (t as f64 - b as f64) * dt / a;
                    let psi = Complex64::new(0.0, omega0 * u).exp()
                        * (-(u * u) / 2.0).exp()
                        / PI.powf(0.25);
                    acc += xt * psi.conj() * dt;
                }
                acc / a.sqrt()
            })
            .collect()
    }

    fn default_grid() -> ScaleGrid {
        ScaleGrid::log_spaced(64, 1.0, 30.0, &WaveletSpec::default()).unwrap()
    }

    fn tone(freq: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * freq * t as f64 / fs).sin()).collect()
    }

    #[test]
    fn grid_is_log_spaced_over_band() {
        let g = default_grid();
        assert_eq!(g.len(), 64);
        assert!((g.freqs_hz[0] - 1.0).abs() < 1e-12);
        assert!((g.freqs_hz[63] - 30.0).abs() < 1e-9);
        let r0 = g.freqs_hz[1] / g.freqs_hz[0];
        for w in g.freqs_hz.windows(2) {
            assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
        for (f, a) in g.freqs_hz.iter().zip(&g.scales_s) {
            assert!((a - 6.0 / (2.0 * PI * f)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_errors() {
        let w = WaveletSpec::default();
        assert!(ScaleGrid::log_spaced(0, 1.0, 30.0, &w).is_err());
        assert!(ScaleGrid::log_spaced(4, 30.0, 1.0, &w).is_err());
        assert!(ScaleGrid::from_frequencies(vec![1.0, 3.0, 2.0], &w).is_err());
        assert!(ScaleGrid::from_frequencies(vec![3.0, 2.0, 1.0], &w).is_ok());
        assert!(WaveletSpec::morlet(4.0).is_err());
    }

    #[test]
    fn zero_signal_gives_zero() {
        let out = cwt_transform(&[0.0; 64], 128.0, &WaveletSpec::default(), &default_grid()).unwrap();
        assert!(out.iter().all(|v| v.norm() == 0.0));
        assert!(matches!(
            cwt_transform(&[1.0], 128.0, &WaveletSpec::default(), &default_grid()),
            Err(CwtError::EmptySignal(1))
        ));
    }

    #[test]
    fn doubling_the_signal_doubles_the_transform() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (w, g) = (WaveletSpec::default(), default_grid());
        let a = cwt_transform(&x, 128.0, &w, &g).unwrap();
        let b = cwt_transform(&x2, 128.0, &w, &g).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p * 2.0 - q).norm() <= 1e-12 * q.norm().max(1e-300));
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(11);
        let wavelet = WaveletSpec::default();
        let grid = ScaleGrid::log_spaced(5, 1.0, 30.0, &wavelet).unwrap();
        for len in [2usize, 17, 128, 256] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let fast = cwt_transform(&x, 128.0, &wavelet, &grid).unwrap();
            for (j, &a) in grid.scales_s.iter().enumerate() {
                for (b, slow) in direct_cwt(&x, 128.0, 6.0, a).iter().enumerate() {
                    let err = (fast[[j, b]] - slow).norm() / slow.norm();
                    assert!(err <= 1e-6, "len {len} scale {j} b {b}: {err}");
                }
            }
        }
    }

    #[test]
    fn eight_hz_tone_peaks_at_its_response_scale() {
        let grid = default_grid();
        let wavelet = WaveletSpec::default();
        let x = tone(8.0, 384, 128.0);
        let fast = cwt_transform(&x, 128.0, &wavelet, &grid).unwrap();
        // 8 Hz lies almost midway between grid rows 38 (7.78 Hz) and 39
        // (8.21 Hz); the √a weighting tips the peak to the lower row.
        let expected = grid.nearest_scale_index(wavelet.peak_response_scale(8.0));
        assert_eq!(expected, 38);
        assert_eq!(grid.nearest_index(8.0), 39);
        // independent route: direct sum at the centre column
        let b = 192;
        let oracle_argmax = grid
            .scales_s
            .iter()
            .map(|&a| direct_cwt(&x, 128.0, 6.0, a)[b].norm())
            .enumerate()
            .max_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap()
            .0;
        let fast_argmax = (0..grid.len())
            .max_by(|&p, &q| fast[[p, b]].norm().total_cmp(&fast[[q, b]].norm()))
            .unwrap();
        assert_eq!(oracle_argmax, expected);
        assert_eq!(fast_argmax, expected);
    }

    #[test]
    fn every_grid_tone_is_localized() {
        let grid = default_grid();
        let plan = CwtPlan::new(1280, 128.0, &WaveletSpec::default(), &grid).unwrap();
        for (j, &f) in grid.freqs_hz.iter().enumerate() {
            let mag = plan.magnitude(&tone(f, 1280, 128.0)).unwrap();
            let col = mag.column(640);
            let argmax = (0..grid.len()).max_by(|&p, &q| col[p].total_cmp(&col[q])).unwrap();
            assert_eq!(argmax, j, "tone at {f} Hz");
        }
    }

    #[test]
    fn pooling_examples() {
        let constant = Array2::from_elem((3, 384), 3.0);
        let pooled = pool_time(&constant).unwrap();
        assert_eq!(pooled.dim(), (3, 100));
        assert!(pooled.iter().all(|&v| v == 3.0));

        let ramp = Array2::from_shape_fn((2, 100), |(r, t)| (r * 1000 + t) as f64 * 0.1);
        assert_eq!(pool_time(&ramp).unwrap(), ramp);

        assert!(matches!(
            pool_time(&Array2::zeros((1, 99))),
            Err(CwtError::TooFewTimePoints { needed: 100, got: 99 })
        ));
    }

    #[test]
    fn pooling_preserves_the_mean() {
        let x = Array2::from_shape_fn((1, 384), |(_, t)| ((t * 37) % 11) as f64);
        let pooled = pool_time(&x).unwrap();
        let m_in = x.mean().unwrap();
        let m_out = pooled.mean().unwrap();
        assert!((m_in - m_out).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn shifted_input_shifts_interior_columns(seed in any::<u64>(), shift in 1usize..64) {
            let len = 1024;
            let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(seed);
            let long: Vec<f64> = (0..len + shift).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wavelet = WaveletSpec::default();
            let grid = ScaleGrid::log_spaced(8, 3.0, 30.0, &wavelet).unwrap();
            let plan = CwtPlan::new(len, 128.0, &wavelet, &grid).unwrap();
            let base = plan.magnitude(&long[shift..]).unwrap();
            let moved = plan.magnitude(&long[..len]).unwrap();
            for (j, &a) in grid.scales_s.iter().enumerate() {
                // the Gaussian envelope is below 2e-8 past 6 scales
                let edge = (6.0 * a * 128.0).ceil() as usize;
                for b in edge..len.saturating_sub(edge + shift) {
                    let (p, q) = (base[[j, b]], moved[[j, b + shift]]);
                    prop_assert!((p - q).abs() <= 1e-3 * p.max(q).max(1e-9),
                        "scale {} col {}: {} vs {}", j, b, p, q);
                }
            }
        }

        #[test]
        fn pooled_constants_are_exact(c in -1e6f64..1e6, w in 100usize..1000) {
            let pooled = pool_time(&Array2::from_elem((2, w), c)).unwrap();
            prop_assert!(pooled.iter().all(|&v| v == c));
        }
    }
}
