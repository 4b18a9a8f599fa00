//! Differentiable MFCC front end.
//!
//! Per window: Hann weighting, power spectrum, triangular mel filterbank
//! (0 Hz to Nyquist), `ln(energy + 1e-8)`, orthonormal DCT-II truncated to
//! the first `n_coeffs` coefficients. [`Mfcc::backward`] is the exact
//! vector-Jacobian product of [`Mfcc::forward`] with respect to the samples.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Floor added to every mel energy before the logarithm.
pub const LOG_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameParams {
    pub window_size_samples: usize,
    pub step_samples: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams {
            window_size_samples: 512,
            step_samples: 320,
            n_mels: 26,
            n_coeffs: 13,
        }
    }
}

impl FrameParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size_samples == 0 || self.step_samples == 0 {
            return Err(Error::InvalidConfig("window and step must be positive".into()));
        }
        if self.step_samples > self.window_size_samples {
            return Err(Error::InvalidConfig(format!(
                "step {} exceeds window {}",
                self.step_samples, self.window_size_samples
            )));
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::InvalidConfig(format!(
                "need 0 < n_coeffs ({}) <= n_mels ({})",
                self.n_coeffs, self.n_mels
            )));
        }
        Ok(())
    }
}

/// Number of whole windows that fit in `len_samples`; trailing samples are ignored.
pub fn frame_count(len_samples: usize, p: &FrameParams) -> Result<usize> {
    if len_samples < p.window_size_samples {
        return Err(Error::TooShort {
            len: len_samples,
            needed: p.window_size_samples,
        });
    }
    Ok((len_samples - p.window_size_samples) / p.step_samples + 1)
}

/// `T x n_coeffs` feature rows, one per analysis window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(pub Array2<f64>);

impl FeatureMatrix {
    pub fn windows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// Intermediates of a forward pass, kept for [`Mfcc::backward`].
#[derive(Clone, Debug)]
pub struct MfccCache {
    len_samples: usize,
    spectra: Vec<Vec<Complex<f64>>>,
    mel_energy: Array2<f64>,
}

impl MfccCache {
    pub fn windows(&self) -> usize {
        self.spectra.len()
    }
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed MFCC pipeline for one parameter set and sample rate.
pub struct Mfcc {
    params: FrameParams,
    sample_rate: u32,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    dct: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc")
            .field("params", &self.params)
            .field("sample_rate", &self.sample_rate)
            .finish()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies of the filterbank: `n_mels + 2` points evenly spaced in mel.
/// Filter `m` rises from edge `m` to edge `m + 1` and falls to edge `m + 2`.
pub fn mel_edges_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

impl Mfcc {
    pub fn new(params: FrameParams, sample_rate: u32) -> Result<Self> {
        params.validate()?;
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        let n = params.window_size_samples;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();

        let n_bins = n / 2 + 1;
        let edges = mel_edges_hz(params.n_mels, sample_rate);
        let filters = (0..params.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weight = |b: usize| {
                    let f = b as f64 * sample_rate as f64 / n as f64;
                    ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0)
                };
                let first_bin = (0..n_bins).find(|&b| weight(b) > 0.0).unwrap_or(n_bins);
                let weights = (first_bin..n_bins)
                    .map(weight)
                    .collect::<Vec<_>>();
                let used = weights.iter().rposition(|&w| w > 0.0).map_or(0, |p| p + 1);
                MelFilter {
                    first_bin,
                    weights: weights[..used].to_vec(),
                }
            })
            .collect();

        let m = params.n_mels as f64;
        let dct = Array2::from_shape_fn((params.n_coeffs, params.n_mels), |(k, j)| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale * (PI * k as f64 * (j as f64 + 0.5) / m).cos()
        });

        let mut planner = FftPlanner::new();
        Ok(Mfcc {
            params,
            sample_rate,
            window,
            filters,
            dct,
            fft: planner.plan_fft_forward(n),
            ifft: planner.plan_fft_inverse(n),
        })
    }

    pub fn params(&self) -> &FrameParams {
        &self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn n_bins(&self) -> usize {
        self.params.window_size_samples / 2 + 1
    }

    /// Power spectra and mel energies for every window.
    fn spectra(&self, samples: &[f64]) -> Result<(Vec<Vec<Complex<f64>>>, Array2<f64>)> {
        let t = frame_count(samples.len(), &self.params)?;
        let n = self.params.window_size_samples;
        let n_bins = self.n_bins();
        let mut spectra = Vec::with_capacity(t);
        let mut mel = Array2::zeros((t, self.params.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for w in 0..t {
            let start = w * self.params.step_samples;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(samples[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            let spec = buf[..n_bins].to_vec();
            for (m, filter) in self.filters.iter().enumerate() {
                mel[[w, m]] = filter
                    .weights
                    .iter()
                    .zip(&spec[filter.first_bin..])
                    .map(|(wt, x)| wt * x.norm_sqr())
                    .sum();
            }
            spectra.push(spec);
        }
        Ok((spectra, mel))
    }

    /// `ln(mel energy + eps)` per window, before the DCT.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Array2<f64>> {
        let (_, mel) = self.spectra(samples)?;
        Ok(mel.mapv(|e| (e + LOG_EPSILON).ln()))
    }

    /// Raw mel filterbank energies per window.
    pub fn mel_energies(&self, samples: &[f64]) -> Result<Array2<f64>> {
        Ok(self.spectra(samples)?.1)
    }

    pub fn forward(&self, samples: &[f64]) -> Result<(FeatureMatrix, MfccCache)> {
        let (spectra, mel_energy) = self.spectra(samples)?;
        let log_mel = mel_energy.mapv(|e| (e + LOG_EPSILON).ln());
        let features = log_mel.dot(&self.dct.t());
        Ok((
            FeatureMatrix(features),
            MfccCache {
                len_samples: samples.len(),
                spectra,
                mel_energy,
            },
        ))
    }

    /// Gradient with respect to the samples given `d loss / d features`.
    pub fn backward(&self, cache: &MfccCache, grad: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let expected = (cache.windows(), self.params.n_coeffs);
        if grad.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: grad.dim(),
            });
        }
        let n = self.params.window_size_samples;
        let n_bins = self.n_bins();
        // d loss / d log-mel, then through the log.
        let grad_log = grad.dot(&self.dct);
        let mut out = vec![0.0; cache.len_samples];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut grad_power = vec![0.0; n_bins];
        for (w, spec) in cache.spectra.iter().enumerate() {
            grad_power.iter_mut().for_each(|g| *g = 0.0);
            for (m, filter) in self.filters.iter().enumerate() {
                let g = grad_log[[w, m]] / (cache.mel_energy[[w, m]] + LOG_EPSILON);
                if g == 0.0 {
                    continue;
                }
                for (k, wt) in filter.weights.iter().enumerate() {
                    grad_power[filter.first_bin + k] += g * wt;
                }
            }
            // d|X_b|^2 / d frame_n = 2 Re(X_b e^{+i 2 pi b n / N}); summing over b
            // is an unnormalized inverse DFT of g_b X_b restricted to b <= N/2.
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for b in 0..n_bins {
                buf[b] = spec[b] * grad_power[b];
            }
            self.ifft.process(&mut buf);
            let start = w * self.params.step_samples;
            for i in 0..n {
                out[start + i] += 2.0 * buf[i].re * self.window[i];
            }
        }
        Ok(out)
    }
}

pub fn mfcc_forward(x: &Waveform, p: &FrameParams) -> Result<FeatureMatrix> {
    Ok(Mfcc::new(*p, x.sample_rate())?.forward(x.samples())?.0)
}

pub fn mfcc_backward(x: &Waveform, p: &FrameParams, grad_features: &FeatureMatrix) -> Result<Vec<f64>> {
    let mfcc = Mfcc::new(*p, x.sample_rate())?;
    let (_, cache) = mfcc.forward(x.samples())?;
    mfcc.backward(&cache, grad_features.view())
}
