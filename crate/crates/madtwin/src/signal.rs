//! Short-time spectral analysis: Hamming windows, STFT/ISTFT, and
//! Griffin-Lim phase reconstruction.
//!
//! Analysis uses centered frames: the signal is padded with
//! `frame_length / 2` zeros on both sides, so frame `m` is centered near
//! sample `m * hop` of the original signal and the frame count depends only
//! on the signal length and hop. Synthesis is weighted overlap-add with the
//! analysis window and a summed-squared-window normalization, which is the
//! least-squares signal estimate from a (possibly modified) spectrogram. That
//! choice makes the ISTFT an exact inverse away from the signal edges and
//! gives the Griffin-Lim iteration its monotone inconsistency decrease.

pub mod wav;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Analysis parameters for the STFT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    /// Samples per analysis frame (window length).
    pub frame_length: usize,
    /// FFT size; frames are zero-padded from `frame_length` up to this.
    pub fft_length: usize,
    /// Hop between consecutive frames, in samples.
    pub hop: usize,
    /// Sample rate in Hz. Carried along for I/O; spectral math never uses it.
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_length: 2049,
            fft_length: 4096,
            hop: 384,
            sample_rate: 44100,
        }
    }
}

impl StftConfig {
    /// Number of retained spectral bins: DC through Nyquist inclusive.
    pub fn retained_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_length < 2 {
            return Err(Error::InvalidArgument(format!(
                "frame_length must be at least 2, got {}",
                self.frame_length
            )));
        }
        if self.hop == 0 {
            return Err(Error::InvalidArgument("hop must be positive".into()));
        }
        if self.frame_length > self.fft_length {
            return Err(Error::InvalidArgument(format!(
                "frame_length {} exceeds fft_length {}",
                self.frame_length, self.fft_length
            )));
        }
        if self.hop > self.frame_length {
            return Err(Error::InvalidArgument(format!(
                "hop {} exceeds frame_length {} (frames would not overlap)",
                self.hop, self.frame_length
            )));
        }
        Ok(())
    }
}

/// Complex spectrogram: `frames x retained_bins`, along with the analysis
/// configuration that produced it.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex<f64>>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    /// Entrywise magnitudes.
    pub fn magnitude(&self) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            data: self.data.mapv(|c| c.norm()),
            config: self.config,
        }
    }

    /// Entrywise phase angles in radians.
    pub fn phase(&self) -> Array2<f64> {
        self.data.mapv(|c| c.arg())
    }
}

/// Non-negative magnitude spectrogram: `frames x retained_bins`.
#[derive(Debug, Clone)]
pub struct MagnitudeSpectrogram {
    pub data: Array2<f64>,
    pub config: StftConfig,
}

impl MagnitudeSpectrogram {
    /// Wraps a raw matrix, rejecting negative or non-finite entries.
    pub fn new(data: Array2<f64>, config: StftConfig) -> Result<Self> {
        if data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidArgument(
                "magnitude spectrogram entries must be finite and non-negative".into(),
            ));
        }
        Ok(MagnitudeSpectrogram { data, config })
    }

    /// Number of frames.
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    /// Number of frequency bins.
    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// Symmetric Hamming window: `w[n] = 0.54 - 0.46 cos(2 pi n / (len - 1))`.
pub fn hamming_window(len: usize) -> Result<Array1<f64>> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "window length must be at least 2, got {len}"
        )));
    }
    let denom = (len - 1) as f64;
    Ok(Array1::from_shape_fn(len, |n| {
        0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos()
    }))
}

/// Reusable FFT plans plus the analysis window for one configuration.
struct StftEngine {
    cfg: StftConfig,
    window: Array1<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftEngine {
            cfg,
            window: hamming_window(cfg.frame_length)?,
            fft: planner.plan_fft_forward(cfg.fft_length),
            ifft: planner.plan_fft_inverse(cfg.fft_length),
        })
    }

    /// Center padding added before the first sample.
    fn lead_pad(&self) -> usize {
        self.cfg.frame_length / 2
    }

    /// Padded length needed to hold `frames` full analysis frames.
    fn padded_len(&self, frames: usize) -> usize {
        (frames - 1) * self.cfg.hop + self.cfg.frame_length
    }

    /// Analyzes an already-padded buffer into exactly `frames` frames.
    fn stft_padded(&self, padded: &[f64], frames: usize) -> Array2<Complex<f64>> {
        let bins = self.cfg.retained_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_length];
        for m in 0..frames {
            let start = m * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.cfg.frame_length {
                    Complex::new(padded[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                out[[m, k]] = buf[k];
            }
        }
        out
    }

    /// Least-squares synthesis of a padded-domain signal from a spectrogram.
    ///
    /// Each frame's spectrum is mirrored to a full conjugate-symmetric FFT
    /// buffer, inverted, truncated to the window length, and overlap-added
    /// with the analysis window; the result is normalized by the summed
    /// squared window. Output length is `padded_len(frames)`.
    fn istft_padded(&self, spec: &Array2<Complex<f64>>) -> Array1<f64> {
        let frames = spec.nrows();
        let bins = self.cfg.retained_bins();
        let n = self.cfg.fft_length;
        let total = self.padded_len(frames);
        let mut num = Array1::<f64>::zeros(total);
        let mut den = Array1::<f64>::zeros(total);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for m in 0..frames {
            for k in 0..bins {
                buf[k] = spec[[m, k]];
            }
            for k in bins..n {
                buf[k] = spec[[m, n - k]].conj();
            }
            self.ifft.process(&mut buf);
            let start = m * self.cfg.hop;
            for i in 0..self.cfg.frame_length {
                let sample = buf[i].re * scale;
                num[start + i] += sample * self.window[i];
                den[start + i] += self.window[i] * self.window[i];
            }
        }
        for i in 0..total {
            if den[i] > 0.0 {
                num[i] /= den[i];
            }
        }
        num
    }
}

/// Short-time Fourier transform with centered frames.
///
/// Produces `ceil(len / hop)` frames of `fft_length / 2 + 1` bins each.
/// Signals shorter than one hop still produce a single frame; empty input is
/// rejected.
pub fn stft(samples: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot transform an empty signal".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input signal contains non-finite samples".into()));
    }
    let engine = StftEngine::new(*cfg)?;
    let frames = cfg.frame_count(samples.len());
    let lead = engine.lead_pad();
    let total = engine.padded_len(frames).max(lead + samples.len());
    let mut padded = vec![0.0; total];
    padded[lead..lead + samples.len()].copy_from_slice(samples);
    Ok(ComplexSpectrogram {
        data: engine.stft_padded(&padded, frames),
        config: *cfg,
    })
}

/// Inverse STFT via weighted overlap-add.
///
/// Returns `frames * hop` samples: the center-padding is trimmed, so the
/// output aligns with the original signal and is at most one hop longer.
/// Exact reconstruction holds away from the edges; the last partial hop of
/// the final frame is synthesized from fewer overlaps and is less accurate.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Array1<f64>> {
    if spec.data.ncols() != cfg.retained_bins() {
        return Err(Error::InvalidArgument(format!(
            "spectrogram has {} bins but config retains {}",
            spec.data.ncols(),
            cfg.retained_bins()
        )));
    }
    if spec.data.nrows() == 0 {
        return Err(Error::InvalidArgument("spectrogram has no frames".into()));
    }
    let engine = StftEngine::new(*cfg)?;
    let frames = spec.data.nrows();
    let full = engine.istft_padded(&spec.data);
    let lead = engine.lead_pad();
    let want = frames * cfg.hop;
    let stop = (lead + want).min(full.len());
    Ok(full.slice(ndarray::s![lead..stop]).to_owned())
}

/// Frobenius distance between the magnitude of `spec` and `target`.
fn inconsistency(spec: &Array2<Complex<f64>>, target: &Array2<f64>) -> f64 {
    spec.iter()
        .zip(target.iter())
        .map(|(c, &t)| {
            let d = c.norm() - t;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Griffin-Lim phase reconstruction, returning the signal and the spectral
/// inconsistency `|| |STFT(x_k)| - target ||_F` measured after each
/// iteration (index 0 is the initial-phase estimate).
///
/// With `iterations = 0` this is a single inverse transform of
/// `target * exp(i * phase)`. Each iteration re-analyzes the current signal,
/// keeps its phase, re-imposes the target magnitude, and re-synthesizes.
/// The inconsistency sequence is non-increasing.
pub fn griffin_lim_trace(
    target_mag: &MagnitudeSpectrogram,
    init_phase: &Array2<f64>,
    iterations: usize,
    cfg: &StftConfig,
) -> Result<(Array1<f64>, Vec<f64>)> {
    if target_mag.data.dim() != init_phase.dim() {
        return Err(Error::InvalidArgument(format!(
            "magnitude shape {:?} does not match phase shape {:?}",
            target_mag.data.dim(),
            init_phase.dim()
        )));
    }
    if target_mag.data.ncols() != cfg.retained_bins() {
        return Err(Error::InvalidArgument(format!(
            "spectrogram has {} bins but config retains {}",
            target_mag.data.ncols(),
            cfg.retained_bins()
        )));
    }
    if target_mag.data.nrows() == 0 {
        return Err(Error::InvalidArgument("spectrogram has no frames".into()));
    }
    let engine = StftEngine::new(*cfg)?;
    let frames = target_mag.data.nrows();

    let mut spec = Array2::from_shape_fn(target_mag.data.dim(), |(m, k)| {
        Complex::from_polar(target_mag.data[[m, k]], init_phase[[m, k]])
    });
    // The iteration lives entirely in the padded domain so that
    // analysis-synthesis is the exact least-squares projection pair.
    let mut padded = engine.istft_padded(&spec);
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(inconsistency(
        &engine.stft_padded(padded.as_slice().unwrap(), frames),
        &target_mag.data,
    ));
    for _ in 0..iterations {
        let analyzed = engine.stft_padded(padded.as_slice().unwrap(), frames);
        for (slot, a) in spec.iter_mut().zip(analyzed.iter()) {
            let mag = slot.norm();
            let a_norm = a.norm();
            *slot = if a_norm > 0.0 {
                a * (mag / a_norm)
            } else {
                Complex::new(mag, 0.0)
            };
        }
        padded = engine.istft_padded(&spec);
        trace.push(inconsistency(
            &engine.stft_padded(padded.as_slice().unwrap(), frames),
            &target_mag.data,
        ));
    }
    let lead = engine.lead_pad();
    let want = frames * cfg.hop;
    let stop = (lead + want).min(padded.len());
    Ok((padded.slice(ndarray::s![lead..stop]).to_owned(), trace))
}

/// Griffin-Lim phase reconstruction; see [`griffin_lim_trace`].
pub fn griffin_lim(
    target_mag: &MagnitudeSpectrogram,
    init_phase: &Array2<f64>,
    iterations: usize,
    cfg: &StftConfig,
) -> Result<Array1<f64>> {
    griffin_lim_trace(target_mag, init_phase, iterations, cfg).map(|(sig, _)| sig)
}
