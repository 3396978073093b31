//! Log-mel filterbank front-end.
//!
//! Frames are cut without centre padding, weighted by a periodic Hann
//! window, zero-padded to the next power of two and transformed. The power
//! spectrum is projected onto triangular filters equally spaced on the HTK
//! mel scale and compressed with `ln(max(e, 1e-10))`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_s: f64,
    pub hop_s: f64,
    pub mel_bins: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: super::SAMPLE_RATE,
            window_s: 0.020,
            hop_s: 0.008,
            mel_bins: 24,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_s * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Frame count for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let w = self.window_samples();
        (len >= w).then(|| 1 + (len - w) / self.hop_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bins < 1 || self.window_samples() < 2 || self.hop_samples() < 1 || self.sample_rate == 0 {
            return Err(Error::Config(format!("invalid front-end config {self:?}")));
        }
        Ok(())
    }
}

/// Frame-wise log-mel features, `T×F`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor<f32>,
    pub frame_advance_s: f64,
    pub window_s: f64,
    pub mel_bins: usize,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Triangular mel filters over the `n_fft / 2 + 1` FFT bins, row per filter.
///
/// Filter `m` rises linearly from centre `m - 1` to centre `m` and falls to
/// centre `m + 1`; centres are equally spaced in mel between 0 Hz and Nyquist.
/// Weights are evaluated at the exact bin frequencies.
pub fn mel_filterbank(mel_bins: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64))
        .collect();
    (0..mel_bins)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    if f > lo && f < centre {
                        (f - lo) / (centre - lo)
                    } else if f >= centre && f < hi {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window_samples();
        let window = (0..w).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / w as f64).cos()).collect();
        let filters = mel_filterbank(cfg.mel_bins, cfg.n_fft(), cfg.sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft());
        Ok(MelFrontend {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn logmel(&self, x: &Waveform) -> Result<FeatureMatrix> {
        if x.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "{}: sample rate {} != front-end {}",
                x.utterance_id, x.sample_rate, self.cfg.sample_rate
            )));
        }
        let n_frames = self.cfg.frame_count(x.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{}: {} samples is shorter than one {}-sample window",
                x.utterance_id,
                x.len(),
                self.cfg.window_samples()
            ))
        })?;
        let (w, hop, n_fft) = (self.cfg.window_samples(), self.cfg.hop_samples(), self.cfg.n_fft());
        let f = self.cfg.mel_bins;
        let mut out = Vec::with_capacity(n_frames * f);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut spec = vec![0.0; n_fft / 2 + 1];
        for t in 0..n_frames {
            let frame = &x.samples[t * hop..t * hop + w];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < w {
                    Complex::new(frame[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (s, c) in spec.iter_mut().zip(&buf) {
                *s = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&spec).map(|(a, b)| a * b).sum();
                out.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        Ok(FeatureMatrix {
            frames: Tensor::new(vec![n_frames, f], out)?,
            frame_advance_s: self.cfg.hop_s,
            window_s: self.cfg.window_s,
            mel_bins: f,
        })
    }
}
