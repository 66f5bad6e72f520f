use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 400,
            hop_length: 160,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            1 + (len - self.window_length) / self.hop_length
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop_length == 0 {
            return Err(Error::Config("STFT window and hop must be positive".into()));
        }
        if self.fft_size < self.window_length || !self.fft_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "fft_size {} must be even and at least the window length {}",
                self.fft_size, self.window_length
            )));
        }
        Ok(())
    }
}

/// Magnitude time-frequency matrix, `bins × frames`, row-major by bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Vec<f32>,
    pub bins: usize,
    pub frames: usize,
    pub stft: StftConfig,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.magnitudes[bin * self.frames + frame]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    /// Log-compressed `[1, bins, frames]` tensor fed to the speech encoder.
    pub fn to_log_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.bins, self.frames],
            self.magnitudes
                .iter()
                .map(|&m| T::of((m as f64).ln_1p()))
                .collect(),
        )
    }

    /// Energy per frequency row.
    pub fn row_energy(&self) -> Vec<f64> {
        self.magnitudes
            .chunks(self.frames)
            .map(|r| r.iter().map(|&m| (m as f64).powi(2)).sum())
            .collect()
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT with a Hann window, zero-padded to `fft_size`.
pub fn spectrogram(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = wave.samples.len();
    if len < cfg.window_length {
        return Err(Error::Input(format!(
            "waveform of {len} samples is shorter than the {}-sample window",
            cfg.window_length
        )));
    }
    let frames = cfg.frames(len);
    let bins = cfg.bins();
    let window = hann(cfg.window_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut magnitudes = vec![0.0f32; bins * frames];
    for f in 0..frames {
        let start = f * cfg.hop_length;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.window_length {
                Complex::new(wave.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for b in 0..bins {
            magnitudes[b * frames + f] = buf[b].norm() as f32;
        }
    }
    Ok(Spectrogram {
        magnitudes,
        bins,
        frames,
        stft: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        let n = samples.len();
        Waveform {
            samples,
            sample_rate: 16_000,
            duration: n as f64 / 16_000.0,
        }
    }

    #[test]
    fn frame_count_for_six_seconds() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frames(96_000), 598);
        let s = spectrogram(&wave(vec![0.0; 96_000]), &cfg).unwrap();
        assert_eq!(s.shape(), (257, 598));
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let s = spectrogram(&wave(vec![0.0; 2000]), &StftConfig::default()).unwrap();
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let cfg = StftConfig::default();
        for bin in [8usize, 40, 100] {
            let f = bin as f64 * 16_000.0 / cfg.fft_size as f64;
            let samples = (0..8000)
                .map(|i| (2.0 * PI * f * i as f64 / 16_000.0).sin() as f32 * 0.5)
                .collect();
            let s = spectrogram(&wave(samples), &cfg).unwrap();
            let e = s.row_energy();
            let total: f64 = e.iter().sum();
            let near: f64 = e[bin - 1..=bin + 1].iter().sum();
            let peak = e
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, bin);
            assert!(near / total >= 0.9, "bin {bin}: {}", near / total);
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        let err = spectrogram(&wave(vec![0.0; 399]), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
