use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Identity;
use crate::error::{Error, Result};
use crate::seed;

const SAMPLE_NOISE: f64 = 0.01;
const MAX_HARMONIC_HZ: f64 = 4000.0;
const FORMANT_BANDWIDTH_HZ: f64 = 220.0;

/// Mono PCM-like signal in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub duration: f64,
}

impl Waveform {
    pub fn expected_len(sample_rate: u32, duration: f64) -> usize {
        (sample_rate as f64 * duration).round() as usize
    }

    /// Rounds to the 16-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|&s| (s * i16::MAX as f32).round() / i16::MAX as f32)
                .collect(),
            ..self.clone()
        }
    }
}

/// Fundamental frequency of the harmonic source for `identity`.
pub fn fundamental_hz(identity: &Identity) -> f64 {
    100.0 + 120.0 * (1.0 - identity.gender as f64) + 40.0 * (identity.age - 0.5)
}

fn formants(identity: &Identity) -> [f64; 3] {
    [
        500.0 + 250.0 * identity.shape[0],
        1400.0 + 500.0 * identity.shape[1],
        2600.0 + 500.0 * identity.shape[2],
    ]
}

/// Harmonic tone complex carrying the identity's attributes.
///
/// The pitch follows gender and age, three spectral peaks follow
/// `shape[0..3]` and the loudness envelope follows `hue`.
pub fn synth_speech(
    identity: &Identity,
    duration: f64,
    sample_rate: u32,
    noise_seed: u64,
) -> Result<Waveform> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    if sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let n = Waveform::expected_len(sample_rate, duration);
    let sr = sample_rate as f64;
    let f0 = fundamental_hz(identity);
    let peaks = formants(identity);
    let mut rng = seed::rng(noise_seed);

    let partials: Vec<(f64, f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < MAX_HARMONIC_HZ.min(sr / 2.0))
        .map(|f| {
            let gain = 0.15
                + peaks
                    .iter()
                    .map(|&p| (-(f - p).powi(2) / (2.0 * FORMANT_BANDWIDTH_HZ.powi(2))).exp())
                    .sum::<f64>();
            (f, gain, rng.gen::<f64>() * 2.0 * PI)
        })
        .collect();
    let total_gain: f64 = partials.iter().map(|p| p.1).sum();
    let level = 0.2 + 0.6 * identity.hue;
    let env_phase = rng.gen::<f64>() * 2.0 * PI;
    let noise = Normal::new(0.0, SAMPLE_NOISE).expect("valid sigma");

    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials
                .iter()
                .map(|&(f, g, ph)| g * (2.0 * PI * f * t + ph).sin())
                .sum::<f64>()
                / total_gain;
            let env = level * (0.85 + 0.15 * (2.0 * PI * 3.0 * t + env_phase).sin());
            (env * tone + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate,
        duration,
    })
}
