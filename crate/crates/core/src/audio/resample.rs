use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{Error, Result};

const LOWPASS_HALF_TAPS: usize = 32;

/// Downmixes to mono, resamples to `target_rate` and truncates or zero-pads
/// to exactly `target_seconds`.
pub fn normalize_clip(clip: &AudioClip, target_rate: u32, target_seconds: f64) -> Result<AudioClip> {
    if clip.samples.is_empty() || clip.channels == 0 {
        return Err(Error::Clip {
            clip_id: clip.clip_id.clone(),
            reason: "clip has no samples".into(),
        });
    }
    if clip.sample_rate == 0 || target_rate == 0 {
        return Err(Error::Clip {
            clip_id: clip.clip_id.clone(),
            reason: "sample rate must be positive".into(),
        });
    }
    let mono: Vec<f64> = if clip.channels == 1 {
        clip.samples.clone()
    } else {
        clip.samples
            .chunks(clip.channels)
            .map(|frame| frame.iter().sum::<f64>() / clip.channels as f64)
            .collect()
    };
    let mut samples = if clip.sample_rate == target_rate {
        mono
    } else {
        resample_linear(&mono, clip.sample_rate, target_rate)
    };
    let target = (target_seconds * target_rate as f64).round() as usize;
    samples.resize(target, 0.0);
    Ok(AudioClip {
        clip_id: clip.clip_id.clone(),
        label: clip.label,
        sample_rate: target_rate,
        channels: 1,
        samples,
    })
}

/// Linear-interpolation resampler. When downsampling, the input is first
/// low-passed with a Hann-windowed sinc at the new Nyquist frequency.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let filtered;
    let src = if to < from {
        filtered = lowpass(samples, 0.5 * to as f64 / from as f64);
        &filtered[..]
    } else {
        samples
    };
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) / ratio).floor().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = src[j.min(src.len() - 1)];
            let b = src[(j + 1).min(src.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// FIR low-pass with cutoff given as a fraction of the sample rate.
fn lowpass(samples: &[f64], cutoff: f64) -> Vec<f64> {
    let half = LOWPASS_HALF_TAPS as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let x = n as f64;
            let sinc = if n == 0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            let w = 0.5 + 0.5 * (PI * x / (half as f64 + 1.0)).cos();
            sinc * w
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    let n = samples.len() as isize;
    (0..n)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(k, t)| {
                    let j = i + k as isize - half;
                    if (0..n).contains(&j) {
                        t * samples[j as usize]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / gain
        })
        .collect()
}
