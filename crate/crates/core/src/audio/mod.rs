//! Audio front end: WAV decoding, clip normalisation and MFCC extraction.

pub mod cache;
mod mfcc;
mod resample;
pub mod wav;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mfcc::{extract_mfcc, filterbank_energies, hz_to_mel, mel_filter_centers, mel_to_hz, MfccExtractor};
pub use resample::{normalize_clip, resample_linear};
pub use cache::{read_cache, write_cache, CacheRead, FeatureCache};
pub use wav::{read_wav, write_wav_mono16};

/// Decoded audio. `samples` are interleaved when `channels > 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub label: usize,
    pub sample_rate: u32,
    pub channels: usize,
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn mono(clip_id: impl Into<String>, label: usize, sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            clip_id: clip_id.into(),
            label,
            sample_rate,
            channels: 1,
            samples,
        }
    }

    /// Number of sample frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1)
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

/// MFCC matrix for one clip, stored coefficient-major: row `c` holds the
/// `frames` values of coefficient `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub clip_id: String,
    pub label: usize,
    pub n_coeffs: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn coefficient(&self, c: usize) -> &[f64] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn frame(&self, f: usize) -> Vec<f64> {
        (0..self.n_coeffs).map(|c| self.data[c * self.frames + f]).collect()
    }
}

/// Front-end parameters. Every field participates in [`FrontendConfig::hash`],
/// which keys the feature cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub target_seconds: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            target_seconds: 3.0,
            window_ms: 30.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            n_mfcc: 40,
            f_min: 20.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn target_samples(&self) -> usize {
        (self.target_seconds * self.sample_rate as f64).round() as usize
    }

    /// `1 + ⌊(N − W)/H⌋` for a clip of `n` samples, or `None` when the clip is
    /// shorter than one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        let w = self.window_samples();
        (n >= w).then(|| 1 + (n - w) / self.hop_samples())
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(format!("frontend: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return bad("window and hop must span at least one sample");
        }
        if self.n_fft < self.window_samples() {
            return bad("n_fft must be at least the window length");
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("n_mfcc must be in 1..=n_mels");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return bad("mel range must satisfy 0 <= f_min < f_max <= Nyquist");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if !(self.target_seconds > 0.0) {
            return bad("target_seconds must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Per-coefficient z-scoring statistics, fitted on one set of feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> crate::Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in maps {
            if sum.is_empty() {
                sum = vec![0.0; m.n_coeffs];
                sq = vec![0.0; m.n_coeffs];
            } else if sum.len() != m.n_coeffs {
                return Err(crate::Error::Data(format!(
                    "clip {} has {} coefficients, expected {}",
                    m.clip_id,
                    m.n_coeffs,
                    sum.len()
                )));
            }
            for c in 0..m.n_coeffs {
                for &v in m.coefficient(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += m.frames;
        }
        if count == 0 {
            return Err(crate::Error::Data("cannot fit standardizer on no frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &FeatureMap) -> FeatureMap {
        let mut out = m.clone();
        for c in 0..m.n_coeffs {
            for v in &mut out.data[c * m.frames..(c + 1) * m.frames] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}
