use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, FeatureMap, FrontendConfig};
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter: `n_mels + 2` points evenly
/// spaced on the mel scale between `f_min` and `f_max`, without the two edges.
pub fn mel_filter_centers(cfg: &FrontendConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_points(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Reusable MFCC pipeline: Hann window, FFT power spectrum, triangular mel
/// filterbank, log with a floor, orthonormal DCT-II.
pub struct MfccExtractor {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    // [n_mels][n_fft/2 + 1]
    filters: Vec<Vec<f64>>,
    // [n_mfcc][n_mels]
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.window_samples();
        // periodic Hann
        let window = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / w as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let bins = cfg.n_fft / 2 + 1;
        let points = mel_points(cfg);
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let n = cfg.n_mels as f64;
        let dct = (0..cfg.n_mfcc)
            .map(|k| {
                let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                (0..cfg.n_mels)
                    .map(|i| scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fft,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Mel filterbank energies per frame, before the log. Exposed for
    /// inspecting the filterbank response.
    pub fn filterbank_energies(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        if clip.channels != 1 {
            return Err(Error::Clip {
                clip_id: clip.clip_id.clone(),
                reason: "MFCC extraction expects a mono clip; normalize it first".into(),
            });
        }
        let n = clip.samples.len();
        let frames = self.cfg.frame_count(n).ok_or_else(|| Error::Clip {
            clip_id: clip.clip_id.clone(),
            reason: format!(
                "{n} samples is shorter than one {}-sample frame",
                self.cfg.window_samples()
            ),
        })?;
        let hop = self.cfg.hop_samples();
        let bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut power = vec![0.0; bins];
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let start = f * hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = clip.samples[start + i] * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.push(
                self.filters
                    .iter()
                    .map(|filt| filt.iter().zip(&power).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMap> {
        let energies = self.filterbank_energies(clip)?;
        let frames = energies.len();
        let n_mfcc = self.cfg.n_mfcc;
        let mut data = vec![0.0; n_mfcc * frames];
        let mut logmel = vec![0.0; self.cfg.n_mels];
        for (f, e) in energies.iter().enumerate() {
            for (l, &v) in logmel.iter_mut().zip(e) {
                *l = v.max(self.cfg.log_floor).ln();
            }
            for (k, basis) in self.dct.iter().enumerate() {
                data[k * frames + f] = basis.iter().zip(&logmel).map(|(a, b)| a * b).sum();
            }
        }
        Ok(FeatureMap {
            clip_id: clip.clip_id.clone(),
            label: clip.label,
            n_coeffs: n_mfcc,
            frames,
            data,
        })
    }
}

/// One-shot MFCC extraction of an already normalized mono clip.
pub fn extract_mfcc(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMap> {
    MfccExtractor::new(cfg)?.extract(clip)
}

pub fn filterbank_energies(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    MfccExtractor::new(cfg)?.filterbank_energies(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::mono("c", 0, 16_000, samples)
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 20.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn silence_gives_identical_constant_frames() {
        let cfg = FrontendConfig::default();
        let fm = extract_mfcc(&clip(vec![0.0; 16_000]), &cfg).unwrap();
        assert_eq!(fm.n_coeffs, 40);
        assert_eq!(fm.frames, cfg.frame_count(16_000).unwrap());
        let first = fm.frame(0);
        for f in 1..fm.frames {
            assert_eq!(fm.frame(f), first);
        }
        // DCT of a constant vector: only coefficient 0 is non-zero,
        // √N · log(floor).
        let expected_c0 = (40f64).sqrt() * cfg.log_floor.ln();
        assert!((first[0] - expected_c0).abs() < 1e-9);
        assert!(first[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let cfg = FrontendConfig::default();
        assert!(matches!(
            extract_mfcc(&clip(vec![0.1; 100]), &cfg),
            Err(Error::Clip { .. })
        ));
    }

    #[test]
    fn orthonormal_dct_rows() {
        let ex = MfccExtractor::new(&FrontendConfig::default()).unwrap();
        for a in 0..40 {
            for b in 0..40 {
                let dot: f64 = ex.dct[a].iter().zip(&ex.dct[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12, "rows {a},{b}: {dot}");
            }
        }
    }

    #[test]
    fn scaling_shifts_log_mel_by_log4() {
        let cfg = FrontendConfig::default();
        let ex = MfccExtractor::new(&cfg).unwrap();
        let samples: Vec<f64> = (0..8000)
            .map(|n| 0.2 * (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin() + 0.05 * ((n * 7919 % 101) as f64 / 101.0 - 0.5))
            .collect();
        let doubled: Vec<f64> = samples.iter().map(|s| 2.0 * s).collect();
        let a = ex.filterbank_energies(&clip(samples)).unwrap();
        let b = ex.filterbank_energies(&clip(doubled)).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (&ea, &eb) in fa.iter().zip(fb) {
                if ea > cfg.log_floor * 4.0 {
                    assert!((eb.ln() - ea.ln() - 4f64.ln()).abs() < 1e-9);
                }
            }
        }
    }
}
