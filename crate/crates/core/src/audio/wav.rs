//! PCM WAV reading (16-bit integer and 32-bit float, mono or stereo) and
//! 16-bit mono writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

pub fn read_wav(path: &Path, clip_id: &str, label: usize) -> Result<AudioClip> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::Clip {
            clip_id: clip_id.into(),
            reason: format!("{} channels; only mono and stereo are supported", spec.channels),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32_768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, bits @ (24 | 32)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Clip {
                clip_id: clip_id.into(),
                reason: format!("unsupported sample format {fmt:?} at {bits} bits"),
            })
        }
    };
    if samples.is_empty() {
        return Err(Error::Clip {
            clip_id: clip_id.into(),
            reason: "file contains no samples".into(),
        });
    }
    Ok(AudioClip {
        clip_id: clip_id.into(),
        label,
        sample_rate: spec.sample_rate,
        channels: spec.channels as usize,
        samples,
    })
}

/// Writes mono 16-bit PCM. Samples are clamped to [-1, 1].
pub fn write_wav_mono16(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32_767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples = vec![0.0, 0.5, -0.5, 0.25];
        write_wav_mono16(&path, 16_000, &samples).unwrap();
        let clip = read_wav(&path, "a", 3).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert_eq!(clip.channels, 1);
        assert_eq!(clip.label, 3);
        for (a, b) in clip.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
    }

    #[test]
    fn float_stereo_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 22_050,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for s in [0.5f32, -0.5, 0.25, 0.75] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path, "f", 0).unwrap();
        assert_eq!(clip.channels, 2);
        assert_eq!(clip.frames(), 2);
        assert_eq!(clip.samples, vec![0.5, -0.5, 0.25, 0.75]);
    }

    #[test]
    fn garbage_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        std::fs::write(&path, b"not a wav").unwrap();
        assert!(matches!(read_wav(&path, "x", 0), Err(Error::Wav { .. })));
    }
}
