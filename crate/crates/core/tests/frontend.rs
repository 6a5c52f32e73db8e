use aftcil::audio::{hz_to_mel, mel_filter_centers, mel_to_hz, normalize_clip, AudioClip, FrontendConfig, MfccExtractor};

fn sine(hz: f64, cfg: &FrontendConfig) -> AudioClip {
    let sr = cfg.sample_rate as f64;
    let n = cfg.target_samples();
    AudioClip::mono("sine", 0, cfg.sample_rate, (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / sr).sin()).collect())
}

#[test]
fn mel_centres_follow_the_mel_formula() {
    let cfg = FrontendConfig::default();
    let centres = mel_filter_centers(&cfg);
    assert_eq!(centres.len(), 40);
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    for (k, &c) in centres.iter().enumerate() {
        let expect = mel_to_hz(lo + (hi - lo) * (k + 1) as f64 / 41.0);
        assert!((c - expect).abs() < 1e-9, "bin {k}: {c} vs {expect}");
    }
}

/// A tone at a filter's centre frequency puts the largest filterbank energy
/// in that filter. The lowest filters are narrower than one FFT bin, so the
/// oracle starts where filters span several bins.
#[test]
fn sine_at_a_mel_centre_peaks_in_that_filter() {
    let cfg = FrontendConfig::default();
    let ex = MfccExtractor::new(&cfg).unwrap();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let centres = mel_filter_centers(&cfg);
    let mut checked = 0;
    for k in 1..centres.len() - 1 {
        if centres[k] - centres[k - 1] < 2.0 * bin_hz {
            continue;
        }
        let energies = ex.filterbank_energies(&sine(centres[k], &cfg)).unwrap();
        let mid = &energies[energies.len() / 2];
        let argmax = (0..mid.len()).max_by(|&a, &b| mid[a].total_cmp(&mid[b])).unwrap();
        assert_eq!(argmax, k, "tone at {:.1} Hz", centres[k]);
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} filters were wide enough");
}

#[test]
fn identical_clips_give_identical_maps() {
    let cfg = FrontendConfig::default();
    let ex = MfccExtractor::new(&cfg).unwrap();
    let a = ex.extract(&sine(1234.0, &cfg)).unwrap();
    let b = ex.extract(&sine(1234.0, &cfg)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.n_coeffs, a.frames), (40, 298));
}

#[test]
fn normalisation_examples() {
    let cfg = FrontendConfig::default();
    let long = AudioClip::mono("l", 0, 16_000, (0..64_000).map(|i| (i as f64 * 0.001).sin()).collect());
    let out = normalize_clip(&long, 16_000, 3.0).unwrap();
    assert_eq!(out.samples, long.samples[..48_000].to_vec());
    let short = AudioClip::mono("s", 0, 16_000, vec![0.25; 16_000]);
    let out = normalize_clip(&short, 16_000, 3.0).unwrap();
    assert_eq!(out.samples.len(), 48_000);
    assert!(out.samples[16_000..].iter().all(|&v| v == 0.0));
    let exact = sine(440.0, &cfg);
    assert_eq!(normalize_clip(&exact, 16_000, 3.0).unwrap().samples, exact.samples);
    let empty = AudioClip::mono("gone", 0, 16_000, Vec::new());
    let err = normalize_clip(&empty, 16_000, 3.0).unwrap_err().to_string();
    assert!(err.contains("gone"));
}
