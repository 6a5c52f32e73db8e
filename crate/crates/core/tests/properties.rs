use aftcil::aft::{loss_fs, loss_kfd, loss_trans, total_loss, AftArchitecture, AftNetwork, LossWeights};
use aftcil::audio::{AudioClip, FrontendConfig, MfccExtractor};
use aftcil::backbone::{Backbone, BackboneConfig, ClassifierHead, HeadInit};
use aftcil::engine::{compute_acc, compute_bwt, AccuracyMatrix};
use aftcil::feature_space::{build_prototypes, sample_reparam, ClassPrototype, FeatureSpace, PrototypeOptions, SampleSet};
use aftcil::tensor::{Mode, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..7).prop_flat_map(|t| {
        (0..t)
            .map(|i| prop::collection::vec(0.0f64..=1.0, i + 1))
            .collect::<Vec<_>>()
    })
}

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_cross_entropy_is_non_negative(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 4], logits).unwrap();
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ce = tape.softmax_cross_entropy(x, &labels).unwrap();
        prop_assert!(tape.scalar(ce) >= 0.0);
    }

    #[test]
    fn conv1d_output_length_formula(t in 1usize..40, k in 1usize..8, stride in 1usize..4, padding in 0usize..4) {
        prop_assume!(k <= t + 2 * padding);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2, t], vec![0.5; 2 * t]).unwrap();
        let w = tape.constant(vec![3, 2, k], vec![0.1; 6 * k]).unwrap();
        let b = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = tape.conv1d(x, w, b, stride, padding).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 3, (t + 2 * padding - k) / stride + 1][..]);
    }

    #[test]
    fn mfcc_frame_count_formula(n in 480usize..6000) {
        let cfg = FrontendConfig::default();
        let clip = AudioClip::mono("c", 0, cfg.sample_rate, (0..n).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect());
        let map = MfccExtractor::new(&cfg).unwrap().extract(&clip).unwrap();
        prop_assert_eq!(map.n_coeffs, 40);
        prop_assert_eq!(map.frames, 1 + (n - 480) / 160);
    }

    #[test]
    fn doubling_amplitude_shifts_log_mel_by_log_four(seed in 0u64..1000) {
        let cfg = FrontendConfig::default();
        let ex = MfccExtractor::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let samples: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let a = ex.filterbank_energies(&AudioClip::mono("a", 0, cfg.sample_rate, samples.clone())).unwrap();
        let b = ex
            .filterbank_energies(&AudioClip::mono("b", 0, cfg.sample_rate, samples.iter().map(|v| v * 2.0).collect()))
            .unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (&ea, &eb) in fa.iter().zip(fb) {
                if ea > cfg.log_floor {
                    prop_assert!((eb.ln() - ea.ln() - 4f64.ln()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn backbone_features_have_fixed_width_for_any_length(frames in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Backbone::new(&BackboneConfig::default(), &mut rng).unwrap();
        let x = Tensor::new(vec![2, 40, frames], vec![0.1; 80 * frames]).unwrap();
        let f = net.features(&x).unwrap();
        prop_assert_eq!(f.shape(), &[2, 48][..]);
    }

    #[test]
    fn selection_never_changes_radii_and_order_does_not_matter(
        data in features(12, 3),
        labels in prop::collection::vec(0usize..2, 12),
        correct in prop::collection::vec(any::<bool>(), 12),
        rotate in 0usize..12,
    ) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        // Scores put the label's column on top exactly when `correct`.
        let scores: Vec<f64> = labels
            .iter()
            .zip(&correct)
            .flat_map(|(&l, &c)| {
                let hit = if c { l } else { 1 - l };
                if hit == 0 { [2.0, 0.0] } else { [0.0, 2.0] }
            })
            .collect();
        let feats = Tensor::new(vec![12, 3], data.clone()).unwrap();
        let sc = Tensor::new(vec![12, 2], scores.clone()).unwrap();
        let set = SampleSet { features: &feats, labels: &labels, scores: &sc, scores_are_probabilities: false };
        let plain = build_prototypes(&set, &[0, 1], &PrototypeOptions::default()).unwrap();
        let sel_opts = PrototypeOptions { selective: true, ..PrototypeOptions::default() };
        let selective = build_prototypes(&set, &[0, 1], &sel_opts).unwrap();
        for (p, s) in plain.iter().zip(&selective) {
            prop_assert_eq!(&p.radius, &s.radius);
            prop_assert_eq!(p.n_total, s.n_total);
        }

        let idx: Vec<usize> = (0..12).map(|i| (i + rotate) % 12).collect();
        let f2: Vec<f64> = idx.iter().flat_map(|&i| data[i * 3..i * 3 + 3].to_vec()).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let s2: Vec<f64> = idx.iter().flat_map(|&i| scores[i * 2..i * 2 + 2].to_vec()).collect();
        let feats2 = Tensor::new(vec![12, 3], f2).unwrap();
        let sc2 = Tensor::new(vec![12, 2], s2).unwrap();
        let set2 = SampleSet { features: &feats2, labels: &l2, scores: &sc2, scores_are_probabilities: false };
        let shuffled = build_prototypes(&set2, &[0, 1], &sel_opts).unwrap();
        for (a, b) in selective.iter().zip(&shuffled) {
            for (x, y) in a.mean.iter().zip(&b.mean).chain(a.radius.iter().zip(&b.radius)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_radius_draws_are_the_mean(mean in prop::collection::vec(-5.0f64..5.0, 4), n in 1usize..20, seed in 0u64..100) {
        let p = ClassPrototype { class_id: 3, radius: vec![0.0; 4], mean: mean.clone(), n_total: 1, n_selected: 1 };
        let (t, labels) = sample_reparam(&p, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(labels.iter().all(|&l| l == 3));
        for row in t.data().chunks(4) {
            prop_assert_eq!(row, &mean[..]);
        }
    }

    #[test]
    fn space_holds_exactly_the_classes_inserted(tasks in prop::collection::vec(1usize..4, 1..5)) {
        let mut space = FeatureSpace::new();
        let mut next = 0;
        for (t, &k) in tasks.iter().enumerate() {
            space.transform(|m| Ok(m.clone())).unwrap();
            let protos = (next..next + k)
                .map(|c| ClassPrototype { class_id: c, mean: vec![c as f64; 2], radius: vec![1.0; 2], n_total: 2, n_selected: 2 })
                .collect();
            space.insert_task(t, protos).unwrap();
            next += k;
            prop_assert_eq!(space.classes(), (0..next).collect::<Vec<_>>());
        }
    }

    #[test]
    fn losses_are_non_negative_and_trans_equals_kfd_at_identity(
        cur in features(3, 4),
        prev in features(3, 4),
        w in (0.0f64..20.0, 0.0f64..20.0, 0.0f64..20.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = AftNetwork::identity(4, AftArchitecture::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(vec![3, 4], cur.clone()).unwrap();
        let p = tape.constant(vec![3, 4], prev).unwrap();
        let kfd = loss_kfd(&mut tape, c, p).unwrap();
        let trans = loss_trans(&mut tape, c, p, &net).unwrap();
        prop_assert_eq!(tape.scalar(kfd), tape.scalar(trans));

        let mut space = FeatureSpace::new();
        space
            .insert_task(0, vec![ClassPrototype { class_id: 0, mean: cur[..4].to_vec(), radius: vec![0.5; 4], n_total: 2, n_selected: 2 }])
            .unwrap();
        let head = ClassifierHead::new(4, 2, HeadInit::KaimingUniform, &mut rng).unwrap();
        let fs = loss_fs(&mut tape, &net, &space, &head, 8, 1, &mut rng).unwrap();
        let ce = tape.softmax_cross_entropy(c, &[0, 1, 2]).unwrap();
        let weights = LossWeights { alpha: w.0, beta: w.1, gamma: w.2 };
        let parts = [tape.scalar(ce), tape.scalar(kfd), tape.scalar(trans), tape.scalar(fs)];
        prop_assert!(parts.iter().all(|&v| v >= 0.0));
        let b = total_loss(parts[0], parts[1], parts[2], parts[3], &weights).unwrap();
        let expect = parts[0] + w.0 * parts[1] + w.1 * parts[2] + w.2 * parts[3];
        prop_assert!((b.total - expect).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_pure_functions_of_the_stored_matrix(rows in matrix_rows()) {
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let back = AccuracyMatrix::from_csv(&m.to_csv()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(compute_acc(&back).unwrap(), compute_acc(&m).unwrap());
        let last = rows.last().unwrap();
        prop_assert!((compute_acc(&m).unwrap() - last.iter().sum::<f64>() / last.len() as f64).abs() < 1e-12);
        if rows.len() >= 2 {
            let t = rows.len();
            let expect = (0..t - 1).map(|i| rows[t - 1][i] - rows[i][i]).sum::<f64>() / (t - 1) as f64;
            prop_assert!((compute_bwt(&m).unwrap() - expect).abs() < 1e-12);
            prop_assert!(compute_bwt(&m).unwrap() >= -1.0 && compute_bwt(&m).unwrap() <= 1.0);
        }
    }
}

#[test]
fn eval_forward_is_batch_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Backbone::new(&BackboneConfig::default(), &mut rng).unwrap();
    use rand::Rng;
    let x: Vec<f64> = (0..3 * 40 * 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let swapped: Vec<f64> = [2usize, 0, 1].iter().flat_map(|&i| x[i * 400..(i + 1) * 400].to_vec()).collect();
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(vec![3, 40, 10], data).unwrap();
        let out = net.forward(&mut tape, v, Mode::Eval).unwrap();
        tape.to_tensor(out.features)
    };
    let a = run(x);
    let b = run(swapped);
    for (k, &i) in [2usize, 0, 1].iter().enumerate() {
        assert_eq!(&b.data()[k * 48..(k + 1) * 48], &a.data()[i * 48..(i + 1) * 48]);
    }
}

#[test]
fn silence_gives_identical_frames() {
    let cfg = FrontendConfig::default();
    let map = MfccExtractor::new(&cfg)
        .unwrap()
        .extract(&AudioClip::mono("s", 0, cfg.sample_rate, vec![0.0; 16_000]))
        .unwrap();
    let first = map.frame(0);
    for f in 1..map.frames {
        assert_eq!(map.frame(f), first);
    }
}
