//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines print in
//! order and unbuffered.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aftcil::aft::{AftArchitecture, AftNetwork};
use aftcil::dataset::{ingest, DatasetManifest};
use aftcil::engine::{
    compute_acc, compute_bwt, run_method, run_methods, AccuracyMatrix, Corpus, Learner, Method, PreparedRun,
    RunConfig, RunReport,
};
use aftcil::feature_space::{build_prototypes, ClassPrototype, FeatureSpace, PrototypeOptions, SampleSet};
use aftcil::synth::{synth_generate, SyntheticSpec};
use aftcil::tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_DATA_SEED: u64 = 7;
const BENCH_CLIPS: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn corpus(dir: &Path, seed: u64, clips: usize) -> (Corpus, SyntheticSpec) {
    let spec = SyntheticSpec::default_with(seed, clips);
    synth_generate(&spec, dir).expect("synthetic corpus");
    let manifest = DatasetManifest::load(dir).expect("manifest");
    let (corpus, _) = ingest(&manifest, &RunConfig::default().frontend, &manifest.default_cache_path()).expect("ingest");
    (corpus, spec)
}

fn benchmark_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_benchmark.toml");
    RunConfig::load(&path).expect("benchmark config")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let ops = common::op_errors();
    let mut failing = Vec::new();
    for (name, err) in &ops {
        if *err >= common::TOLERANCE {
            failing.push(name.clone());
        }
        worst = worst.max(*err);
    }
    let (full, checked) = common::full_objective_error();
    if full >= common::TOLERANCE {
        failing.push("full objective".into());
    }
    outcome(
        failing.is_empty(),
        format!(
            "{} operations max rel err {:.2e}; full objective over {checked} parameters {:.2e}; tolerance {:.0e}{}",
            ops.len(),
            worst,
            full,
            common::TOLERANCE,
            if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }
        ),
    )
}

fn metric_formulas() -> Outcome {
    // (rows, ACC, BWT)
    let cases: Vec<(Vec<Vec<f64>>, f64, f64)> = vec![
        (vec![vec![0.9], vec![0.8, 0.7]], 0.75, -0.1),
        (vec![vec![0.8], vec![0.8, 0.6], vec![0.8, 0.6, 0.7]], 0.7, 0.0),
        (vec![vec![0.9], vec![0.6, 0.8], vec![0.3, 0.5, 0.7]], 0.5, -0.45),
        (
            vec![vec![0.5], vec![0.6, 0.7], vec![0.7, 0.6, 0.9], vec![0.8, 0.9, 0.6, 0.4]],
            0.675,
            0.2 / 3.0,
        ),
        (
            vec![
                vec![1.0],
                vec![0.0, 1.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0, 0.0, 0.0, 1.0],
            ],
            0.2,
            -1.0,
        ),
    ];
    let mut worst = 0.0f64;
    for (rows, acc, bwt) in &cases {
        let m = AccuracyMatrix::from_rows(rows.clone()).expect("valid rows");
        let got_acc = compute_acc(&m).expect("acc");
        let got_bwt = compute_bwt(&m).expect("bwt");
        worst = worst.max((got_acc - acc).abs()).max((got_bwt - bwt).abs());
    }
    outcome(worst <= 1e-12, format!("{} matrices, max abs error {worst:.1e} (tolerance 1e-12)", cases.len()))
}

fn zero_weights_match_finetune(corpus: &Corpus) -> Outcome {
    const STEPS: usize = 20;
    let mut cfg = RunConfig {
        epochs: 15,
        batch_size: 16,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..RunConfig::default()
    };
    cfg.method = Method::Aft;
    let prepared = PreparedRun::new(corpus, &cfg).expect("prepared");
    let trajectory = |method: Method| -> Vec<Vec<Float>> {
        let mut c = cfg.clone();
        c.method = method;
        let plan = c.plan();
        let mut learner = Learner::new(&c).expect("learner");
        let mut log = Vec::new();
        let mut steps: Vec<Vec<Float>> = Vec::new();
        for (t, task) in prepared.tasks.iter().enumerate() {
            if t > 0 {
                learner
                    .fit_task_observed(t, task, &c, &plan, &mut log, &mut |l| {
                        if steps.len() < STEPS {
                            steps.push(l.parameter_values());
                        }
                    })
                    .expect("fit");
            } else {
                learner.fit_task(t, task, &c, &plan, &mut log).expect("fit");
            }
            learner.finish_task(t, task, &c, &plan).expect("finish");
            if steps.len() >= STEPS {
                break;
            }
        }
        steps
    };
    let aft = trajectory(Method::Aft);
    let ft = trajectory(Method::Finetune);
    let compared = aft.len().min(ft.len());
    let identical = compared == STEPS
        && aft.iter().zip(&ft).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let first_diff = aft
        .iter()
        .zip(&ft)
        .position(|(a, b)| a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()));
    outcome(
        identical,
        format!(
            "{compared} incremental steps compared bit for bit, {} parameters each{}",
            aft.first().map_or(0, |v| v.len()),
            first_diff.map(|s| format!("; first difference at step {s}")).unwrap_or_default()
        ),
    )
}

fn selective_prototype() -> Outcome {
    // Class 0 has three inliers near the origin and one outlier the
    // classifier assigns to class 1; class 1 has two clean samples.
    let rows: [[Float; 2]; 6] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [10.0, 10.0], [5.0, 5.0], [6.0, 5.0]];
    let labels = [0usize, 0, 0, 0, 1, 1];
    let scores: [[Float; 2]; 6] = [[2.0, 0.0], [2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [0.0, 2.0], [0.0, 2.0]];
    let features = Tensor::new(vec![6, 2], rows.iter().flatten().copied().collect()).unwrap();
    let scores = Tensor::new(vec![6, 2], scores.iter().flatten().copied().collect()).unwrap();
    let samples = SampleSet {
        features: &features,
        labels: &labels,
        scores: &scores,
        scores_are_probabilities: false,
    };
    let build = |selective| {
        let opts = PrototypeOptions {
            selective,
            ..PrototypeOptions::default()
        };
        build_prototypes(&samples, &[0, 1], &opts).expect("prototypes")
    };
    let sel = build(true);
    let all = build(false);

    let class0: Vec<[Float; 2]> = rows[..4].to_vec();
    let inliers = &class0[..3];
    let mean = |v: &[[Float; 2]], k: usize| v.iter().map(|r| r[k]).sum::<Float>() / v.len() as Float;
    let std = |k: usize| {
        let m = mean(&class0, k);
        (class0.iter().map(|r| (r[k] - m).powi(2)).sum::<Float>() / class0.len() as Float).sqrt()
    };
    let inlier_mean = [mean(inliers, 0), mean(inliers, 1)];
    let dist = |a: &[Float], b: &[Float]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<Float>().sqrt();

    let moved = dist(&sel[0].mean, &inlier_mean) < dist(&all[0].mean, &inlier_mean);
    let exact_inliers = dist(&sel[0].mean, &inlier_mean) < 1e-12;
    let radius_err = (0..2).map(|k| (sel[0].radius[k] - std(k)).abs()).fold(0.0, f64::max);
    let same_radius = sel[0].radius == all[0].radius;
    outcome(
        moved && exact_inliers && radius_err <= 1e-9 && same_radius,
        format!(
            "selective mean {:?} vs all-sample {:?}; kept {}/{}; radius error {radius_err:.1e} (tolerance 1e-9)",
            sel[0].mean, all[0].mean, sel[0].n_selected, sel[0].n_total
        ),
    )
}

struct MethodStats {
    acc: f64,
    bwt: f64,
    pair: f64,
}

fn benchmark(corpus: &Corpus, spec: &SyntheticSpec) -> Vec<(Method, MethodStats)> {
    let methods = [Method::Finetune, Method::Joint, Method::Base, Method::BaseAft, Method::Aft];
    let mut per_seed: Vec<Vec<RunReport>> = Vec::new();
    for seed in BENCH_SEEDS {
        let mut cfg = benchmark_config();
        cfg.seed = seed;
        let started = Instant::now();
        let prepared = PreparedRun::new(corpus, &cfg).expect("prepared");
        let reports = run_methods(&cfg, &methods, &prepared).expect("benchmark run");
        let accs: Vec<String> = reports.iter().map(|r| format!("{} {:.3}", r.config.method, r.acc)).collect();
        println!("     seed {seed} ({:.0} s): {}", started.elapsed().as_secs_f64(), accs.join(", "));
        per_seed.push(reports);
    }
    let (a, b) = &spec.similar_pair;
    methods
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let runs: Vec<&RunReport> = per_seed.iter().map(|r| &r[i]).collect();
            let stats = MethodStats {
                acc: median(runs.iter().map(|r| r.acc).collect()),
                // joint training has no BWT; it is never compared
                bwt: median(runs.iter().map(|r| r.bwt.unwrap_or(0.0)).collect()),
                pair: median(runs.iter().map(|r| r.pair_confusion(a, b).expect("pair classes present")).collect()),
            };
            (m, stats)
        })
        .collect()
}

fn stats(results: &[(Method, MethodStats)], m: Method) -> &MethodStats {
    &results.iter().find(|(k, _)| *k == m).expect("method benchmarked").1
}

fn identity_transform() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 48;
    let protos: Vec<ClassPrototype> = (0..4)
        .map(|c| ClassPrototype {
            class_id: c,
            mean: (0..dim).map(|j| ((c * dim + j) as Float * 0.37).sin() * 5.0).collect(),
            radius: vec![0.5; dim],
            n_total: 10,
            n_selected: 10,
        })
        .collect();
    let mut exact = true;
    for arch in [AftArchitecture::ResidualMlp { hidden: 64 }, AftArchitecture::Linear] {
        let mut space = FeatureSpace::new();
        space.insert_task(0, protos.clone()).unwrap();
        let net = AftNetwork::identity(dim, arch, &mut rng).unwrap();
        space.transform(|m| net.map(m)).unwrap();
        exact &= protos.iter().all(|p| space.get(p.class_id).unwrap().prototype.mean == p.mean);
    }
    outcome(exact, "identity network leaves stored means bit-identical (residual and linear)".into())
}

fn determinism(corpus: &Corpus) -> Outcome {
    let mut differing = Vec::new();
    for m in Method::ALL {
        let cfg = RunConfig {
            method: m,
            seed: 5,
            epochs: 2,
            batch_size: 16,
            ..RunConfig::default()
        };
        let a = run_method(&cfg, corpus).expect("run").matrix.to_csv();
        let b = run_method(&cfg, corpus).expect("run").matrix.to_csv();
        if a.as_bytes() != b.as_bytes() {
            differing.push(m.as_str());
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} methods produce identical accuracy matrix bytes on repeat", Method::ALL.len())
        } else {
            format!("matrices differ for {differing:?}")
        },
    )
}

/// Runs one check and fails it if it overruns its time budget.
fn timed(budget_s: f64, check: impl FnOnce() -> Outcome) -> Outcome {
    let started = Instant::now();
    let mut o = check();
    let took = started.elapsed().as_secs_f64();
    o.detail.push_str(&format!(" [{took:.1} s, budget {budget_s:.0} s]"));
    o.pass &= took <= budget_s;
    o
}

fn main() {
    let mut failed = 0usize;
    let mut report = |id: &str, name: &str, o: Outcome| {
        println!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };

    report("1", "gradients match finite differences", timed(30.0, gradients));
    report("2", "ACC and BWT on fixed matrices", timed(1.0, metric_formulas));

    let small_dir = tempfile::tempdir().unwrap();
    let (small, _) = corpus(small_dir.path(), 4, 8);
    report("3", "zero loss weights reproduce fine-tuning", timed(60.0, || zero_weights_match_finetune(&small)));
    report("4", "selective prototype ignores misclassified samples", timed(1.0, selective_prototype));

    let bench_dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let (bench, spec) = corpus(bench_dir.path(), BENCH_DATA_SEED, BENCH_CLIPS);
    println!("     benchmark: {} seeds, medians", BENCH_SEEDS.len());
    let results = benchmark(&bench, &spec);
    let bench_s = started.elapsed().as_secs_f64();
    let within_budget = bench_s <= 20.0 * 60.0;
    for (m, s) in &results {
        let bwt = if *m == Method::Joint { "n/a".to_string() } else { format!("{:+.3}", s.bwt) };
        println!("     {m:9} ACC {:.3} BWT {bwt} pair confusion {:.3}", s.acc, s.pair);
    }
    println!("     benchmark took {bench_s:.0} s (budget 1200 s)");
    let ft = stats(&results, Method::Finetune);
    let joint = stats(&results, Method::Joint);
    let base = stats(&results, Method::Base);
    let base_aft = stats(&results, Method::BaseAft);
    let aft = stats(&results, Method::Aft);
    report(
        "5a",
        "fine-tuning forgets",
        outcome(
            within_budget && ft.bwt <= -0.25 && joint.acc - ft.acc >= 0.15,
            format!("BWT {:+.3} (<= -0.25); ACC {:.1} points below joint (>= 15)", ft.bwt, (joint.acc - ft.acc) * 100.0),
        ),
    );
    report(
        "5b",
        "AFT beats fine-tuning",
        outcome(
            within_budget && aft.acc >= ft.acc + 0.10 && aft.bwt > ft.bwt,
            format!(
                "ACC +{:.1} points (>= 10); BWT {:+.3} vs {:+.3}",
                (aft.acc - ft.acc) * 100.0,
                aft.bwt,
                ft.bwt
            ),
        ),
    );
    report(
        "5c",
        "ablation ladder",
        outcome(
            within_budget && base.acc <= base_aft.acc && base_aft.acc <= aft.acc,
            format!("base {:.3} <= base+AFT {:.3} <= AFT {:.3}", base.acc, base_aft.acc, aft.acc),
        ),
    );
    report("6a", "identity transformation is exact", timed(1.0, identity_transform));
    report(
        "6b",
        "similar pair confusion",
        outcome(
            aft.pair < ft.pair,
            format!("{}/{} confusion AFT {:.3} < fine-tuning {:.3}", spec.similar_pair.0, spec.similar_pair.1, aft.pair, ft.pair),
        ),
    );
    report("7", "runs are deterministic", timed(300.0, || determinism(&small)));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
