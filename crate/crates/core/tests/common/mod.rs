#![allow(dead_code)]
//! Finite-difference oracle shared by the gradient tests and the
//! acceptance suite.
//!
//! Every tape operation is checked on its own (reduced to a scalar through a
//! fixed random projection and a distance to a fixed target), then the full
//! training objective is checked with respect to every trainable parameter of
//! a tiny model.

use aftcil::aft::{loss_fs, loss_kfd, loss_trans, AftArchitecture, AftNetwork};
use aftcil::backbone::{Backbone, BackboneConfig, ClassifierHead, HeadInit};
use aftcil::feature_space::{ClassPrototype, FeatureSpace};
use aftcil::tensor::{BatchNormStats, Float, Mode, Parameters, Tape, Tensor, Var};
use aftcil::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: Float = 1e-5;
/// Random evaluation points per operation.
const POINTS: u64 = 10;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient components below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Projects a `[B, C]` or `[B, C, T]` value onto a scalar with a generic
/// upstream gradient.
fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let y = if tape.shape(y).len() == 3 {
        tape.global_avg_pool_time(y)?
    } else {
        y
    };
    let s = tape.shape(y).to_vec();
    let w = random(&[3, s[1]], 901);
    let b = random(&[3], 902);
    let target = random(&[s[0], 3], 903);
    let w = tape.constant(w.shape().to_vec(), w.into_data())?;
    let b = tape.constant(b.shape().to_vec(), b.into_data())?;
    let t = tape.constant(target.shape().to_vec(), target.into_data())?;
    let z = tape.linear(y, w, b)?;
    tape.l2_distance(z, t)
}

/// Max relative error between tape gradients and central differences of
/// `f` with respect to every input.
fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let params: Vec<Tensor> = inputs.iter().map(|t| Tensor::param(t.shape().to_vec(), t.data().to_vec()).unwrap()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p).unwrap()).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<Float>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.scalar(loss)
    };
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g[j] as f64, numeric as f64));
        }
    }
    worst
}

fn max_over_points(f: impl Fn(u64) -> f64) -> f64 {
    (0..POINTS).map(|p| f(p * 1000)).fold(0.0, f64::max)
}


/// Max relative error of every tape operation over [`POINTS`] random
/// points each.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (stride, padding) in [(1, 1), (2, 0), (2, 2)] {
        let err = max_over_points(|pt| check_inputs(&[random(&[2, 3, 7], 1 + pt), random(&[4, 3, 3], 2 + pt), random(&[4], 3 + pt)], |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], stride, padding)?;
            reduce(t, y)
        }));
        out.push((format!("conv1d stride {stride} padding {padding}"), err));
    }
    let mut stats = BatchNormStats::new(3);
    stats.running_mean = vec![0.2, -0.1, 0.4];
    stats.running_var = vec![0.5, 1.5, 2.0];
    for mode in [Mode::Train, Mode::Eval] {
        let err = max_over_points(|pt| check_inputs(&[random(&[3, 3, 5], 4 + pt), random(&[3], 5 + pt), random(&[3], 6 + pt)], |t, v| {
            let (y, _) = t.batch_norm1d(v[0], v[1], v[2], &stats, mode)?;
            reduce(t, y)
        }));
        out.push((format!("batch_norm1d {mode:?}"), err));
    }
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 7 + pt)], |t, v| {
        let y = t.relu(v[0])?;
        reduce(t, y)
    }));
    out.push(("relu".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[2, 3, 4], 8 + pt), random(&[2, 3, 4], 9 + pt)], |t, v| {
        let y = t.add(v[0], v[1])?;
        reduce(t, y)
    }));
    out.push(("add".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[2, 3, 5], 10 + pt)], |t, v| {
        let y = t.global_avg_pool_time(v[0])?;
        reduce(t, y)
    }));
    out.push(("global_avg_pool_time".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 11 + pt), random(&[5, 4], 12 + pt), random(&[5], 13 + pt)], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        reduce(t, y)
    }));
    out.push(("linear".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 14 + pt)], |t, v| {
        let y = t.softmax(v[0])?;
        reduce(t, y)
    }));
    out.push(("softmax".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 15 + pt)], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1])));
    out.push(("softmax_cross_entropy".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 16 + pt), random(&[3, 4], 17 + pt)], |t, v| t.l2_distance(v[0], v[1])));
    out.push(("l2_distance".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[2, 3], 18 + pt)], |t, v| {
        let y = t.softmax(v[0])?;
        let z = t.add(y, v[0])?;
        t.sum(z)
    }));
    out.push(("sum".to_string(), err));
    let err = max_over_points(|pt| check_inputs(&[random(&[3, 4], 19 + pt), random(&[3, 4], 20 + pt)], |t, v| {
        let a = t.sum(v[0])?;
        let b = t.l2_distance(v[0], v[1])?;
        t.weighted_sum(&[(a, 0.3), (b, 2.5)])
    }));
    out.push(("weighted_sum".to_string(), err));
    out
}

struct Tiny {
    backbone: Backbone,
    snapshot: Backbone,
    head: ClassifierHead,
    aft: AftNetwork,
    space: FeatureSpace,
    x: Tensor,
    labels: Vec<usize>,
}

fn randomize(params: Vec<&mut Tensor>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

/// Feature dim 4, two classes (one old, one new), batch 3.
fn tiny() -> Tiny {
    let cfg = BackboneConfig {
        input_channels: 3,
        channels: vec![4, 4],
        stem_kernel: 3,
        block_kernel: 3,
        block_stride: 2,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut backbone = Backbone::new(&cfg, &mut rng).unwrap();
    randomize(backbone.parameters_mut(), 22);
    let mut snapshot = Backbone::new(&cfg, &mut rng).unwrap();
    randomize(snapshot.parameters_mut(), 23);
    let mut head = ClassifierHead::new(4, 2, HeadInit::KaimingUniform, &mut rng).unwrap();
    randomize(head.parameters_mut(), 24);
    let mut aft = AftNetwork::identity(4, AftArchitecture::ResidualMlp { hidden: 6 }, &mut rng).unwrap();
    randomize(aft.parameters_mut(), 25);
    let mut space = FeatureSpace::new();
    space
        .insert_task(
            0,
            vec![ClassPrototype {
                class_id: 0,
                mean: vec![0.5, -0.2, 0.1, 0.3],
                radius: vec![0.2, 0.1, 0.3, 0.05],
                n_total: 4,
                n_selected: 4,
            }],
        )
        .unwrap();
    Tiny {
        backbone,
        snapshot,
        head,
        aft,
        space,
        x: random(&[3, 3, 8], 26),
        labels: vec![1, 1, 1],
    }
}

/// ce + α·kfd + β·trans + γ·fs on a fresh tape.
fn objective(m: &Tiny, tape: &mut Tape) -> Result<Var> {
    let (alpha, beta, gamma) = (1.5, 5.0, 5.0);
    let x = tape.leaf(&m.x)?;
    let out = m.backbone.forward(tape, x, Mode::Train)?;
    let logits = m.head.classify(tape, out.features)?;
    let ce = tape.softmax_cross_entropy(logits, &m.labels)?;

    let mut prev_tape = Tape::new();
    let px = prev_tape.leaf(&m.x)?;
    let prev = m.snapshot.forward(&mut prev_tape, px, Mode::Eval)?.features;
    let prev = prev_tape.to_tensor(prev);
    let pv = tape.constant(prev.shape().to_vec(), prev.into_data())?;

    let kfd = loss_kfd(tape, out.features, pv)?;
    let trans = loss_trans(tape, out.features, pv, &m.aft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let fs = loss_fs(tape, &m.aft, &m.space, &m.head, 4, 1, &mut rng)?;
    tape.weighted_sum(&[(ce, 1.0), (kfd, alpha), (trans, beta), (fs, gamma)])
}

fn all_params(m: &mut Tiny) -> Vec<&mut Tensor> {
    let mut p = m.backbone.parameters_mut();
    p.extend(m.head.parameters_mut());
    p.extend(m.aft.parameters_mut());
    p
}

/// Max relative error over every trainable parameter of the tiny model,
/// and the number of parameters checked.
pub fn full_objective_error() -> (f64, usize) {
    let mut m = tiny();
    all_params(&mut m).into_iter().for_each(|p| p.zero_grad());
    let mut tape = Tape::new();
    let loss = objective(&m, &mut tape).unwrap();
    assert!(tape.scalar(loss) > 0.0);
    tape.backward(loss).unwrap();
    tape.accumulate_param_grads(all_params(&mut m)).unwrap();
    let analytic: Vec<Vec<Float>> = all_params(&mut m)
        .into_iter()
        .map(|p| p.grad().expect("every parameter receives a gradient").to_vec())
        .collect();

    let eval = |m: &Tiny| {
        let mut tape = Tape::new();
        let l = objective(m, &mut tape).unwrap();
        tape.scalar(l)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = all_params(&mut m)[i].data()[j];
            all_params(&mut m)[i].data_mut()[j] = orig + STEP;
            let up = eval(&m);
            all_params(&mut m)[i].data_mut()[j] = orig - STEP;
            let down = eval(&m);
            all_params(&mut m)[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(g[j] as f64, numeric as f64));
            checked += 1;
        }
    }
    (worst, checked)
}
