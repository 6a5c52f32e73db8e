//! Exemplar-free class memory: one diagonal Gaussian per learned class.
//!
//! Means may be computed from a filtered subset of training samples
//! (selective compression) while radii always describe the full class
//! spread. Stored means are carried into each new feature space by the
//! transformation network learned during that task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub mean: Vec<Float>,
    /// Per-dimension population standard deviation over all class samples.
    pub radius: Vec<Float>,
    pub n_total: usize,
    pub n_selected: usize,
}

/// Which samples feed a class mean when selection is on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selection {
    /// Keep samples whose argmax prediction equals the label.
    #[default]
    Argmax,
    /// Keep correctly predicted samples whose softmax confidence in the
    /// label is at least `threshold`.
    Confidence { threshold: Float },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    #[default]
    PerDimension,
    /// One isotropic radius per class, √(mean per-dimension variance).
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrototypeOptions {
    pub selective: bool,
    pub selection: Selection,
    pub radius: RadiusMode,
}

/// Per-sample evidence used for prototype construction.
pub struct SampleSet<'a> {
    /// `[N, D]` features.
    pub features: &'a Tensor,
    pub labels: &'a [usize],
    /// Row-wise class probabilities (or logits; only argmax and the label
    /// column are read) over all seen classes, `[N, C]`.
    pub scores: &'a Tensor,
    /// Whether `scores` are probabilities, required for confidence selection.
    pub scores_are_probabilities: bool,
}

/// Builds one prototype per class in `classes` from the given samples.
pub fn build_prototypes(samples: &SampleSet<'_>, classes: &[usize], opts: &PrototypeOptions) -> Result<Vec<ClassPrototype>> {
    let fs = samples.features.shape();
    if fs.len() != 2 || fs[0] != samples.labels.len() {
        return Err(Error::shape(
            "build_prototypes",
            format!("features {fs:?} for {} labels", samples.labels.len()),
        ));
    }
    let ss = samples.scores.shape();
    if ss.len() != 2 || ss[0] != fs[0] {
        return Err(Error::shape("build_prototypes", format!("scores {ss:?} for features {fs:?}")));
    }
    let d = fs[1];
    let c = ss[1];
    if matches!(opts.selection, Selection::Confidence { .. }) && opts.selective && !samples.scores_are_probabilities {
        return Err(Error::InvalidArgument(
            "confidence selection needs probability scores".into(),
        ));
    }
    let feats = samples.features.data();
    let scores = samples.scores.data();

    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let rows: Vec<usize> = (0..fs[0]).filter(|&i| samples.labels[i] == class).collect();
        if rows.is_empty() {
            return Err(Error::Data(format!("class {class} has no samples to build a prototype from")));
        }
        let row = |i: usize| &feats[i * d..(i + 1) * d];
        let all_mean = mean_of(rows.iter().map(|&i| row(i)), d);
        let mut radius = vec![0.0; d];
        for &i in &rows {
            for (r, (&x, &m)) in radius.iter_mut().zip(row(i).iter().zip(&all_mean)) {
                *r += (x - m) * (x - m);
            }
        }
        radius.iter_mut().for_each(|r| *r = (*r / rows.len() as Float).sqrt());
        if opts.radius == RadiusMode::Scalar {
            let iso = (radius.iter().map(|r| r * r).sum::<Float>() / d.max(1) as Float).sqrt();
            radius.iter_mut().for_each(|r| *r = iso);
        }

        let (mean, n_selected) = if opts.selective {
            let keep: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|&i| {
                    let srow = &scores[i * c..(i + 1) * c];
                    let pred = argmax(srow);
                    let correct = pred == class;
                    match opts.selection {
                        Selection::Argmax => correct,
                        Selection::Confidence { threshold } => correct && srow[class] >= threshold,
                    }
                })
                .collect();
            if keep.is_empty() {
                log::warn!("class {class}: no training sample passed selection; using all {} samples", rows.len());
                (all_mean, rows.len())
            } else {
                (mean_of(keep.iter().map(|&i| row(i)), d), keep.len())
            }
        } else {
            (all_mean, rows.len())
        };
        out.push(ClassPrototype {
            class_id: class,
            mean,
            radius,
            n_total: rows.len(),
            n_selected,
        });
    }
    Ok(out)
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [Float]>, d: usize) -> Vec<Float> {
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        sum.iter_mut().zip(r).for_each(|(s, x)| *s += x);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as Float);
    sum
}

fn argmax(row: &[Float]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, Float::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
        .0
}

/// Draws `n` rows `mean + radius ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_reparam(proto: &ClassPrototype, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_reparam needs n >= 1".into()));
    }
    let d = proto.mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for (m, r) in proto.mean.iter().zip(&proto.radius) {
            let eps: Float = rng.sample(StandardNormal);
            data.push(m + r * eps);
        }
    }
    Ok((Tensor::new(vec![n, d], data)?, vec![proto.class_id; n]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPrototype {
    pub prototype: ClassPrototype,
    /// Task index at which the prototype was built.
    pub built_at_task: usize,
    /// Number of space transformations applied since it was built.
    pub transforms_applied: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSpace {
    entries: BTreeMap<usize, StoredPrototype>,
}

impl FeatureSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&StoredPrototype> {
        self.entries.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredPrototype> {
        self.entries.values()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.entries.values().next().map(|s| s.prototype.mean.len())
    }

    /// Adds the prototypes of a just-finished task. A class may only be
    /// learned once.
    pub fn insert_task(&mut self, task: usize, prototypes: Vec<ClassPrototype>) -> Result<()> {
        for p in &prototypes {
            if self.entries.contains_key(&p.class_id) {
                return Err(Error::InvalidArgument(format!(
                    "class {} already has a stored prototype",
                    p.class_id
                )));
            }
            if let Some(d) = self.feature_dim() {
                if p.mean.len() != d {
                    return Err(Error::shape("feature_space", format!("prototype dim {} vs {d}", p.mean.len())));
                }
            }
        }
        for p in prototypes {
            self.entries.insert(
                p.class_id,
                StoredPrototype {
                    prototype: p,
                    built_at_task: task,
                    transforms_applied: 0,
                },
            );
        }
        Ok(())
    }

    /// Replaces every stored mean with `map(mean)`; radii are kept.
    pub fn transform<F>(&mut self, map: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let Some(d) = self.feature_dim() else {
            return Ok(());
        };
        let k = self.entries.len();
        let means: Vec<Float> = self.entries.values().flat_map(|s| s.prototype.mean.iter().copied()).collect();
        let mapped = map(&Tensor::new(vec![k, d], means)?)?;
        if mapped.shape() != [k, d] {
            return Err(Error::shape(
                "transform_space",
                format!("mapping returned {:?} for [{k}, {d}] means", mapped.shape()),
            ));
        }
        for (s, row) in self.entries.values_mut().zip(mapped.data().chunks(d)) {
            s.prototype.mean.copy_from_slice(row);
            s.transforms_applied += 1;
        }
        Ok(())
    }

    /// `per_class` reparameterised draws from every stored class, in class
    /// order.
    pub fn sample_all(&self, per_class: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        let d = self
            .feature_dim()
            .ok_or_else(|| Error::InvalidArgument("cannot sample from an empty feature space".into()))?;
        let mut data = Vec::with_capacity(self.len() * per_class * d);
        let mut labels = Vec::with_capacity(self.len() * per_class);
        for s in self.entries.values() {
            let (t, l) = sample_reparam(&s.prototype, per_class, rng)?;
            data.extend_from_slice(t.data());
            labels.extend(l);
        }
        Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
    }

    pub fn to_csv(&self) -> String {
        let d = self.feature_dim().unwrap_or(0);
        let mut s = String::from("class_id");
        (0..d).for_each(|i| write!(s, ",mean_{i}").unwrap());
        (0..d).for_each(|i| write!(s, ",radius_{i}").unwrap());
        s.push_str(",n_total,n_selected,built_at_task,transforms_applied\n");
        for e in self.entries.values() {
            let p = &e.prototype;
            write!(s, "{}", p.class_id).unwrap();
            p.mean.iter().chain(&p.radius).for_each(|v| write!(s, ",{v:e}").unwrap());
            writeln!(s, ",{},{},{},{}", p.n_total, p.n_selected, e.built_at_task, e.transforms_applied).unwrap();
        }
        s
    }

    /// Flattens into named tensors for the checkpoint container.
    pub fn named_state(&self) -> Vec<(String, Vec<usize>, Vec<Float>)> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            let p = &e.prototype;
            let d = p.mean.len();
            let base = format!("space.{}", p.class_id);
            out.push((format!("{base}.mean"), vec![d], p.mean.clone()));
            out.push((format!("{base}.radius"), vec![d], p.radius.clone()));
            out.push((
                format!("{base}.counts"),
                vec![4],
                vec![
                    p.n_total as Float,
                    p.n_selected as Float,
                    e.built_at_task as Float,
                    e.transforms_applied as Float,
                ],
            ));
        }
        out
    }

    pub fn from_named_state(items: &[(String, Vec<usize>, Vec<Float>)]) -> Result<Self> {
        let mut space = Self::new();
        let find = |name: &str| items.iter().find(|i| i.0 == name).map(|i| i.2.clone());
        for (name, _, _) in items {
            let Some(rest) = name.strip_prefix("space.") else { continue };
            let Some(id) = rest.strip_suffix(".mean") else { continue };
            let class_id: usize = id
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad prototype entry {name}")))?;
            let missing = |what: &str| Error::Checkpoint(format!("prototype {class_id} lacks {what}"));
            let mean = find(name).expect("present");
            let radius = find(&format!("space.{id}.radius")).ok_or_else(|| missing("radius"))?;
            let counts = find(&format!("space.{id}.counts")).ok_or_else(|| missing("counts"))?;
            if counts.len() != 4 || radius.len() != mean.len() {
                return Err(Error::Checkpoint(format!("prototype {class_id} is malformed")));
            }
            space.entries.insert(
                class_id,
                StoredPrototype {
                    prototype: ClassPrototype {
                        class_id,
                        mean,
                        radius,
                        n_total: counts[0] as usize,
                        n_selected: counts[1] as usize,
                    },
                    built_at_task: counts[2] as usize,
                    transforms_applied: counts[3] as usize,
                },
            );
        }
        Ok(space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[[Float; 3]], preds: &[usize]) -> (Tensor, Tensor) {
        let feats = Tensor::new(vec![rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap();
        let c = 2;
        let mut s = vec![0.0; rows.len() * c];
        for (i, &p) in preds.iter().enumerate() {
            s[i * c + p] = 1.0;
        }
        (feats, Tensor::new(vec![rows.len(), c], s).unwrap())
    }

    fn build(rows: &[[Float; 3]], labels: &[usize], preds: &[usize], selective: bool) -> Vec<ClassPrototype> {
        let (f, s) = set(rows, preds);
        let samples = SampleSet {
            features: &f,
            labels,
            scores: &s,
            scores_are_probabilities: true,
        };
        let opts = PrototypeOptions {
            selective,
            ..Default::default()
        };
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort();
        classes.dedup();
        build_prototypes(&samples, &classes, &opts).unwrap()
    }

    #[test]
    fn two_correct_samples() {
        let p = build(&[[1., 0., 0.], [3., 0., 0.]], &[0, 0], &[0, 0], true);
        assert_eq!(p[0].mean, vec![2., 0., 0.]);
        assert_eq!(p[0].radius, vec![1., 0., 0.]);
        assert_eq!((p[0].n_total, p[0].n_selected), (2, 2));
    }

    #[test]
    fn misclassified_sample_moves_mean_not_radius() {
        let p = build(&[[1., 0., 0.], [3., 0., 0.]], &[0, 0], &[0, 1], true);
        assert_eq!(p[0].mean, vec![1., 0., 0.]);
        assert_eq!(p[0].radius, vec![1., 0., 0.]);
        assert_eq!(p[0].n_selected, 1);
    }

    #[test]
    fn single_sample_has_zero_radius() {
        let p = build(&[[0.5, -2., 7.]], &[1], &[0], false);
        assert_eq!(p[0].mean, vec![0.5, -2., 7.]);
        assert_eq!(p[0].radius, vec![0.; 3]);
    }

    #[test]
    fn no_correct_sample_falls_back_to_all() {
        let p = build(&[[1., 0., 0.], [3., 0., 0.]], &[0, 0], &[1, 1], true);
        assert_eq!(p[0].mean, vec![2., 0., 0.]);
        assert_eq!(p[0].n_selected, 2);
    }

    #[test]
    fn missing_class_is_an_error() {
        let (f, s) = set(&[[1., 0., 0.]], &[0]);
        let samples = SampleSet {
            features: &f,
            labels: &[0],
            scores: &s,
            scores_are_probabilities: true,
        };
        assert!(build_prototypes(&samples, &[0, 1], &PrototypeOptions::default()).is_err());
    }

    #[test]
    fn confidence_selection_is_stricter() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 4.0]).unwrap();
        let s = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.55, 0.45]).unwrap();
        let samples = SampleSet {
            features: &f,
            labels: &[0, 0],
            scores: &s,
            scores_are_probabilities: true,
        };
        let opts = PrototypeOptions {
            selective: true,
            selection: Selection::Confidence { threshold: 0.8 },
            ..Default::default()
        };
        let p = build_prototypes(&samples, &[0], &opts).unwrap();
        assert_eq!(p[0].mean, vec![0.0]);
        assert_eq!(p[0].radius, vec![2.0]);
    }

    #[test]
    fn scalar_radius_mode() {
        let (f, s) = set(&[[1., 0., 2.], [3., 0., 0.]], &[0, 0]);
        let samples = SampleSet {
            features: &f,
            labels: &[0, 0],
            scores: &s,
            scores_are_probabilities: true,
        };
        let opts = PrototypeOptions {
            radius: RadiusMode::Scalar,
            ..Default::default()
        };
        let p = build_prototypes(&samples, &[0], &opts).unwrap();
        let iso = (2.0f64 / 3.0).sqrt() as Float;
        assert!(p[0].radius.iter().all(|&r| (r - iso).abs() < 1e-12));
    }

    fn proto(mean: Vec<Float>, radius: Vec<Float>) -> ClassPrototype {
        ClassPrototype {
            class_id: 4,
            n_total: 1,
            n_selected: 1,
            mean,
            radius,
        }
    }

    #[test]
    fn zero_radius_samples_equal_mean() {
        let p = proto(vec![1.0, -2.0], vec![0.0, 0.0]);
        let (t, l) = sample_reparam(&p, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(l, vec![4; 5]);
        assert!(t.data().chunks(2).all(|r| r == [1.0, -2.0]));
    }

    #[test]
    fn sampling_is_seeded() {
        let p = proto(vec![0.0; 4], vec![1.0; 4]);
        let a = sample_reparam(&p, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_reparam(&p, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_reparam(&p, 0, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn sample_mean_concentrates() {
        let p = proto(vec![0.5, -1.0, 3.0], vec![0.2, 1.0, 2.5]);
        let n = 100_000;
        let (t, _) = sample_reparam(&p, n, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for dim in 0..3 {
            let m: Float = t.data().iter().skip(dim).step_by(3).sum::<Float>() / n as Float;
            let bound = 4.0 * p.radius[dim] / (n as Float).sqrt();
            assert!((m - p.mean[dim]).abs() < bound, "dim {dim}: {m}");
        }
    }

    fn space() -> FeatureSpace {
        let mut s = FeatureSpace::new();
        s.insert_task(0, vec![proto(vec![1.0, 2.0], vec![0.5, 0.5])]).unwrap();
        let mut other = proto(vec![-1.0, 0.0], vec![0.1, 0.2]);
        other.class_id = 7;
        s.insert_task(1, vec![other]).unwrap();
        s
    }

    #[test]
    fn transform_identity_and_stubs() {
        let mut s = space();
        let before = s.clone();
        s.transform(|m| Ok(m.clone())).unwrap();
        for (a, b) in s.iter().zip(before.iter()) {
            assert_eq!(a.prototype, b.prototype);
            assert_eq!(a.transforms_applied, 1);
        }

        let double = |m: &Tensor| Tensor::new(m.shape().to_vec(), m.data().iter().map(|v| v * 2.0).collect());
        let plus_one = |m: &Tensor| Tensor::new(m.shape().to_vec(), m.data().iter().map(|v| v + 1.0).collect());
        let mut s = space();
        s.transform(double).unwrap();
        s.transform(plus_one).unwrap();
        assert_eq!(s.get(4).unwrap().prototype.mean, vec![3.0, 5.0]);
        assert_eq!(s.get(7).unwrap().prototype.mean, vec![-1.0, 1.0]);
        assert_eq!(s.get(7).unwrap().prototype.radius, vec![0.1, 0.2]);
        assert_eq!(s.get(7).unwrap().transforms_applied, 2);
    }

    #[test]
    fn duplicate_class_rejected() {
        let mut s = space();
        assert!(s.insert_task(2, vec![proto(vec![0.0, 0.0], vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn named_state_round_trip_and_csv() {
        let s = space();
        let back = FeatureSpace::from_named_state(&s.named_state()).unwrap();
        assert_eq!(back, s);
        let csv = s.to_csv();
        assert!(csv.starts_with("class_id,mean_0,mean_1,radius_0,radius_1,n_total"));
        assert_eq!(csv.lines().count(), 3);
    }
}
