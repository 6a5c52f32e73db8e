//! Whole-sequence runs for each method.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::metrics::{compute_acc, compute_bwt, AccuracyMatrix, ConfusionMatrix};
use super::tasks::{make_task_sequence, ClipRecord, TaskSequence};
use super::train::{Learner, LossRecord, PreparedTask};
use crate::audio::{FeatureMap, Standardizer};
use crate::error::{Error, Result};

/// Labelled clips with their MFCC maps.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub class_names: Vec<String>,
    pub clips: Vec<ClipRecord>,
    pub features: HashMap<String, FeatureMap>,
}

/// Task sequence with standardized, head-row labelled feature maps.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub class_names: Vec<String>,
    pub sequence: TaskSequence,
    pub tasks: Vec<PreparedTask>,
    pub standardizer: Option<Standardizer>,
}

impl PreparedRun {
    pub fn new(corpus: &Corpus, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let sequence = make_task_sequence(&corpus.clips, &corpus.class_names, cfg)?;
        let fetch = |id: &String| {
            corpus
                .features
                .get(id)
                .ok_or_else(|| Error::Data(format!("no features for clip {id}; run ingest first")))
        };
        let standardizer = if cfg.standardize {
            let base = sequence.tasks[0].train.iter().map(fetch).collect::<Result<Vec<_>>>()?;
            Some(Standardizer::fit(base)?)
        } else {
            None
        };
        let prepare = |id: &String| -> Result<FeatureMap> {
            let raw = fetch(id)?;
            if raw.n_coeffs != cfg.backbone.input_channels {
                return Err(Error::Data(format!(
                    "clip {id} has {} coefficients, the model expects {}",
                    raw.n_coeffs, cfg.backbone.input_channels
                )));
            }
            let mut m = match &standardizer {
                Some(s) => s.apply(raw),
                None => raw.clone(),
            };
            m.label = sequence.ordinal(raw.label).expect("clip label is in the class order");
            Ok(m)
        };
        let tasks = sequence
            .tasks
            .iter()
            .map(|spec| {
                Ok(PreparedTask {
                    classes: spec.classes.iter().map(|&c| sequence.ordinal(c).expect("ordered")).collect(),
                    train: spec.train.iter().map(prepare).collect::<Result<_>>()?,
                    test: spec.test.iter().map(prepare).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_names: corpus.class_names.clone(),
            sequence,
            tasks,
            standardizer,
        })
    }

    /// Class names in head-row order.
    pub fn ordered_names(&self) -> Vec<String> {
        self.sequence
            .class_order
            .iter()
            .map(|&c| self.class_names[c].clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    pub sequence: TaskSequence,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    /// Undefined for joint training.
    pub bwt: Option<f64>,
    pub loss_log: Vec<LossRecord>,
    /// Final evaluation, indexed by head row.
    pub confusion: ConfusionMatrix,
    pub learner: Learner,
    pub standardizer: Option<Standardizer>,
    /// Final-model features of every test clip, when requested.
    pub feature_dump: Option<FeatureDump>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub dim: usize,
    /// `(clip id, head row, features)`.
    pub rows: Vec<(String, usize, Vec<f64>)>,
}

impl FeatureDump {
    fn collect(learner: &Learner, prepared: &PreparedRun) -> Result<Self> {
        let dim = learner.backbone.feature_dim();
        let mut rows = Vec::new();
        for task in &prepared.tasks {
            let f = learner.features(&task.test)?;
            for (m, row) in task.test.iter().zip(f.data().chunks(dim)) {
                rows.push((m.clip_id.clone(), m.label, row.iter().map(|&v| v as f64).collect()));
            }
        }
        Ok(Self { dim, rows })
    }

    /// `"AFTFDUMP" | version u32 | rows u64 | dim u32`, then per row the
    /// id length u32, id, head row u32 and `dim` f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        use byteorder::{LittleEndian as LE, WriteBytesExt};
        let mut b = Vec::new();
        b.extend_from_slice(b"AFTFDUMP");
        b.write_u32::<LE>(1).unwrap();
        b.write_u64::<LE>(self.rows.len() as u64).unwrap();
        b.write_u32::<LE>(self.dim as u32).unwrap();
        for (id, label, v) in &self.rows {
            b.write_u32::<LE>(id.len() as u32).unwrap();
            b.extend_from_slice(id.as_bytes());
            b.write_u32::<LE>(*label as u32).unwrap();
            v.iter().for_each(|&x| b.write_f64::<LE>(x).unwrap());
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub per_task: Vec<f64>,
    pub class_order: Vec<String>,
}

impl RunReport {
    pub fn ordered_names(&self) -> Vec<String> {
        self.sequence
            .class_order
            .iter()
            .map(|&c| self.class_names[c].clone())
            .collect()
    }

    pub fn metrics(&self) -> RunMetrics {
        RunMetrics {
            method: self.config.method,
            seed: self.config.seed,
            acc: self.acc,
            bwt: self.bwt,
            per_task: self.matrix.final_row().map(<[f64]>::to_vec).unwrap_or_default(),
            class_order: self.ordered_names(),
        }
    }

    /// Confusion share between two named classes in the final evaluation.
    pub fn pair_confusion(&self, a: &str, b: &str) -> Option<f64> {
        let names = self.ordered_names();
        let ia = names.iter().position(|n| n == a)?;
        let ib = names.iter().position(|n| n == b)?;
        Some(self.confusion.pair_confusion(ia, ib))
    }
}

/// Runs one method over the whole task sequence.
pub fn run_method(cfg: &RunConfig, corpus: &Corpus) -> Result<RunReport> {
    let prepared = PreparedRun::new(corpus, cfg)?;
    run_prepared(cfg, &prepared)
}

pub fn run_prepared(cfg: &RunConfig, prepared: &PreparedRun) -> Result<RunReport> {
    Ok(run_methods(cfg, &[cfg.method], prepared)?.remove(0))
}

/// Runs several methods that share `cfg` apart from the method. Every
/// sequential method trains the base task identically, so that task is
/// fitted once and the learner is forked afterwards; results equal
/// separate runs.
pub fn run_methods(cfg: &RunConfig, methods: &[Method], prepared: &PreparedRun) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let with_method = |m: Method| {
        let mut c = cfg.clone();
        c.method = m;
        c
    };

    let sequential: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Joint).collect();
    let mut base: Option<(Learner, Vec<LossRecord>)> = None;
    if let Some(&first) = sequential.first() {
        let c = with_method(first);
        let mut learner = Learner::new(&c)?;
        let mut log = Vec::new();
        learner.fit_task(0, &prepared.tasks[0], &c, &c.plan(), &mut log)?;
        base = Some((learner, log));
    }

    methods
        .iter()
        .map(|&m| {
            let c = with_method(m);
            match m {
                Method::Joint => run_joint(&c, prepared),
                _ => {
                    let (learner, log) = base.clone().expect("fitted above");
                    continue_sequence(&c, prepared, learner, log)
                }
            }
        })
        .collect()
}

fn continue_sequence(
    cfg: &RunConfig,
    prepared: &PreparedRun,
    mut learner: Learner,
    mut log: Vec<LossRecord>,
) -> Result<RunReport> {
    let plan = cfg.plan();
    let n_tasks = prepared.tasks.len();
    let mut matrix = AccuracyMatrix::new(n_tasks);
    let mut confusion = ConfusionMatrix::new(prepared.sequence.class_order.len());
    for (t, task) in prepared.tasks.iter().enumerate() {
        if t > 0 {
            learner.fit_task(t, task, cfg, &plan, &mut log)?;
        }
        learner.finish_task(t, task, cfg, &plan)?;
        let seen: Vec<&PreparedTask> = prepared.tasks[..=t].iter().collect();
        let last = t + 1 == n_tasks;
        let row = learner.evaluate(&seen, if last { Some(&mut confusion) } else { None })?;
        matrix.set_row(t, row)?;
        log::info!(
            "{} task {t}: R[{t}] = {:?}",
            cfg.method,
            matrix.row(t).expect("just recorded")
        );
    }
    Ok(RunReport {
        config: cfg.clone(),
        class_names: prepared.class_names.clone(),
        sequence: prepared.sequence.clone(),
        acc: compute_acc(&matrix)?,
        bwt: Some(compute_bwt(&matrix)?),
        matrix,
        loss_log: log,
        confusion,
        feature_dump: if cfg.dump_features {
            Some(FeatureDump::collect(&learner, prepared)?)
        } else {
            None
        },
        learner,
        standardizer: prepared.standardizer.clone(),
    })
}

fn run_joint(cfg: &RunConfig, prepared: &PreparedRun) -> Result<RunReport> {
    let plan = cfg.plan();
    let n_classes = prepared.sequence.class_order.len();
    let pooled = PreparedTask {
        classes: (0..n_classes).collect(),
        train: prepared.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect(),
        test: Vec::new(),
    };
    let mut learner = Learner::new(cfg)?;
    let mut log = Vec::new();
    learner.fit_task(0, &pooled, cfg, &plan, &mut log)?;
    learner.finish_task(0, &pooled, cfg, &plan)?;

    let n_tasks = prepared.tasks.len();
    let mut matrix = AccuracyMatrix::new(n_tasks);
    let mut confusion = ConfusionMatrix::new(n_classes);
    let all: Vec<&PreparedTask> = prepared.tasks.iter().collect();
    matrix.set_row(n_tasks - 1, learner.evaluate(&all, Some(&mut confusion))?)?;
    Ok(RunReport {
        config: cfg.clone(),
        class_names: prepared.class_names.clone(),
        sequence: prepared.sequence.clone(),
        acc: compute_acc(&matrix)?,
        bwt: None,
        matrix,
        loss_log: log,
        confusion,
        feature_dump: if cfg.dump_features {
            Some(FeatureDump::collect(&learner, prepared)?)
        } else {
            None
        },
        learner,
        standardizer: prepared.standardizer.clone(),
    })
}
