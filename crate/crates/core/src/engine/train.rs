//! Per-task training, end-of-task memory updates and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BatchNormPolicy, MethodPlan, RunConfig};
use super::metrics::ConfusionMatrix;
use crate::aft::{loss_fs_with, loss_kfd, loss_trans, total_loss, AftNetwork, LossBreakdown};
use crate::audio::FeatureMap;
use crate::backbone::{argmax_rows, batch_tensor, Backbone, ClassifierHead, HeadInit, ModelSnapshot};
use crate::error::{Error, Result};
use crate::feature_space::{build_prototypes, FeatureSpace, SampleSet};
use crate::tensor::{AdamState, Float, Mode, Parameters, Tape, Tensor};

/// Clips of one task with labels already mapped to head rows.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    /// Head rows introduced by the task.
    pub classes: Vec<usize>,
    pub train: Vec<FeatureMap>,
    pub test: Vec<FeatureMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,task,epoch,ce,kfd,trans,fs,total\n");
    for r in log {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.task, r.epoch, l.ce, l.kfd, l.trans, l.fs, l.total
        ));
    }
    s
}

/// Everything a run carries from one task to the next.
#[derive(Debug, Clone)]
pub struct Learner {
    pub backbone: Backbone,
    pub head: Option<ClassifierHead>,
    pub snapshot: Option<ModelSnapshot>,
    pub space: FeatureSpace,
    pub aft: Option<AftNetwork>,
    pub tasks_done: usize,
    pub steps: usize,
    init_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Forward passes outside training run in chunks of this many clips.
const EVAL_CHUNK: usize = 64;

impl Learner {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut init_rng = stream(cfg.seed, 10);
        Ok(Self {
            backbone: Backbone::new(&cfg.backbone, &mut init_rng)?,
            head: None,
            snapshot: None,
            space: FeatureSpace::new(),
            aft: None,
            tasks_done: 0,
            steps: 0,
            init_rng,
            shuffle_rng: stream(cfg.seed, 11),
            replay_rng: stream(cfg.seed, 12),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.num_classes())
    }

    /// Eval-mode features of `maps`, in order.
    pub fn features(&self, maps: &[FeatureMap]) -> Result<Tensor> {
        let d = self.backbone.feature_dim();
        let mut data = Vec::with_capacity(maps.len() * d);
        for chunk in maps.chunks(EVAL_CHUNK) {
            let refs: Vec<&FeatureMap> = chunk.iter().collect();
            data.extend(self.backbone.features(&batch_tensor(&refs)?)?.into_data());
        }
        Tensor::new(vec![maps.len(), d], data)
    }

    fn head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no task has been learned yet".into()))
    }

    /// Runs the optimisation loop for task `t`, growing the head first.
    pub fn fit_task(
        &mut self,
        t: usize,
        task: &PreparedTask,
        cfg: &RunConfig,
        plan: &MethodPlan,
        log: &mut Vec<LossRecord>,
    ) -> Result<()> {
        self.fit_task_observed(t, task, cfg, plan, log, &mut |_| {})
    }

    /// [`Learner::fit_task`], calling `after_step` after every parameter
    /// update.
    pub fn fit_task_observed(
        &mut self,
        t: usize,
        task: &PreparedTask,
        cfg: &RunConfig,
        plan: &MethodPlan,
        log: &mut Vec<LossRecord>,
        after_step: &mut dyn FnMut(&Learner),
    ) -> Result<()> {
        if task.train.is_empty() || task.classes.is_empty() {
            return Err(Error::Data(format!("task {t} has no training clips")));
        }
        let seen = self.num_classes();
        let expected: Vec<usize> = (seen..seen + task.classes.len()).collect();
        if task.classes != expected {
            return Err(Error::InvalidArgument(format!(
                "task {t} introduces head rows {:?}, expected {expected:?}",
                task.classes
            )));
        }
        self.head = Some(match self.head.take() {
            None => ClassifierHead::new(
                self.backbone.feature_dim(),
                task.classes.len(),
                HeadInit::KaimingUniform,
                &mut self.init_rng,
            )?,
            Some(h) => h.expand(task.classes.len(), HeadInit::KaimingUniform, &mut self.init_rng)?,
        });

        let distill = plan.uses_memory && t > 0;
        if distill {
            if self.snapshot.is_none() {
                return Err(Error::InvalidArgument(format!("task {t} needs a previous-model snapshot")));
            }
            let keep = cfg.aft.persist_across_tasks && self.aft.is_some();
            if !keep {
                let mut rng = stream(cfg.seed, 100 + t as u64);
                self.aft = Some(AftNetwork::identity(
                    self.backbone.feature_dim(),
                    cfg.aft.architecture,
                    &mut rng,
                )?);
            }
        }

        let mut adam = AdamState::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for batch in order.chunks(cfg.batch_size) {
                let maps: Vec<&FeatureMap> = batch.iter().map(|&i| &task.train[i]).collect();
                let labels: Vec<usize> = maps.iter().map(|m| m.label).collect();
                let x = batch_tensor(&maps)?;
                let loss = self.step(t, &x, &labels, distill, cfg, plan)?;
                log.push(LossRecord {
                    step: self.steps,
                    task: t,
                    epoch,
                    loss,
                });
                self.apply_update(&mut adam)?;
                self.steps += 1;
                after_step(self);
            }
        }
        Ok(())
    }

    fn step(
        &mut self,
        t: usize,
        x: &Tensor,
        labels: &[usize],
        distill: bool,
        cfg: &RunConfig,
        plan: &MethodPlan,
    ) -> Result<LossBreakdown> {
        let head = self.head.as_ref().expect("head exists during fitting");
        let mut tape = Tape::new();
        let xv = tape.leaf(x)?;
        let mode = match cfg.batch_norm {
            BatchNormPolicy::FreezeAfterBase if t > 0 => Mode::Eval,
            _ => Mode::Train,
        };
        let out = self.backbone.forward(&mut tape, xv, mode)?;
        let logits = head.classify(&mut tape, out.features)?;
        let ce = tape.softmax_cross_entropy(logits, labels)?;

        let w = plan.weights;
        let mut terms = vec![(ce, 1.0)];
        let (mut kfd_v, mut trans_v, mut fs_v) = (0.0, 0.0, 0.0);
        if distill {
            let snapshot = self.snapshot.as_ref().expect("checked in fit_task");
            let aft = self.aft.as_ref().expect("created in fit_task");
            let prev = snapshot.features(x)?;
            let pv = tape.constant(prev.shape().to_vec(), prev.into_data())?;
            let kfd = loss_kfd(&mut tape, out.features, pv)?;
            let trans = loss_trans(&mut tape, out.features, pv, aft)?;
            let fs = loss_fs_with(
                &mut tape,
                aft,
                &self.space,
                head,
                cfg.aft.samples_per_class,
                t,
                cfg.aft.replay_trains_network,
                &mut self.replay_rng,
            )?;
            kfd_v = tape.scalar(kfd);
            trans_v = tape.scalar(trans);
            fs_v = tape.scalar(fs);
            terms.extend([(kfd, w.alpha), (trans, w.beta), (fs, w.gamma)]);
        }
        let breakdown = total_loss(tape.scalar(ce), kfd_v, trans_v, fs_v, &w).map_err(|e| match e {
            Error::NonFinite { component, .. } => Error::NonFinite {
                component,
                step: Some(self.steps),
            },
            other => other,
        })?;
        let total = tape.weighted_sum(&terms)?;
        if !tape.scalar(total).is_finite() {
            return Err(Error::NonFinite {
                component: "total".into(),
                step: Some(self.steps),
            });
        }
        tape.backward(total)?;
        tape.accumulate_param_grads(self.backbone.parameters_mut())?;
        tape.accumulate_param_grads(self.head.as_mut().expect("head").parameters_mut())?;
        if let Some(aft) = self.aft.as_mut() {
            tape.accumulate_param_grads(aft.parameters_mut())?;
        }
        if mode == Mode::Train {
            self.backbone.commit_bn(out.bn_updates)?;
        }
        Ok(breakdown)
    }

    fn apply_update(&mut self, adam: &mut AdamState) -> Result<()> {
        let mut params = self.backbone.parameters_mut();
        params.extend(self.head.as_mut().expect("head").parameters_mut());
        if let Some(aft) = self.aft.as_mut() {
            params.extend(aft.parameters_mut());
        }
        adam.step(&mut params)?;
        params.into_iter().for_each(|p| p.zero_grad());
        Ok(())
    }

    /// End of task `t`: build prototypes of the new classes, carry old
    /// means through the transformation network, store the new prototypes
    /// and freeze a snapshot.
    pub fn finish_task(&mut self, t: usize, task: &PreparedTask, cfg: &RunConfig, plan: &MethodPlan) -> Result<()> {
        if plan.uses_memory {
            let features = self.features(&task.train)?;
            let scores = self.head()?.logits(&features)?;
            let labels: Vec<usize> = task.train.iter().map(|m| m.label).collect();
            let samples = SampleSet {
                features: &features,
                labels: &labels,
                scores: &scores,
                scores_are_probabilities: false,
            };
            let protos = build_prototypes(&samples, &task.classes, &plan.prototypes)?;
            if t > 0 {
                let aft = self
                    .aft
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("transformation network missing".into()))?;
                self.space.transform(|means| aft.map(means))?;
            }
            self.space.insert_task(t, protos)?;
            self.snapshot = Some(ModelSnapshot::capture(&self.backbone, self.head()?));
            if !cfg.aft.persist_across_tasks {
                self.aft = None;
            }
        }
        self.tasks_done = t + 1;
        Ok(())
    }

    /// Accuracy on each task's test split over all head rows, optionally
    /// accumulating a confusion matrix.
    pub fn evaluate(&self, tasks: &[&PreparedTask], mut confusion: Option<&mut ConfusionMatrix>) -> Result<Vec<f64>> {
        let head = self.head()?;
        let mut row = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            if task.test.is_empty() {
                return Err(Error::Data(format!("task {i} has an empty test split")));
            }
            let preds = argmax_rows(&head.logits(&self.features(&task.test)?)?);
            let mut correct = 0usize;
            for (m, &p) in task.test.iter().zip(&preds) {
                correct += usize::from(m.label == p);
                if let Some(c) = confusion.as_deref_mut() {
                    c.record(m.label, p);
                }
            }
            row.push(correct as f64 / task.test.len() as f64);
        }
        Ok(row)
    }

    /// Trainable tensors in a fixed order, for trajectory comparisons.
    pub fn parameter_values(&self) -> Vec<Float> {
        let mut v: Vec<Float> = self.backbone.parameters().iter().flat_map(|p| p.data().to_vec()).collect();
        if let Some(h) = &self.head {
            v.extend(h.parameters().iter().flat_map(|p| p.data().to_vec()));
        }
        v
    }
}
