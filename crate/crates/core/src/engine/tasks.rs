//! Class order, task boundaries and train/test splits.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SplitMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// One labelled clip as the engine sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Index into the dataset's class vocabulary.
    pub label: usize,
    pub fold: Option<u32>,
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Dataset labels introduced by this task.
    pub classes: Vec<usize>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    /// Dataset labels in learning order. A label's position here is its
    /// row in the classifier head.
    pub class_order: Vec<usize>,
    pub tasks: Vec<TaskSpec>,
    pub base_classes: usize,
    pub classes_per_increment: usize,
    pub order_seed: u64,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Head row of a dataset label.
    pub fn ordinal(&self, label: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == label)
    }

    /// Number of classes seen once task `t` has been learned.
    pub fn seen_after(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|task| task.classes.len()).sum()
    }
}

const ORDER_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_task_sequence(clips: &[ClipRecord], class_names: &[String], cfg: &RunConfig) -> Result<TaskSequence> {
    let tc = &cfg.tasks;
    let seed = cfg.order_seed();

    let mut seen_ids = HashSet::new();
    let mut by_class: BTreeMap<usize, Vec<&ClipRecord>> = BTreeMap::new();
    for c in clips {
        if c.label >= class_names.len() {
            return Err(Error::Data(format!(
                "clip {} has label {} outside the {}-class vocabulary",
                c.clip_id,
                c.label,
                class_names.len()
            )));
        }
        if !seen_ids.insert(c.clip_id.as_str()) {
            return Err(Error::Data(format!("duplicate clip id {}", c.clip_id)));
        }
        by_class.entry(c.label).or_default().push(c);
    }

    let n_classes = by_class.len();
    if n_classes < tc.base_classes + 1 {
        return Err(Error::Data(format!(
            "{n_classes} classes present, need at least {} (base task of {} plus one increment)",
            tc.base_classes + 1,
            tc.base_classes
        )));
    }

    let mut order: Vec<usize> = by_class.keys().copied().collect();
    order.shuffle(&mut stream_rng(seed, ORDER_STREAM));
    for name in &tc.final_classes {
        let label = class_names
            .iter()
            .position(|n| n == name)
            .filter(|l| by_class.contains_key(l))
            .ok_or_else(|| Error::Config(format!("tasks.final_classes names unknown class {name:?}")))?;
        order.retain(|&c| c != label);
        order.push(label);
    }

    let splits = split_clips(&by_class, &cfg.tasks.split, seed, class_names)?;

    let mut tasks = Vec::new();
    let mut groups = vec![&order[..tc.base_classes]];
    groups.extend(order[tc.base_classes..].chunks(tc.classes_per_increment));
    for group in groups {
        let mut task = TaskSpec {
            classes: group.to_vec(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for c in group {
            let (train, test) = &splits[c];
            task.train.extend(train.iter().cloned());
            task.test.extend(test.iter().cloned());
        }
        tasks.push(task);
    }

    Ok(TaskSequence {
        class_order: order,
        tasks,
        base_classes: tc.base_classes,
        classes_per_increment: tc.classes_per_increment,
        order_seed: seed,
    })
}

type Split = (Vec<String>, Vec<String>);

fn split_clips(
    by_class: &BTreeMap<usize, Vec<&ClipRecord>>,
    mode: &SplitMode,
    seed: u64,
    class_names: &[String],
) -> Result<BTreeMap<usize, Split>> {
    let all_tagged = by_class.values().flatten().all(|c| c.split.is_some());
    let mut rng = stream_rng(seed, SPLIT_STREAM);
    let mut out = BTreeMap::new();
    for (&label, members) in by_class {
        let mut members = members.clone();
        members.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let ids = |it: &mut dyn Iterator<Item = &&ClipRecord>| it.map(|c| c.clip_id.clone()).collect::<Vec<_>>();
        let (train, test) = match mode {
            SplitMode::Stratified { .. } if all_tagged => (
                ids(&mut members.iter().filter(|c| c.split == Some(SplitTag::Train))),
                ids(&mut members.iter().filter(|c| c.split == Some(SplitTag::Test))),
            ),
            SplitMode::Stratified { test_fraction } => {
                members.shuffle(&mut rng);
                let n_test = ((members.len() as f64 * test_fraction).round() as usize).max(1);
                let n_test = n_test.min(members.len().saturating_sub(1));
                (ids(&mut members[n_test..].iter()), ids(&mut members[..n_test].iter()))
            }
            SplitMode::Folds { test_folds } => {
                if let Some(c) = members.iter().find(|c| c.fold.is_none()) {
                    return Err(Error::Data(format!("fold split requested but clip {} has no fold", c.clip_id)));
                }
                let is_test = |c: &&&ClipRecord| test_folds.contains(&c.fold.unwrap_or_default());
                (
                    ids(&mut members.iter().filter(|c| !is_test(c))),
                    ids(&mut members.iter().filter(is_test)),
                )
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "class {} has {} train and {} test clips; both must be non-empty",
                class_names[label],
                train.len(),
                test.len()
            )));
        }
        out.insert(label, (train, test));
    }
    Ok(out)
}
