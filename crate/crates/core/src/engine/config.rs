//! Run configuration: a TOML file whose keys can be overridden from the
//! command line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aft::{AftArchitecture, LossWeights};
use crate::audio::FrontendConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::feature_space::{PrototypeOptions, RadiusMode, Selection};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Sequential training with cross-entropy only.
    Finetune,
    /// All classes at once; upper bound.
    Joint,
    /// Feature distillation only.
    Base,
    /// Distillation, transformation and prototype replay; plain means.
    BaseAft,
    /// Everything, with selectively compressed means.
    Aft,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::Joint, Method::Base, Method::BaseAft, Method::Aft];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Base => "base",
            Method::BaseAft => "base_aft",
            Method::Aft => "aft",
        }
    }

    /// Whether the method keeps a frozen previous model and a feature space.
    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Base | Method::BaseAft | Method::Aft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '+' || c == '-' || c == ' ' { '_' } else { c })
            .collect();
        match key.as_str() {
            "finetune" | "fine_tune" => Ok(Method::Finetune),
            "joint" => Ok(Method::Joint),
            "base" => Ok(Method::Base),
            "base_aft" => Ok(Method::BaseAft),
            "aft" | "base_aft_pos" => Ok(Method::Aft),
            _ => Err(Error::Config(format!(
                "unknown method {s:?} (expected finetune, joint, base, base_aft, aft)"
            ))),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.as_str().to_string()
    }
}

/// How clips of each class are divided into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitMode {
    /// Per-class random split by seed, unless the manifest carries split tags.
    Stratified { test_fraction: f64 },
    /// Clips whose fold is listed are test clips.
    Folds { test_folds: Vec<u32> },
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Stratified { test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub base_classes: usize,
    pub classes_per_increment: usize,
    /// Seed for class order and splits; the run seed when absent.
    pub order_seed: Option<u64>,
    /// Class names forced to the end of the order, in the given order.
    pub final_classes: Vec<String>,
    pub split: SplitMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            base_classes: 5,
            classes_per_increment: 1,
            order_seed: None,
            final_classes: Vec::new(),
            split: SplitMode::default(),
        }
    }
}

/// Batch-norm behaviour while learning incremental tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchNormPolicy {
    /// Normalise with batch statistics and update running averages.
    #[default]
    Update,
    /// After the base task, normalise with the stored running statistics
    /// and leave them untouched; scale and shift still train.
    FreezeAfterBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AftConfig {
    pub architecture: AftArchitecture,
    /// Keep training the same network across tasks instead of starting
    /// from identity each task.
    pub persist_across_tasks: bool,
    pub samples_per_class: usize,
    /// Let the prototype-replay loss update the transformation network as
    /// well as the head.
    pub replay_trains_network: bool,
    pub selection: Selection,
    pub radius: RadiusMode,
}

impl Default for AftConfig {
    fn default() -> Self {
        Self {
            architecture: AftArchitecture::default(),
            persist_across_tasks: false,
            samples_per_class: 8,
            replay_trains_network: true,
            selection: Selection::Argmax,
            radius: RadiusMode::PerDimension,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Float,
    pub alpha: Float,
    pub beta: Float,
    pub gamma: Float,
    /// Selective compression of prototype means; follows the method when
    /// unset.
    pub selective: Option<bool>,
    /// Z-score MFCC coefficients with statistics of the base task's
    /// training split.
    pub standardize: bool,
    /// Write final test-clip features to `features.bin`.
    pub dump_features: bool,
    pub batch_norm: BatchNormPolicy,
    pub tasks: TaskConfig,
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    pub aft: AftConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            method: Method::Aft,
            seed: 0,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            selective: None,
            standardize: true,
            dump_features: false,
            batch_norm: BatchNormPolicy::Update,
            tasks: TaskConfig::default(),
            frontend: FrontendConfig::default(),
            backbone: BackboneConfig::default(),
            aft: AftConfig::default(),
        }
    }
}

/// Switches derived from the method and the loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodPlan {
    pub method: Method,
    pub weights: LossWeights,
    pub uses_memory: bool,
    pub prototypes: PrototypeOptions,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.tasks.base_classes == 0 || self.tasks.classes_per_increment == 0 {
            return Err(Error::Config("tasks.base_classes and tasks.classes_per_increment must be positive".into()));
        }
        if let SplitMode::Stratified { test_fraction } = self.tasks.split {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::Config("tasks.split.test_fraction must lie in (0, 1)".into()));
            }
        }
        if self.aft.samples_per_class == 0 {
            return Err(Error::Config("aft.samples_per_class must be positive".into()));
        }
        if self.frontend.n_mfcc != self.backbone.input_channels {
            return Err(Error::Config(format!(
                "frontend.n_mfcc ({}) must equal backbone.input_channels ({})",
                self.frontend.n_mfcc, self.backbone.input_channels
            )));
        }
        self.frontend.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.backbone.validate()
    }

    pub fn order_seed(&self) -> u64 {
        self.tasks.order_seed.unwrap_or(self.seed)
    }

    pub fn plan(&self) -> MethodPlan {
        let w = self.weights();
        let (weights, default_selective) = match self.method {
            Method::Finetune | Method::Joint => (LossWeights::ZERO, false),
            Method::Base => (
                LossWeights {
                    alpha: w.alpha,
                    beta: 0.0,
                    gamma: 0.0,
                },
                false,
            ),
            Method::BaseAft => (w, false),
            Method::Aft => (w, true),
        };
        let uses_memory = self.method.uses_memory();
        MethodPlan {
            method: self.method,
            weights,
            uses_memory,
            prototypes: PrototypeOptions {
                selective: uses_memory && self.selective.unwrap_or(default_selective),
                selection: self.aft.selection,
                radius: self.aft.radius,
            },
        }
    }
}
