//! Class-incremental protocol: task construction, per-task training,
//! evaluation and metrics.

pub mod config;
pub mod metrics;
pub mod run;
pub mod tasks;
pub mod train;

pub use config::{AftConfig, BatchNormPolicy, Method, MethodPlan, RunConfig, SplitMode, TaskConfig};
pub use metrics::{compute_acc, compute_bwt, AccuracyMatrix, ConfusionMatrix};
pub use run::{run_method, run_methods, run_prepared, Corpus, FeatureDump, PreparedRun, RunMetrics, RunReport};
pub use tasks::{make_task_sequence, ClipRecord, SplitTag, TaskSequence, TaskSpec};
pub use train::{loss_log_csv, Learner, LossRecord, PreparedTask};
