//! Training, evaluation and export commands behind the `samlp` binary.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, RunConfig};
pub use report::{cmd_eval, cmd_export, cmd_grad_report, cmd_sweep_density, ExportKind, GradRow};
pub use train::{cmd_train, evaluate, train_on, DensitySampling, EvalReport, MetricsRecord, TrainSummary};
