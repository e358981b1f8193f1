//! Run configuration, checkpoints, the training loop, evaluation reports and
//! cross-run comparison tables.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod lock;
pub mod metrics;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::{variant_name, RunConfig};
pub use eval::{evaluate, EvalInputs, Metric};
pub use lock::RunLock;
pub use metrics::{read_metrics, MetricsLog, MetricsRow};
pub use report::{merge_reports, write_report, MergedReport, ReportRow};
pub use train::{read_summary, train, TrainOptions, TrainSummary};
