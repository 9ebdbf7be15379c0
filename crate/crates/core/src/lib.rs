pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod extraction;
pub mod masking;
pub mod model;
pub mod reporting;
pub mod schedule;
pub mod selftest;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use dataset::{Batch, Dataset, SyntheticTask, TaskConfig};
pub use engine::{Driver, ImportanceLedger, PruneConfig, RunResult, TrainConfig};
pub use error::{Error, Result};
pub use extraction::ExtractedModel;
pub use masking::{MaskSet, MaskSite, Polarity, PruneDecision, SiteRegistry};
pub use model::{Model, ModelConfig, ModelParams};
pub use reporting::{heatmap_csv, trace_csv, trend_summary, CompressionReport, TrendTable};
pub use schedule::{ScheduleKind, ScheduleState};
pub use selftest::SelftestReport;
pub use tensor::Tensor;
