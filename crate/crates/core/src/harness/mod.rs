//! Synthetic paired datasets, evaluation metrics, run configuration and the
//! end-to-end pipeline.

pub mod baseline;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;

pub use baseline::{levels_for, subdivided_baseline};
pub use config::KeyValues;
pub use data::{gen_dataset, Dataset, Motion, SyntheticConfig};
pub use metrics::{hausdorff, mean_hausdorff, rmse, sted};
pub use pipeline::{run_pipeline, MetricsRow, PipelineConfig, PipelineReport};
