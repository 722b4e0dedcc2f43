//! Spatio-temporal graph forecasting with entropy-guided graph pruning and
//! label-limited transfer between road networks.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod audit;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use checkpoint::Checkpoint;
pub use data::{NormStats, SignalMatrix, SplitRanges, Window, WindowedDataset};
pub use error::{Error, Result};
pub use graph::TrafficGraph;
pub use metrics::Metrics;
pub use model::{ModelConfig, ModelParams};
pub use audit::CapacityReport;
pub use pruning::{PruneConfig, PrunedContext, ThresholdMode};
pub use tensor::{ConvFilter, Tensor3};
pub use train::{TrainConfig, TrainOutcome};
