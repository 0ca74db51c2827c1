//! The assembled forecaster: configuration, network, loss, training,
//! evaluation, prediction and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod network;
mod optim;
mod predict;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION, MANIFEST_FILE, PARAMS_FILE};
pub use config::{LatentSelection, LayerChoice, ModelConfig, MAX_TRANSFORMS};
pub use metrics::{evaluate, forecast_windows, persistence_metrics, ErrorAccumulator, ErrorMetrics, Metrics};
pub use network::{Batch, Conformer, ForecastResult, ModelDims, TrunkOutput};
pub use optim::Adam;
pub use predict::{predict, target_columns, write_forecast_csv, PredictedWindow};
pub use train::{eval_rng, prepare_data, train, train_with, EpochRecord, PreparedData, TrainOutcome};
