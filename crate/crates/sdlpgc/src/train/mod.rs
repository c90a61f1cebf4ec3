//! Optimization and the evaluation protocol: MAE loss on the normalized
//! scale, MAE/RMSE/MAPE at horizons 3/6/9/12 plus all-step averages on the
//! de-normalized scale, a persistence sanity floor, and the ablation suite.

mod ablation;
mod metrics;
mod trainer;

pub use ablation::{run_ablation_suite, AblationRow, AblationTable};
pub use metrics::{
    evaluate, persistence_baseline, HorizonMetrics, MetricsAccumulator, MetricsReport,
    ReportLabels, DEFAULT_HORIZONS, MAPE_EPSILON,
};
pub use trainer::{train, train_steps, EpochRecord, TrainOutcome};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Mean absolute error on the normalized scale; the training objective.
pub fn mae_loss(tape: &Tape, forecast: Var, target: Var) -> Var {
    let diff = tape.sub(forecast, target);
    tape.mean_all(tape.abs(diff))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    /// Epochs without validation avg-MAE improvement before stopping.
    pub early_stop_patience: usize,
    /// Shuffling and dropout stream seed.
    pub seed: u64,
    /// Informational placement hint; this build always runs on the CPU.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            grad_clip_norm: 5.0,
            early_stop_patience: 15,
            seed: 1,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}
