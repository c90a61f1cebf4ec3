//! Gradient-descent training loop with validation-driven early stopping.

use super::metrics::{evaluate, ReportLabels, DEFAULT_HORIZONS};
use super::{mae_loss, TrainConfig};
use crate::data::{targets_as_forecast, PreparedData, Windows};
use crate::error::{Error, Result};
use crate::model::SdLpgc;
use crate::nn::{collect_grads, Adam, Mode};
use crate::tensor::{Array, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One line of the newline-delimited JSON training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
    /// Optimizer state as of the best-validation epoch, for checkpointing.
    pub best_optimizer: Option<Adam>,
}

fn snapshot(model: &SdLpgc) -> Vec<Array> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(model: &mut SdLpgc, saved: &[Array]) {
    for (p, s) in model.params_mut().into_iter().zip(saved.iter()) {
        p.value = s.clone();
    }
}

/// One optimizer step on one batch; returns the batch loss.
fn train_step(
    model: &mut SdLpgc,
    optimizer: &mut Adam,
    inputs: Array,
    targets: Array,
    clip: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let x = tape.leaf(inputs);
    let y = model.forward(&tape, x, &mut Mode::Train { rng })?;
    let t = tape.leaf(targets);
    let loss = mae_loss(&tape, y, t);
    let loss_value = tape.value(loss).iter().next().copied().unwrap();
    if !loss_value.is_finite() {
        return Ok((loss_value, 0.0));
    }
    let mut store = tape.backward(loss);
    let grads = collect_grads(&tape, &mut store, &model.params());
    let norm = optimizer.step(model.params_mut(), grads, Some(clip));
    Ok((loss_value, norm))
}

/// Train with per-epoch validation; keeps the parameters of the best
/// validation avg-MAE epoch and stops once `early_stop_patience` epochs pass
/// without improvement.
pub fn train(model: &mut SdLpgc, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate, &model.params());

    let mut best_params = snapshot(model);
    let mut best_optimizer: Option<Adam> = None;
    let mut best_val_mae = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_without_improvement = 0usize;
    let mut log = Vec::new();
    let mut steps_run = 0usize;
    let mut stopped_early = false;
    let mut last_grad_norm = 0.0;

    let labels = ReportLabels {
        dataset: data.dataset.name.clone(),
        variant: model.variant.tag().into(),
        seed: cfg.seed,
    };

    let mut epochs_run = 0usize;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(chunk);
            let targets = targets_as_forecast(&batch).into_dyn();
            let (loss, grad_norm) = train_step(
                model,
                &mut optimizer,
                batch.inputs.into_dyn(),
                targets,
                cfg.grad_clip_norm,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "NaN/inf loss at epoch {epoch}, step {steps_run}; \
                     lr={}, last gradient norm={last_grad_norm:.4}",
                    cfg.learning_rate
                )));
            }
            last_grad_norm = grad_norm;
            epoch_loss += loss;
            batches += 1;
            steps_run += 1;
        }
        let val = evaluate(
            model,
            &data.val,
            data.norm,
            &DEFAULT_HORIZONS,
            cfg.batch_size,
            labels.clone(),
            false,
        )?;
        log.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_mae: val.avg_mae,
            val_rmse: val.avg_rmse,
            val_mape: val.avg_mape,
            lr: cfg.learning_rate,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if val.avg_mae < best_val_mae {
            best_val_mae = val.avg_mae;
            best_epoch = epoch;
            best_params = snapshot(model);
            best_optimizer = Some(optimizer.clone());
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    restore(model, &best_params);
    Ok(TrainOutcome {
        best_epoch,
        best_val_mae,
        epochs_run,
        steps_run,
        stopped_early,
        log,
        best_optimizer,
    })
}

/// Bare optimizer steps over one partition (no validation); returns the
/// per-step losses. Used by the overfit sanity check.
pub fn train_steps(
    model: &mut SdLpgc,
    windows: &Windows,
    cfg: &TrainConfig,
    max_steps: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(cfg.learning_rate, &model.params());
    let mut losses = Vec::with_capacity(max_steps);
    'outer: loop {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if losses.len() >= max_steps {
                break 'outer;
            }
            let batch = windows.batch(chunk);
            let targets = targets_as_forecast(&batch).into_dyn();
            let (loss, _) = train_step(
                model,
                &mut optimizer,
                batch.inputs.into_dyn(),
                targets,
                cfg.grad_clip_norm,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "NaN/inf loss at step {}",
                    losses.len()
                )));
            }
            losses.push(loss);
        }
    }
    Ok(losses)
}
