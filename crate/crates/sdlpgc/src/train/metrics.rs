//! Forecast metrics on the de-normalized (degrees Celsius) scale.
//!
//! Horizon-h metrics use only step h-1 of the v-step output; the averages
//! pool every step. MAPE is guarded with a small epsilon because winter
//! temperatures cross zero.

use crate::data::{targets_as_forecast, NormStats, Windows};
use crate::error::{Error, Result};
use crate::lpgc::AlphaStat;
use crate::model::SdLpgc;
use crate::nn::Mode;
use crate::tensor::Tape;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HORIZONS: [usize; 4] = [3, 6, 9, 12];
pub const MAPE_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub horizons: Vec<HorizonMetrics>,
    pub avg_mae: f64,
    pub avg_rmse: f64,
    pub avg_mape: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_stats: Option<Vec<AlphaStat>>,
}

impl MetricsReport {
    /// Per-horizon rows plus an `avg` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape\n");
        for h in &self.horizons {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                h.horizon, h.mae, h.rmse, h.mape
            ));
        }
        out.push_str(&format!(
            "avg,{:.6},{:.6},{:.6}\n",
            self.avg_mae, self.avg_rmse, self.avg_mape
        ));
        out
    }
}

/// Identification carried into a report.
#[derive(Debug, Clone)]
pub struct ReportLabels {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
}

impl Default for ReportLabels {
    fn default() -> Self {
        ReportLabels {
            dataset: "unknown".into(),
            variant: "full".into(),
            seed: 0,
        }
    }
}

/// Streaming per-step error sums over `[B, v, N]` forecast/target pairs.
pub struct MetricsAccumulator {
    horizon_len: usize,
    abs_sum: Vec<f64>,
    sq_sum: Vec<f64>,
    ape_sum: Vec<f64>,
    count: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(horizon_len: usize) -> Self {
        MetricsAccumulator {
            horizon_len,
            abs_sum: vec![0.0; horizon_len],
            sq_sum: vec![0.0; horizon_len],
            ape_sum: vec![0.0; horizon_len],
            count: vec![0; horizon_len],
        }
    }

    /// Both arrays on the de-normalized scale, shaped `[B, v, N]`.
    pub fn add(&mut self, forecast: &Array3<f64>, target: &Array3<f64>) {
        assert_eq!(forecast.dim(), target.dim());
        let (b, v, n) = forecast.dim();
        assert_eq!(v, self.horizon_len);
        for bi in 0..b {
            for step in 0..v {
                for node in 0..n {
                    let err = target[[bi, step, node]] - forecast[[bi, step, node]];
                    let scale = target[[bi, step, node]].abs().max(MAPE_EPSILON);
                    self.abs_sum[step] += err.abs();
                    self.sq_sum[step] += err * err;
                    self.ape_sum[step] += err.abs() / scale;
                    self.count[step] += 1;
                }
            }
        }
    }

    pub fn finish(&self, horizons: &[usize], labels: ReportLabels) -> Result<MetricsReport> {
        if self.count.iter().all(|&c| c == 0) {
            return Err(Error::Config("no samples accumulated".into()));
        }
        let horizon_rows: Vec<HorizonMetrics> = horizons
            .iter()
            .filter(|&&h| h >= 1 && h <= self.horizon_len)
            .map(|&h| {
                let i = h - 1;
                let c = self.count[i] as f64;
                HorizonMetrics {
                    horizon: h,
                    mae: self.abs_sum[i] / c,
                    rmse: (self.sq_sum[i] / c).sqrt(),
                    mape: self.ape_sum[i] / c * 100.0,
                }
            })
            .collect();
        let total: f64 = self.count.iter().sum::<usize>() as f64;
        Ok(MetricsReport {
            dataset: labels.dataset,
            variant: labels.variant,
            seed: labels.seed,
            horizons: horizon_rows,
            avg_mae: self.abs_sum.iter().sum::<f64>() / total,
            avg_rmse: (self.sq_sum.iter().sum::<f64>() / total).sqrt(),
            avg_mape: self.ape_sum.iter().sum::<f64>() / total * 100.0,
            alpha_stats: None,
        })
    }
}

/// Run the model over every window of a partition and score de-normalized
/// forecasts against de-normalized targets.
pub fn evaluate(
    model: &SdLpgc,
    windows: &Windows,
    norm: NormStats,
    horizons: &[usize],
    batch_size: usize,
    labels: ReportLabels,
    collect_alpha: bool,
) -> Result<MetricsReport> {
    let v = windows.horizon();
    let mut acc = MetricsAccumulator::new(v);
    let order: Vec<usize> = (0..windows.len()).collect();
    let mut alpha_totals: Vec<AlphaStat> = Vec::new();
    let mut alpha_batches = 0usize;
    for batch in windows.batches(&order, batch_size) {
        let tape = Tape::new();
        let x = tape.leaf(batch.inputs.clone().into_dyn());
        let y = if collect_alpha {
            let mut sink = Vec::new();
            let out =
                model.forward_with_diagnostics(&tape, x, &mut Mode::Eval, &mut sink)?;
            if alpha_totals.is_empty() {
                alpha_totals = sink;
            } else {
                for (tot, s) in alpha_totals.iter_mut().zip(sink.iter()) {
                    tot.mean += s.mean;
                }
            }
            alpha_batches += 1;
            out
        } else {
            model.forward(&tape, x, &mut Mode::Eval)?
        };
        let yv = tape.value(y);
        let (b, _, n) = (batch.inputs.dim().0, v, windows.num_nodes());
        let mut forecast = Array3::zeros((b, v, n));
        for bi in 0..b {
            for step in 0..v {
                for node in 0..n {
                    forecast[[bi, step, node]] = norm.invert(yv[[bi, step, node]]);
                }
            }
        }
        let target = targets_as_forecast(&batch).mapv(|z| norm.invert(z));
        acc.add(&forecast, &target);
    }
    let mut report = acc.finish(horizons, labels)?;
    if collect_alpha && alpha_batches > 0 {
        for tot in alpha_totals.iter_mut() {
            tot.mean /= alpha_batches as f64;
        }
        report.alpha_stats = Some(alpha_totals);
    }
    Ok(report)
}

/// Forecast "tomorrow equals today" for every horizon step; the sanity
/// floor every trained model must beat. Operates on de-normalized data.
pub fn persistence_baseline(
    windows: &Windows,
    horizons: &[usize],
    labels: ReportLabels,
) -> Result<MetricsReport> {
    let (u, v, n) = (windows.input_len(), windows.horizon(), windows.num_nodes());
    let data = windows.data();
    let mut acc = MetricsAccumulator::new(v);
    let mut forecast = Array3::zeros((1, v, n));
    let mut target = Array3::zeros((1, v, n));
    for s in 0..windows.len() {
        for node in 0..n {
            let last = data[[s + u - 1, node]];
            for step in 0..v {
                forecast[[0, step, node]] = last;
                target[[0, step, node]] = data[[s + u + step, node]];
            }
        }
        acc.add(&forecast, &target);
    }
    acc.finish(horizons, labels)
}
