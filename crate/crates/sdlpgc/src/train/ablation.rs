//! The five-variant ablation suite with median-over-seeds aggregation.

use super::metrics::{evaluate, ReportLabels, DEFAULT_HORIZONS};
use super::trainer::train;
use super::TrainConfig;
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SdLpgc, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub avg_mae: f64,
    pub avg_rmse: f64,
    pub avg_mape: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,avg_mae,avg_rmse,avg_mape\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4}\n",
                r.variant, r.avg_mae, r.avg_rmse, r.avg_mape
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Ablation results on {} (median over seeds)\n", self.dataset);
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>12}\n",
            "Variant", "Avg-MAE", "Avg-RMSE", "Avg-MAPE(%)"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>10.4} {:>10.4} {:>12.4}\n",
                r.variant, r.avg_mae, r.avg_rmse, r.avg_mape
            ));
        }
        out
    }

    pub fn row(&self, tag: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == tag)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Train and evaluate `{full, no_SL, no_DL, no_LPGC, SD_GCN}` for each seed;
/// report the median test metrics per variant in the paper's table layout.
pub fn run_ablation_suite(
    data: &PreparedData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut maes = Vec::new();
        let mut rmses = Vec::new();
        let mut mapes = Vec::new();
        for &seed in seeds {
            progress(&format!("training {variant} (seed {seed})"));
            let mut cfg = model_cfg.clone();
            cfg.seed = seed;
            let mut tcfg = train_cfg.clone();
            tcfg.seed = seed;
            let mut model = SdLpgc::new(cfg, variant)?;
            let outcome = train(&mut model, data, &tcfg)?;
            let report = evaluate(
                &model,
                &data.test,
                data.norm,
                &DEFAULT_HORIZONS,
                tcfg.batch_size,
                ReportLabels {
                    dataset: data.dataset.name.clone(),
                    variant: variant.tag().into(),
                    seed,
                },
                false,
            )?;
            progress(&format!(
                "{variant} seed {seed}: test avg-MAE {:.4} (best epoch {})",
                report.avg_mae, outcome.best_epoch
            ));
            maes.push(report.avg_mae);
            rmses.push(report.avg_rmse);
            mapes.push(report.avg_mape);
        }
        rows.push(AblationRow {
            variant: variant.tag().into(),
            avg_mae: median(maes),
            avg_rmse: median(rmses),
            avg_mape: median(mapes),
            seeds: seeds.len(),
        });
    }
    Ok(AblationTable {
        dataset: data.dataset.name.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_sets() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![7.0]), 7.0);
    }

    #[test]
    fn table_layout_has_five_rows_and_three_metric_columns() {
        let table = AblationTable {
            dataset: "demo".into(),
            rows: crate::model::Variant::ALL
                .iter()
                .map(|v| AblationRow {
                    variant: v.tag().into(),
                    avg_mae: 1.0,
                    avg_rmse: 1.2,
                    avg_mape: 10.0,
                    seeds: 1,
                })
                .collect(),
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 6); // header + 5 variants
        assert_eq!(lines[0].split(',').count(), 4);
        assert!(lines[1].starts_with("full,"));
        assert!(lines[5].starts_with("SD_GCN,"));
    }
}
