//! Static PNG rendering of training curves, per-horizon metric bars, and
//! adjacency heatmaps.
//!
//! Text rendering needs a TrueType font at runtime. `SDLPGC_FONT` wins,
//! then the usual system locations; if none is found the charts are still
//! drawn, just without captions or tick labels.

use crate::error::{Error, Result};
use crate::train::{EpochRecord, MetricsReport};
use ndarray::Array2;
use plotters::prelude::*;
use std::path::Path;
use std::sync::OnceLock;

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];

fn fonts_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let mut candidates: Vec<String> = Vec::new();
        if let Ok(p) = std::env::var("SDLPGC_FONT") {
            candidates.push(p);
        }
        candidates.extend(FONT_CANDIDATES.iter().map(|s| s.to_string()));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked)
                    .is_ok()
                {
                    return true;
                }
            }
        }
        false
    })
}

fn perr(e: impl std::fmt::Display) -> Error {
    Error::Plot(format!("plot rendering failed: {e}"))
}

/// Training and validation curves from the epoch log.
pub fn loss_curve(log: &[EpochRecord], path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Config("training log is empty".into()));
    }
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let max_epoch = log.last().unwrap().epoch as f64;
    let y_max = log
        .iter()
        .flat_map(|r| [r.train_loss, r.val_mae])
        .fold(f64::MIN, f64::max)
        * 1.05;
    let mut chart = ChartBuilder::on(&root);
    chart.margin(12).x_label_area_size(36).y_label_area_size(48);
    if with_text {
        chart.caption("training loss and validation MAE", ("sans-serif", 22));
    }
    let mut chart = chart
        .build_cartesian_2d(1f64..max_epoch.max(2.0), 0f64..y_max.max(1e-6))
        .map_err(perr)?;
    let mut mesh = chart.configure_mesh();
    if with_text {
        mesh.x_desc("epoch").y_desc("loss / MAE");
    } else {
        mesh.disable_axes();
    }
    mesh.draw().map_err(perr)?;
    chart
        .draw_series(LineSeries::new(
            log.iter().map(|r| (r.epoch as f64, r.train_loss)),
            &BLUE,
        ))
        .map_err(perr)?
        .label("train loss (normalized)")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 18, y)], BLUE));
    chart
        .draw_series(LineSeries::new(
            log.iter().map(|r| (r.epoch as f64, r.val_mae)),
            &RED,
        ))
        .map_err(perr)?
        .label("val avg-MAE (denormalized)")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 18, y)], RED));
    if with_text {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(perr)?;
    }
    root.present().map_err(perr)
}

/// Grouped bars: MAE/RMSE per horizon on the left, MAPE on the right.
pub fn horizon_bars(report: &MetricsReport, path: &Path) -> Result<()> {
    if report.horizons.is_empty() {
        return Err(Error::Config("metrics report has no horizon rows".into()));
    }
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (980, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let (left, right) = root.split_horizontally(560);

    let horizons: Vec<usize> = report.horizons.iter().map(|h| h.horizon).collect();
    let n = horizons.len();
    let err_max = report
        .horizons
        .iter()
        .flat_map(|h| [h.mae, h.rmse])
        .fold(f64::MIN, f64::max)
        * 1.15;
    {
        let mut chart = ChartBuilder::on(&left);
        chart.margin(12).x_label_area_size(34).y_label_area_size(46);
        if with_text {
            chart.caption("MAE and RMSE by horizon", ("sans-serif", 20));
        }
        let mut chart = chart
            .build_cartesian_2d(0f64..n as f64, 0f64..err_max.max(1e-6))
            .map_err(perr)?;
        let labels = horizons.clone();
        let fmt = move |x: &f64| {
            let i = x.floor() as usize;
            labels.get(i).map(|h| h.to_string()).unwrap_or_default()
        };
        let mut mesh = chart.configure_mesh();
        if with_text {
            mesh.x_desc("horizon (days)")
                .y_desc("degrees C")
                .x_labels(n)
                .x_label_formatter(&fmt);
        } else {
            mesh.disable_axes();
        }
        mesh.draw().map_err(perr)?;
        for (i, h) in report.horizons.iter().enumerate() {
            let x = i as f64;
            chart
                .draw_series([Rectangle::new(
                    [(x + 0.10, 0.0), (x + 0.45, h.mae)],
                    BLUE.filled(),
                )])
              .map_err(perr)?;
            chart
                .draw_series([Rectangle::new(
                    [(x + 0.50, 0.0), (x + 0.85, h.rmse)],
                    RED.mix(0.7).filled(),
                )])
                .map_err(perr)?;
        }
    }
    {
        let mape_max = report
            .horizons
            .iter()
            .map(|h| h.mape)
            .fold(f64::MIN, f64::max)
            * 1.15;
        let mut chart = ChartBuilder::on(&right);
        chart.margin(12).x_label_area_size(34).y_label_area_size(46);
        if with_text {
            chart.caption("MAPE by horizon", ("sans-serif", 20));
        }
        let mut chart = chart
            .build_cartesian_2d(0f64..n as f64, 0f64..mape_max.max(1e-6))
            .map_err(perr)?;
        let labels = horizons.clone();
        let fmt = move |x: &f64| {
            let i = x.floor() as usize;
            labels.get(i).map(|h| h.to_string()).unwrap_or_default()
        };
        let mut mesh = chart.configure_mesh();
        if with_text {
            mesh.x_desc("horizon (days)")
                .y_desc("percent")
                .x_labels(n)
                .x_label_formatter(&fmt);
        } else {
            mesh.disable_axes();
        }
        mesh.draw().map_err(perr)?;
        for (i, h) in report.horizons.iter().enumerate() {
            let x = i as f64;
            chart
                .draw_series([Rectangle::new(
                    [(x + 0.2, 0.0), (x + 0.8, h.mape)],
                    GREEN.mix(0.8).filled(),
                )])
                .map_err(perr)?;
        }
    }
    root.present().map_err(perr)
}

/// Row-stochastic adjacency as a heatmap; darker means stronger influence.
pub fn adjacency_heatmap(matrix: &Array2<f64>, title: &str, path: &Path) -> Result<()> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(Error::Shape(format!(
            "heatmap needs a square matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let with_text = fonts_available();
    let side = 720u32;
    let root = BitMapBackend::new(path, (side, side)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut chart = ChartBuilder::on(&root);
    chart.margin(12).x_label_area_size(30).y_label_area_size(40);
    if with_text {
        chart.caption(title, ("sans-serif", 20));
    }
    let mut chart = chart
        .build_cartesian_2d(0..n, 0..n)
        .map_err(perr)?;
    let mut mesh = chart.configure_mesh();
    if with_text {
        mesh.x_desc("source node").y_desc("destination node");
    } else {
        mesh.disable_axes();
    }
    mesh.disable_x_mesh().disable_y_mesh().draw().map_err(perr)?;
    let max = matrix.iter().copied().fold(f64::MIN, f64::max).max(1e-12);
    chart
        .draw_series(matrix.indexed_iter().map(|((i, j), &v)| {
            let t = (v / max).clamp(0.0, 1.0);
            let color = RGBColor(
                (255.0 * (1.0 - t * 0.95)) as u8,
                (255.0 * (1.0 - t * 0.75)) as u8,
                255,
            );
            // row i = destination, drawn top-down
            Rectangle::new([(j, n - 1 - i), (j + 1, n - i)], color.filled())
        }))
        .map_err(perr)?;
    root.present().map_err(perr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::HorizonMetrics;

    fn record(epoch: usize, train: f64, val: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: train,
            val_mae: val,
            val_rmse: val * 1.2,
            val_mape: val * 30.0,
            lr: 1e-3,
            wall_time_s: epoch as f64,
        }
    }

    #[test]
    fn loss_curve_produces_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.png");
        let log = vec![record(1, 0.9, 1.4), record(2, 0.5, 1.1), record(3, 0.4, 1.0)];
        loss_curve(&log, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.len() > 1000);
        assert_eq!(&bytes[1..4], b"PNG");
    }

    #[test]
    fn horizon_bars_produce_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bars.png");
        let report = MetricsReport {
            dataset: "demo".into(),
            variant: "full".into(),
            seed: 0,
            horizons: vec![
                HorizonMetrics { horizon: 3, mae: 0.5, rmse: 0.7, mape: 14.0 },
                HorizonMetrics { horizon: 6, mae: 0.6, rmse: 0.8, mape: 17.0 },
                HorizonMetrics { horizon: 9, mae: 0.7, rmse: 0.9, mape: 18.0 },
                HorizonMetrics { horizon: 12, mae: 0.8, rmse: 1.0, mape: 24.0 },
            ],
            avg_mae: 0.65,
            avg_rmse: 0.85,
            avg_mape: 18.0,
            alpha_stats: None,
        };
        horizon_bars(&report, &path).unwrap();
        assert!(std::fs::read(&path).unwrap().len() > 1000);
    }

    #[test]
    fn heatmap_produces_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.png");
        let m = Array2::from_shape_fn((6, 6), |(i, j)| 1.0 / (1.0 + (i + j) as f64));
        adjacency_heatmap(&m, "static graph", &path).unwrap();
        assert!(std::fs::read(&path).unwrap().len() > 500);
    }
}
