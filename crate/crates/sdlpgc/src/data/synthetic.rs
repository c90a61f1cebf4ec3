//! Deterministic synthetic datasets.
//!
//! `coupled_sinusoids` is a clean, fully learnable 5-node toy used by the
//! overfit sanity check. `sst_like` is a daily sea-surface-temperature
//! surrogate (seasonal cycle, latitude gradient, spatially correlated AR(1)
//! weather) with the same protocol shape as the real archives; it stands in
//! when the real data is not on disk.

use super::GeoSeriesDataset;
use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::{Path, PathBuf};

const DAYS_PER_YEAR: f64 = 365.25;

fn daily_timestamps(t: usize) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    (0..t as i64)
        .map(|d| start + chrono::Duration::days(d))
        .collect()
}

fn grid_coords(n: usize, lat0: f64, lon0: f64, step: f64) -> Array2<f64> {
    let cols = (n as f64).sqrt().ceil() as usize;
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let (row, col) = (i / cols, i % cols);
        if j == 0 {
            lat0 + row as f64 * step
        } else {
            lon0 + col as f64 * step
        }
    })
}

/// Small deterministic dataset: every node mixes two shared sinusoids with
/// node-specific weights and phase lags. No noise, so a capable model can
/// drive training error to near zero.
pub fn coupled_sinusoids(num_nodes: usize, num_timesteps: usize, seed: u64) -> GeoSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<(f64, f64, f64)> = (0..num_nodes)
        .map(|_| {
            (
                0.6 + 0.8 * rng.gen::<f64>(),
                0.2 + 0.6 * rng.gen::<f64>(),
                rng.gen::<f64>() * std::f64::consts::TAU,
            )
        })
        .collect();
    let values = Array2::from_shape_fn((num_timesteps, num_nodes), |(t, i)| {
        let (a, b, phase) = weights[i];
        let tt = t as f64;
        let slow = (std::f64::consts::TAU * tt / 24.0 + phase).sin();
        let fast = (std::f64::consts::TAU * tt / 7.0 + 0.5 * phase).sin();
        10.0 + 3.0 * a * slow + 1.5 * b * fast
    });
    GeoSeriesDataset {
        name: "coupled-sinusoids".into(),
        values,
        timestamps: daily_timestamps(num_timesteps),
        coords: grid_coords(num_nodes, 30.0, 120.0, 0.5),
    }
}

/// Daily SST surrogate: per-node climatology (latitude-dependent mean and
/// seasonal amplitude) plus spatially correlated AR(1) weather anomalies
/// driven by a handful of regional factors.
pub fn sst_like(name: &str, num_nodes: usize, num_timesteps: usize, seed: u64) -> GeoSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let coords = grid_coords(num_nodes, 37.5, 118.0, 0.15);

    let num_factors = 4;
    let rho = 0.75;
    let innovation_std = 0.35;

    // node loadings decay with distance to factor centers, so neighbors move together
    let centers: Vec<(f64, f64)> = (0..num_factors)
        .map(|_| {
            (
                37.5 + rng.gen::<f64>() * 2.0,
                118.0 + rng.gen::<f64>() * 2.0,
            )
        })
        .collect();
    let loadings: Vec<Vec<f64>> = (0..num_nodes)
        .map(|i| {
            let (lat, lon) = (coords[[i, 0]], coords[[i, 1]]);
            let mut w: Vec<f64> = centers
                .iter()
                .map(|&(clat, clon)| {
                    let d2 = (lat - clat).powi(2) + (lon - clon).powi(2);
                    (-d2 / 0.8).exp()
                })
                .collect();
            let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            w.iter_mut().for_each(|x| *x /= norm);
            w
        })
        .collect();

    let mut factors = vec![0.0f64; num_factors];
    let local_std = 0.12;
    let mut values = Array2::zeros((num_timesteps, num_nodes));
    for t in 0..num_timesteps {
        for f in factors.iter_mut() {
            *f = rho * *f + innovation_std * normal.sample(&mut rng);
        }
        let season = (std::f64::consts::TAU * (t as f64 + 31.0) / DAYS_PER_YEAR).sin();
        for i in 0..num_nodes {
            let lat = coords[[i, 0]];
            let base = 16.0 - 1.6 * (lat - 37.5);
            let amplitude = 9.0 + 0.4 * (lat - 37.5);
            let weather: f64 = loadings[i]
                .iter()
                .zip(factors.iter())
                .map(|(w, f)| w * f)
                .sum();
            let local = local_std * normal.sample(&mut rng);
            values[[t, i]] = base - amplitude * season + weather + local;
        }
    }
    GeoSeriesDataset {
        name: name.into(),
        values,
        timestamps: daily_timestamps(num_timesteps),
        coords,
    }
}

/// Surrogate with the Bohai archive's protocol shape (T=2189, N=136).
pub fn bohai_like(seed: u64) -> GeoSeriesDataset {
    sst_like("bohai-surrogate", 136, 2189, seed)
}

/// Write a dataset as the crate's on-disk format; returns the descriptor path.
pub fn write_csv_files(ds: &GeoSeriesDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let values_path = dir.join("values.csv");
    {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&values_path).map_err(|e| Error::io(&values_path, e))?,
        );
        let header: Vec<String> = std::iter::once("date".to_string())
            .chain((0..ds.num_nodes()).map(|i| format!("node_{i}")))
            .collect();
        writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(&values_path, e))?;
        for (t, date) in ds.timestamps.iter().enumerate() {
            let mut row = vec![date.format("%Y-%m-%d").to_string()];
            for n in 0..ds.num_nodes() {
                row.push(format!("{:.6}", ds.values[[t, n]]));
            }
            writeln!(f, "{}", row.join(",")).map_err(|e| Error::io(&values_path, e))?;
        }
    }
    let coords_path = dir.join("coords.csv");
    {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&coords_path).map_err(|e| Error::io(&coords_path, e))?,
        );
        writeln!(f, "node,lat,lon").map_err(|e| Error::io(&coords_path, e))?;
        for i in 0..ds.num_nodes() {
            writeln!(f, "{},{:.6},{:.6}", i, ds.coords[[i, 0]], ds.coords[[i, 1]])
                .map_err(|e| Error::io(&coords_path, e))?;
        }
    }
    let desc_path = dir.join("descriptor.json");
    let desc = serde_json::json!({
        "name": ds.name,
        "values_path": "values.csv",
        "coords_path": "coords.csv",
        "expected_T": ds.num_timesteps(),
        "expected_N": ds.num_nodes(),
    });
    std::fs::write(&desc_path, serde_json::to_string_pretty(&desc).unwrap())
        .map_err(|e| Error::io(&desc_path, e))?;
    Ok(desc_path)
}
