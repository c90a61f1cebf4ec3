//! Loading, validation, normalization, windowing, and chronological
//! splitting of geo-coded multivariate time series.
//!
//! The on-disk format is a pair of CSVs plus a JSON descriptor; see
//! [`load::DatasetDescriptor`]. All transforms here are pure and read-only,
//! so they are safe to call from multiple workers; batch iteration order is
//! a function of the caller-provided index order only.

mod load;
pub mod synthetic;

pub use load::{load_dataset, load_descriptor, DatasetDescriptor, NanPolicy};

use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::{s, Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

/// A raw T x N temperature matrix with per-node coordinates and timestamps.
#[derive(Debug, Clone)]
pub struct GeoSeriesDataset {
    pub name: String,
    /// `[T, N]`, degrees Celsius.
    pub values: Array2<f64>,
    /// Strictly increasing, daily cadence.
    pub timestamps: Vec<NaiveDate>,
    /// `[N, 2]`: latitude, longitude in degrees. Rows unique.
    pub coords: Array2<f64>,
}

impl GeoSeriesDataset {
    pub fn num_timesteps(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.ncols()
    }

    /// Keep only the first `n` nodes (used for desk-scale subsampled runs).
    pub fn take_nodes(&self, n: usize) -> GeoSeriesDataset {
        let n = n.min(self.num_nodes());
        GeoSeriesDataset {
            name: self.name.clone(),
            values: self.values.slice(s![.., ..n]).to_owned(),
            timestamps: self.timestamps.clone(),
            coords: self.coords.slice(s![..n, ..]).to_owned(),
        }
    }

    /// Invariant check used by the loader and by tests: finite values,
    /// strictly increasing daily timestamps, unique coordinate rows.
    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.num_timesteps() {
            return Err(Error::Shape(format!(
                "{} timestamps for {} rows",
                self.timestamps.len(),
                self.num_timesteps()
            )));
        }
        if self.coords.nrows() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "{} coordinate rows for {} nodes",
                self.coords.nrows(),
                self.num_nodes()
            )));
        }
        for ((r, c), v) in self.values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite value at row {r}, column {c}"
                )));
            }
        }
        for w in self.timestamps.windows(2) {
            let gap = (w[1] - w[0]).num_days();
            if gap != 1 {
                return Err(Error::Config(format!(
                    "timestamps must advance by exactly 1 day; {} -> {} advances by {}",
                    w[0], w[1], gap
                )));
            }
        }
        for i in 0..self.coords.nrows() {
            for j in (i + 1)..self.coords.nrows() {
                if self.coords[[i, 0]] == self.coords[[j, 0]]
                    && self.coords[[i, 1]] == self.coords[[j, 1]]
                {
                    return Err(Error::Config(format!(
                        "nodes {i} and {j} share coordinates ({}, {})",
                        self.coords[[i, 0]],
                        self.coords[[i, 1]]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Z-score statistics fitted on the training partition only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_matrix(&self, m: &ArrayView2<f64>) -> Array2<f64> {
        m.mapv(|x| self.apply(x))
    }
}

/// Population mean/std over the training slice. Constant input is rejected.
pub fn fit_normalizer(train_slice: &ArrayView2<f64>) -> Result<NormStats> {
    if train_slice.is_empty() {
        return Err(Error::Config("cannot fit normalizer on empty slice".into()));
    }
    let n = train_slice.len() as f64;
    let mean = train_slice.sum() / n;
    let var = train_slice.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-8 {
        return Err(Error::ZeroVariance);
    }
    Ok(NormStats { mean, std })
}

/// Chronological train -> val -> test split fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.70,
            val_frac: 0.10,
            test_frac: 0.20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.train_frac + self.val_frac + self.test_frac;
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {s}, not 1")));
        }
        if self.train_frac <= 0.0 || self.val_frac <= 0.0 || self.test_frac <= 0.0 {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        Ok(())
    }

    /// Partition lengths `(train, val, test)`. Train takes the ceiling of its
    /// share, validation the floor, and test the remainder, which matches
    /// 100 -> 70/10/20, 101 -> 71/10/20, and 2189 -> 1533/218/438.
    pub fn lengths(&self, total: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        // +-1e-9 guards against 0.7*T landing a hair under an integer.
        let train = (self.train_frac * total as f64 - 1e-9).ceil() as usize;
        let val = (self.val_frac * total as f64 + 1e-9).floor() as usize;
        if train + val >= total {
            return Err(Error::Config(format!(
                "series of length {total} leaves no test data under {self:?}"
            )));
        }
        let test = total - train - val;
        Ok((train, val, test))
    }
}

/// Row ranges of the three contiguous partitions in time order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: std::ops::Range<usize>,
    pub val: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Split a series of `total` rows chronologically: train, then validation,
/// then test, all contiguous and disjoint.
pub fn chronological_split(total: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    let (tr, va, te) = spec.lengths(total)?;
    Ok(SplitRanges {
        train: 0..tr,
        val: tr..tr + va,
        test: tr + va..tr + va + te,
    })
}

/// One minibatch of forecasting windows.
///
/// `inputs[b, 0, n, i]` holds timesteps `[s, s+u)` and
/// `targets[b, 0, n, j]` holds `[s+u, s+u+v)` for start index
/// `s = start_indices[b]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
    pub start_indices: Vec<usize>,
}

/// All valid sliding windows (stride 1) over one partition.
#[derive(Debug, Clone)]
pub struct Windows {
    data: Array2<f64>,
    input_len: usize,
    horizon: usize,
}

impl Windows {
    /// Fails with the required minimum length if the partition is shorter
    /// than `input_len + horizon`.
    pub fn new(data: ArrayView2<f64>, input_len: usize, horizon: usize) -> Result<Self> {
        let need = input_len + horizon;
        if data.nrows() < need {
            return Err(Error::WindowTooShort {
                len: data.nrows(),
                min: need,
            });
        }
        Ok(Windows {
            data: data.to_owned(),
            input_len,
            horizon,
        })
    }

    /// Number of valid start indices: `T_part - u - v + 1`.
    pub fn len(&self) -> usize {
        self.data.nrows() - self.input_len - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.data.ncols()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Build a batch from explicit start indices.
    pub fn batch(&self, starts: &[usize]) -> WindowBatch {
        let (u, v) = (self.input_len, self.horizon);
        let n = self.num_nodes();
        let b = starts.len();
        let mut inputs = Array4::zeros((b, 1, n, u));
        let mut targets = Array4::zeros((b, 1, n, v));
        for (bi, &s) in starts.iter().enumerate() {
            debug_assert!(s < self.len());
            for node in 0..n {
                for t in 0..u {
                    inputs[[bi, 0, node, t]] = self.data[[s + t, node]];
                }
                for t in 0..v {
                    targets[[bi, 0, node, t]] = self.data[[s + u + t, node]];
                }
            }
        }
        WindowBatch {
            inputs,
            targets,
            start_indices: starts.to_vec(),
        }
    }

    /// Iterate batches over the given start order.
    pub fn batches<'a>(
        &'a self,
        order: &'a [usize],
        batch_size: usize,
    ) -> impl Iterator<Item = WindowBatch> + 'a {
        order.chunks(batch_size).map(move |chunk| self.batch(chunk))
    }

    /// Raw, de-normalized-space view of the underlying partition data.
    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

/// Targets of a batch rearranged to the model's output layout `[B, v, N]`.
pub fn targets_as_forecast(batch: &WindowBatch) -> ndarray::Array3<f64> {
    let shape = batch.targets.dim();
    let (b, _, n, v) = shape;
    let mut out = ndarray::Array3::zeros((b, v, n));
    for bi in 0..b {
        for node in 0..n {
            for t in 0..v {
                out[[bi, t, node]] = batch.targets[[bi, 0, node, t]];
            }
        }
    }
    out
}

/// Convenience bundle: a dataset split, normalized, and windowed.
pub struct PreparedData {
    pub dataset: GeoSeriesDataset,
    pub norm: NormStats,
    pub ranges: SplitRanges,
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
    /// De-normalized partitions for baselines and reporting.
    pub raw_test: Array2<f64>,
}

/// Run the full protocol: chronological split, fit normalizer on train only,
/// z-score every partition, window each partition independently.
pub fn prepare(
    dataset: GeoSeriesDataset,
    spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
) -> Result<PreparedData> {
    prepare_with(dataset, spec, input_len, horizon, None)
}

/// As [`prepare`], but normalizing with existing statistics (for example
/// the ones stored in a checkpoint) instead of refitting on the train slice.
pub fn prepare_with(
    dataset: GeoSeriesDataset,
    spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
    norm: Option<NormStats>,
) -> Result<PreparedData> {
    dataset.validate()?;
    let ranges = chronological_split(dataset.num_timesteps(), spec)?;
    let train_raw = dataset.values.slice(s![ranges.train.clone(), ..]);
    let norm = match norm {
        Some(n) => n,
        None => fit_normalizer(&train_raw)?,
    };
    let part = |r: &std::ops::Range<usize>| {
        norm.apply_matrix(&dataset.values.slice(s![r.clone(), ..]))
    };
    let train = Windows::new(part(&ranges.train).view(), input_len, horizon)?;
    let val = Windows::new(part(&ranges.val).view(), input_len, horizon)?;
    let test = Windows::new(part(&ranges.test).view(), input_len, horizon)?;
    let raw_test = dataset.values.slice(s![ranges.test.clone(), ..]).to_owned();
    Ok(PreparedData {
        dataset,
        norm,
        ranges,
        train,
        val,
        test,
        raw_test,
    })
}
