//! CSV + JSON descriptor loading with hard validation.
//!
//! Formats:
//! - `values.csv`: header `date,node_0,...,node_{N-1}`, one row per day.
//! - `coords.csv`: header `node,lat,lon`, N rows.
//! - descriptor JSON: `{name, values_path, coords_path, expected_T, expected_N}`
//!   with paths resolved relative to the descriptor file.

use super::GeoSeriesDataset;
use crate::error::{Error, Result};
use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub values_path: PathBuf,
    pub coords_path: PathBuf,
    #[serde(rename = "expected_T", default)]
    pub expected_t: Option<usize>,
    #[serde(rename = "expected_N", default)]
    pub expected_n: Option<usize>,
}

/// What to do with NaN cells: reject (default) or linearly interpolate runs
/// of at most two consecutive gaps per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    #[default]
    Reject,
    InterpolateShortGaps,
}

pub fn load_descriptor(path: &Path) -> Result<DatasetDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut desc: DatasetDescriptor =
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        if desc.values_path.is_relative() {
            desc.values_path = dir.join(&desc.values_path);
        }
        if desc.coords_path.is_relative() {
            desc.coords_path = dir.join(&desc.coords_path);
        }
    }
    Ok(desc)
}

/// Load and validate a dataset per its descriptor.
pub fn load_dataset(desc: &DatasetDescriptor, nan_policy: NanPolicy) -> Result<GeoSeriesDataset> {
    let (values, timestamps) = load_values(&desc.values_path, nan_policy)?;
    let coords = load_coords(&desc.coords_path)?;
    if coords.nrows() != values.ncols() {
        return Err(Error::data(
            &desc.coords_path,
            format!(
                "{} coordinate rows but values.csv has {} node columns",
                coords.nrows(),
                values.ncols()
            ),
        ));
    }
    if let Some(t) = desc.expected_t {
        if values.nrows() != t {
            return Err(Error::data(
                &desc.values_path,
                format!("descriptor expects T={t} but found {} rows", values.nrows()),
            ));
        }
    }
    if let Some(n) = desc.expected_n {
        if values.ncols() != n {
            return Err(Error::data(
                &desc.values_path,
                format!(
                    "descriptor expects N={n} but found {} node columns",
                    values.ncols()
                ),
            ));
        }
    }
    let ds = GeoSeriesDataset {
        name: desc.name.clone(),
        values,
        timestamps,
        coords,
    };
    ds.validate()?;
    Ok(ds)
}

fn load_values(path: &Path, nan_policy: NanPolicy) -> Result<(Array2<f64>, Vec<NaiveDate>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(path, e.to_string()))?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("date") {
        return Err(Error::data(
            path,
            "values.csv must start with header `date,node_0,...`",
        ));
    }
    let n = headers.len() - 1;

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut nan_cells: Vec<(usize, usize)> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        if record.len() != n + 1 {
            return Err(Error::data(
                path,
                format!(
                    "ragged row {}: {} fields, expected {}",
                    row_idx,
                    record.len(),
                    n + 1
                ),
            ));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| Error::data(path, format!("row {row_idx}: bad date `{}`: {e}", &record[0])))?;
        dates.push(date);
        let mut row = Vec::with_capacity(n);
        for col in 0..n {
            let field = &record[col + 1];
            let v: f64 = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                field.parse().map_err(|e| {
                    Error::data(path, format!("row {row_idx}, column {col}: `{field}`: {e}"))
                })?
            };
            if v.is_nan() {
                nan_cells.push((row_idx, col));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(path, "values.csv has no data rows"));
    }
    let t = rows.len();
    let mut values = Array2::zeros((t, n));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            values[[r, c]] = v;
        }
    }

    if !nan_cells.is_empty() {
        match nan_policy {
            NanPolicy::Reject => {
                let (r, c) = nan_cells[0];
                return Err(Error::data(
                    path,
                    format!(
                        "NaN cell at row {r} (date {}), column {c} (node_{c}); \
                         {} NaN cell(s) total",
                        dates[r],
                        nan_cells.len()
                    ),
                ));
            }
            NanPolicy::InterpolateShortGaps => interpolate_gaps(&mut values, path)?,
        }
    }
    for w in dates.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::data(
                path,
                format!("dates must be strictly increasing: {} then {}", w[0], w[1]),
            ));
        }
    }
    Ok((values, dates))
}

/// Linear interpolation for interior NaN runs of length <= 2 per node.
/// Longer runs and boundary NaNs remain errors.
fn interpolate_gaps(values: &mut Array2<f64>, path: &Path) -> Result<()> {
    let (t, n) = values.dim();
    for col in 0..n {
        let mut row = 0;
        while row < t {
            if values[[row, col]].is_nan() {
                let start = row;
                let mut end = row;
                while end < t && values[[end, col]].is_nan() {
                    end += 1;
                }
                let run = end - start;
                if start == 0 || end == t {
                    return Err(Error::data(
                        path,
                        format!("NaN run touching series boundary at column {col}"),
                    ));
                }
                if run > 2 {
                    return Err(Error::data(
                        path,
                        format!(
                            "NaN run of length {run} at rows {start}..{end}, column {col}; \
                             only gaps of <= 2 are interpolated"
                        ),
                    ));
                }
                let lo = values[[start - 1, col]];
                let hi = values[[end, col]];
                for (k, r) in (start..end).enumerate() {
                    let frac = (k + 1) as f64 / (run + 1) as f64;
                    values[[r, col]] = lo + (hi - lo) * frac;
                }
                row = end;
            } else {
                row += 1;
            }
        }
    }
    Ok(())
}

fn load_coords(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        if record.len() != 3 {
            return Err(Error::data(
                path,
                format!("coords row {i}: expected 3 fields `node,lat,lon`"),
            ));
        }
        let lat: f64 = record[1]
            .parse()
            .map_err(|e| Error::data(path, format!("coords row {i} lat: {e}")))?;
        let lon: f64 = record[2]
            .parse()
            .map_err(|e| Error::data(path, format!("coords row {i} lon: {e}")))?;
        rows.push((lat, lon));
    }
    if rows.is_empty() {
        return Err(Error::data(path, "coords.csv has no rows"));
    }
    let mut coords = Array2::zeros((rows.len(), 2));
    for (i, (lat, lon)) in rows.into_iter().enumerate() {
        coords[[i, 0]] = lat;
        coords[[i, 1]] = lon;
    }
    Ok(coords)
}
