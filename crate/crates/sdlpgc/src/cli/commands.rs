//! Implementations behind the `sdlpgc` subcommands. Every command reads its
//! inputs, writes deterministic artifacts under a run directory, and leaves
//! its inputs untouched.

use super::experiment::ExperimentConfig;
use super::plot;
use crate::data::{
    chronological_split, load_dataset, load_descriptor, prepare, prepare_with, GeoSeriesDataset,
    NanPolicy, SplitSpec, Windows,
};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyMatrix, GraphKind};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, SdLpgc, Variant};
use crate::train::{
    evaluate, persistence_baseline, run_ablation_suite, train, EpochRecord, MetricsReport,
    ReportLabels, DEFAULT_HORIZONS,
};
use crate::tensor::Tape;
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CACHE_ROOT_ENV: &str = "SDLPGC_CACHE_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn label(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Create a fresh run directory with a lock file; an existing directory is
/// an error so concurrent runs cannot share outputs.
fn create_run_dir(base: &Path, label: &str, run_name: Option<&str>) -> Result<PathBuf> {
    std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let name = match run_name {
        Some(n) => n.to_string(),
        None => format!(
            "{}-{label}",
            chrono::Utc::now().format("%Y%m%d-%H%M%S%.3f")
        ),
    };
    let dir = base.join(name);
    std::fs::create_dir(&dir).map_err(|e| {
        Error::Config(format!(
            "run directory {} is not fresh ({e}); concurrent runs must target distinct run directories",
            dir.display()
        ))
    })?;
    std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(dir.join(".lock"))
        .map_err(|e| Error::io(dir.join(".lock"), e))?;
    Ok(dir)
}

fn load_sized_dataset(
    descriptor: &Path,
    nan_policy: NanPolicy,
    max_nodes: Option<usize>,
) -> Result<GeoSeriesDataset> {
    let desc = load_descriptor(descriptor)?;
    let ds = load_dataset(&desc, nan_policy)?;
    Ok(match max_nodes {
        Some(n) => ds.take_nodes(n),
        None => ds,
    })
}

fn matrix_bytes(m: &ndarray::ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for &v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Validate the dataset, compute the split protocol, and cache normalized
/// partitions plus a summary. Re-running on unchanged data is a no-op.
pub fn cmd_prepare(
    descriptor: &Path,
    nan_policy: NanPolicy,
    cache_dir: Option<PathBuf>,
    input_len: usize,
    horizon: usize,
) -> Result<()> {
    let ds = load_sized_dataset(descriptor, nan_policy, None)?;
    let spec = SplitSpec::default();
    let data = prepare(ds, &spec, input_len, horizon)?;

    let root = cache_dir
        .or_else(|| std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sdlpgc-cache"));
    let dir = root.join(&data.dataset.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let partitions = [
        ("train", &data.train),
        ("val", &data.val),
        ("test", &data.test),
    ];
    let mut hasher = Sha256::new();
    let mut blobs = Vec::new();
    for (name, windows) in &partitions {
        let bytes = matrix_bytes(&windows.data());
        hasher.update(&bytes);
        blobs.push((*name, bytes));
    }
    let content_hash: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let summary_path = dir.join("summary.json");
    if let Ok(existing) = std::fs::read_to_string(&summary_path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&existing) {
            if v["content_hash"] == serde_json::Value::String(content_hash.clone()) {
                println!(
                    "cache up to date for {} (hash {})",
                    data.dataset.name,
                    &content_hash[..12]
                );
                return Ok(());
            }
        }
    }
    for (name, bytes) in &blobs {
        write_file(&dir.join(format!("{name}.bin")), bytes)?;
    }
    let t = data.dataset.num_timesteps();
    let n = data.dataset.num_nodes();
    let summary = serde_json::json!({
        "name": data.dataset.name,
        "num_timesteps": t,
        "num_nodes": n,
        "date_range": [
            data.dataset.timestamps.first().unwrap().to_string(),
            data.dataset.timestamps.last().unwrap().to_string(),
        ],
        "split_ordering": "chronological train -> val -> test",
        "split_lengths": {
            "train": data.ranges.train.len(),
            "val": data.ranges.val.len(),
            "test": data.ranges.test.len(),
        },
        "window_counts": {
            "input_len": input_len,
            "horizon": horizon,
            "train": data.train.len(),
            "val": data.val.len(),
            "test": data.test.len(),
        },
        "normalization": { "mean": data.norm.mean, "std": data.norm.std },
        "partition_layout": "row-major f64 little-endian, rows = timesteps",
        "content_hash": content_hash,
    });
    write_file(&summary_path, serde_json::to_string_pretty(&summary).unwrap())?;
    println!(
        "prepared {}: T={t}, N={n}, splits {}/{}/{} -> {}",
        data.dataset.name,
        data.ranges.train.len(),
        data.ranges.val.len(),
        data.ranges.test.len(),
        dir.display()
    );
    Ok(())
}

/// Train one model per the experiment config; writes the resolved config,
/// the NDJSON epoch log, and the best checkpoint into a fresh run directory.
pub fn cmd_train(config_path: &Path, overrides: &[String]) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let variant: Variant = cfg.run.variant.parse()?;
    let ds = load_sized_dataset(
        &cfg.dataset.descriptor,
        cfg.dataset.nan_policy,
        cfg.dataset.max_nodes,
    )?;
    let data = prepare(ds, &cfg.split, cfg.model.input_len, cfg.model.horizon)?;

    let mut model_cfg = cfg.model.clone();
    if model_cfg.num_nodes == 0 {
        model_cfg.num_nodes = data.dataset.num_nodes();
    } else if model_cfg.num_nodes != data.dataset.num_nodes() {
        return Err(Error::Config(format!(
            "model.num_nodes = {} but the dataset provides {} nodes",
            model_cfg.num_nodes,
            data.dataset.num_nodes()
        )));
    }
    let mut model = SdLpgc::new(model_cfg.clone(), variant)?;
    println!(
        "training {variant} on {}: N={}, {} windows, {} parameters",
        data.dataset.name,
        data.dataset.num_nodes(),
        data.train.len(),
        model.num_parameters()
    );
    let outcome = train(&mut model, &data, &cfg.train)?;
    println!(
        "finished after {} epoch(s) ({} steps){}; best val avg-MAE {:.4} at epoch {}",
        outcome.epochs_run,
        outcome.steps_run,
        if outcome.stopped_early { ", stopped early" } else { "" },
        outcome.best_val_mae,
        outcome.best_epoch
    );

    let run_dir = create_run_dir(
        &cfg.run.output_dir,
        &format!("train-{}", variant.tag()),
        cfg.run.run_name.as_deref(),
    )?;
    let mut resolved = cfg.clone();
    resolved.model = model_cfg;
    write_file(&run_dir.join("config.resolved.toml"), resolved.to_toml())?;
    let mut log = String::new();
    for record in &outcome.log {
        log.push_str(&serde_json::to_string(record).unwrap());
        log.push('\n');
    }
    write_file(&run_dir.join("train_log.ndjson"), log)?;
    let meta = CheckpointMeta {
        norm: data.norm,
        split: cfg.split,
        dataset: data.dataset.name.clone(),
        train_seed: cfg.train.seed,
        epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
    };
    save_checkpoint(
        &model,
        &meta,
        outcome.best_optimizer.as_ref(),
        &run_dir.join("model.ckpt"),
    )?;
    println!("run artifacts in {}", run_dir.display());
    Ok(run_dir)
}

struct LoadedCheckpoint {
    model: SdLpgc,
    manifest: crate::model::CheckpointManifest,
    data: crate::data::PreparedData,
}

fn load_for_inference(
    checkpoint: &Path,
    descriptor: &Path,
    nan_policy: NanPolicy,
) -> Result<LoadedCheckpoint> {
    let (model, manifest, _) = load_checkpoint(checkpoint)?;
    let desc = load_descriptor(descriptor)?;
    let ds = load_dataset(&desc, nan_policy)?;
    let want = model.config.num_nodes;
    let ds = if ds.num_nodes() > want {
        println!(
            "note: dataset has {} nodes; using the first {want} the checkpoint was trained on",
            ds.num_nodes()
        );
        ds.take_nodes(want)
    } else if ds.num_nodes() < want {
        return Err(Error::Config(format!(
            "checkpoint expects {want} nodes but the dataset has only {}",
            ds.num_nodes()
        )));
    } else {
        ds
    };
    let data = prepare_with(
        ds,
        &manifest.split,
        model.config.input_len,
        model.config.horizon,
        Some(manifest.norm),
    )?;
    Ok(LoadedCheckpoint {
        model,
        manifest,
        data,
    })
}

fn partition(data: &crate::data::PreparedData, split: SplitName) -> &Windows {
    match split {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    }
}

fn print_report(report: &MetricsReport) {
    println!(
        "{} / {} (seed {})",
        report.dataset, report.variant, report.seed
    );
    println!(
        "{:>8} {:>10} {:>10} {:>10}",
        "horizon", "MAE", "RMSE", "MAPE(%)"
    );
    for h in &report.horizons {
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.4}",
            h.horizon, h.mae, h.rmse, h.mape
        );
    }
    println!(
        "{:>8} {:>10.4} {:>10.4} {:>10.4}",
        "avg", report.avg_mae, report.avg_rmse, report.avg_mape
    );
}

/// Score a checkpoint on one partition at the standard horizons; writes
/// metrics JSON + CSV and prints the table with a persistence floor.
pub fn cmd_evaluate(
    checkpoint: &Path,
    descriptor: &Path,
    split: SplitName,
    out: Option<PathBuf>,
    with_alpha: bool,
    nan_policy: NanPolicy,
) -> Result<()> {
    let loaded = load_for_inference(checkpoint, descriptor, nan_policy)?;
    let windows = partition(&loaded.data, split);
    let labels = ReportLabels {
        dataset: loaded.data.dataset.name.clone(),
        variant: loaded.model.variant.tag().into(),
        seed: loaded.manifest.train_seed,
    };
    let report = evaluate(
        &loaded.model,
        windows,
        loaded.manifest.norm,
        &DEFAULT_HORIZONS,
        32,
        labels.clone(),
        with_alpha,
    )?;
    print_report(&report);

    // persistence floor on raw values of the same partition
    let range = match split {
        SplitName::Train => &loaded.data.ranges.train,
        SplitName::Val => &loaded.data.ranges.val,
        SplitName::Test => &loaded.data.ranges.test,
    };
    let raw = loaded
        .data
        .dataset
        .values
        .slice(ndarray::s![range.clone(), ..]);
    let raw_windows = Windows::new(
        raw,
        loaded.model.config.input_len,
        loaded.model.config.horizon,
    )?;
    let floor = persistence_baseline(&raw_windows, &DEFAULT_HORIZONS, labels)?;
    println!(
        "persistence floor: avg-MAE {:.4}, avg-RMSE {:.4}, avg-MAPE {:.4}",
        floor.avg_mae, floor.avg_rmse, floor.avg_mape
    );

    let out_dir = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let json_path = out_dir.join(format!("metrics-{}.json", split.label()));
    write_file(&json_path, serde_json::to_string_pretty(&report).unwrap())?;
    write_file(
        &out_dir.join(format!("metrics-{}.csv", split.label())),
        report.to_csv(),
    )?;
    println!("metrics written to {}", json_path.display());
    Ok(())
}

/// Forecast the horizon for one window (defaults to the most recent one in
/// the partition); emits de-normalized CSV plus a small JSON manifest.
pub fn cmd_forecast(
    checkpoint: &Path,
    descriptor: &Path,
    split: SplitName,
    window_start: Option<usize>,
    out: Option<PathBuf>,
    nan_policy: NanPolicy,
) -> Result<()> {
    let loaded = load_for_inference(checkpoint, descriptor, nan_policy)?;
    let windows = partition(&loaded.data, split);
    let start = window_start.unwrap_or(windows.len() - 1);
    if start >= windows.len() {
        return Err(Error::Config(format!(
            "window start {start} out of range; the {} split has {} windows",
            split.label(),
            windows.len()
        )));
    }
    let batch = windows.batch(&[start]);
    let tape = Tape::new();
    let x = tape.leaf(batch.inputs.clone().into_dyn());
    let y = loaded
        .model
        .forward(&tape, x, &mut crate::nn::Mode::Eval)?;
    let yv = tape.value(y);

    let (u, v, n) = (
        loaded.model.config.input_len,
        loaded.model.config.horizon,
        windows.num_nodes(),
    );
    let range = match split {
        SplitName::Train => &loaded.data.ranges.train,
        SplitName::Val => &loaded.data.ranges.val,
        SplitName::Test => &loaded.data.ranges.test,
    };
    let global_first_target = range.start + start + u;

    let out_dir = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let csv_path = out_dir.join("forecast.csv");
    let mut csv = String::from("date");
    for node in 0..n {
        csv.push_str(&format!(",node_{node}"));
    }
    csv.push('\n');
    for step in 0..v {
        let date = loaded.data.dataset.timestamps[global_first_target + step];
        csv.push_str(&date.to_string());
        for node in 0..n {
            csv.push_str(&format!(
                ",{:.6}",
                loaded.manifest.norm.invert(yv[[0, step, node]])
            ));
        }
        csv.push('\n');
    }
    write_file(&csv_path, csv)?;
    let manifest = serde_json::json!({
        "dataset": loaded.data.dataset.name,
        "checkpoint": checkpoint.display().to_string(),
        "split": split.label(),
        "window_start": start,
        "first_target_date": loaded.data.dataset.timestamps[global_first_target].to_string(),
        "horizon": v,
    });
    write_file(
        &out_dir.join("forecast.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    println!("forecast written to {}", csv_path.display());
    Ok(())
}

/// Train and score all five variants over the configured seeds; writes the
/// paper-style table as CSV and text.
pub fn cmd_ablation(config_path: &Path, overrides: &[String]) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let ds = load_sized_dataset(
        &cfg.dataset.descriptor,
        cfg.dataset.nan_policy,
        cfg.dataset.max_nodes,
    )?;
    let data = prepare(ds, &cfg.split, cfg.model.input_len, cfg.model.horizon)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.num_nodes == 0 {
        model_cfg.num_nodes = data.dataset.num_nodes();
    }
    let table = run_ablation_suite(&data, &model_cfg, &cfg.train, &cfg.run.seeds, |msg| {
        println!("{msg}");
    })?;
    let run_dir = create_run_dir(&cfg.run.output_dir, "ablation", cfg.run.run_name.as_deref())?;
    let mut resolved = cfg.clone();
    resolved.model = model_cfg;
    write_file(&run_dir.join("config.resolved.toml"), resolved.to_toml())?;
    write_file(&run_dir.join("ablation.csv"), table.to_csv())?;
    write_file(&run_dir.join("ablation.txt"), table.to_text())?;
    print!("{}", table.to_text());
    println!("ablation artifacts in {}", run_dir.display());
    Ok(run_dir)
}

/// Export the learned static graph and the dynamic graph of one sample
/// window as CSV matrices plus a JSON manifest.
pub fn cmd_export_graphs(
    checkpoint: &Path,
    descriptor: &Path,
    window_index: usize,
    out: Option<PathBuf>,
    nan_policy: NanPolicy,
) -> Result<()> {
    let loaded = load_for_inference(checkpoint, descriptor, nan_policy)?;
    let windows = &loaded.data.test;
    if window_index >= windows.len() {
        return Err(Error::Config(format!(
            "window index {window_index} out of range; the test split has {} windows",
            windows.len()
        )));
    }
    let batch = windows.batch(&[window_index]);
    let tape = Tape::new();
    let x = tape.leaf(batch.inputs.into_dyn());
    let (static_adj, dynamic_adj) = loaded.model.adjacencies(&tape, x)?;

    let out_dir = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut files = Vec::new();
    if let Some(s) = static_adj {
        let m = AdjacencyMatrix::from_var(&tape, s, GraphKind::Static);
        m.validate_row_stochastic(1e-5)?;
        let p = out_dir.join("static_adjacency.csv");
        m.write_csv(&p)?;
        files.push("static_adjacency.csv");
    }
    if let Some(d) = dynamic_adj {
        let value = tape.value(d);
        let single = value.index_axis(ndarray::Axis(0), 0).to_owned();
        let m = AdjacencyMatrix {
            weights: single,
            kind: GraphKind::Dynamic,
        };
        m.validate_row_stochastic(1e-5)?;
        let p = out_dir.join("dynamic_adjacency.csv");
        m.write_csv(&p)?;
        files.push("dynamic_adjacency.csv");
    }
    if files.is_empty() {
        return Err(Error::Config(format!(
            "variant {} learns no graphs to export",
            loaded.model.variant
        )));
    }
    let manifest = serde_json::json!({
        "dataset": loaded.data.dataset.name,
        "epoch": loaded.manifest.epoch,
        "seed": loaded.manifest.train_seed,
        "variant": loaded.model.variant.tag(),
        "window_index": window_index,
        "files": files,
    });
    write_file(
        &out_dir.join("graphs_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    println!("graphs written to {}", out_dir.display());
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::data(path, format!("row {i}: {e}")))?);
    }
    if rows.is_empty() {
        return Err(Error::data(path, "empty matrix"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::data(path, "ragged matrix rows"));
    }
    let mut m = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// Render every plottable artifact found in a run directory.
pub fn cmd_plot(run_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    if !run_dir.is_dir() {
        return Err(Error::Config(format!(
            "{} is not a directory",
            run_dir.display()
        )));
    }
    let out_dir = out.unwrap_or_else(|| run_dir.to_path_buf());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut produced = Vec::new();

    let log_path = run_dir.join("train_log.ndjson");
    if log_path.is_file() {
        let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut records: Vec<EpochRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::data(&log_path, format!("line {i}: {e}")))?,
            );
        }
        let target = out_dir.join("loss_curve.png");
        plot::loss_curve(&records, &target)?;
        produced.push(target);
    }

    let entries = std::fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in entries.flatten() {
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        if name.starts_with("metrics-") && name.ends_with(".json") {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let report: MetricsReport =
                serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
            let target = out_dir.join(format!(
                "horizon_{}.png",
                name.trim_end_matches(".json").trim_start_matches("metrics-")
            ));
            plot::horizon_bars(&report, &target)?;
            produced.push(target);
        }
        if name.ends_with("_adjacency.csv") {
            let matrix = read_matrix_csv(&path)?;
            let title = name.trim_end_matches(".csv").replace('_', " ");
            let target = out_dir.join(format!("{}.png", name.trim_end_matches(".csv")));
            plot::adjacency_heatmap(&matrix, &title, &target)?;
            produced.push(target);
        }
    }
    if produced.is_empty() {
        return Err(Error::Config(format!(
            "nothing to plot in {}; expected train_log.ndjson, metrics-*.json, or *_adjacency.csv",
            run_dir.display()
        )));
    }
    for p in &produced {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Windowed view of one raw (de-normalized) partition, for baselines.
pub fn raw_partition_windows(
    dataset: &GeoSeriesDataset,
    spec: &SplitSpec,
    split: SplitName,
    input_len: usize,
    horizon: usize,
) -> Result<Windows> {
    let ranges = chronological_split(dataset.num_timesteps(), spec)?;
    let range = match split {
        SplitName::Train => ranges.train,
        SplitName::Val => ranges.val,
        SplitName::Test => ranges.test,
    };
    Windows::new(
        dataset.values.slice(ndarray::s![range, ..]),
        input_len,
        horizon,
    )
}
