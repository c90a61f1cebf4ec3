//! End-to-end exercises of the `sdlpgc` binary: the full prepare -> train ->
//! evaluate -> forecast -> export-graphs -> plot flow on generated CSVs,
//! plus exit-code and idempotence contracts.

use sd_lpgc::data::synthetic;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_sdlpgc")
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(binary());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Demo dataset + experiment config in a temp workspace.
struct Workspace {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    descriptor: PathBuf,
    config: PathBuf,
    runs: PathBuf,
    cache: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let ds = synthetic::sst_like("demo", 8, 250, 17);
    let descriptor = synthetic::write_csv_files(&ds, &data_dir).unwrap();
    let runs = dir.path().join("runs");
    let cache = dir.path().join("cache");
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        format!(
            r#"
[dataset]
descriptor = "{}"

[model]
input_len = 8
horizon = 4
embed_dim = 6
num_heads = 1
head_dim = 3
skip_proj_dim = 4
num_blocks = 1
propagation_depth = 2
residual_channels = 8
skip_channels = 8
end_channels = 8
dropout = 0.1
seed = 3

[train]
epochs = 2
batch_size = 32
early_stop_patience = 5
seed = 3

[run]
output_dir = "{}"
seeds = [3]
"#,
            descriptor.display(),
            runs.display()
        ),
    )
    .unwrap();
    Workspace {
        dir,
        descriptor,
        config,
        runs,
        cache,
    }
}

fn train_run(ws: &Workspace, run_name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--config",
        ws.config.to_str().unwrap(),
        "--set",
    ];
    let set_run = format!("run.run_name=\"{run_name}\"");
    args.push(&set_run);
    args.extend_from_slice(extra);
    let out = run(&args, &[]);
    assert_success(&out, "train");
    ws.runs.join(run_name)
}

#[test]
fn prepare_is_valid_and_idempotent() {
    let ws = workspace();
    let cache = ws.cache.to_str().unwrap().to_string();
    let args = [
        "prepare",
        "--descriptor",
        ws.descriptor.to_str().unwrap(),
        "--input-len",
        "8",
        "--horizon",
        "4",
    ];
    let first = run(&args, &[("SDLPGC_CACHE_ROOT", &cache)]);
    assert_success(&first, "prepare");
    let summary_path = ws.cache.join("demo").join("summary.json");
    let summary = std::fs::read_to_string(&summary_path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["num_nodes"], 8);
    assert_eq!(v["num_timesteps"], 250);
    // lengths: ceil(175), floor(25), rest
    assert_eq!(v["split_lengths"]["train"], 175);
    assert_eq!(v["split_lengths"]["val"], 25);
    assert_eq!(v["split_lengths"]["test"], 50);
    let hash_before = v["content_hash"].as_str().unwrap().to_string();

    let second = run(&args, &[("SDLPGC_CACHE_ROOT", &cache)]);
    assert_success(&second, "prepare rerun");
    assert!(
        stdout(&second).contains("cache up to date"),
        "{}",
        stdout(&second)
    );
    let summary_after = std::fs::read_to_string(&summary_path).unwrap();
    let v2: serde_json::Value = serde_json::from_str(&summary_after).unwrap();
    assert_eq!(v2["content_hash"].as_str().unwrap(), hash_before);
}

#[test]
fn prepare_missing_coords_exits_with_validation_error() {
    let ws = workspace();
    std::fs::remove_file(ws.descriptor.parent().unwrap().join("coords.csv")).unwrap();
    let out = run(
        &["prepare", "--descriptor", ws.descriptor.to_str().unwrap()],
        &[],
    );
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("coords.csv"),
        "error must name the path: {}",
        stderr(&out)
    );
}

#[test]
fn full_flow_train_evaluate_forecast_graphs_plot() {
    let ws = workspace();
    let run_dir = train_run(&ws, "flow", &[]);
    for artifact in ["model.ckpt", "train_log.ndjson", "config.resolved.toml", ".lock"] {
        assert!(run_dir.join(artifact).is_file(), "missing {artifact}");
    }

    // a second run into the same directory must be refused (lock contract)
    let clash = run(
        &[
            "train",
            "--config",
            ws.config.to_str().unwrap(),
            "--set",
            "run.run_name=\"flow\"",
        ],
        &[],
    );
    assert_eq!(clash.status.code(), Some(1), "{}", stderr(&clash));
    assert!(stderr(&clash).contains("not fresh"), "{}", stderr(&clash));

    let ckpt = run_dir.join("model.ckpt");
    let desc = ws.descriptor.to_str().unwrap().to_string();

    // evaluate: metrics files + horizons limited to the 4-step output
    let eval = run(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--descriptor",
            &desc,
            "--alpha",
        ],
        &[],
    );
    assert_success(&eval, "evaluate");
    assert!(stdout(&eval).contains("persistence floor"));
    let metrics_json = run_dir.join("metrics-test.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics_json).unwrap()).unwrap();
    assert_eq!(report["horizons"].as_array().unwrap().len(), 1); // only h=3 fits v=4
    assert!(report["alpha_stats"].is_array());
    let csv = std::fs::read_to_string(run_dir.join("metrics-test.csv")).unwrap();
    assert!(csv.starts_with("horizon,mae,rmse,mape"));
    assert!(csv.trim().ends_with(&format!(
        "avg,{:.6},{:.6},{:.6}",
        report["avg_mae"].as_f64().unwrap(),
        report["avg_rmse"].as_f64().unwrap(),
        report["avg_mape"].as_f64().unwrap()
    )));

    // evaluation is deterministic: byte-identical metrics on a re-run
    let out2 = ws.dir.path().join("eval-again");
    let eval2 = run(
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--descriptor",
            &desc,
            "--out",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert_success(&eval2, "evaluate rerun");
    assert_eq!(
        std::fs::read(run_dir.join("metrics-test.csv")).unwrap(),
        std::fs::read(out2.join("metrics-test.csv")).unwrap(),
        "metrics CSV must be bitwise reproducible"
    );

    // forecast: v rows of dates + de-normalized values
    let fc = run(
        &[
            "forecast",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--descriptor",
            &desc,
            "--window-start",
            "0",
        ],
        &[],
    );
    assert_success(&fc, "forecast");
    let forecast = std::fs::read_to_string(run_dir.join("forecast.csv")).unwrap();
    let lines: Vec<&str> = forecast.trim().lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].starts_with("date,node_0"));
    // test partition starts at row 200; first target = 200 + 8 (2015-01-01 based)
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("forecast.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["first_target_date"], "2015-07-28");
    assert!(lines[1].starts_with("2015-07-28,"));

    // export-graphs: row-stochastic CSV matrices
    let graphs = run(
        &[
            "export-graphs",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--descriptor",
            &desc,
            "--window-index",
            "2",
        ],
        &[],
    );
    assert_success(&graphs, "export-graphs");
    for file in ["static_adjacency.csv", "dynamic_adjacency.csv"] {
        let text = std::fs::read_to_string(run_dir.join(file)).unwrap();
        let rows: Vec<&str> = text.trim().lines().collect();
        assert_eq!(rows.len(), 8, "{file} must be 8x8");
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!(
                (sum - 1.0).abs() < 1e-5,
                "{file} row {i} sums to {sum}"
            );
        }
    }
    let gm: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("graphs_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(gm["window_index"], 2);
    assert_eq!(gm["dataset"], "demo");

    // plot: loss curve + horizon bars + both heatmaps
    let plot = run(
        &["plot", "--run-dir", run_dir.to_str().unwrap()],
        &[],
    );
    assert_success(&plot, "plot");
    for image in [
        "loss_curve.png",
        "horizon_test.png",
        "static_adjacency.png",
        "dynamic_adjacency.png",
    ] {
        let path = run_dir.join(image);
        assert!(path.is_file(), "missing {image}");
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG", "{image} is not a PNG");
    }
}

#[test]
fn ablation_smoke_emits_all_five_variants() {
    let ws = workspace();
    let out = run(
        &[
            "ablation",
            "--config",
            ws.config.to_str().unwrap(),
            "--set",
            "run.run_name=\"ablate\"",
            "--set",
            "train.epochs=1",
        ],
        &[],
    );
    assert_success(&out, "ablation");
    let csv = std::fs::read_to_string(ws.runs.join("ablate").join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines[0], "variant,avg_mae,avg_rmse,avg_mape");
    assert_eq!(lines.len(), 6);
    for (row, tag) in lines[1..]
        .iter()
        .zip(["full", "no_SL", "no_DL", "no_LPGC", "SD_GCN"])
    {
        assert!(row.starts_with(&format!("{tag},")), "row `{row}` vs {tag}");
        assert_eq!(row.split(',').count(), 4);
    }
    assert!(ws.runs.join("ablate").join("ablation.txt").is_file());
}

#[test]
fn ablation_variant_checkpoints_roundtrip_through_evaluate() {
    // train one non-full variant end to end and make sure its checkpoint
    // evaluates (exercises variant reconstruction from the manifest)
    let ws = workspace();
    let run_dir = train_run(&ws, "gcn", &["--set", "run.variant=\"SD_GCN\""]);
    let eval = run(
        &[
            "evaluate",
            "--checkpoint",
            run_dir.join("model.ckpt").to_str().unwrap(),
            "--descriptor",
            ws.descriptor.to_str().unwrap(),
            "--split",
            "val",
        ],
        &[],
    );
    assert_success(&eval, "evaluate SD_GCN");
    assert!(run_dir.join("metrics-val.json").is_file());
    assert!(stdout(&eval).contains("SD_GCN"));
}

#[test]
fn exit_codes_distinguish_validation_from_runtime() {
    let ws = workspace();
    // unknown config key -> validation (1)
    let bad_cfg = ws.dir.path().join("bad.toml");
    std::fs::write(
        &bad_cfg,
        "[dataset]\ndescriptor = \"x.json\"\nnot_a_key = 1\n",
    )
    .unwrap();
    let out = run(&["train", "--config", bad_cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    // unknown variant -> validation (1)
    let out = run(
        &[
            "train",
            "--config",
            ws.config.to_str().unwrap(),
            "--set",
            "run.variant=\"bogus\"",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    // missing checkpoint file -> runtime (2)
    let out = run(
        &[
            "evaluate",
            "--checkpoint",
            "/nonexistent/model.ckpt",
            "--descriptor",
            ws.descriptor.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // corrupt checkpoint -> runtime (2) with a version/corruption message
    let run_dir = train_run(&ws, "codes", &[]);
    let ckpt = run_dir.join("model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
    let tampered = ws.dir.path().join("tampered.ckpt");
    std::fs::write(&tampered, bytes).unwrap();
    let out = run(
        &[
            "evaluate",
            "--checkpoint",
            tampered.to_str().unwrap(),
            "--descriptor",
            ws.descriptor.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("unsupported checkpoint version 9"),
        "{}",
        stderr(&out)
    );

    // plot with nothing to plot -> validation (1)
    let empty = ws.dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = run(&["plot", "--run-dir", empty.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn prepare_summary_window_counts_follow_formula() {
    let ws = workspace();
    let cache = ws.cache.to_str().unwrap().to_string();
    let out = run(
        &[
            "prepare",
            "--descriptor",
            ws.descriptor.to_str().unwrap(),
            "--input-len",
            "8",
            "--horizon",
            "4",
        ],
        &[("SDLPGC_CACHE_ROOT", &cache)],
    );
    assert_success(&out, "prepare");
    let v: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.cache.join("demo").join("summary.json")).unwrap(),
    )
    .unwrap();
    // windows = len - u - v + 1
    assert_eq!(v["window_counts"]["train"], 175 - 12 + 1);
    assert_eq!(v["window_counts"]["val"], 25 - 12 + 1);
    assert_eq!(v["window_counts"]["test"], 50 - 12 + 1);
    // binary partitions exist with the right sizes
    let train_bin = std::fs::read(ws.cache.join("demo").join("train.bin")).unwrap();
    assert_eq!(train_bin.len(), 175 * 8 * 8); // rows x nodes x 8 bytes
}

fn file_mtime(p: &Path) -> std::time::SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn commands_do_not_mutate_inputs() {
    let ws = workspace();
    let values = ws.descriptor.parent().unwrap().join("values.csv");
    let before = (file_mtime(&values), std::fs::read(&values).unwrap());
    let _ = train_run(&ws, "readonly", &[]);
    let after = (file_mtime(&values), std::fs::read(&values).unwrap());
    assert_eq!(before.1, after.1, "input CSV content changed");
    assert_eq!(before.0, after.0, "input CSV was rewritten");
}
