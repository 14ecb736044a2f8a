use std::path::Path;
use std::process::{Command, Output};

use mfcast::cli::{EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use mfcast::partition::Artifact;
use mfcast::{gen_synthetic, load_csv, SynthConfig};
use serde_json::json;

fn mfcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfcast")).args(args).output().unwrap()
}

fn write_config(dir: &Path, value: &serde_json::Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(sub: &str, config: &str, out: &Path) -> Output {
    let out = mfcast(&[sub, "--config", config, "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth() -> serde_json::Value {
    json!({ "source": "synth", "n_plants": 3, "n_periods": 600, "ar_coefficient": 0.95,
            "cross_plant_correlation": 0.7, "noise_std": 0.2, "seed": 12 })
}

fn small_run() -> serde_json::Value {
    json!({
        "data": synth(),
        "max_lag": 1,
        "horizons": [1, 2],
        "train": { "learning_rate": 0.01, "max_iters": 30, "batch_size": 64 },
        "partition": { "max_subsets": 3, "budget": 2 },
        "grid": { "p01": [0.1], "p11": [0.8], "runs": 2,
                  "methods": ["imp-persistence", "imp-mean", "rf-learned", "arf-learned"],
                  "q_sweep": [1, 3] },
        "seed": 5
    })
}

#[test]
fn synth_output_round_trips_through_csv_loader() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({ "data": synth() }));
    run("synth", &cfg, dir.path());
    let loaded = load_csv(dir.path().join("data.csv")).unwrap();
    let synth_cfg: SynthConfig = serde_json::from_value({
        let mut v = synth();
        v.as_object_mut().unwrap().remove("source");
        v
    })
    .unwrap();
    let generated = gen_synthetic(&synth_cfg).unwrap();
    // Capacities are not part of the file format.
    assert_eq!(loaded.timestamps, generated.timestamps);
    assert_eq!(loaded.values, generated.values);
    assert_eq!(loaded.weather, generated.weather);
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), &small_run());
    for dir in [a.path(), b.path()] {
        let out = dir.join("run");
        for sub in ["train", "evaluate", "report"] {
            run(sub, &cfg, &out);
        }
    }
    for rel in ["artifacts/arf-learned_h2.json", "report/grid.csv", "report/summary.csv", "report/qsweep.csv", "report/dm.csv"] {
        let x = std::fs::read(a.path().join("run").join(rel)).unwrap();
        let y = std::fs::read(b.path().join("run").join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }
    let grid = std::fs::read_to_string(a.path().join("run/report/grid.csv")).unwrap();
    // 4 methods x 2 horizons x 1 cell x 2 runs.
    assert_eq!(grid.lines().count(), 1 + 16);
    let qsweep = std::fs::read_to_string(a.path().join("run/report/qsweep.csv")).unwrap();
    assert_eq!(qsweep.lines().count(), 3);
}

#[test]
fn fixed_mode_trains_one_subset_per_missing_count() {
    // Eight plants with two lags: 24 maskable measurements.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &json!({
            "data": { "source": "synth", "n_plants": 8, "n_periods": 300, "ar_coefficient": 0.9,
                      "cross_plant_correlation": 0.5, "noise_std": 0.2, "seed": 1 },
            "max_lag": 2,
            "adaptive": false,
            "train": { "learning_rate": 0.01, "max_iters": 3, "batch_size": 64 },
            "partition": { "mode": "fixed" },
        }),
    );
    run("train", &cfg, dir.path());
    let art = Artifact::load(dir.path().join("artifacts/rf-fixed_h1.json")).unwrap();
    let Artifact::Fixed(fp) = art else { panic!("expected a fixed partition") };
    assert_eq!(fp.uncertainty.maskable.len(), 24);
    assert_eq!(fp.subsets.len(), 25);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out_s = out_dir.to_str().unwrap();

    let bad = write_config(dir.path(), &json!({ "horizons": [] }));
    let r = mfcast(&["train", "--config", &bad, "--out", out_s]);
    assert_eq!(r.status.code(), Some(EXIT_CONFIG));
    assert!(!r.stderr.is_empty());

    let unknown = write_config(dir.path(), &json!({ "horizon": [1] }));
    assert_eq!(mfcast(&["train", "--config", &unknown]).status.code(), Some(EXIT_CONFIG));

    let missing = dir.path().join("nope.json");
    assert_eq!(mfcast(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(EXIT_CONFIG));

    // Evaluating before training: the artifacts are absent.
    let cfg = write_config(dir.path(), &small_run());
    assert_eq!(mfcast(&["evaluate", "--config", &cfg, "--out", out_s]).status.code(), Some(EXIT_CONFIG));

    // A value outside [0, 1] in the measurements file.
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "period,plant_0\n0,0.5\n1,1.2\n").unwrap();
    let data = write_config(dir.path(), &json!({ "data": { "source": "csv", "path": csv } }));
    assert_eq!(mfcast(&["train", "--config", &data, "--out", out_s]).status.code(), Some(EXIT_DATA));
}
