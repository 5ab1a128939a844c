//! End-to-end checks of the `octsurf` binary on tiny synthetic data.

use std::path::Path;
use std::process::{Command, Output};

use octsurf_core::dataset::{load_cases, Split};
use octsurf_core::eval::MetricsReport;
use octsurf_core::io::{read_json, write_json, write_surfaces};
use octsurf_core::pipeline::{PredictionEntry, PredictionIndex, PREDICTIONS_FILE, PREDICTIONS_FORMAT};
use octsurf_core::trainer::{FlattenConfig, TrainMode};
use octsurf_core::SurfaceSet;

fn octsurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octsurf")).args(args).env("RUST_LOG", "warn").output().expect("run octsurf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--override",
    "phantom.shape=[32,4,48]",
    "--override",
    "phantom.shift_range=3.0",
    "--override",
    "n_train=2",
    "--override",
    "n_test=2",
    "--override",
    "phantom.amplitude=2.0",
];

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--seed", "5"];
    args.extend_from_slice(TINY);
    let o = octsurf(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_succeeds() {
    let o = octsurf(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "preprocess", "train", "predict", "evaluate", "plot"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = octsurf(&["synth", "--out", out.to_str().unwrap(), "--override", "phantom.bogus=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("phantom.bogus"), "{}", stderr(&o));
    let o = octsurf(&["synth", "--out", out.to_str().unwrap(), "--override", "phantom.shift_range=100"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&octsurf(&["nonsense"])), 1);
}

#[test]
fn missing_input_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = octsurf(&[
        "evaluate",
        "--pred",
        tmp.path().join("none").to_str().unwrap(),
        "--truth",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("missing.json"));
}

#[test]
fn synth_is_reproducible_and_snapshots_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a);
    synth(&b);
    for f in ["manifest.json", "config.resolved.json", "volumes/case_0001.json", "truth/case_0003.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert!(a.join("octsurf.log").exists());
    let resolved: serde_json::Value = read_json(&a.join("config.resolved.json")).unwrap();
    assert_eq!(resolved["phantom"]["seed"], 5);
    assert_eq!(resolved["n_train"], 2);
}

#[test]
fn evaluate_matches_fixture_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cases = load_cases(&data.join("manifest.json"), Some(Split::Test)).unwrap();
    // Predictions one pixel below the truth with the injected displacement.
    let pred = tmp.path().join("pred");
    let mut entries = Vec::new();
    for c in &cases {
        let s = &c.truth;
        let moved = SurfaceSet::from_fn(s.names().to_vec(), s.n_b(), s.n_a(), |k, b, a| s.at(k, b, a) + 1.0).unwrap();
        let rel = Path::new("surfaces").join(format!("{}.json", c.id));
        write_surfaces(&pred.join(&rel), &moved).unwrap();
        entries.push(PredictionEntry {
            id: c.id.clone(),
            tag: c.tag.clone(),
            surfaces: rel,
            displacement: c.injected.as_ref().unwrap().values().to_vec(),
        });
    }
    let idx = PredictionIndex {
        format: PREDICTIONS_FORMAT.into(),
        run: "fixture".into(),
        mode: TrainMode::Proposed,
        flatten: FlattenConfig { enabled: false, ..FlattenConfig::default() },
        cases: entries,
    };
    write_json(&pred.join(PREDICTIONS_FILE), &idx).unwrap();
    let out = tmp.path().join("eval");
    let o = octsurf(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: MetricsReport = read_json(&out.join("metrics.json")).unwrap();
    assert_eq!(r.cases.len(), 2);
    // surfaces are stored as f32, so the offset is exact only to f32 rounding
    for m in &r.mad {
        assert!((m.mean_px - 1.0).abs() < 1e-5);
        assert!((m.mean_um - 3.24).abs() < 1e-4);
        assert!(m.std_px.abs() < 1e-5);
    }
    assert!(r.displacement_mad_px.unwrap() < 1e-12);
    // Brute-force alignment MAD with the injected displacement.
    for (c, m) in cases.iter().zip(&r.cases) {
        let d = c.injected.as_ref().unwrap().values();
        for k in 0..c.truth.k() {
            let mut s = 0.0;
            for b in 0..c.truth.n_b() - 1 {
                for a in 0..c.truth.n_a() {
                    s += ((c.truth.at(k, b, a) - d[b]) - (c.truth.at(k, b + 1, a) - d[b + 1])).abs();
                }
            }
            let oracle = s / ((c.truth.n_b() - 1) * c.truth.n_a()) as f64;
            assert!((m.alignment_mad_px[k] - oracle).abs() < 1e-9);
        }
    }
    let k = cases[0].truth.k() as u64;
    assert_eq!(r.histogram.total(), 2 * k * 3 * 32);
    assert!(out.join("metrics_cases.csv").exists() && out.join("metrics_histogram.csv").exists());

    let plots = tmp.path().join("plots");
    let o = octsurf(&[
        "plot",
        "--report",
        out.join("metrics.json").to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(plots.join("histogram.png").exists() && plots.join("histogram.csv").exists());
    assert!(plots.join(format!("depth_{}_OBM.png", cases[0].id)).exists());

    let cmp = tmp.path().join("cmp");
    let report = out.join("metrics.json");
    let o = octsurf(&["compare", "--reports", report.to_str().unwrap(), report.to_str().unwrap(), "--out", cmp.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = std::fs::read_to_string(cmp.join("comparison.md")).unwrap();
    assert!(md.starts_with("| Methods | fixture | fixture |"));
    assert!(md.contains("Overall"));
}

#[test]
fn train_predict_evaluate_no_smooth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    let o = octsurf(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--override",
        "mode=no_smooth",
        "--override",
        "epochs=2",
        "--override",
        "patch={\"rows\":48,\"a\":32,\"b\":4}",
        "--override",
        "model.levels=3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "smooth_s").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let v: f64 = row.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
    let resolved: serde_json::Value = read_json(&run.join("config.resolved.json")).unwrap();
    assert_eq!(resolved["loss"]["lambda"], serde_json::json!([0.0, 0.0, 0.0]));

    let pred = tmp.path().join("pred");
    let o = octsurf(&[
        "predict",
        "--checkpoint",
        run.join("checkpoint_best").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let idx = PredictionIndex::read(&pred.join(PREDICTIONS_FILE)).unwrap();
    assert_eq!(idx.cases.len(), 2);
    assert_eq!(idx.mode, TrainMode::NoSmooth);
    let ev = tmp.path().join("eval");
    let o = octsurf(&["evaluate", "--pred", pred.to_str().unwrap(), "--truth", data.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: MetricsReport = read_json(&ev.join("metrics.json")).unwrap();
    assert_eq!(r.run, "no_smooth");
    assert!(r.overall.mean_px.is_finite());
}

#[test]
fn preprocess_writes_flattened_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = tmp.path().join("flat");
    let o = octsurf(&["preprocess", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cases = load_cases(&out.join("manifest.json"), None).unwrap();
    assert_eq!(cases.len(), 4);
    assert!(out.join("records/case_0000.json").exists());
    let pre: std::collections::BTreeMap<String, Vec<f64>> = read_json(&out.join("pre_align.json")).unwrap();
    assert_eq!(pre["case_0002"].len(), 4);
}
