use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use protodiv::evaluation::parse_tsv;
use protodiv::mask_refiner::{decode_response, encode_request, threshold, RegionEncoder, StubRegionEncoder};
use protodiv::{Config, Model, Tensor};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_protodiv");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small dataset with every split, 32x32.
fn tiny_data(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "synth", "--out", "ds", "--train", "8", "--val", "4", "--test", "4", "--size", "32", "--seed", "3",
        ],
    );
    dir.join("ds")
}

const QUICK: [&str; 6] = [
    "--set",
    "trainer.epochs=2",
    "--set",
    "trainer.learning_rate=0.01",
    "--set",
    "bank.k=2",
];

fn quick_train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--data", "ds", "--out", out];
    args.extend(QUICK);
    args.extend(extra);
    ok(dir, &args);
}

#[test]
fn missing_dataset_path_is_a_usage_error_naming_the_flag() {
    let t = TempDir::new().unwrap();
    let o = run(t.path(), &["train", "--data", "nowhere", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
}

#[test]
fn config_problems_are_listed_together() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let o = run(
        t.path(),
        &[
            "train",
            "--data",
            "ds",
            "--out",
            "r",
            "--set",
            "bank.nope=1",
            "--set",
            "refiner.alpha=3.0",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("bank.nope") && e.contains("alpha"), "{e}");
}

#[test]
fn unknown_subcommand_exits_with_usage_code() {
    let t = TempDir::new().unwrap();
    assert_eq!(run(t.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_echoes_overrides_and_is_deterministic() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let extra = ["--set", "trainer.lambda_div=0.5", "--set", "bank.k=10", "--seed", "9"];
    quick_train(t.path(), "a", &extra);
    quick_train(t.path(), "b", &extra);

    let echo = Config::load(&t.path().join("a/config.toml")).unwrap();
    assert_eq!(echo.trainer.lambda_div, 0.5);
    assert_eq!(echo.bank.k, 10);
    assert_eq!(echo.trainer.seed, 9);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("a/manifest.json")).unwrap()).unwrap();
    let snapshot = Config::from_toml_str(manifest["config"].as_str().unwrap()).unwrap();
    assert_eq!(snapshot, echo);
    assert_eq!(manifest["seed"], 9);
    for entry in manifest["artifacts"].as_array().unwrap() {
        assert!(t.path().join("a").join(entry[0].as_str().unwrap()).is_file());
    }
    let a = std::fs::read(t.path().join("a/last.ckpt")).unwrap();
    let b = std::fs::read(t.path().join("b/last.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_tables_carry_a_crf_column() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    quick_train(t.path(), "r", &[]);
    for (flag, expect) in [("on", "on"), ("off", "off")] {
        let out = format!("ev_{flag}");
        let text = ok(
            t.path(),
            &[
                "eval",
                "--checkpoint",
                "r/best.ckpt",
                "--data",
                "ds",
                "--crf",
                flag,
                "--out",
                &out,
            ],
        );
        assert!(text.contains("Per-class IoU (%)"));
        let (h, rows) = parse_tsv(&std::fs::read_to_string(t.path().join(&out).join("metrics.tsv")).unwrap());
        let col = h.iter().position(|c| c == "crf").unwrap();
        assert_eq!(rows[0][col], expect);
    }
}

#[test]
fn ground_truth_as_predictions_scores_one_hundred() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    ok(
        t.path(),
        &["eval", "--predictions", "ds/test/mask", "--data", "ds", "--out", "ev"],
    );
    let (h, rows) = parse_tsv(&std::fs::read_to_string(t.path().join("ev/metrics.tsv")).unwrap());
    let col = h.iter().position(|c| c == "mIoU").unwrap();
    assert_eq!(rows[0][col], "100.00");
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    quick_train(t.path(), "r", &[]);
    ok(
        t.path(),
        &[
            "synth",
            "--out",
            "ds3",
            "--train",
            "2",
            "--val",
            "0",
            "--test",
            "2",
            "--size",
            "32",
            "--classes",
            "3",
        ],
    );
    let o = run(t.path(), &["eval", "--checkpoint", "r/last.ckpt", "--data", "ds3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn overfit_toy_run_scores_high_on_its_training_masks() {
    let t = TempDir::new().unwrap();
    ok(
        t.path(),
        &[
            "synth", "--out", "ds", "--train", "40", "--val", "0", "--test", "0", "--seed", "1",
        ],
    );
    ok(
        t.path(),
        &[
            "train",
            "--data",
            "ds",
            "--out",
            "r",
            "--set",
            "trainer.epochs=20",
            "--set",
            "trainer.learning_rate=0.01",
        ],
    );
    ok(
        t.path(),
        &[
            "eval",
            "--checkpoint",
            "r/last.ckpt",
            "--data",
            "ds",
            "--split",
            "train",
            "--crf",
            "off",
            "--out",
            "ev",
        ],
    );
    let (h, rows) = parse_tsv(&std::fs::read_to_string(t.path().join("ev/metrics.tsv")).unwrap());
    let miou: f64 = rows[0][h.iter().position(|c| c == "mIoU").unwrap()].parse().unwrap();
    assert!(miou > 90.0, "mIoU {miou}");
}

fn sweep_args<'a>(out: &'a str, k: &'a str, l: &'a str) -> Vec<&'a str> {
    vec![
        "sweep",
        "--data",
        "ds",
        "--out",
        out,
        "--k",
        k,
        "--lambda-div",
        l,
        "--split",
        "val",
        "--set",
        "trainer.epochs=1",
        "--set",
        "trainer.max_steps=1",
        "--set",
        "trainer.learning_rate=0.01",
    ]
}

fn table(dir: &Path, out: &str) -> (Vec<String>, Vec<Vec<String>>) {
    parse_tsv(&std::fs::read_to_string(dir.join(out).join("sweep.tsv")).unwrap())
}

#[test]
fn sweep_grid_has_one_row_per_cell_and_resumes_from_cache() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let mut interrupted = sweep_args("sw", "3,10", "0.0,0.25,0.5,0.75");
    interrupted.extend(["--max-new-cells", "3"]);
    let out = ok(t.path(), &interrupted);
    assert!(out.contains("5 cells pending"));
    let (_, partial) = table(t.path(), "sw");

    let o = run(t.path(), &sweep_args("sw", "3,10", "0.0,0.25,0.5,0.75"));
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert_eq!(log.matches(": cached").count(), 3, "{log}");
    assert_eq!(log.matches(": training").count(), 5, "{log}");

    let (h, rows) = table(t.path(), "sw");
    assert_eq!(rows.len(), 8);
    let status = h.iter().position(|c| c == "status").unwrap();
    assert!(rows.iter().all(|r| r[status] == "ok"));
    // cached rows are identical to the ones computed before the interruption
    assert_eq!(&rows[..3], &partial[..3]);

    // and to a fresh computation of the same cells
    ok(t.path(), &sweep_args("fresh", "3", "0.0,0.25,0.5"));
    let (_, fresh) = table(t.path(), "fresh");
    assert_eq!(&fresh[..], &rows[..3]);
}

#[test]
fn sweep_marks_failed_cells_and_continues() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let o = run(t.path(), &sweep_args("sw", "0,2", "0.5"));
    assert_eq!(o.status.code(), Some(1));
    let (h, rows) = table(t.path(), "sw");
    let status = h.iter().position(|c| c == "status").unwrap();
    assert_eq!(rows[0][status], "failed");
    assert_eq!(rows[1][status], "ok");
}

#[test]
fn single_cell_sweep_matches_eval() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    ok(t.path(), &sweep_args("sw", "2", "0.5"));
    let (sh, srows) = table(t.path(), "sw");
    let cells: Vec<PathBuf> = std::fs::read_dir(t.path().join("sw/cells"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(cells.len(), 1);
    let ckpt = cells[0].join("best.ckpt");
    ok(
        t.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "ds",
            "--split",
            "val",
            "--out",
            "ev",
        ],
    );
    let (eh, erows) = parse_tsv(&std::fs::read_to_string(t.path().join("ev/metrics.tsv")).unwrap());
    let s0 = sh.iter().position(|c| c == "mIoU").unwrap();
    let e0 = eh.iter().position(|c| c == "mIoU").unwrap();
    assert_eq!(sh[s0..], eh[e0..]);
    assert_eq!(srows[0][s0..], erows[0][e0..]);
}

fn sidecar(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("hm/heatmaps.json")).unwrap()).unwrap()
}

#[test]
fn heatmaps_cover_every_prototype_and_overlays_match_thresholding() {
    let t = TempDir::new().unwrap();
    let data = tiny_data(t.path());
    quick_train(t.path(), "r", &["--set", "bank.k=3"]);
    ok(
        t.path(),
        &[
            "export-heatmaps",
            "--checkpoint",
            "r/last.ckpt",
            "--data",
            "ds",
            "--ids",
            "test00001",
            "--out",
            "hm",
        ],
    );
    let side = sidecar(t.path());
    let entries = side["entries"].as_array().unwrap();
    let (model, _) = Model::load(&t.path().join("r/last.ckpt")).unwrap();
    for c in 0..model.bank.num_classes {
        let name = model.config.class_name(c);
        let protos = entries
            .iter()
            .filter(|e| e["kind"] == "prototype" && e["class"] == name.as_str())
            .count();
        assert_eq!(protos, 3, "class {name}");
    }
    for e in entries {
        assert!(t.path().join("hm").join(e["file"].as_str().unwrap()).is_file());
    }

    let sample = protodiv::data_io::load_dataset(&data, "test")
        .unwrap()
        .into_iter()
        .find(|s| s.id == "test00001")
        .unwrap();
    let pred = model.predict(&sample.image.clone().reshape(&[1, 3, 32, 32])).unwrap();
    let mask = threshold(&pred.fused_cam, model.config.refiner.alpha).unwrap();
    for c in 0..model.bank.num_classes {
        let name = model.config.class_name(c);
        let png = image::open(t.path().join(format!("hm/test00001/mask_{name}.png")))
            .unwrap()
            .to_luma8();
        let exported: Vec<bool> = png.pixels().map(|p| p.0[0] == 255).collect();
        assert_eq!(exported, mask.plane(0, c), "class {name}");
    }
}

#[test]
fn constant_zero_cam_gives_uniform_heatmap_with_zero_range() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let mut model = Model::new(&Config::default()).unwrap();
    // zero heads project every prototype to the origin, so every similarity is 0
    for (w, b) in &mut model.bank.heads {
        *w = Tensor::zeros(w.shape());
        *b = Tensor::zeros(b.shape());
    }
    model
        .save(&t.path().join("zero.ckpt"), serde_json::Value::Null)
        .unwrap();
    ok(
        t.path(),
        &[
            "export-heatmaps",
            "--checkpoint",
            "zero.ckpt",
            "--data",
            "ds",
            "--ids",
            "test00000",
            "--out",
            "hm",
        ],
    );
    let side = sidecar(t.path());
    let e = side["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["kind"] == "class_cam")
        .unwrap()
        .clone();
    assert_eq!(e["range"], serde_json::json!([0.0, 0.0]));
    let png = image::open(t.path().join("hm").join(e["file"].as_str().unwrap()))
        .unwrap()
        .to_luma8();
    assert!(png.pixels().all(|p| p.0[0] == 0));
}

#[test]
fn heatmap_export_rejects_unknown_ids() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    quick_train(t.path(), "r", &[]);
    let o = run(
        t.path(),
        &[
            "export-heatmaps",
            "--checkpoint",
            "r/last.ckpt",
            "--data",
            "ds",
            "--ids",
            "missing",
            "--out",
            "hm",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn stub_server_matches_the_in_process_encoder() {
    let patches: Vec<Tensor> = (0..3)
        .map(|i| Tensor::from_fn(&[3, 8, 8], |j| ((i * 7 + j) % 11) as f64 / 11.0))
        .collect();
    let mut child = Command::new(BIN)
        .args(["region-encoder-stub", "--seed", "5", "--size", "8", "--dim", "6"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        use std::io::Write;
        child
            .stdin
            .take()
            .unwrap()
            .write_all(&encode_request(&patches, 8))
            .unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let got = decode_response(&out.stdout).unwrap();
    let expect = StubRegionEncoder::new(5, 8, 6).encode_batch(&patches).unwrap();
    // the wire format is f32
    assert!(got.max_abs_diff(&expect) < 1e-6);
}

#[test]
fn training_through_the_subprocess_encoder() {
    let t = TempDir::new().unwrap();
    tiny_data(t.path());
    let cmd = format!("refiner.region_encoder_command=[\"{BIN}\", \"region-encoder-stub\"]");
    quick_train(t.path(), "r", &["--set", &cmd, "--set", "trainer.epochs=1"]);
    let log = std::fs::read_to_string(t.path().join("r/train_log.jsonl")).unwrap();
    assert!(!log.is_empty());
}
