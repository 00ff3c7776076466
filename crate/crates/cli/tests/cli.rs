mod common;

use std::fs;
use std::path::Path;

use common::{blank, cli, models, ok, s, write_png};
use edgedet::postprocess::{parse_jsonl, write_jsonl, DetectionRecord};
use edgedet_cli::{EXIT_DATA, EXIT_NO_FIT, EXIT_OK, EXIT_USAGE};
use serde::Deserialize;

#[test]
fn help_and_usage_errors() {
    assert_eq!(cli(&["--help"]).code, EXIT_OK);
    assert_eq!(cli(&["analyze", "--bogus"]).code, EXIT_USAGE);
    let o = cli(&["analyze"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.contains("--model"));
    assert_eq!(
        cli(&["analyze", "--random-weights", "1", "--input-size", "100"]).code,
        EXIT_USAGE
    );
}

#[test]
fn analyze_reports_and_judges_budgets() {
    let m = models();
    let o = cli(&["analyze", "--model", s(&m.int8)]);
    assert_eq!(o.code, EXIT_OK);
    assert!(
        o.stdout.contains("ram        294912 B (288.00 KiB)"),
        "{}",
        o.stdout
    );
    assert!(o.stdout.contains("fits: yes"));
    assert_eq!(o.stdout, cli(&["analyze", "--model", s(&m.int8)]).stdout);

    let o = cli(&["analyze", "--model", s(&m.int8), "--ram-budget", "200000"]);
    assert_eq!(o.code, EXIT_NO_FIT);
    assert!(o.stdout.contains("fits: no"));

    let json = ok(&["--json", "analyze", "--model", s(&m.int8)]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["arena_bytes"], 294912);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!("model = {:?}\n[budgets]\nram = 100000\n", s(&m.int8)),
    )
    .unwrap();
    assert_eq!(cli(&["--config", s(&cfg), "analyze"]).code, EXIT_NO_FIT);
    assert_eq!(
        cli(&["--config", s(&cfg), "analyze", "--ram-budget", "400000"]).code,
        EXIT_OK
    );
    fs::write(&cfg, "conf_thresh = 2.0\n").unwrap();
    assert_eq!(
        cli(&["--config", s(&cfg), "analyze", "--random-weights", "1"]).code,
        EXIT_USAGE
    );
}

#[test]
fn corrupted_model_is_a_data_error_without_report() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.edm");
    let mut bytes = fs::read(&m.int8).unwrap();
    bytes[0] = b'X';
    fs::write(&bad, &bytes).unwrap();
    let o = cli(&["analyze", "--model", s(&bad)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stdout.is_empty());
    assert!(o.stderr.contains("byte 0"), "{}", o.stderr);

    fs::write(&bad, &fs::read(&m.int8).unwrap()[..100]).unwrap();
    let o = cli(&["analyze", "--model", s(&bad)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stdout.is_empty());
}

#[test]
fn quantized_flash_is_about_a_quarter() {
    let m = models();
    let flash = |p: &Path| {
        // the float model exceeds the FLASH budget, so only the report matters here
        let o = cli(&["--json", "analyze", "--model", s(p)]);
        let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
        v["flash_bytes"].as_f64().unwrap()
    };
    let r = flash(&m.int8) / flash(&m.float);
    assert!((0.24..0.28).contains(&r), "{r}");
}

#[test]
fn quantize_needs_calibration_images() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("q.edm");
    let o = cli(&[
        "quantize",
        "--model",
        s(&m.float),
        "--calibration-dir",
        s(&empty),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("no PNG or PPM"));
    assert!(!out.exists());
    assert_eq!(
        cli(&["quantize", "--model", s(&m.float), "--out", s(&out)]).code,
        EXIT_USAGE
    );
    assert_eq!(
        cli(&[
            "quantize",
            "--model",
            s(&m.int8),
            "--synthetic",
            "2",
            "--out",
            s(&out)
        ])
        .code,
        EXIT_USAGE
    );

    let text = ok(&[
        "quantize",
        "--model",
        s(&m.float),
        "--calibration-dir",
        s(&m.scenes),
        "--out",
        s(&out),
    ]);
    assert!(text.contains("3 images"));
}

#[test]
fn prune_ratio_zero_is_byte_identical() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.edm");
    ok(&[
        "prune",
        "--model",
        s(&m.float),
        "--ratio",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&m.float).unwrap());
}

#[test]
fn prune_reports_flash_delta() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.edm");
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "prune",
        "--model",
        s(&m.float),
        "--ratio",
        "0.1",
        "--out",
        s(&out),
    ]))
    .unwrap();
    let d = v["flash_reduction"].as_f64().unwrap();
    assert!((0.03..=0.08).contains(&d), "{d}");
    assert_eq!(v["ram_before_bytes"], v["ram_after_bytes"]);
    assert_eq!(
        cli(&[
            "prune",
            "--model",
            s(&m.int8),
            "--ratio",
            "0.1",
            "--out",
            s(&out)
        ])
        .code,
        EXIT_USAGE
    );
    assert_eq!(
        cli(&[
            "prune",
            "--model",
            s(&m.float),
            "--ratio",
            "1",
            "--out",
            s(&out)
        ])
        .code,
        EXIT_USAGE
    );
}

#[test]
fn infer_is_deterministic_and_respects_confidence() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("blank.png");
    write_png(&img, &blank(320, 240));
    let a = ok(&["infer", "--model", s(&m.int8), s(&img)]);
    let b = ok(&["infer", "--model", s(&m.int8), s(&img)]);
    assert_eq!(a, b);
    for r in parse_jsonl(&a).unwrap() {
        assert_eq!(r.image, "blank");
        assert!(r.confidence >= 0.25);
        assert!(r.x1 >= 0.0 && r.x2 <= 320.0 && r.y1 >= 0.0 && r.y2 <= 240.0);
    }
    let none = dir.path().join("none.jsonl");
    ok(&[
        "infer",
        "--model",
        s(&m.int8),
        "--conf",
        "1.0",
        s(&img),
        "--out",
        s(&none),
    ]);
    assert_eq!(fs::read(&none).unwrap(), b"");
}

#[test]
fn infer_writes_annotated_svg() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("a.svg");
    let img = m.scenes.join("scene_0000.png");
    let lines = ok(&[
        "infer",
        "--model",
        s(&m.float),
        "--conf",
        "0.5",
        s(&img),
        "--svg",
        s(&svg),
    ]);
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert!(text.contains("data:image/png;base64,"));
    assert_eq!(text.matches("<rect").count(), lines.lines().count());
}

#[test]
fn infer_rejects_unsupported_images() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let gif = dir.path().join("x.gif");
    fs::write(&gif, b"GIF89a\x01\x00\x01\x00\x00\x00\x00;").unwrap();
    let o = cli(&["infer", "--model", s(&m.int8), s(&gif)]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("PNG, PPM"), "{}", o.stderr);
}

#[test]
fn ppm_and_png_give_the_same_detections() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let img = image::open(m.scenes.join("scene_0001.png"))
        .unwrap()
        .to_rgb8();
    let ppm = dir.path().join("scene_0001.ppm");
    img.save_with_format(&ppm, image::ImageFormat::Pnm).unwrap();
    let a = ok(&[
        "infer",
        "--model",
        s(&m.int8),
        s(&m.scenes.join("scene_0001.png")),
    ]);
    let b = ok(&["infer", "--model", s(&m.int8), s(&ppm)]);
    assert_eq!(a, b);
}

#[derive(Deserialize)]
struct Item {
    class_id: usize,
    #[serde(default)]
    confidence: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct MicroImage {
    image: String,
    truths: Vec<Item>,
    predictions: Vec<Item>,
}

#[derive(Deserialize)]
struct Micro {
    image_size: u32,
    images: Vec<MicroImage>,
}

/// Lay the hand-computed micro dataset out on disk; returns the
/// predictions file.
fn micro_dataset(root: &Path) -> std::path::PathBuf {
    let m: Micro =
        serde_json::from_str(include_str!("../../core/tests/data/micro_dataset.json")).unwrap();
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("labels")).unwrap();
    let n = m.image_size as f32;
    let mut records = Vec::new();
    for im in &m.images {
        write_png(
            &root.join("images").join(format!("{}.png", im.image)),
            &blank(m.image_size, m.image_size),
        );
        let mut labels = String::new();
        for t in &im.truths {
            let [x1, y1, x2, y2] = t.bbox;
            labels.push_str(&format!(
                "{} {} {} {} {}\n",
                t.class_id,
                (x1 + x2) / 2.0 / n,
                (y1 + y2) / 2.0 / n,
                (x2 - x1) / n,
                (y2 - y1) / n
            ));
        }
        fs::write(
            root.join("labels").join(format!("{}.txt", im.image)),
            labels,
        )
        .unwrap();
        for p in &im.predictions {
            let [x1, y1, x2, y2] = p.bbox;
            records.push(DetectionRecord {
                image: im.image.clone(),
                class_id: p.class_id,
                confidence: p.confidence,
                x1,
                y1,
                x2,
                y2,
            });
        }
    }
    let preds = root.join("preds.jsonl");
    fs::write(&preds, write_jsonl(&records)).unwrap();
    preds
}

#[test]
fn eval_micro_dataset_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let preds = micro_dataset(dir.path());
    let out_dir = dir.path().join("out");
    let text = ok(&[
        "eval",
        "--dataset",
        s(dir.path()),
        "--predictions",
        s(&preds),
        "--out-dir",
        s(&out_dir),
    ]);
    let golden = include_str!("../../core/tests/data/micro_report.golden.txt");
    assert!(text.contains(golden), "{text}");
    assert!(text.contains("operating point: confidence >= 0.6"));
    assert_eq!(
        fs::read_to_string(out_dir.join("report.txt")).unwrap(),
        golden
    );
    assert!(fs::read_to_string(out_dir.join("pr_curve.csv"))
        .unwrap()
        .starts_with("class,recall,precision\n"));
    for c in ["person", "vehicle"] {
        assert!(fs::read_to_string(out_dir.join(format!("pr_{c}.svg")))
            .unwrap()
            .starts_with("<svg"));
    }
    serde_json::from_str::<serde_json::Value>(
        &fs::read_to_string(out_dir.join("report.json")).unwrap(),
    )
    .unwrap();
}

#[test]
fn eval_echoes_manifest_splits() {
    let dir = tempfile::tempdir().unwrap();
    let preds = micro_dataset(dir.path());
    let manifest = dir.path().join("manifest.toml");
    fs::write(&manifest, "train = 7682\nval = 1470\ntest = 1577\n").unwrap();
    let text = ok(&[
        "eval",
        "--dataset",
        s(dir.path()),
        "--predictions",
        s(&preds),
        "--manifest",
        s(&manifest),
    ]);
    assert!(
        text.starts_with("splits  train/val/test 7682/1470/1577\n"),
        "{text}"
    );
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "eval",
        "--dataset",
        s(dir.path()),
        "--predictions",
        s(&preds),
        "--manifest",
        s(&manifest),
    ]))
    .unwrap();
    assert_eq!(v["splits"]["train"], 7682);
    assert_eq!(v["splits"]["test"], 1577);
}

#[test]
fn eval_lists_orphan_files() {
    let dir = tempfile::tempdir().unwrap();
    let preds = micro_dataset(dir.path());
    fs::remove_file(dir.path().join("labels/img1.txt")).unwrap();
    fs::write(dir.path().join("labels/extra.txt"), "").unwrap();
    let o = cli(&[
        "eval",
        "--dataset",
        s(dir.path()),
        "--predictions",
        s(&preds),
    ]);
    assert_eq!(o.code, EXIT_DATA);
    assert!(o.stderr.contains("img1.png"), "{}", o.stderr);
    assert!(o.stderr.contains("extra.txt"), "{}", o.stderr);
}

#[test]
fn eval_with_empty_labels_is_all_false_positives() {
    let dir = tempfile::tempdir().unwrap();
    let preds = micro_dataset(dir.path());
    for e in fs::read_dir(dir.path().join("labels")).unwrap() {
        fs::write(e.unwrap().path(), "").unwrap();
    }
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "eval",
        "--dataset",
        s(dir.path()),
        "--predictions",
        s(&preds),
    ]))
    .unwrap();
    for row in v["report"]["rows"].as_array().unwrap() {
        assert_eq!(row["ap50"], 0.0);
        assert_eq!(row["ap50_95"], 0.0);
        assert_eq!(row["precision"], 0.0);
    }
}

#[test]
fn eval_on_predictions_equals_eval_on_model() {
    let m = models();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("labels")).unwrap();
    fs::create_dir_all(root.join("images")).unwrap();
    for k in 0..3 {
        let name = format!("scene_{k:04}");
        fs::copy(
            m.scenes.join(format!("{name}.png")),
            root.join("images").join(format!("{name}.png")),
        )
        .unwrap();
        fs::write(
            root.join("labels").join(format!("{name}.txt")),
            "0 0.5 0.5 0.3 0.4\n1 0.2 0.3 0.1 0.1\n",
        )
        .unwrap();
    }
    let preds = root.join("p.jsonl");
    ok(&[
        "infer",
        "--model",
        s(&m.int8),
        "--conf",
        "0.4",
        s(&root.join("images")),
        "--out",
        s(&preds),
    ]);
    let from_file = ok(&["eval", "--dataset", s(root), "--predictions", s(&preds)]);
    let from_model = ok(&[
        "eval",
        "--dataset",
        s(root),
        "--model",
        s(&m.int8),
        "--conf",
        "0.4",
    ]);
    assert_eq!(from_file, from_model);
    let o = cli(&[
        "eval",
        "--dataset",
        s(root),
        "--model",
        s(&m.int8),
        "--predictions",
        s(&preds),
    ]);
    assert_eq!(o.code, EXIT_USAGE);
}

#[test]
fn bench_single_run_mean_is_that_run() {
    let m = models();
    let v: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "bench",
        "--model",
        s(&m.int8),
        "--runs",
        "1",
    ]))
    .unwrap();
    let runs = v["runs_ms"].as_array().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0], v["mean_ms"]);
    assert_eq!(v["model_id"].as_str().unwrap().len(), 64);
    assert_eq!(
        cli(&["bench", "--model", s(&m.int8), "--runs", "0"]).code,
        EXIT_USAGE
    );
}

#[test]
fn bench_default_runs_ten_times() {
    let m = models();
    let text = ok(&["bench", "--model", s(&m.int8)]);
    assert!(text.contains("run 10"));
    assert!(!text.contains("run 11"));
}
