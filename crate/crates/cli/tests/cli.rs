use std::path::Path;
use std::process::{Command, Output};

use p3s::fixtures::two_blob_scene;
use p3s::image::decode_mask_png;
use serde_json::{json, Value};

fn p3s(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p3s"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, value: &Value) {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn setup() -> (tempfile::TempDir, p3s::fixtures::TwoBlobScene) {
    let dir = tempfile::tempdir().unwrap();
    let scene = two_blob_scene(16);
    scene.image.save_png(dir.path().join("two_blob.png")).unwrap();
    scene.annotation.save(dir.path().join("annotation.json")).unwrap();
    (dir, scene)
}

#[test]
fn mask_preview_covers_the_distractor() {
    let (dir, scene) = setup();
    let d = dir.path();
    write(d, "mask.json", &json!({ "image": "two_blob.png", "annotation": "annotation.json", "output_dir": "mask" }));
    let out = p3s(d, &["mask-preview", "--config", "mask.json", "--toy-backbone"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["artifacts"].as_array().unwrap().len(), 3);
    let bits = decode_mask_png(&std::fs::read(d.join("mask/mask.png")).unwrap()).unwrap();
    let b = scene.blob_b;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            assert!(bits[[y, x]], "blob B pixel ({y}, {x}) not masked");
        }
    }
    let p = scene.annotation.positive;
    assert!(!bits[[p.y, p.x]]);
    assert!(d.join("mask/mask_overlay.png").exists());
    assert!(d.join("mask/mask.json").exists());
}

#[test]
fn single_subject_and_out_of_bounds_points() {
    let (dir, _) = setup();
    let d = dir.path();
    write(d, "single.json", &json!({ "image": "two_blob.png", "positive": {"x": 3, "y": 7} }));
    let out = p3s(d, &["mask-preview", "--config", "single.json", "--toy-backbone"]);
    assert!(out.status.success());
    let report = stdout_json(&out);
    assert!(report["notes"][0].as_str().unwrap().contains("single-subject"));
    assert_eq!(report["summary"]["mask_pixels"], 0);

    write(d, "oob.json", &json!({ "image": "two_blob.png", "positive": {"x": 30, "y": 7}, "negative": {"x": 1, "y": 1} }));
    let out = p3s(d, &["mask-preview", "--config", "oob.json", "--toy-backbone"]);
    assert!(!out.status.success());
    assert_eq!(stdout_json(&out)["error"], "point_out_of_bounds");
}

#[test]
fn malformed_config_names_the_field() {
    let (dir, _) = setup();
    let d = dir.path();
    write(d, "bad.json", &json!({ "epochs": "two" }));
    let out = p3s(d, &["train", "--config", "bad.json", "--toy-backbone"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stdout_json(&out);
    assert_eq!(err["error"], "config_error");
    assert_eq!(err["field"], "epochs");

    write(d, "zero.json", &json!({ "epochs": 0 }));
    let out = p3s(d, &["train", "--config", "zero.json", "--toy-backbone"]);
    assert_eq!(stdout_json(&out)["field"], "epochs");
}

#[test]
fn end_to_end_train_then_generate() {
    let (dir, _) = setup();
    let d = dir.path();
    write(
        d,
        "train.json",
        &json!({
            "references": [{ "image": "two_blob.png", "annotation": "annotation.json" }],
            "epochs": 2,
            "learning_rate": 1e-3,
            "class_noun": "blob",
            "output_dir": "run",
        }),
    );
    let out = p3s(d, &["train", "--config", "train.json", "--toy-backbone"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(d.join("run/checkpoint.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap().lines().count(), 2);

    write(
        d,
        "generate.json",
        &json!({ "checkpoint": "run/checkpoint.json", "prompt": "a photo of [V] blob", "seeds": [0], "steps": 10, "output_dir": "gen" }),
    );
    let out = p3s(d, &["generate", "--config", "generate.json", "--toy-backbone"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(d.join("gen/seed_0.png").exists());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("gen/seed_0.json")).unwrap()).unwrap();
    assert_eq!(manifest["weights"].as_array().unwrap().len(), 10);
}

#[test]
fn evaluate_on_an_empty_class_dir_is_a_protocol_error() {
    let (dir, _) = setup();
    let d = dir.path();
    std::fs::create_dir(d.join("empty")).unwrap();
    write(
        d,
        "eval.json",
        &json!({ "classes": [{ "name": "blob", "checkpoint": "missing.json", "references": "empty" }], "images_per_prompt": 1 }),
    );
    let out = p3s(d, &["evaluate", "--config", "eval.json", "--toy-backbone"]);
    assert!(!out.status.success());
    assert_eq!(stdout_json(&out)["error"], "protocol_error");
}
