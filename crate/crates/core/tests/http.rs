use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use p3s::fixtures::two_blob_scene;
use p3s::image::decode_mask_png;
use p3s::service::http::{build_state, router, ServerConfig};
use p3s::service::CommandContext;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path, start_worker: bool) -> Router {
    let ctx = CommandContext { asset_root: dir.to_path_buf(), force_toy: true };
    let config = ServerConfig { start_worker, ..ServerConfig::new(dir, ctx) };
    router(build_state(config).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn preview_body() -> Value {
    let scene = two_blob_scene(16);
    json!({
        "annotation": scene.annotation,
        "image_png_base64": B64.encode(scene.image.to_png_bytes().unwrap()),
    })
}

#[tokio::test]
async fn mask_preview_returns_overlay_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    let scene = two_blob_scene(16);
    let (status, body) = call(&app, "POST", "/mask-preview", Some(preview_body())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v = json_of(&body);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["grid"], 8);
    let mask = decode_mask_png(&B64.decode(v["mask_png_base64"].as_str().unwrap()).unwrap()).unwrap();
    let b = scene.blob_b;
    assert!((b.y0..b.y1).all(|y| (b.x0..b.x1).all(|x| mask[[y, x]])));
    let overlay = p3s::image::Image::decode(&B64.decode(v["overlay_png_base64"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(overlay.dims(), (16, 16));

    // Pure: a second request yields the same bytes and the artifact is served.
    let (_, again) = call(&app, "POST", "/mask-preview", Some(preview_body())).await;
    assert_eq!(json_of(&again)["mask_png_base64"], v["mask_png_base64"]);
    let id = v["mask_artifact"].as_str().unwrap();
    let (status, png) = call(&app, "GET", &format!("/artifacts/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(B64.encode(png), v["mask_png_base64"].as_str().unwrap());
}

#[tokio::test]
async fn invalid_annotations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    let mut ann = serde_json::to_value(two_blob_scene(16).annotation).unwrap();
    let (status, body) = call(&app, "POST", "/annotations", Some(ann.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let id = json_of(&body)["id"].as_str().unwrap().to_string();
    assert!(dir.path().join(format!("annotations/{id}.json")).exists());

    ann["positive"] = json!({"x": 99, "y": 0});
    let (status, body) = call(&app, "POST", "/annotations", Some(ann)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v = json_of(&body);
    assert_eq!(v["error"], "point_out_of_bounds");
    assert_eq!(v["schema_version"], 1);

    let (status, _) = call(&app, "POST", "/annotations", Some(json!({"image": "x.png"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn second_training_job_conflicts_and_unknown_job_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    let job = json!({"kind": "train", "config": {"epochs": 1}});
    let (status, body) = call(&app, "POST", "/jobs", Some(job.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let first = json_of(&body);
    assert_eq!(first["status"], "queued");
    let (status, body) = call(&app, "POST", "/jobs", Some(job)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json_of(&body)["schema_version"], 1);

    let (status, body) = call(&app, "GET", &format!("/jobs/{}", first["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["kind"], "train");
    let (status, _) = call(&app, "GET", "/jobs/job-999999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/artifacts/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn training_job_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let scene = two_blob_scene(16);
    scene.image.save_png(dir.path().join("two_blob.png")).unwrap();
    scene.annotation.save(dir.path().join("two_blob.json")).unwrap();
    let app = app(dir.path(), true);
    let config = json!({
        "references": [{"image": "two_blob.png", "annotation": "two_blob.json"}],
        "epochs": 2,
        "learning_rate": 1e-3,
    });
    let (status, body) = call(&app, "POST", "/jobs", Some(json!({"kind": "train", "config": config}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = json_of(&body)["id"].as_str().unwrap().to_string();
    let mut job = Value::Null;
    for _ in 0..600 {
        let (_, body) = call(&app, "GET", &format!("/jobs/{id}"), None).await;
        job = json_of(&body);
        if job["status"] == "done" || job["status"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["progress"], 1.0);
    let artifacts = job["artifacts"].as_array().unwrap();
    assert!(artifacts.iter().any(|a| a["name"] == "checkpoint.json"));
    let ckpt = artifacts.iter().find(|a| a["name"] == "checkpoint.json").unwrap();
    let (status, bytes) = call(&app, "GET", &format!("/artifacts/{}", ckpt["id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes.len() as u64, ckpt["bytes"].as_u64().unwrap());

    // A new training job is accepted once the first has finished.
    let (status, _) = call(&app, "POST", "/jobs", Some(json!({"kind": "train", "config": {"epochs": 0}}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
}
