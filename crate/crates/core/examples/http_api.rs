//! Drives the HTTP API in-process: stores an annotation, previews its mask
//! and polls a training job to completion.

use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::Request;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use p3s::fixtures::two_blob_scene;
use p3s::service::http::{build_state, router, ServerConfig};
use p3s::service::CommandContext;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Value {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_default()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() -> p3s::Result<()> {
    let dir = std::env::temp_dir().join("p3s-http-example");
    let scene = two_blob_scene(16);
    std::fs::create_dir_all(&dir).map_err(|e| p3s::Error::io(&dir, e))?;
    scene.image.save_png(dir.join("two_blob.png"))?;
    scene.annotation.save(dir.join("two_blob.json"))?;

    let ctx = CommandContext { asset_root: dir.clone(), force_toy: true };
    let app = router(build_state(ServerConfig::new(&dir, ctx))?);

    let stored = call(&app, "POST", "/annotations", Some(serde_json::to_value(&scene.annotation)?)).await;
    println!("  annotation id {}", stored["id"]);

    let png = B64.encode(scene.image.to_png_bytes()?);
    let preview = call(&app, "POST", "/mask-preview", Some(json!({"annotation": scene.annotation, "image_png_base64": png}))).await;
    println!("  mask artifact {}", preview["mask_artifact"]);

    let config = json!({
        "references": [{"image": "two_blob.png", "annotation": "two_blob.json"}],
        "epochs": 5,
        "learning_rate": 1e-3,
        "class_noun": "blob",
    });
    let job = call(&app, "POST", "/jobs", Some(json!({"kind": "train", "config": config.clone()}))).await;
    let conflict = call(&app, "POST", "/jobs", Some(json!({"kind": "train", "config": config}))).await;
    println!("  second job: {}", conflict["error"]);
    let id = job["id"].as_str().unwrap_or_default().to_string();
    loop {
        let j = call(&app, "GET", &format!("/jobs/{id}"), None).await;
        println!("  {} {:.0}%", j["status"], 100.0 * j["progress"].as_f64().unwrap_or(0.0));
        if j["status"] == "done" || j["status"] == "failed" {
            for a in j["artifacts"].as_array().into_iter().flatten() {
                println!("  artifact {} {}", a["name"], a["id"]);
            }
            break;
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    Ok(())
}
