//! Negative-subject mask for a synthetic two-blob scene.
//!
//! cargo run -p p3s --example mask_preview -- [out_dir]

use std::path::PathBuf;

use p3s::backbone::{Backbone, ToyBackboneConfig};
use p3s::fixtures::two_blob_scene;
use p3s::rngr::RngrConfig;
use p3s::service::preview_mask;

fn main() -> p3s::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/examples/mask_preview".into());
    std::fs::create_dir_all(&out).map_err(|e| p3s::Error::io(&out, e))?;

    let backbone = Backbone::toy(&ToyBackboneConfig::default())?;
    let scene = two_blob_scene(16);
    let preview = preview_mask(&scene.image, &scene.annotation, &backbone, &RngrConfig::default())?;

    let bits = preview.mask.pixel.bits();
    for y in 0..bits.nrows() {
        let row: String = (0..bits.ncols()).map(|x| if bits[[y, x]] { '#' } else { '.' }).collect();
        println!("{row}");
    }
    println!("{} of {} pixels masked", preview.mask.pixel.count(), bits.len());

    scene.image.save_png(out.join("scene.png"))?;
    for (name, bytes) in [("mask.png", &preview.mask_png), ("overlay.png", &preview.overlay_png)] {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| p3s::Error::io(&path, e))?;
    }
    std::fs::write(out.join("mask.json"), serde_json::to_string_pretty(&preview.sidecar)?)
        .map_err(|e| p3s::Error::io(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}
