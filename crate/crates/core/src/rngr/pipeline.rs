use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::annotation::PointAnnotation;
use super::fusion::{fuse_subject_latent, FusionLayout, Provenance, SubjectLatent};
use super::mask::{expand_to_pixel_mask, otsu_binarize, prune_components, PatchMask, PixelMask};
use super::similarity::{combine_similarity, gaussian_smooth, patch_similarity, point_to_patch, Polarity};
use crate::backbone::{Backbone, LatentImage, ParamStore, PatchEncoding};
use crate::error::{Error, Result};
use crate::image::{encode_mask_png, overlay_mask, Image};

/// Which subject the combined similarity map scores as foreground.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolarity {
    /// `r(M_N) * (1 - r(M_P))`, pruned at the negative point: the mask
    /// covers the distractor.
    #[default]
    NegativeForeground,
    /// `r(M_P) * (1 - r(M_N))`, pruned at the positive point; everything
    /// outside the selected subject is masked.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RngrConfig {
    /// Gaussian sigma in patch units.
    pub sigma: f64,
    pub dilation_patches: usize,
    pub polarity: MaskPolarity,
    pub inpaint_prompt: String,
    pub inpaint_seed: u64,
}

impl Default for RngrConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            dilation_patches: 1,
            polarity: MaskPolarity::NegativeForeground,
            inpaint_prompt: "background".into(),
            inpaint_seed: 0,
        }
    }
}

/// Every intermediate of the mask pipeline, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeMask {
    pub pixel: PixelMask,
    /// Final patch-resolution region before dilation.
    pub patch: PatchMask,
    pub combined: Option<Array2<f64>>,
    pub smoothed: Option<Array2<f64>>,
    pub positive_patch: (usize, usize),
    pub negative_patch: Option<(usize, usize)>,
    pub single_subject: bool,
    pub warnings: Vec<String>,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Derives the rough distractor mask from the two annotation points.
pub fn extract_negative_mask(annotation: &PointAnnotation, enc: &PatchEncoding, cfg: &RngrConfig) -> Result<NegativeMask> {
    annotation.validate()?;
    let dims = annotation.image_dims();
    if enc.source_dims != dims {
        return Err(Error::Dimension(format!(
            "annotation is for {dims:?} but the encoding came from {:?}",
            enc.source_dims
        )));
    }
    let g = enc.grid_size();
    let positive_patch = point_to_patch(annotation.positive, dims, g)?;
    let Some(negative) = annotation.negative else {
        return Ok(NegativeMask {
            pixel: PixelMask::empty(dims),
            patch: PatchMask::new(Array2::from_elem((g, g), false)),
            combined: None,
            smoothed: None,
            positive_patch,
            negative_patch: None,
            single_subject: true,
            warnings: vec!["single-subject annotation: nothing to inpaint".into()],
        });
    };
    let negative_patch = point_to_patch(negative, dims, g)?;
    if negative_patch == positive_patch
        || cosine(enc.patch(positive_patch.0, positive_patch.1), enc.patch(negative_patch.0, negative_patch.1))
            >= 1.0 - 1e-9
    {
        return Err(Error::DegenerateMap(
            "positive and negative points are indistinguishable to the encoder".into(),
        ));
    }

    let m_p = patch_similarity(enc, positive_patch, Polarity::Positive)?;
    let m_n = patch_similarity(enc, negative_patch, Polarity::Negative)?;
    let mut warnings: Vec<String> = m_p.warnings.iter().chain(&m_n.warnings).cloned().collect();
    let (combined, seed) = match cfg.polarity {
        MaskPolarity::NegativeForeground => (combine_similarity(&m_n, &m_p)?, negative_patch),
        MaskPolarity::Literal => (combine_similarity(&m_p, &m_n)?, positive_patch),
    };
    let smoothed = gaussian_smooth(&combined, cfg.sigma)?;
    let binary = otsu_binarize(&smoothed)?;
    let pruned = prune_components(&binary, seed)?;
    warnings.extend(pruned.warnings);
    let mut region = pruned.mask;
    if cfg.polarity == MaskPolarity::Literal {
        region.cells.mapv_inplace(|b| !b);
    }
    if region.cells[positive_patch] {
        region.cells[positive_patch] = false;
        warnings.push(format!("removed positive patch {positive_patch:?} from the negative mask"));
    }

    let mut pixel = expand_to_pixel_mask(&region, dims, cfg.dilation_patches)?;
    let (h, w) = dims;
    let mut cleared = 0usize;
    for y in 0..h {
        for x in 0..w {
            if (y * g / h, x * g / w) == positive_patch && pixel.bits()[[y, x]] {
                pixel.bits_mut()[[y, x]] = false;
                cleared += 1;
            }
        }
    }
    if cleared > 0 {
        warnings.push(format!("cleared {cleared} dilated pixels inside the positive patch"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(NegativeMask {
        pixel,
        patch: region,
        combined: Some(combined),
        smoothed: Some(smoothed),
        positive_patch,
        negative_patch: Some(negative_patch),
        single_subject: false,
        warnings,
    })
}

/// Everything the trainable copy needs from one reference image.
#[derive(Debug, Clone)]
pub struct SubjectInput {
    pub inpainted: Image,
    /// Latent of the inpainted image.
    pub latent: LatentImage,
    /// Patch encoding of the inpainted image; its hidden state is the
    /// fusion key/value source.
    pub encoding: PatchEncoding,
    pub subject: SubjectLatent,
    pub mask: NegativeMask,
}

/// Sidecar written next to every mask artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub schema_version: u32,
    pub annotation: PointAnnotation,
    pub annotation_id: String,
    pub grid: usize,
    pub config: RngrConfig,
    pub positive_patch: (usize, usize),
    pub negative_patch: Option<(usize, usize)>,
    pub single_subject: bool,
    pub mask_pixels: usize,
    pub patch_mask: Vec<Vec<bool>>,
    pub warnings: Vec<String>,
}

pub const MASK_SCHEMA_VERSION: u32 = 1;

impl MaskSidecar {
    pub fn new(annotation: &PointAnnotation, mask: &NegativeMask, cfg: &RngrConfig) -> Self {
        Self {
            schema_version: MASK_SCHEMA_VERSION,
            annotation: annotation.clone(),
            annotation_id: annotation.id(),
            grid: mask.patch.cells.nrows(),
            config: cfg.clone(),
            positive_patch: mask.positive_patch,
            negative_patch: mask.negative_patch,
            single_subject: mask.single_subject,
            mask_pixels: mask.pixel.count(),
            patch_mask: mask.patch.cells.rows().into_iter().map(|r| r.to_vec()).collect(),
            warnings: mask.warnings.clone(),
        }
    }
}

/// Paths of the files written by [`write_mask_artifacts`].
#[derive(Debug, Clone)]
pub struct MaskArtifacts {
    pub mask_png: PathBuf,
    pub overlay_png: PathBuf,
    pub sidecar_json: PathBuf,
}

/// Writes the 1-bit mask, a red overlay and the JSON sidecar.
pub fn write_mask_artifacts(
    dir: &Path,
    stem: &str,
    image: &Image,
    annotation: &PointAnnotation,
    mask: &NegativeMask,
    cfg: &RngrConfig,
) -> Result<MaskArtifacts> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mask_png = dir.join(format!("{stem}.png"));
    let overlay_png = dir.join(format!("{stem}_overlay.png"));
    let sidecar_json = dir.join(format!("{stem}.json"));
    std::fs::write(&mask_png, encode_mask_png(mask.pixel.bits())?).map_err(|e| Error::io(&mask_png, e))?;
    overlay_mask(image, mask.pixel.bits(), 0.5)?.save_png(&overlay_png)?;
    let sidecar = serde_json::to_string_pretty(&MaskSidecar::new(annotation, mask, cfg))?;
    std::fs::write(&sidecar_json, sidecar).map_err(|e| Error::io(&sidecar_json, e))?;
    Ok(MaskArtifacts { mask_png, overlay_png, sidecar_json })
}

/// Mask, inpaint, encode and fuse one reference image.
pub fn build_subject_input(
    annotation: &PointAnnotation,
    image: &Image,
    backbone: &Backbone,
    fusion_store: &ParamStore,
    fusion: &FusionLayout,
    cfg: &RngrConfig,
    audit_dir: Option<&Path>,
) -> Result<SubjectInput> {
    if image.dims() != annotation.image_dims() {
        return Err(Error::Dimension(format!(
            "image is {:?}, annotation says {:?}",
            image.dims(),
            annotation.image_dims()
        ))
        .at_stage("annotation"));
    }
    let enc = backbone
        .patch_encoder
        .encode_image_patches(image)
        .map_err(|e| e.at_stage("encode"))?;
    let mask = extract_negative_mask(annotation, &enc, cfg).map_err(|e| e.at_stage("mask"))?;
    let mut mask = mask;
    let inpainted = if mask.pixel.is_empty() {
        image.clone()
    } else {
        let outcome = backbone
            .inpainter
            .inpaint(image, &mask.pixel, &cfg.inpaint_prompt, cfg.inpaint_seed)
            .map_err(|e| e.at_stage("inpaint"))?;
        mask.warnings.extend(outcome.warnings);
        outcome.image
    };
    let latent = backbone.codec.encode(&inpainted).map_err(|e| e.at_stage("latent"))?;
    let inpainted_enc = backbone
        .patch_encoder
        .encode_image_patches(&inpainted)
        .map_err(|e| e.at_stage("encode"))?;
    let provenance = Provenance { annotation_id: annotation.id(), inpaint_seed: cfg.inpaint_seed };
    let subject = fuse_subject_latent(&latent, &inpainted_enc, fusion_store, fusion, provenance)
        .map_err(|e| e.at_stage("fusion"))?;
    if let Some(dir) = audit_dir {
        let stem = format!("subject_{}", annotation.id());
        write_mask_artifacts(dir, &format!("{stem}_mask"), image, annotation, &mask, cfg)
            .map_err(|e| e.at_stage("audit"))?;
        inpainted
            .save_png(dir.join(format!("{stem}_inpainted.png")))
            .map_err(|e| e.at_stage("audit"))?;
    }
    Ok(SubjectInput { inpainted, latent, encoding: inpainted_enc, subject, mask })
}
