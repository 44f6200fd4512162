//! Reference-image preparation: point annotations, the rough distractor
//! mask, inpainting and latent subject fusion.

mod annotation;
mod fusion;
mod mask;
mod pipeline;
mod similarity;

pub use annotation::{Point, PointAnnotation};
pub use fusion::{
    check_fusion_inputs, fuse_on_tape, fuse_subject_latent, FusionLayout, FusionWeights, Provenance, SubjectLatent,
};
pub use mask::{
    component_of, dilate, expand_to_pixel_mask, otsu_binarize, otsu_edge, otsu_threshold, prune_components, PatchMask,
    PixelMask, PruneOutcome, OTSU_BINS,
};
pub use pipeline::{
    build_subject_input, extract_negative_mask, write_mask_artifacts, MaskArtifacts, MaskPolarity, MaskSidecar,
    NegativeMask, RngrConfig, SubjectInput, MASK_SCHEMA_VERSION,
};
pub use similarity::{
    combine_similarity, gaussian_kernel, gaussian_smooth, patch_similarity, point_to_patch, rescale_cosine, Polarity,
    SimilarityMap,
};
