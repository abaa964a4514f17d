//! Whole-slide processing: tissue detection, tiling, tile embedding and the
//! synthetic slide generator.

pub mod embed;
pub mod grid;
pub mod synth;
pub mod tissue;

pub use embed::{embed_slide, embed_tile, embed_tiles, ImageEncoder, ToyImageEncoder, PAD_COLOR};
pub use grid::{classification_tile_grid, TileInclusion};
pub use synth::{
    caption_for, cell_color, class_vocabulary, classification_slide, generate_rois, render_roi,
    segmentation_slide, Appearance, Intensity, Region, RoiSample, RoiSpec, Scale, Shape,
    SyntheticSlideSpec, TissueClass,
};
pub use tissue::{
    connected_components, downsample, rgb_to_hsv, segment_slide, segment_tissue, TissueMask,
    TissueParams,
};
