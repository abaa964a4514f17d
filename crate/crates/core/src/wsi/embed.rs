use rayon::prelude::*;

use crate::coca::{ToyImage, ToyModel};
use crate::data_io::{EmbeddingStore, RasterImage, SlideManifest, TileCoord};
use crate::embedding::Embedding;
use crate::error::Result;

/// Fill used where a tile extends past the slide edge.
pub const PAD_COLOR: [u8; 3] = [255, 255, 255];

pub trait ImageEncoder: Sync {
    /// Square side, in pixels, that tiles are resized to before encoding.
    fn input_side(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed_image(&self, image: &RasterImage) -> Result<Embedding>;
}

/// Image side of a trained toy model.
pub struct ToyImageEncoder<'a> {
    pub model: &'a ToyModel,
}

impl ImageEncoder for ToyImageEncoder<'_> {
    fn input_side(&self) -> usize {
        self.model.config().image_side
    }

    fn embed_dim(&self) -> usize {
        self.model.config().embed_dim
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding> {
        self.model
            .encode_image(&ToyImage::from_raster(image, self.input_side())?)
    }
}

/// Crops one tile (white padding outside the slide) and encodes it.
pub fn embed_tile(
    slide: &RasterImage,
    coord: &TileCoord,
    encoder: &dyn ImageEncoder,
) -> Result<Embedding> {
    encoder.embed_image(&slide.crop(coord.x, coord.y, coord.side as usize, PAD_COLOR))
}

/// Embeds every tile in parallel; results keep grid order.
pub fn embed_tiles(
    slide: &RasterImage,
    grid: &[TileCoord],
    encoder: &dyn ImageEncoder,
) -> Result<Vec<Embedding>> {
    grid.par_iter()
        .map(|c| embed_tile(slide, c, encoder))
        .collect()
}

/// Embeds a slide's tile grid into a normalized store plus its manifest.
pub fn embed_slide(
    slide_id: &str,
    label: Option<usize>,
    slide: &RasterImage,
    grid: &[TileCoord],
    encoder: &dyn ImageEncoder,
    store_path: &str,
) -> Result<(EmbeddingStore, SlideManifest)> {
    let embeddings = embed_tiles(slide, grid, encoder)?;
    let store = EmbeddingStore::from_vectors(encoder.embed_dim(), &embeddings, None, true)?;
    let manifest = SlideManifest {
        slide_id: slide_id.to_string(),
        label,
        width_px: slide.width() as u64,
        height_px: slide.height() as u64,
        magnification: 10.0,
        tile_coords: grid.to_vec(),
        store_path: store_path.to_string(),
    };
    manifest.validate()?;
    manifest.check_store(&store)?;
    Ok((store, manifest))
}
