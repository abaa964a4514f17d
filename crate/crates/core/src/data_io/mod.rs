//! Persistence: embedding stores, slide manifests, prompt sets, netpbm
//! rasters and parameter checkpoints.

mod checkpoint;
mod manifest;
mod prompts;
mod raster;
mod store;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use manifest::{read_manifest, write_manifest, SlideManifest, TileCoord};
pub use prompts::{
    built_in_names, built_in_prompt_set, expand_prompts, fill_template, read_prompt_set,
    PromptClass, PromptSet, PLACEHOLDER,
};
pub use raster::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, RasterImage};
pub use store::{read_store, write_store, EmbeddingStore, STORE_HEADER_LEN, STORE_MAGIC};

use std::path::Path;

use crate::embedding::Embedding;
use crate::error::Result;

/// Writes unit embeddings as a normalized store.
pub fn write_embeddings(
    embeddings: &[Embedding],
    ids: Option<Vec<String>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let dim = embeddings.first().map_or(0, |e| e.dim());
    let store = EmbeddingStore::from_vectors(dim, embeddings, ids, true)?;
    write_store(&store, path)
}
