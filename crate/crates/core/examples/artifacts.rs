//! Round-trips the on-disk formats: model checkpoints, tile embedding stores
//! with their slide manifests, and prompt sets.

use pathvl::coca::ToyModel;
use pathvl::data_io::{
    built_in_prompt_set, read_checkpoint, read_manifest, read_store, write_checkpoint,
    write_manifest, write_store,
};
use pathvl::pipeline::{train_model, PipelineConfig};
use pathvl::wsi::{
    classification_slide, classification_tile_grid, embed_slide, segment_slide, TileInclusion,
    TissueClass, TissueParams, ToyImageEncoder,
};
use pathvl::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("pathvl_artifacts");
    std::fs::create_dir_all(&dir).map_err(|e| pathvl::Error::io(&dir, e))?;

    let (model, vocab, _) = train_model(&PipelineConfig::quick(0))?;
    let ck_path = dir.join("model.ckpt");
    write_checkpoint(&model.to_checkpoint(&vocab), &ck_path)?;
    let (restored, restored_vocab) = ToyModel::from_checkpoint(&read_checkpoint(&ck_path)?)?;
    println!(
        "checkpoint: {} parameters, {} tokens, identical after reload: {}",
        restored.num_params(),
        restored_vocab.len(),
        restored.params() == model.params()
    );

    let spec = classification_slide("s0", TissueClass::Lym, TissueClass::Adi, 768, 8, 2);
    let slide = spec.render()?;
    let grid = classification_tile_grid(
        &segment_slide(&slide, &TissueParams::default())?,
        256,
        TileInclusion::Center,
    )?;
    let enc = ToyImageEncoder { model: &model };
    let (store, manifest) = embed_slide("s0", Some(2), &slide, &grid, &enc, "s0.emb")?;
    write_store(&store, dir.join("s0.emb"))?;
    write_manifest(&manifest, dir.join("s0.json"))?;
    let manifest = read_manifest(dir.join("s0.json"))?;
    let store = read_store(manifest.resolve_store(&dir.join("s0.json")))?;
    manifest.check_store(&store)?;
    println!(
        "slide {}: {} tiles of dimension {}, first tile at {:?}",
        manifest.slide_id,
        store.len(),
        store.dim(),
        manifest.tile_coords[0]
    );

    let prompts = built_in_prompt_set("crc100k")?;
    println!(
        "prompt set crc100k: {} templates, classes {:?}",
        prompts.templates.len(),
        prompts.labels()
    );
    println!("files in {}", dir.display());
    Ok(())
}
