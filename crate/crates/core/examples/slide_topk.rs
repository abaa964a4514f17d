//! Zero-shot slide classification: score every tissue tile against the
//! class prompts, pool the top-K tile scores per class and pick K by balanced
//! accuracy. Writes a heatmap for the first slide.

use pathvl::data_io::write_ppm;
use pathvl::pipeline::{classification_specs, train_model, PipelineConfig, SLIDE_CLASSES};
use pathvl::prompting::{ClassEmbeddingBank, ToyTextEncoder};
use pathvl::wsi::{
    class_vocabulary, classification_tile_grid, embed_slide, segment_slide, TileInclusion,
    TissueParams, ToyImageEncoder,
};
use pathvl::zeroshot::{classify_slide, heatmap, select_best_k, ScoreMatrix, TopKConfig};
use pathvl::Result;

fn main() -> Result<()> {
    let mut config = PipelineConfig::standard(4);
    config.train_per_class = 64;
    config.train.epochs = 8;
    config.slides_per_class = 2;
    config.slide_side = 1024;
    let (model, vocab, _) = train_model(&config)?;
    let image_enc = ToyImageEncoder { model: &model };
    let text_enc = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let labels: Vec<&str> = SLIDE_CLASSES.iter().map(|c| c.label()).collect();
    let bank = ClassEmbeddingBank::ensembled(&class_vocabulary().subset(&labels)?, &text_enc)?;
    let topk = TopKConfig::new(vec![1, 5, 10, 50])?;

    let mut preds = Vec::new();
    for (i, spec) in classification_specs(&config).iter().enumerate() {
        let label = SLIDE_CLASSES.iter().position(|c| Some(*c) == spec.label);
        let slide = spec.render()?;
        let mask = segment_slide(&slide, &TissueParams::default())?;
        let grid = classification_tile_grid(&mask, config.slide_tile, TileInclusion::Center)?;
        let (store, manifest) = embed_slide(&spec.slide_id, label, &slide, &grid, &image_enc, "")?;
        let pred = classify_slide(&manifest, &store, &bank, &topk)?;
        let by_k: Vec<&str> = pred.per_k.iter().map(|p| labels[p.predicted]).collect();
        println!(
            "{} ({}, {} tiles): {by_k:?} for K = {:?}",
            spec.slide_id,
            labels[label.unwrap()],
            grid.len(),
            topk.ks
        );
        if i == 0 {
            let scores = ScoreMatrix::from_store(&store, manifest.tile_coords.clone(), &bank)?;
            let img = heatmap(&scores, label.unwrap(), slide.width(), slide.height())?;
            let path = std::env::temp_dir().join("pathvl_heatmap.ppm");
            write_ppm(&img, &path)?;
            println!(
                "    heatmap of the true class written to {}",
                path.display()
            );
        }
        preds.push(pred);
    }
    let best = select_best_k(&preds, labels.len())?;
    println!(
        "best K = {} with balanced accuracy {:.3}",
        best.k, best.balanced_accuracy
    );
    Ok(())
}
