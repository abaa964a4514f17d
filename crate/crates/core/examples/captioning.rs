//! Caption held-out ROIs by top-K sampling from the captioning decoder and
//! score them against the reference captions with ROUGE-1.

use pathvl::coca::{generate_captions, mean_rouge1, DecodeConfig, ToyImage};
use pathvl::pipeline::{held_out_rois, train_model, PipelineConfig};
use pathvl::Result;

fn main() -> Result<()> {
    let mut config = PipelineConfig::standard(2);
    config.train_per_class = 64;
    config.test_per_class = 2;
    config.train.epochs = 8;
    let (model, vocab, _) = train_model(&config)?;

    let test = held_out_rois(&config)?;
    let images = test
        .iter()
        .map(|s| ToyImage::from_raster(&s.image, model.config().image_side))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<String> = test.iter().map(|s| s.caption.clone()).collect();

    for top_k in [1, 5, 50] {
        let cfg = DecodeConfig {
            top_k,
            ..DecodeConfig::default()
        };
        let captions = generate_captions(&model, &vocab, &images, &cfg)?;
        println!(
            "top-{top_k:<2}  mean ROUGE-1 {:.3}",
            mean_rouge1(&captions, &refs)?
        );
        if top_k == 1 {
            for (c, r) in captions.iter().zip(&refs).take(4) {
                println!("    {c}\n      ref: {r}");
            }
        }
    }
    Ok(())
}
