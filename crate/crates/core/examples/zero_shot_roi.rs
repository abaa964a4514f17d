//! Zero-shot ROI classification: embed every class's prompt ensemble, then
//! label each held-out image by its most similar class embedding. Compares
//! the ensemble with single prompts drawn at random.

use pathvl::eval::{balanced_accuracy, LabeledPredictions};
use pathvl::pipeline::{held_out_rois, median, train_model, zero_shot_predict, PipelineConfig};
use pathvl::prompting::{sample_prompt_sets, ClassEmbeddingBank, ToyTextEncoder};
use pathvl::wsi::{class_vocabulary, ImageEncoder, TissueClass, ToyImageEncoder};
use pathvl::{Embedding, Result};

fn main() -> Result<()> {
    let mut config = PipelineConfig::standard(1);
    config.train_per_class = 64;
    config.test_per_class = 12;
    config.train.epochs = 8;
    let (model, vocab, _) = train_model(&config)?;
    let image_enc = ToyImageEncoder { model: &model };
    let text_enc = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };

    let labels: Vec<&str> = TissueClass::ALL.iter().map(|c| c.label()).collect();
    let prompts = class_vocabulary().subset(&labels)?;
    let n = config.test_per_class * labels.len();
    let test = &held_out_rois(&config)?[..n];
    let images: Vec<Embedding> = test
        .iter()
        .map(|s| image_enc.embed_image(&s.image))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = test
        .iter()
        .map(|s| TissueClass::ALL.iter().position(|c| *c == s.class).unwrap())
        .collect();

    let bank = ClassEmbeddingBank::ensembled(&prompts, &text_enc)?;
    let pred = zero_shot_predict(&images, &bank)?;
    let ensemble = balanced_accuracy(&LabeledPredictions::new(truth.clone(), pred, labels.len())?)?;

    let mut single = Vec::new();
    for draw in sample_prompt_sets(&prompts, 10, 0)? {
        let bank = ClassEmbeddingBank::from_prompts(
            labels.iter().map(|l| l.to_string()).collect(),
            draw,
            &text_enc,
        )?;
        let pred = zero_shot_predict(&images, &bank)?;
        single.push(balanced_accuracy(&LabeledPredictions::new(
            truth.clone(),
            pred,
            labels.len(),
        )?)?);
    }
    println!("{} held-out ROIs over {} classes", n, labels.len());
    println!("prompt ensemble      balanced accuracy {ensemble:.3}");
    println!(
        "single prompts       median {:.3}, range {:.3}..{:.3}",
        median(&single)?,
        single.iter().copied().fold(f64::INFINITY, f64::min),
        single.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    );
    Ok(())
}
