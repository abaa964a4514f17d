//! Zero-shot segmentation: score overlapping tiles against two classes,
//! average the scores per pixel and compare the mask with the ground truth.

use pathvl::data_io::write_ppm;
use pathvl::pipeline::{train_model, truth_mask, PipelineConfig};
use pathvl::prompting::{ClassEmbeddingBank, ToyTextEncoder};
use pathvl::segmentation::{dice_precision_recall, segment_slide_zero_shot, SegmentConfig};
use pathvl::wsi::{
    class_vocabulary, segment_slide, segmentation_slide, TissueClass, TissueParams, ToyImageEncoder,
};
use pathvl::Result;

fn main() -> Result<()> {
    let mut config = PipelineConfig::standard(5);
    config.train_per_class = 64;
    config.train.epochs = 8;
    let (model, vocab, _) = train_model(&config)?;
    let image_enc = ToyImageEncoder { model: &model };
    let text_enc = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };
    let classes = [TissueClass::Norm, TissueClass::Tum];
    let labels: Vec<&str> = classes.iter().map(|c| c.label()).collect();
    let bank = ClassEmbeddingBank::ensembled(&class_vocabulary().subset(&labels)?, &text_enc)?;

    let spec = segmentation_slide("seg", classes[0], classes[1], 896, 7, 21);
    let slide = spec.render()?;
    let tissue = segment_slide(&slide, &TissueParams::default())?;
    let truth = truth_mask(&spec.class_map()?, spec.width, spec.height, &classes)?;
    for overlap in [0.0, 0.5, 0.75] {
        let cfg = SegmentConfig {
            overlap,
            ..SegmentConfig::default()
        };
        let pred = segment_slide_zero_shot(&slide, &tissue, &bank, &image_enc, &cfg)?;
        let s = dice_precision_recall(&pred, &truth, 1)?;
        println!(
            "overlap {overlap:.2}: tumor dice {:.3}, precision {:.3}, recall {:.3}",
            s.dice, s.precision, s.recall
        );
        if overlap == 0.75 {
            let path = std::env::temp_dir().join("pathvl_segmentation.ppm");
            write_ppm(&pred.to_color(), &path)?;
            println!("    mask written to {}", path.display());
        }
    }
    Ok(())
}
