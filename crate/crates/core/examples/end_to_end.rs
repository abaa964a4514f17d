//! The whole synthetic benchmark in one call: generate pairs and slides,
//! train the toy model, and evaluate every downstream task. Pass `standard`
//! for the full-size run (several minutes); the default is the quick preset.

use pathvl::pipeline::{run, PipelineConfig};
use pathvl::Result;

fn main() -> Result<()> {
    let standard = std::env::args().nth(1).as_deref() == Some("standard");
    let config = if standard {
        PipelineConfig::standard(42)
    } else {
        PipelineConfig::quick(42)
    };
    let r = run(&config)?.report;
    println!(
        "trained on {} pairs, vocabulary {}",
        r.n_train_pairs, r.vocab_size
    );
    for e in &r.train_log {
        println!(
            "  epoch {:>2}: contrastive {:.3}, captioning {:.3}",
            e.epoch, e.contrastive, e.captioning
        );
    }
    println!(
        "ROI zero-shot balanced accuracy   {:.3}",
        r.roi_balanced_accuracy
    );
    println!(
        "  prompt ensemble {:.3} vs single-prompt median {:.3}",
        r.ensemble_balanced_accuracy, r.sampled_median
    );
    println!(
        "slide accuracy                    {:.3} at K = {}",
        r.slide_accuracy, r.slide_best_k
    );
    println!("retrieval recall                  {:?}", r.retrieval_recall);
    println!("segmentation mean dice            {:.3}", r.mean_dice);
    println!("few-shot median balanced accuracy {:?}", r.fewshot_medians);
    for (stage, s) in &r.seconds {
        println!("  {stage:<12} {s:>7.1} s");
    }
    Ok(())
}
