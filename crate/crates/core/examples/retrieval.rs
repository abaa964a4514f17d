//! Text-to-image retrieval: each caption queries a database of held-out
//! image embeddings and the rank of its own image is recorded.

use pathvl::data_io::EmbeddingStore;
use pathvl::eval::{mean_recall, recall_at_k};
use pathvl::pipeline::{held_out_rois, train_model, PipelineConfig};
use pathvl::prompting::{TextEncoder, ToyTextEncoder};
use pathvl::wsi::{ImageEncoder, ToyImageEncoder};
use pathvl::zeroshot::retrieve;
use pathvl::{Embedding, Result};

fn main() -> Result<()> {
    let mut config = PipelineConfig::standard(3);
    config.train_per_class = 64;
    config.test_per_class = 25;
    config.train.epochs = 8;
    let (model, vocab, _) = train_model(&config)?;
    let image_enc = ToyImageEncoder { model: &model };
    let text_enc = ToyTextEncoder {
        model: &model,
        vocab: &vocab,
    };

    let pairs = held_out_rois(&config)?;
    let images: Vec<Embedding> = pairs
        .iter()
        .map(|s| image_enc.embed_image(&s.image))
        .collect::<Result<_>>()?;
    let db = EmbeddingStore::from_vectors(image_enc.embed_dim(), &images, None, true)?;

    let mut ranks = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let q = text_enc.embed_text(&pair.caption)?;
        let r = retrieve(&i.to_string(), q.as_slice(), &db, 3, Some(i))?;
        if i < 3 {
            println!(
                "{:?}\n    top 3 {:?}, own image at rank {:?}",
                pair.caption, r.ranked, r.ground_truth_rank
            );
        }
        ranks.push(r.ground_truth_rank);
    }
    println!("{} queries against {} images", ranks.len(), db.len());
    for k in [1, 5, 10] {
        println!("recall@{k:<2} {:.3}", recall_at_k(&ranks, k)?);
    }
    println!("mean recall {:.3}", mean_recall(&ranks)?);
    Ok(())
}
