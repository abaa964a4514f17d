use serde::{Deserialize, Serialize};

use super::decode::decode_topk;
use super::image::ToyImage;
use super::loss::Pair;
use super::model::ToyModel;
use super::tokenizer::Vocab;
use super::train::{fit, EpochControl, EpochLog, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::rouge1;
use crate::numerics::SeededRng;

/// Decoding settings for generated captions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            top_k: 50,
            max_len: 30,
            seed: 0,
        }
    }
}

/// Sample one caption per image. Image `i` draws from `derive(seed, i)`.
/// `top_k` is clamped to the vocabulary size.
pub fn generate_captions(
    model: &ToyModel,
    vocab: &Vocab,
    images: &[ToyImage],
    config: &DecodeConfig,
) -> Result<Vec<String>> {
    let k = config.top_k.min(model.config().vocab_size);
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = SeededRng::derive(config.seed, i as u64);
            let seq = decode_topk(model, img, k, config.max_len, &mut rng)?;
            Ok(vocab.decode(seq.content()))
        })
        .collect()
}

/// Mean ROUGE-1 F of sampled captions against references.
pub fn mean_rouge1(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} captions vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let total = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge1(c, r))
        .sum::<Result<f64>>()?;
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub logs: Vec<EpochLog>,
    pub val_rouge1: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Fine-tune for captioning only (contrastive weight zero), scoring
/// validation ROUGE-1 after each epoch. Training stops after `patience`
/// epochs without improvement and the best epoch's parameters are restored.
pub fn finetune_captioner(
    model: &mut ToyModel,
    vocab: &Vocab,
    corpus: &[Pair],
    val_images: &[ToyImage],
    val_refs: &[String],
    train: &TrainConfig,
    decode: &DecodeConfig,
    patience: usize,
) -> Result<FinetuneReport> {
    if val_images.len() != val_refs.len() || val_images.is_empty() {
        return Err(Error::InvalidArgument(
            "validation set needs matching, nonempty images and references".into(),
        ));
    }
    let config = TrainConfig {
        contrastive_weight: 0.0,
        ..train.clone()
    };
    let mut best = (f64::NEG_INFINITY, 0, model.params().to_vec());
    let mut scores = Vec::new();
    let mut failure = None;
    let logs = fit(model, corpus, &config, |log, m| {
        let score =
            generate_captions(m, vocab, val_images, decode).and_then(|c| mean_rouge1(&c, val_refs));
        match score {
            Ok(s) => {
                scores.push(s);
                if s > best.0 {
                    best = (s, log.epoch, m.params().to_vec());
                }
                if log.epoch - best.1 >= patience {
                    EpochControl::Stop
                } else {
                    EpochControl::Continue
                }
            }
            Err(e) => {
                failure = Some(e);
                EpochControl::Stop
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let stopped_early = logs.len() < config.epochs;
    model.params_mut().copy_from_slice(&best.2);
    Ok(FinetuneReport {
        logs,
        val_rouge1: scores,
        best_epoch: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coca::ToyConfig;

    fn corpus(vocab: &Vocab, seed: u64) -> (Vec<Pair>, Vec<ToyImage>, Vec<String>) {
        let mut rng = SeededRng::new(seed);
        let texts = ["red dots", "blue stripes"];
        let mut pairs = Vec::new();
        let mut refs = Vec::new();
        for i in 0..8 {
            let c = i % 2;
            let data = (0..8 * 8 * 3)
                .map(|k| (if k % 3 == c { 0.8 } else { 0.1 }) + 0.05 * rng.normal())
                .collect();
            let img = ToyImage::new(8, data).unwrap();
            refs.push(texts[c].to_string());
            pairs.push(Pair {
                image: img,
                caption: vocab.encode(texts[c]),
            });
        }
        let imgs = pairs.iter().map(|p| p.image.clone()).collect();
        (pairs, imgs, refs)
    }

    fn tiny(vocab: &Vocab) -> ToyModel {
        let mut c = ToyConfig::new(vocab.len());
        c.image_side = 8;
        c.patch = 4;
        c.d_model = 16;
        c.n_heads = 2;
        c.n_caption_queries = 2;
        c.embed_dim = 8;
        ToyModel::new(c, &mut SeededRng::new(1)).unwrap()
    }

    #[test]
    fn top_k_one_is_deterministic() {
        let vocab = Vocab::build(&["red dots", "blue stripes"]);
        let model = tiny(&vocab);
        let (_, imgs, _) = corpus(&vocab, 2);
        let cfg = DecodeConfig {
            top_k: 1,
            max_len: 5,
            seed: 3,
        };
        let a = generate_captions(&model, &vocab, &imgs, &cfg).unwrap();
        let b = generate_captions(&model, &vocab, &imgs, &DecodeConfig { seed: 4, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finetuning_learns_captions_and_restores_best() {
        let vocab = Vocab::build(&["red dots", "blue stripes"]);
        let mut model = tiny(&vocab);
        let (pairs, imgs, refs) = corpus(&vocab, 5);
        let train = TrainConfig {
            epochs: 40,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let decode = DecodeConfig {
            top_k: 1,
            max_len: 4,
            seed: 0,
        };
        let report =
            finetune_captioner(&mut model, &vocab, &pairs, &imgs, &refs, &train, &decode, 5)
                .unwrap();
        assert!(report
            .logs
            .iter()
            .all(|l| (l.loss - l.captioning).abs() < 1e-12));
        let best = report.val_rouge1[report.best_epoch];
        assert_eq!(
            best,
            report
                .val_rouge1
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        );
        let after = mean_rouge1(
            &generate_captions(&model, &vocab, &imgs, &decode).unwrap(),
            &refs,
        )
        .unwrap();
        assert_eq!(after, best);
        assert!(best > 0.9, "{:?}", report.val_rouge1);
    }
}
