//! Toy CoCa: joint contrastive + captioning objective with analytic
//! gradients, AdamW training and top-K caption sampling.

mod block;
mod caption;
mod decode;
mod image;
mod loss;
mod model;
mod optim;
mod params;
mod tokenizer;
mod train;

pub use caption::{
    finetune_captioner, generate_captions, mean_rouge1, DecodeConfig, FinetuneReport,
};
pub use decode::{decode_topk, sample_top_k, sample_top_k_probs};
pub use image::ToyImage;
pub use loss::{
    captioning_loss, contrastive_loss, joint_loss, joint_loss_at, sequence_nll, ContrastiveLoss,
    ContrastiveOutputs, LossOutput, Pair,
};
pub use model::ToyModel;
pub use optim::{AdamW, CosineSchedule};
pub use params::ToyConfig;
pub use tokenizer::{split_words, TokenSequence, Vocab, BOS, EOS, PAD, UNK};
pub use train::{fit, train_toy, EpochControl, EpochLog, TrainConfig};
