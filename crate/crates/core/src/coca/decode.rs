use super::image::ToyImage;
use super::model::ToyModel;
use super::tokenizer::{TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{softmax, SeededRng};

/// Draws an index from the renormalized `k` most likely entries of
/// `softmax(logits)`. Ties in rank go to the lower index.
pub fn sample_top_k(logits: &[f64], k: usize, rng: &mut SeededRng) -> Result<usize> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            logits.len()
        )));
    }
    let probs = softmax(logits, 1.0)?;
    sample_top_k_probs(&probs, k, rng)
}

/// As [`sample_top_k`] but over an explicit probability vector.
pub fn sample_top_k_probs(probs: &[f64], k: usize, rng: &mut SeededRng) -> Result<usize> {
    if k == 0 || k > probs.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            probs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    if k == 1 {
        return Ok(idx[0]);
    }
    let weights: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
    Ok(idx[rng.weighted_index(&weights)])
}

/// Autoregressive top-K sampling from BOS until EOS or `max_len` generated
/// tokens. The returned sequence always ends with EOS.
pub fn decode_topk(
    model: &ToyModel,
    image: &ToyImage,
    k: usize,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<TokenSequence> {
    let vocab = model.config().vocab_size;
    if k == 0 || k > vocab {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={vocab}"
        )));
    }
    let limit = max_len.min(model.config().max_len - 2);
    let memory = model.caption_memory(image)?;
    let mut ids = vec![BOS];
    for _ in 0..limit {
        let logits = model.next_token_logits(&memory, &ids)?;
        let next = sample_top_k(&logits, k, rng)? as u32;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    ids.push(EOS);
    TokenSequence::new(ids)
}
