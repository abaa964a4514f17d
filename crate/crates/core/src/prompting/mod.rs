//! Class text embeddings from prompt sets: full ensembling and the
//! sampled-single-prompt protocol.

use serde::{Deserialize, Serialize};

use crate::coca::{ToyModel, Vocab};
use crate::data_io::{expand_prompts, fill_template, PromptSet};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub trait TextEncoder {
    fn embed_text(&self, text: &str) -> Result<Embedding>;
}

/// Text side of a trained toy model.
pub struct ToyTextEncoder<'a> {
    pub model: &'a ToyModel,
    pub vocab: &'a Vocab,
}

impl TextEncoder for ToyTextEncoder<'_> {
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.model.encode_text(&self.vocab.encode(text))
    }
}

/// L2-renormalized mean of unit embeddings.
pub fn mean_embedding(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot ensemble zero prompts".into()))?;
    let mut sum = vec![0.0; first.dim()];
    for e in embeddings {
        if e.dim() != sum.len() {
            return Err(Error::Shape("prompt embeddings differ in dimension".into()));
        }
        sum.iter_mut().zip(e.as_slice()).for_each(|(a, b)| *a += b);
    }
    let n = embeddings.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    // a vanishing mean has no direction
    if crate::numerics::l2_norm(&sum) < 1e-12 {
        return Err(Error::Numerical(
            "prompt embeddings average to the zero vector".into(),
        ));
    }
    Embedding::normalize(sum)
}

pub fn ensemble_class_embedding(
    prompts: &[String],
    encoder: &dyn TextEncoder,
) -> Result<Embedding> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot ensemble zero prompts".into(),
        ));
    }
    let embs = prompts
        .iter()
        .map(|p| encoder.embed_text(p))
        .collect::<Result<Vec<_>>>()?;
    mean_embedding(&embs)
}

/// One class vector per label, in prompt-set order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    pub labels: Vec<String>,
    pub embeddings: Vec<Embedding>,
    /// The single prompt behind each vector when built by sampling.
    pub prompts: Option<Vec<String>>,
}

impl ClassEmbeddingBank {
    pub fn new(labels: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if labels.len() != embeddings.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.len()
            )));
        }
        let d = embeddings[0].dim();
        if embeddings.iter().any(|e| e.dim() != d) {
            return Err(Error::Shape("class embeddings differ in dimension".into()));
        }
        Ok(ClassEmbeddingBank {
            labels,
            embeddings,
            prompts: None,
        })
    }

    /// Every class ensembled over all `template × name` prompts.
    pub fn ensembled(set: &PromptSet, encoder: &dyn TextEncoder) -> Result<Self> {
        let embeddings = set
            .classes
            .iter()
            .map(|c| ensemble_class_embedding(&expand_prompts(set, &c.label)?, encoder))
            .collect::<Result<Vec<_>>>()?;
        ClassEmbeddingBank::new(
            set.labels().iter().map(|s| s.to_string()).collect(),
            embeddings,
        )
    }

    /// One prompt per class, as drawn by [`sample_prompt_sets`].
    pub fn from_prompts(
        labels: Vec<String>,
        prompts: Vec<String>,
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        let embeddings = prompts
            .iter()
            .map(|p| encoder.embed_text(p))
            .collect::<Result<Vec<_>>>()?;
        let mut bank = ClassEmbeddingBank::new(labels, embeddings)?;
        bank.prompts = Some(prompts);
        Ok(bank)
    }

    pub fn n_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }
}

/// `n_sets` draws of one prompt per class, each uniform over that class's
/// `template × name` cross-product. Set `s` uses the stream `derive(seed, s)`.
pub fn sample_prompt_sets(set: &PromptSet, n_sets: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if n_sets == 0 {
        return Err(Error::InvalidArgument("n_sets must be at least 1".into()));
    }
    let t = set.templates.len();
    Ok((0..n_sets)
        .map(|s| {
            let mut rng = SeededRng::derive(seed, s as u64);
            set.classes
                .iter()
                .map(|c| {
                    let i = rng.below(t * c.names.len());
                    fill_template(&set.templates[i % t], &c.names[i / t])
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Maps each known string to a fixed vector.
    struct Table(HashMap<String, Vec<f64>>);

    impl TextEncoder for Table {
        fn embed_text(&self, text: &str) -> Result<Embedding> {
            Embedding::normalize(self.0[text].clone())
        }
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> Table {
        Table(
            entries
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        )
    }

    #[test]
    fn ensemble_cases() {
        let enc = table(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![3.0, 4.0]),
        ]);
        let single = ensemble_class_embedding(&["c".into()], &enc).unwrap();
        assert_eq!(single.as_slice(), &[0.6, 0.8]);
        let dup = ensemble_class_embedding(&["c".into(), "c".into()], &enc).unwrap();
        assert_eq!(dup, single);
        let both = ensemble_class_embedding(&["a".into(), "b".into()], &enc).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((both.as_slice()[0] - r).abs() < 1e-15 && (both.as_slice()[1] - r).abs() < 1e-15);
        let rev = ensemble_class_embedding(&["b".into(), "a".into()], &enc).unwrap();
        assert_eq!(both, rev);
        assert!(ensemble_class_embedding(&[], &enc).is_err());
        let opposed = table(&[("x", vec![1.0, 0.0]), ("y", vec![-1.0, 0.0])]);
        assert!(matches!(
            ensemble_class_embedding(&["x".into(), "y".into()], &opposed),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn sampling_uniform_over_cross_product() {
        let set = PromptSet::new(
            vec!["CLASSNAME.".into(), "this is CLASSNAME.".into()],
            vec![("a".into(), vec!["x".into(), "y".into()])],
        )
        .unwrap();
        let n = 10_000;
        let sets = sample_prompt_sets(&set, n, 7).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in &sets {
            *counts.entry(s[0].clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        // chi-square with 3 degrees of freedom, 99.9% critical value
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.27, "{counts:?}");
        assert_eq!(sets, sample_prompt_sets(&set, n, 7).unwrap());
    }

    #[test]
    fn single_prompt_pool() {
        let set = PromptSet::new(
            vec!["CLASSNAME".into()],
            vec![("a".into(), vec!["x".into()])],
        )
        .unwrap();
        let sets = sample_prompt_sets(&set, 50, 1).unwrap();
        assert_eq!(sets.len(), 50);
        assert!(sets.iter().all(|s| s == &sets[0]));
    }
}
